//! Frequency-guided Fourier mixing.
//!
//! Tokens of one frame form an `h x w` grid. The mixer transforms the grid
//! with a real-input FFT, keeps the lowest `mode_cap` modes per axis, mixes
//! channels per mode with complex block-diagonal weights scaled by
//! `beta + alpha |xi|^eta`, soft-thresholds, and transforms back.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{half_width, Graph, Tensor, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::fields::signed_freq;
use crate::params::{init, ParamStore};
use crate::rng::Rng;

/// `beta + alpha * |xi|^eta`; exactly `beta` at `xi = 0`.
pub fn frequency_multiplier(xi: (i64, i64), alpha: f64, beta: f64, eta: f64) -> f64 {
    let n = ((xi.0 * xi.0 + xi.1 * xi.1) as f64).sqrt();
    if n == 0.0 {
        beta
    } else {
        beta + alpha * n.powf(eta)
    }
}

/// The per-mode filter block `(beta + alpha |xi|^eta) W`.
pub fn frequency_weight(xi: (i64, i64), w: &[Complex64], alpha: f64, beta: f64, eta: f64) -> Vec<Complex64> {
    let m = frequency_multiplier(xi, alpha, beta, eta);
    w.iter().map(|z| z * m).collect()
}

/// Componentwise soft threshold of the real and imaginary parts.
pub fn soft_threshold(z: Complex64, lambda: f64) -> Complex64 {
    let s = |x: f64| x.signum() * (x.abs() - lambda).max(0.0);
    Complex64::new(s(z.re), s(z.im))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub h: usize,
    pub w: usize,
    /// Modes kept per axis: `|ky| < mode_cap` and `kx < mode_cap`.
    pub mode_cap: usize,
    pub n_blocks: usize,
    pub lambda_shrink: f64,
    /// When false the `alpha, beta, eta` parameters are absent and every
    /// mode is weighted by 1.
    pub freq_weighting: bool,
}

impl SpectralConfig {
    /// Keeps every mode.
    pub fn full(h: usize, w: usize, n_blocks: usize) -> Self {
        Self {
            h,
            w,
            mode_cap: h.max(w) / 2 + 1,
            n_blocks,
            lambda_shrink: 0.0,
            freq_weighting: true,
        }
    }
}

/// Retained modes of the half spectrum with the index maps between the full
/// `[2 h wh, d]` layout and the compact `[2 m, d]` one.
#[derive(Debug, Clone)]
pub struct ModePlan {
    pub h: usize,
    pub w: usize,
    pub kept: Vec<usize>,
    /// `|xi|` per compact row (real rows then imaginary rows).
    pub norms: Arc<Vec<f64>>,
    d: usize,
    gather_in: Arc<Vec<usize>>,
    scatter_out: Arc<Vec<usize>>,
}

impl ModePlan {
    pub fn new(h: usize, w: usize, mode_cap: usize, d: usize) -> Result<Self> {
        if mode_cap == 0 {
            return Err(Error::arg("mode_cap must be at least 1"));
        }
        let wh = half_width(w);
        let mut kept = Vec::new();
        let mut norms = Vec::new();
        for ky in 0..h {
            let fy = signed_freq(ky, h);
            for kx in 0..wh {
                if (fy.unsigned_abs() as usize) < mode_cap && kx < mode_cap {
                    kept.push(ky * wh + kx);
                    norms.push(((fy * fy + (kx * kx) as i64) as f64).sqrt());
                }
            }
        }
        let m = kept.len();
        let full_rows = 2 * h * wh;
        let src_row = |i: usize| if i < m { kept[i] } else { h * wh + kept[i - m] };
        let gather_in: Vec<usize> = (0..2 * m).flat_map(|i| (0..d).map(move |c| src_row(i) * d + c)).collect();
        let mut scatter_out = vec![GATHER_ZERO; full_rows * d];
        for i in 0..2 * m {
            for c in 0..d {
                scatter_out[src_row(i) * d + c] = i * d + c;
            }
        }
        let norms = norms.iter().chain(&norms).copied().collect();
        Ok(Self {
            h,
            w,
            kept,
            norms: Arc::new(norms),
            d,
            gather_in: Arc::new(gather_in),
            scatter_out: Arc::new(scatter_out),
        })
    }

    pub fn modes(&self) -> usize {
        self.kept.len()
    }

    fn truncate(&self, g: &mut Graph, spec: Var) -> Var {
        g.gather(spec, self.gather_in.clone(), 2 * self.modes(), self.d)
    }

    fn pad(&self, g: &mut Graph, compact: Var) -> Var {
        let rows = 2 * self.h * half_width(self.w);
        g.gather(compact, self.scatter_out.clone(), rows, self.d)
    }
}

/// Complex block-diagonal product of a compact spectrum `[Zr; Zi]` with
/// weights `(wr, wi)`.
fn complex_block_mix(g: &mut Graph, z: Var, wr: Var, wi: Var, m: usize) -> Var {
    let re: Vec<usize> = (0..m).collect();
    let im: Vec<usize> = (m..2 * m).collect();
    let zr = g.select_rows(z, &re);
    let zi = g.select_rows(z, &im);
    let a = g.block_matmul(zr, wr);
    let b = g.block_matmul(zi, wi);
    let c = g.block_matmul(zr, wi);
    let e = g.block_matmul(zi, wr);
    let yr = g.sub(a, b);
    let yi = g.add(c, e);
    g.concat_rows(&[yr, yi])
}

fn add_complex_bias(g: &mut Graph, y: Var, br: Var, bi: Var, m: usize) -> Var {
    let re: Vec<usize> = (0..m).collect();
    let im: Vec<usize> = (m..2 * m).collect();
    let yr = g.select_rows(y, &re);
    let yi = g.select_rows(y, &im);
    let yr = g.add_row(yr, br);
    let yi = g.add_row(yi, bi);
    g.concat_rows(&[yr, yi])
}

fn multiplier(g: &mut Graph, store: &ParamStore, prefix: &str, plan: &ModePlan, cfg: &SpectralConfig) -> Option<Var> {
    cfg.freq_weighting.then(|| {
        let a = g.param(store, &format!("{prefix}.alpha"));
        let b = g.param(store, &format!("{prefix}.beta"));
        let e = g.param(store, &format!("{prefix}.eta"));
        g.freq_scale(a, b, e, plan.norms.clone())
    })
}

fn block_size(d: usize, n_blocks: usize) -> Result<usize> {
    if n_blocks == 0 || d % n_blocks != 0 {
        return Err(Error::arg(format!("d = {d} not divisible into {n_blocks} blocks")));
    }
    Ok(d / n_blocks)
}

fn init_weighting(store: &mut ParamStore, prefix: &str, cfg: &SpectralConfig) {
    if cfg.freq_weighting {
        // alpha small so training starts near the unweighted filter
        store.insert(format!("{prefix}.alpha"), Tensor::scalar(0.1));
        store.insert(format!("{prefix}.beta"), Tensor::scalar(1.0));
        store.insert(format!("{prefix}.eta"), Tensor::scalar(1.0));
    }
}

/// Single-layer filter parameters `{prefix}.{wr,wi}` plus the weighting
/// scalars.
pub fn init_spectral_mix(store: &mut ParamStore, prefix: &str, d: usize, cfg: &SpectralConfig, rng: &mut Rng) -> Result<()> {
    let bs = block_size(d, cfg.n_blocks)?;
    store.insert(format!("{prefix}.wr"), init::normal(rng, d, bs, 0.02));
    store.insert(format!("{prefix}.wi"), init::normal(rng, d, bs, 0.02));
    init_weighting(store, prefix, cfg);
    Ok(())
}

/// `F^-1 pad S(mult(xi) W F u)` on one `h x w` grid stored as `[h w, d]`.
pub fn spectral_mix(g: &mut Graph, store: &ParamStore, prefix: &str, u: Var, cfg: &SpectralConfig, plan: &ModePlan) -> Var {
    let spec = g.rfft2(u, cfg.h, cfg.w);
    let z = plan.truncate(g, spec);
    let wr = g.param(store, &format!("{prefix}.wr"));
    let wi = g.param(store, &format!("{prefix}.wi"));
    let mut y = complex_block_mix(g, z, wr, wi, plan.modes());
    if let Some(mult) = multiplier(g, store, prefix, plan, cfg) {
        y = g.mul_col(y, mult);
    }
    let y = g.soft_threshold(y, cfg.lambda_shrink);
    let full = plan.pad(g, y);
    g.irfft2(full, cfg.h, cfg.w)
}

/// Two-layer per-mode perceptron parameters `{prefix}.{w1r,w1i,b1r,b1i,w2r,
/// w2i,b2r,b2i}` plus the weighting scalars, which scale the first layer.
pub fn init_afno(store: &mut ParamStore, prefix: &str, d: usize, cfg: &SpectralConfig, rng: &mut Rng) -> Result<()> {
    let bs = block_size(d, cfg.n_blocks)?;
    for l in ["1", "2"] {
        store.insert(format!("{prefix}.w{l}r"), init::normal(rng, d, bs, 0.02));
        store.insert(format!("{prefix}.w{l}i"), init::normal(rng, d, bs, 0.02));
        store.insert(format!("{prefix}.b{l}r"), Tensor::zeros(1, d));
        store.insert(format!("{prefix}.b{l}i"), Tensor::zeros(1, d));
    }
    init_weighting(store, prefix, cfg);
    Ok(())
}

/// Spectral part of the AFNO block (no residual):
/// `F^-1 pad S(W2 relu(mult(xi) W1 z + b1) + b2)`.
pub fn afno_filter(g: &mut Graph, store: &ParamStore, prefix: &str, u: Var, cfg: &SpectralConfig, plan: &ModePlan) -> Var {
    let p = |n: &str| format!("{prefix}.{n}");
    let m = plan.modes();
    let spec = g.rfft2(u, cfg.h, cfg.w);
    let z = plan.truncate(g, spec);
    let (w1r, w1i) = (g.param(store, &p("w1r")), g.param(store, &p("w1i")));
    let mut y = complex_block_mix(g, z, w1r, w1i, m);
    if let Some(mult) = multiplier(g, store, prefix, plan, cfg) {
        y = g.mul_col(y, mult);
    }
    let (b1r, b1i) = (g.param(store, &p("b1r")), g.param(store, &p("b1i")));
    let y = add_complex_bias(g, y, b1r, b1i, m);
    let y = g.relu(y);
    let (w2r, w2i) = (g.param(store, &p("w2r")), g.param(store, &p("w2i")));
    let y = complex_block_mix(g, y, w2r, w2i, m);
    let (b2r, b2i) = (g.param(store, &p("b2r")), g.param(store, &p("b2i")));
    let y = add_complex_bias(g, y, b2r, b2i, m);
    let y = g.soft_threshold(y, cfg.lambda_shrink);
    let full = plan.pad(g, y);
    g.irfft2(full, cfg.h, cfg.w)
}

/// `u + afno_filter(LN(u))`.
pub fn afno_block(g: &mut Graph, store: &ParamStore, prefix: &str, u: Var, cfg: &SpectralConfig, plan: &ModePlan) -> Var {
    let n = g.layer_norm(u, 1e-6);
    let f = afno_filter(g, store, prefix, n, cfg, plan);
    g.add(u, f)
}

/// Applies `filter` to each frame of a frame-major token set `[frames h w, d]`.
pub fn per_frame(g: &mut Graph, x: Var, frames: usize, mut filter: impl FnMut(&mut Graph, Var) -> Var) -> Var {
    let (n, _) = g.shape(x);
    let p = n / frames;
    if frames == 1 {
        return filter(g, x);
    }
    let outs: Vec<Var> = (0..frames)
        .map(|f| {
            let rows: Vec<usize> = (f * p..(f + 1) * p).collect();
            let xf = g.select_rows(x, &rows);
            filter(g, xf)
        })
        .collect();
    g.concat_rows(&outs)
}

/// Clamps every `eta` parameter into `[0, 4]`.
pub fn clamp_eta(store: &mut ParamStore) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".eta")).cloned().collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            t.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 4.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_param_gradients, GradCheck};

    fn identity_blocks(store: &mut ParamStore, prefix: &str, d: usize, bs: usize) {
        store.insert(format!("{prefix}.wr"), Tensor::from_fn(d, bs, |r, c| if r % bs == c { 1.0 } else { 0.0 }));
        store.insert(format!("{prefix}.wi"), Tensor::zeros(d, bs));
    }

    fn run_mix(store: &ParamStore, u: &Tensor, cfg: &SpectralConfig) -> Tensor {
        let plan = ModePlan::new(cfg.h, cfg.w, cfg.mode_cap, u.cols).unwrap();
        let mut g = Graph::new();
        let x = g.constant(u.clone());
        let y = spectral_mix(&mut g, store, "m", x, cfg, &plan);
        g.value(y).clone()
    }

    #[test]
    fn multiplier_examples() {
        assert_eq!(frequency_multiplier((0, 0), 3.0, 0.7, 1.3), 0.7);
        assert_eq!(frequency_multiplier((0, 2), 1.0, 0.0, 1.0), 2.0);
        assert_eq!(frequency_multiplier((3, 0), 1.0, 1.0, 2.0), 10.0);
        let w = [Complex64::new(1.0, -2.0)];
        assert_eq!(frequency_weight((3, 0), &w, 1.0, 1.0, 2.0), vec![Complex64::new(10.0, -20.0)]);
        let ms: Vec<f64> = (0..20).map(|k| frequency_multiplier((k, 1), 0.3, 0.5, 1.7)).collect();
        assert!(ms.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn soft_threshold_examples() {
        let s = |x: f64| soft_threshold(Complex64::new(x, 0.0), 1.0).re;
        assert_eq!((s(0.5), s(2.0), s(-3.0)), (0.0, 1.0, -2.0));
        let mut rng = crate::rng::stream(1, "st");
        let v = crate::rng::gaussian_vec(&mut rng, 40);
        for p in v.chunks(2) {
            let z = Complex64::new(p[0], p[1]);
            assert_eq!(soft_threshold(z, 0.0), z);
            let o = soft_threshold(z, 0.4);
            let want = |x: f64| if x > 0.4 { x - 0.4 } else if x < -0.4 { x + 0.4 } else { 0.0 };
            assert!((o.re - want(p[0])).abs() < 1e-15 && (o.im - want(p[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_filter_round_trips() {
        let mut rng = crate::rng::stream(2, "mix");
        for &(h, w) in &[(4, 4), (4, 6), (3, 5)] {
            let d = 4;
            let mut store = ParamStore::new();
            identity_blocks(&mut store, "m", d, 2);
            let mut cfg = SpectralConfig::full(h, w, 2);
            cfg.freq_weighting = false;
            let u = init::normal(&mut rng, h * w, d, 1.0);
            let out = run_mix(&store, &u, &cfg);
            assert!(out.zip_map(&u, |a, b| (a - b).abs()).max_abs() < 1e-10);
            // explicit alpha = 0, beta = 1 is the same filter
            cfg.freq_weighting = true;
            store.insert("m.alpha", Tensor::scalar(0.0));
            store.insert("m.beta", Tensor::scalar(1.0));
            store.insert("m.eta", Tensor::scalar(1.0));
            let out = run_mix(&store, &u, &cfg);
            assert!(out.zip_map(&u, |a, b| (a - b).abs()).max_abs() < 1e-10);
        }
    }

    #[test]
    fn dc_only_gives_spatial_mean() {
        let mut rng = crate::rng::stream(3, "dc");
        let mut store = ParamStore::new();
        identity_blocks(&mut store, "m", 2, 1);
        let mut cfg = SpectralConfig::full(4, 4, 2);
        cfg.mode_cap = 1;
        cfg.freq_weighting = false;
        let u = init::normal(&mut rng, 16, 2, 1.0);
        let out = run_mix(&store, &u, &cfg);
        for c in 0..2 {
            let mean = (0..16).map(|r| u.at(r, c)).sum::<f64>() / 16.0;
            assert!((0..16).all(|r| (out.at(r, c) - mean).abs() < 1e-12));
        }
    }

    /// Explicit DFT matrices: mix every stored half-spectrum mode, complete
    /// the rest by conjugate mirroring, invert, keep the real part.
    fn dft_oracle(u: &Tensor, h: usize, w: usize, wr: &Tensor, wi: &Tensor, bs: usize, mult: impl Fn(i64, i64) -> f64) -> Tensor {
        let d = u.cols;
        let wh = w / 2 + 1;
        let tau = std::f64::consts::TAU;
        let mut spec = vec![vec![Complex64::new(0.0, 0.0); d]; h * w];
        for ky in 0..h {
            for kx in 0..w {
                for c in 0..d {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ph = -tau * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                            acc += Complex64::from_polar(u.at(y * w + x, c), ph);
                        }
                    }
                    spec[ky * w + kx][c] = acc;
                }
            }
        }
        let mut mixed = vec![vec![Complex64::new(0.0, 0.0); d]; h * w];
        for ky in 0..h {
            for kx in 0..wh {
                let m = mult(signed_freq(ky, h), kx as i64);
                for b in 0..d / bs {
                    for j in 0..bs {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for i in 0..bs {
                            let wz = Complex64::new(wr.at(b * bs + i, j), wi.at(b * bs + i, j));
                            acc += spec[ky * w + kx][b * bs + i] * wz;
                        }
                        mixed[ky * w + kx][b * bs + j] = acc * m;
                    }
                }
            }
        }
        for ky in 0..h {
            for kx in wh..w {
                let src = ((h - ky) % h) * w + (w - kx);
                mixed[ky * w + kx] = mixed[src].iter().map(|z| z.conj()).collect();
            }
        }
        Tensor::from_fn(h * w, d, |r, c| {
            let (y, x) = (r / w, r % w);
            let mut acc = Complex64::new(0.0, 0.0);
            for ky in 0..h {
                for kx in 0..w {
                    let ph = tau * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                    acc += mixed[ky * w + kx][c] * Complex64::from_polar(1.0, ph);
                }
            }
            acc.re / (h * w) as f64
        })
    }

    #[test]
    fn matches_dft_matrix_oracle() {
        let mut rng = crate::rng::stream(4, "oracle");
        for &(h, w) in &[(2, 2), (4, 4), (3, 4)] {
            let d = 4;
            let mut store = ParamStore::new();
            let cfg = SpectralConfig::full(h, w, 2);
            init_spectral_mix(&mut store, "m", d, &cfg, &mut rng).unwrap();
            store.insert("m.wr", init::normal(&mut rng, d, 2, 1.0));
            store.insert("m.wi", init::normal(&mut rng, d, 2, 1.0));
            store.insert("m.alpha", Tensor::scalar(0.7));
            store.insert("m.beta", Tensor::scalar(0.4));
            store.insert("m.eta", Tensor::scalar(1.5));
            let u = init::normal(&mut rng, h * w, d, 1.0);
            let out = run_mix(&store, &u, &cfg);
            let want = dft_oracle(&u, h, w, store.get("m.wr").unwrap(), store.get("m.wi").unwrap(), 2, |a, b| {
                frequency_multiplier((a, b), 0.7, 0.4, 1.5)
            });
            let err = out.zip_map(&want, |a, b| (a - b).abs()).max_abs();
            assert!(err < 1e-10, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn linear_and_parseval() {
        let mut rng = crate::rng::stream(5, "lin");
        let (h, w, d) = (4, 4, 2);
        let mut store = ParamStore::new();
        let cfg = SpectralConfig::full(h, w, 1);
        init_spectral_mix(&mut store, "m", d, &cfg, &mut rng).unwrap();
        let a = init::normal(&mut rng, h * w, d, 1.0);
        let b = init::normal(&mut rng, h * w, d, 1.0);
        let sum = a.zip_map(&b, |x, y| 2.0 * x - 3.0 * y);
        let (fa, fb) = (run_mix(&store, &a, &cfg), run_mix(&store, &b, &cfg));
        let fs = run_mix(&store, &sum, &cfg);
        let combo = fa.zip_map(&fb, |x, y| 2.0 * x - 3.0 * y);
        assert!(fs.zip_map(&combo, |x, y| (x - y).abs()).max_abs() < 1e-10);

        // identity blocks: energy of the output equals the weighted spectrum
        // energy divided by H W
        identity_blocks(&mut store, "m", d, d);
        store.insert("m.alpha", Tensor::scalar(0.5));
        let out = run_mix(&store, &a, &cfg);
        let energy_out: f64 = out.data.iter().map(|v| v * v).sum();
        let mut spec_energy = 0.0;
        for c in 0..d {
            let mut buf: Vec<Complex64> = (0..h * w).map(|r| Complex64::new(a.at(r, c), 0.0)).collect();
            crate::fields::fft2(&mut buf, h, w);
            for ky in 0..h {
                for kx in 0..w {
                    let m = frequency_multiplier((signed_freq(ky, h), signed_freq(kx, w)), 0.5, 1.0, 1.0);
                    spec_energy += (buf[ky * w + kx] * m).norm_sqr();
                }
            }
        }
        assert!((energy_out - spec_energy / (h * w) as f64).abs() < 1e-10 * energy_out);
    }

    #[test]
    fn afno_degenerate_cases() {
        let mut rng = crate::rng::stream(6, "afno");
        let (h, w, d) = (4, 4, 4);
        let cfg = SpectralConfig::full(h, w, 2);
        let plan = ModePlan::new(h, w, cfg.mode_cap, d).unwrap();
        let mut store = ParamStore::new();
        init_afno(&mut store, "f", d, &cfg, &mut rng).unwrap();
        let u = init::normal(&mut rng, h * w, d, 1.0);
        let run = |store: &ParamStore, cfg: &SpectralConfig| {
            let mut g = Graph::new();
            let x = g.constant(u.clone());
            let y = afno_block(&mut g, store, "f", x, cfg, &plan);
            g.value(y).clone()
        };
        let mut zero = store.clone();
        for n in ["w1r", "w1i", "w2r", "w2i"] {
            zero.insert(format!("f.{n}"), Tensor::zeros(d, 2));
        }
        assert_eq!(run(&zero, &cfg), u);
        let mut huge = cfg;
        huge.lambda_shrink = 1e12;
        assert_eq!(run(&store, &huge), u);
    }

    #[test]
    fn gradients_through_filters() {
        let mut rng = crate::rng::stream(7, "fgrad");
        for &(h, w, cap) in &[(2usize, 2usize, 2usize), (4, 4, 2), (4, 4, 3)] {
            let d = 4;
            let mut cfg = SpectralConfig::full(h, w, 2);
            cfg.mode_cap = cap;
            cfg.lambda_shrink = 0.01;
            let plan = ModePlan::new(h, w, cap, d).unwrap();
            let mut store = ParamStore::new();
            init_afno(&mut store, "f", d, &cfg, &mut rng).unwrap();
            init_spectral_mix(&mut store, "m", d, &cfg, &mut rng).unwrap();
            // larger weights and biases so relu and the threshold are active
            for n in ["w1r", "w1i", "w2r", "w2i", "b1r", "b1i", "b2r", "b2i"] {
                let t = store.get(&format!("f.{n}")).unwrap().clone();
                store.insert(format!("f.{n}"), init::normal(&mut rng, t.rows, t.cols, 0.5));
            }
            store.insert("m.wr", init::normal(&mut rng, d, 2, 0.5));
            store.insert("m.wi", init::normal(&mut rng, d, 2, 0.5));
            store.insert("f.eta", Tensor::scalar(1.3));
            store.insert("u", init::normal(&mut rng, h * w, d, 1.0));
            let report = check_param_gradients(&store, GradCheck::default(), |g, s| {
                let u = g.param(s, "u");
                let a = afno_block(g, s, "f", u, &cfg, &plan);
                let b = spectral_mix(g, s, "m", a, &cfg, &plan);
                let wt = g.constant(Tensor::from_fn(h * w, d, |r, c| ((3 * r + c) as f64).cos()));
                let p = g.mul(b, wt);
                g.sum(p)
            });
            assert!(report.worst() < 1e-5, "{h}x{w}: {} at {:?}", report.worst(), report.worst_name());
        }
    }

    #[test]
    fn eta_clamp() {
        let mut s = ParamStore::new();
        s.insert("a.eta", Tensor::scalar(7.0));
        s.insert("b.eta", Tensor::scalar(-1.0));
        s.insert("c.beta", Tensor::scalar(-1.0));
        clamp_eta(&mut s);
        assert_eq!(s.get("a.eta").unwrap().item(), 4.0);
        assert_eq!(s.get("b.eta").unwrap().item(), 0.0);
        assert_eq!(s.get("c.beta").unwrap().item(), -1.0);
    }
}
