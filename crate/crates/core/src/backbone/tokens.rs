//! Tubelet tokenization and positional / time encodings.

use std::sync::Arc;

use super::BackboneConfig;
use crate::attention::TokenLayout;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::FieldSeries;

/// Index maps between a window tensor `[frames * H * W, C]` and the token
/// matrix `[tokens, s * ph * pw * C]`.
#[derive(Debug, Clone)]
pub struct Patchifier {
    pub layout: TokenLayout,
    pub patch_dim: usize,
    rows: usize,
    channels: usize,
    to_tokens: Arc<Vec<usize>>,
    to_window: Arc<Vec<usize>>,
}

impl Patchifier {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_parts(cfg.frames, cfg.height, cfg.width, cfg.channels, (cfg.patch_h, cfg.patch_w, cfg.stride))
    }

    /// Geometry without a full model configuration; `patch = (ph, pw, s)`.
    pub fn from_parts(frames: usize, h: usize, w: usize, c: usize, patch: (usize, usize, usize)) -> Result<Self> {
        let (ph, pw, s) = patch;
        if ph == 0 || pw == 0 || s == 0 || h % ph != 0 || w % pw != 0 || frames % s != 0 || c == 0 {
            return Err(Error::shape(format!(
                "({frames}, {h}, {w}, {c}) window not divisible into ({s}, {ph}, {pw}) tubelets"
            )));
        }
        let layout = TokenLayout::new(frames / s, h / ph, w / pw);
        let pd = s * ph * pw * c;
        let rows = frames * h * w;
        let mut to_tokens = vec![0; layout.tokens() * pd];
        let mut to_window = vec![0; rows * c];
        for j in 0..layout.tokens() {
            let (tf, ty, tx) = layout.coords(j);
            for ds in 0..s {
                for py in 0..ph {
                    for px in 0..pw {
                        for ch in 0..c {
                            let p = ((ds * ph + py) * pw + px) * c + ch;
                            let (f, y, x) = (tf * s + ds, ty * ph + py, tx * pw + px);
                            let src = ((f * h + y) * w + x) * c + ch;
                            to_tokens[j * pd + p] = src;
                            to_window[src] = j * pd + p;
                        }
                    }
                }
            }
        }
        Ok(Self {
            layout,
            patch_dim: pd,
            rows,
            channels: c,
            to_tokens: Arc::new(to_tokens),
            to_window: Arc::new(to_window),
        })
    }

    pub fn patchify(&self, g: &mut Graph, window: Var) -> Var {
        g.gather(window, self.to_tokens.clone(), self.layout.tokens(), self.patch_dim)
    }

    pub fn unpatchify(&self, g: &mut Graph, tokens: Var) -> Var {
        g.gather(tokens, self.to_window.clone(), self.rows, self.channels)
    }

    pub fn patchify_tensor(&self, window: &Tensor) -> Tensor {
        let data = self.to_tokens.iter().map(|&i| window.data[i]).collect();
        Tensor::new(self.layout.tokens(), self.patch_dim, data)
    }

    pub fn unpatchify_tensor(&self, tokens: &Tensor) -> Tensor {
        let data = self.to_window.iter().map(|&i| tokens.data[i]).collect();
        Tensor::new(self.rows, self.channels, data)
    }
}

/// Sample `b` of a series as a window tensor `[T * H * W, C]`.
pub fn window_tensor(series: &FieldSeries, b: usize) -> Tensor {
    let [_, t, h, w, c] = series.shape();
    Tensor::new(t * h * w, c, series.sample_f64(b))
}

/// Stacks window tensors back into a `(B, T, H, W, C)` series.
pub fn windows_to_series(windows: &[Tensor], frames: usize, h: usize, w: usize, like: &FieldSeries) -> Result<FieldSeries> {
    let c = windows.first().map(|t| t.cols).ok_or_else(|| Error::arg("no windows"))?;
    let data: Vec<f64> = windows.iter().flat_map(|t| t.data.iter().copied()).collect();
    FieldSeries::from_f64([windows.len(), frames, h, w, c], &data, like.dx, like.dy, like.dt)
}

fn sin_cos(pos: f64, width: usize, base: f64, out: &mut [f64]) {
    let half = width / 2;
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half as f64);
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
}

/// Absolute sinusoidal encoding: `d/4` channels for the row, `d/4` for the
/// column and `d/2` for the frame position.
pub fn sinusoidal_table(layout: TokenLayout, d: usize) -> Tensor {
    let q = d / 4;
    let mut t = Tensor::zeros(layout.tokens(), d);
    for j in 0..layout.tokens() {
        let (f, r, c) = layout.coords(j);
        let row = &mut t.data[j * d..(j + 1) * d];
        sin_cos(r as f64, q, 1e4, &mut row[..q]);
        sin_cos(c as f64, q, 1e4, &mut row[q..2 * q]);
        sin_cos(f as f64, d - 2 * q, 1e4, &mut row[2 * q..]);
    }
    t
}

/// Sinusoidal embedding of `t * 1000` as a `[1, d]` row.
pub fn time_features(t: f64, d: usize) -> Tensor {
    let mut row = vec![0.0; d];
    sin_cos(t * 1000.0, d, 1e4, &mut row);
    Tensor::row_vector(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init;

    fn cfg(h: usize, w: usize, ph: usize, frames: usize, s: usize, c: usize) -> BackboneConfig {
        BackboneConfig {
            frames,
            context: frames,
            height: h,
            width: w,
            channels: c,
            patch_h: ph,
            patch_w: ph,
            stride: s,
            d_model: 8,
            heads: 2,
            depth: 1,
            tap_layer: 0,
            kappa: 1,
            n_blocks: 2,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn token_counts_and_round_trip() {
        let p = Patchifier::new(&cfg(4, 4, 2, 1, 1, 1)).unwrap();
        assert_eq!((p.layout.tokens(), p.patch_dim), (4, 4));
        let mut rng = crate::rng::stream(1, "patch");
        for c in [cfg(4, 4, 2, 2, 2, 2), cfg(8, 4, 2, 4, 1, 3), cfg(6, 6, 3, 2, 1, 1)] {
            let p = Patchifier::new(&c).unwrap();
            assert_eq!(p.layout.tokens(), (c.frames / c.stride) * (c.height / c.patch_h) * (c.width / c.patch_w));
            let x = init::normal(&mut rng, c.window_rows(), c.channels, 1.0);
            assert_eq!(p.unpatchify_tensor(&p.patchify_tensor(&x)), x);
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let t = p.patchify(&mut g, v);
            let back = p.unpatchify(&mut g, t);
            assert_eq!(g.value(back), &x);
        }
    }

    #[test]
    fn patch_contents_are_tubelets() {
        let c = cfg(4, 4, 2, 2, 2, 1);
        let p = Patchifier::new(&c).unwrap();
        let x = Tensor::from_fn(32, 1, |r, _| r as f64);
        let tok = p.patchify_tensor(&x);
        // token 1 = frame block 0, row 0, col 1: pixels (0,0..2,2..4) then frame 1
        assert_eq!(tok.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn pseudo_inverse_embedding_reconstructs() {
        // embed into a wider space with a random matrix, decode with its
        // least-squares pseudo-inverse (E^T E)^-1 E^T
        let c = cfg(4, 4, 2, 1, 1, 1);
        let p = Patchifier::new(&c).unwrap();
        let mut rng = crate::rng::stream(2, "pinv");
        let e = init::normal(&mut rng, 4, 6, 1.0);
        let gram = e.matmul(&e.transpose());
        let inv = invert(&gram);
        let pinv = e.transpose().matmul(&inv);
        let x = init::normal(&mut rng, 16, 1, 1.0);
        let rec = p.unpatchify_tensor(&p.patchify_tensor(&x).matmul(&e).matmul(&pinv));
        assert!(rec.zip_map(&x, |a, b| (a - b).abs()).max_abs() < 1e-8);
    }

    fn invert(a: &Tensor) -> Tensor {
        let n = a.rows;
        let mut m = Tensor::from_fn(n, 2 * n, |r, c| if c < n { a.at(r, c) } else if c - n == r { 1.0 } else { 0.0 });
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| m.at(x, col).abs().total_cmp(&m.at(y, col).abs())).unwrap();
            for c in 0..2 * n {
                let (x, y) = (m.at(col, c), m.at(piv, c));
                m.set(col, c, y);
                m.set(piv, c, x);
            }
            let d = m.at(col, col);
            for c in 0..2 * n {
                m.set(col, c, m.at(col, c) / d);
            }
            for r in 0..n {
                if r != col {
                    let f = m.at(r, col);
                    for c in 0..2 * n {
                        m.set(r, c, m.at(r, c) - f * m.at(col, c));
                    }
                }
            }
        }
        Tensor::from_fn(n, n, |r, c| m.at(r, n + c))
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(Patchifier::new(&cfg(5, 4, 2, 1, 1, 1)).is_err());
        assert!(Patchifier::new(&cfg(4, 4, 2, 3, 2, 1)).is_err());
    }

    #[test]
    fn sinusoid_at_origin() {
        let t = sinusoidal_table(TokenLayout::new(2, 2, 2), 16);
        let row = t.row(0);
        for (seg, w) in [(0, 4), (4, 4), (8, 8)] {
            assert!(row[seg..seg + w / 2].iter().all(|&v| v == 0.0));
            assert!(row[seg + w / 2..seg + w].iter().all(|&v| v == 1.0));
        }
        let a = time_features(0.3, 8);
        assert_eq!(a, time_features(0.3, 8));
        assert_eq!(time_features(0.0, 8).data, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
