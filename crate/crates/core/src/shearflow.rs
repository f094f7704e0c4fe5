//! Pseudo-spectral solver for 2D periodic incompressible shear flow on the
//! unit square, and windowed dataset generation.
//!
//! `du/dt + (u . grad) u = -grad p + nu lap u + f`, `div u = 0`,
//! `f = (alpha sin(2 pi y), 0)`. Pressure is removed by Leray projection,
//! the quadratic term is dealiased with the 2/3 rule, viscosity is handled
//! exactly by an integrating factor and the rest by RK2 (midpoint).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::Array5;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{fft2, fieldpack_read, fieldpack_write, ifft2, signed_freq, FieldSeries, PackHeader};
use crate::rng::{self, gaussian_vec};

/// Context plus target frames per window.
pub const WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `u_x = sin(2 pi y)` plus a small seeded divergence-free perturbation.
    Shear,
    /// Band-limited divergence-free random field with unit RMS speed.
    #[default]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n: usize,
    pub nu: f64,
    pub forcing_amp: f64,
    pub dt: f64,
    /// Solver steps after warm-up.
    pub n_steps: usize,
    /// Solver steps between saved snapshots.
    pub save_stride: usize,
    /// Steps discarded before the first snapshot.
    pub warmup_steps: usize,
    pub init: InitKind,
    /// RMS speed of the shear perturbation.
    pub perturbation: f64,
    /// Highest wavenumber of the random initial field.
    pub init_band: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n: 64,
            nu: 1e-3,
            forcing_amp: 0.5,
            dt: 1e-3,
            n_steps: 500,
            save_stride: 50,
            warmup_steps: 0,
            init: InitKind::Random,
            perturbation: 0.1,
            init_band: 8,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.nu > 0.0) || !(self.dt > 0.0) {
            return bad(format!("nu = {} and dt = {} must be positive", self.nu, self.dt));
        }
        if self.n < 4 || self.n % 2 != 0 {
            return bad(format!("grid size {} must be even and at least 4", self.n));
        }
        if self.save_stride == 0 {
            return bad("save_stride must be positive".into());
        }
        Ok(())
    }

    pub fn saved_frames(&self) -> usize {
        self.n_steps / self.save_stride + 1
    }

    pub fn frame_dt(&self) -> f64 {
        self.dt * self.save_stride as f64
    }
}

/// Spectral velocity coefficients `(u_x hat, u_y hat)` on an `n x n` grid,
/// row index = y.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub n: usize,
    pub ux: Vec<Complex64>,
    pub uy: Vec<Complex64>,
    pub time: f64,
}

/// Fixed spectral tables for one grid and viscosity.
#[derive(Debug, Clone)]
pub struct Solver {
    pub cfg: SolverConfig,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    dealias: Vec<bool>,
    decay_full: Vec<f64>,
    decay_half: Vec<f64>,
    forcing: Vec<Complex64>,
}

fn to_spectral(real: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, n, n);
    buf
}

fn to_physical(spec: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = spec.to_vec();
    ifft2(&mut buf, n, n);
    buf.into_iter().map(|z| z.re).collect()
}

/// `(I - xi xi^T / |xi|^2) u` per mode; the mean mode is untouched.
pub fn leray_project(ux: &mut [Complex64], uy: &mut [Complex64], n: usize) {
    for ky in 0..n {
        let fy = signed_freq(ky, n) as f64;
        for kx in 0..n {
            let fx = signed_freq(kx, n) as f64;
            let k2 = fx * fx + fy * fy;
            if k2 == 0.0 {
                continue;
            }
            let i = ky * n + kx;
            let dot = (ux[i] * fx + uy[i] * fy) / k2;
            ux[i] -= dot * fx;
            uy[i] -= dot * fy;
        }
    }
}

impl FlowState {
    pub fn zeros(n: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); n * n];
        Self { n, ux: z.clone(), uy: z, time: 0.0 }
    }

    pub fn from_physical(ux: &[f64], uy: &[f64], n: usize) -> Self {
        Self {
            n,
            ux: to_spectral(ux, n),
            uy: to_spectral(uy, n),
            time: 0.0,
        }
    }

    pub fn velocity(&self) -> (Vec<f64>, Vec<f64>) {
        (to_physical(&self.ux, self.n), to_physical(&self.uy, self.n))
    }

    /// Mean kinetic energy `0.5 <|u|^2>`.
    pub fn energy(&self) -> f64 {
        let scale = 1.0 / (self.n * self.n) as f64;
        // Parseval: sum |u|^2 = sum |u_hat|^2 / N^2
        let s: f64 = self.ux.iter().chain(&self.uy).map(|z| z.norm_sqr()).sum();
        0.5 * s * scale * scale
    }

    pub fn rms_speed(&self) -> f64 {
        (2.0 * self.energy()).sqrt()
    }

    /// Max over grid points of `|du_x/dx + du_y/dy|`.
    pub fn max_divergence(&self) -> f64 {
        let n = self.n;
        let mut div = vec![Complex64::new(0.0, 0.0); n * n];
        for ky in 0..n {
            let fy = TAU * signed_freq(ky, n) as f64;
            for kx in 0..n {
                let fx = TAU * signed_freq(kx, n) as f64;
                let i = ky * n + kx;
                div[i] = Complex64::new(0.0, 1.0) * (self.ux[i] * fx + self.uy[i] * fy);
            }
        }
        to_physical(&div, n).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max over modes of `|xi . u_hat(xi)|`, relative to the largest mode.
    pub fn spectral_divergence(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for ky in 0..n {
            let fy = signed_freq(ky, n) as f64;
            for kx in 0..n {
                let fx = signed_freq(kx, n) as f64;
                let i = ky * n + kx;
                worst = worst.max((self.ux[i] * fx + self.uy[i] * fy).norm());
                scale = scale.max(self.ux[i].norm().max(self.uy[i].norm()));
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

impl Solver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n;
        let cut = n as f64 / 3.0;
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut k2 = vec![0.0; n * n];
        let mut dealias = vec![false; n * n];
        for iy in 0..n {
            let fy = signed_freq(iy, n) as f64;
            for ix in 0..n {
                let fx = signed_freq(ix, n) as f64;
                let i = iy * n + ix;
                kx[i] = TAU * fx;
                ky[i] = TAU * fy;
                k2[i] = kx[i] * kx[i] + ky[i] * ky[i];
                dealias[i] = fx.abs() < cut && fy.abs() < cut;
            }
        }
        let decay_full = k2.iter().map(|&k| (-cfg.nu * k * cfg.dt).exp()).collect();
        let decay_half = k2.iter().map(|&k| (-cfg.nu * k * cfg.dt * 0.5).exp()).collect();
        let fx: Vec<f64> = (0..n * n).map(|i| cfg.forcing_amp * (TAU * (i / n) as f64 / n as f64).sin()).collect();
        Ok(Self {
            cfg,
            kx,
            ky,
            k2,
            dealias,
            decay_full,
            decay_half,
            forcing: to_spectral(&fx, n),
        })
    }

    /// Projected `-(u . grad) u + f` in spectral space.
    fn rhs(&self, ux: &[Complex64], uy: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.cfg.n;
        let i = Complex64::new(0.0, 1.0);
        let deriv = |u: &[Complex64], k: &[f64]| -> Vec<f64> {
            let d: Vec<Complex64> = u.iter().zip(k).map(|(z, &k)| i * k * z).collect();
            to_physical(&d, n)
        };
        let (u, v) = (to_physical(ux, n), to_physical(uy, n));
        let (ux_x, ux_y) = (deriv(ux, &self.kx), deriv(ux, &self.ky));
        let (uy_x, uy_y) = (deriv(uy, &self.kx), deriv(uy, &self.ky));
        let adv_x: Vec<f64> = (0..n * n).map(|p| u[p] * ux_x[p] + v[p] * ux_y[p]).collect();
        let adv_y: Vec<f64> = (0..n * n).map(|p| u[p] * uy_x[p] + v[p] * uy_y[p]).collect();
        let mut nx = to_spectral(&adv_x, n);
        let mut ny = to_spectral(&adv_y, n);
        for p in 0..n * n {
            if self.dealias[p] {
                nx[p] = self.forcing[p] - nx[p];
                ny[p] = -ny[p];
            } else {
                nx[p] = Complex64::new(0.0, 0.0);
                ny[p] = Complex64::new(0.0, 0.0);
            }
        }
        leray_project(&mut nx, &mut ny, n);
        (nx, ny)
    }

    /// Largest `dt |u| / dx` over the grid.
    pub fn cfl(&self, state: &FlowState) -> f64 {
        let (u, v) = state.velocity();
        let vmax = u.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max(a.abs()).max(b.abs()));
        self.cfg.dt * vmax * self.cfg.n as f64
    }

    /// One integrating-factor midpoint step.
    pub fn step(&self, state: &mut FlowState) -> Result<()> {
        let cfl = self.cfl(state);
        if !(cfl < 1.0) {
            return Err(Error::Cfl { cfl });
        }
        let dt = self.cfg.dt;
        let (nx, ny) = self.rhs(&state.ux, &state.uy);
        let half = |u: &[Complex64], r: &[Complex64]| -> Vec<Complex64> {
            u.iter()
                .zip(r)
                .zip(&self.decay_half)
                .map(|((u, r), e)| (u + r * (0.5 * dt)) * e)
                .collect()
        };
        let (hx, hy) = (half(&state.ux, &nx), half(&state.uy, &ny));
        let (mx, my) = self.rhs(&hx, &hy);
        let full = |u: &mut [Complex64], r: &[Complex64]| {
            for p in 0..u.len() {
                u[p] = u[p] * self.decay_full[p] + r[p] * (dt * self.decay_half[p]);
            }
        };
        full(&mut state.ux, &mx);
        full(&mut state.uy, &my);
        leray_project(&mut state.ux, &mut state.uy, self.cfg.n);
        state.time += dt;
        Ok(())
    }

    /// Initial state for the configured kind and seed.
    pub fn init_field(&self) -> FlowState {
        let n = self.cfg.n;
        let mut r = rng::stream(self.cfg.seed, "shearflow-init");
        match self.cfg.init {
            InitKind::Random => {
                let mut s = self.random_divergence_free(&mut r, self.cfg.init_band);
                let rms = s.rms_speed();
                if rms > 0.0 {
                    s.ux.iter_mut().chain(s.uy.iter_mut()).for_each(|z| *z /= rms);
                }
                s
            }
            InitKind::Shear => {
                let ux: Vec<f64> = (0..n * n).map(|p| (TAU * (p / n) as f64 / n as f64).sin()).collect();
                let mut s = FlowState::from_physical(&ux, &vec![0.0; n * n], n);
                if self.cfg.perturbation > 0.0 {
                    let mut pert = self.random_divergence_free(&mut r, self.cfg.init_band);
                    let scale = self.cfg.perturbation / pert.rms_speed().max(f64::MIN_POSITIVE);
                    pert.ux.iter_mut().chain(pert.uy.iter_mut()).for_each(|z| *z *= scale);
                    s.ux.iter_mut().zip(&pert.ux).for_each(|(a, b)| *a += b);
                    s.uy.iter_mut().zip(&pert.uy).for_each(|(a, b)| *a += b);
                }
                s
            }
        }
    }

    /// `u = (d psi/dy, -d psi/dx)` for a random stream function with
    /// `|psi_hat|^2 ~ k^-6` on `1 <= |k| <= band`.
    fn random_divergence_free(&self, r: &mut rng::Rng, band: usize) -> FlowState {
        let n = self.cfg.n;
        let noise = gaussian_vec(r, n * n);
        let mut psi = to_spectral(&noise, n);
        for p in 0..n * n {
            let k = self.k2[p].sqrt() / TAU;
            psi[p] *= if k >= 1.0 && k <= band as f64 { k.powi(-3) } else { 0.0 };
        }
        let i = Complex64::new(0.0, 1.0);
        let ux = psi.iter().zip(&self.ky).map(|(z, &k)| i * k * z).collect();
        let uy = psi.iter().zip(&self.kx).map(|(z, &k)| -i * k * z).collect();
        FlowState { n, ux, uy, time: 0.0 }
    }

    /// Runs warm-up plus `n_steps`, saving every `save_stride` steps
    /// (first snapshot included). Output shape `(1, frames, n, n, 2)`.
    pub fn trajectory(&self) -> Result<FieldSeries> {
        let n = self.cfg.n;
        let mut state = self.init_field();
        for _ in 0..self.cfg.warmup_steps {
            self.step(&mut state)?;
        }
        let frames = self.cfg.saved_frames();
        let mut data = Vec::with_capacity(frames * n * n * 2);
        let mut push = |s: &FlowState| {
            let (u, v) = s.velocity();
            for p in 0..n * n {
                data.push(u[p]);
                data.push(v[p]);
            }
        };
        push(&state);
        for k in 1..=self.cfg.n_steps {
            self.step(&mut state)?;
            if k % self.cfg.save_stride == 0 {
                push(&state);
            }
        }
        let h = 1.0 / n as f64;
        FieldSeries::from_f64([1, frames, n, n, 2], &data, h, h, self.cfg.frame_dt())
    }
}

/// Taylor-Green vortex `u = (sin 2pi x cos 2pi y, -cos 2pi x sin 2pi y)` and
/// its analytic decay factor `exp(-8 pi^2 nu t)`.
pub fn taylor_green(n: usize) -> FlowState {
    let mut ux = vec![0.0; n * n];
    let mut uy = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xs, ys) = (TAU * x as f64 / n as f64, TAU * y as f64 / n as f64);
            ux[y * n + x] = xs.sin() * ys.cos();
            uy[y * n + x] = -xs.cos() * ys.sin();
        }
    }
    FlowState::from_physical(&ux, &uy, n)
}

pub fn taylor_green_decay(nu: f64, t: f64) -> f64 {
    (-2.0 * TAU * TAU * nu * t).exp()
}

/// Window starts `0, stride, 2 stride, ...` with `start + window <= frames`.
pub fn window_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if frames < window || stride == 0 {
        return Vec::new();
    }
    (0..=frames - window).step_by(stride).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub solver: SolverConfig,
    pub n_traj: usize,
    pub window: usize,
    /// Saved frames between consecutive window starts.
    pub window_stride: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            n_traj: 100,
            window: WINDOW,
            window_stride: 1,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Which trajectories went where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_traj: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Window starts (in saved frames) used for every trajectory.
    pub window_starts: Vec<usize>,
    pub windows: [usize; 3],
    pub config: DatasetConfig,
    pub seed: u64,
}

/// Windows of every split, each `(B, window, n, n, 2)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: FieldSeries,
    pub val: Option<FieldSeries>,
    pub test: FieldSeries,
    /// Full test trajectories `(n_test, frames, n, n, 2)` for rollouts.
    pub test_trajectories: FieldSeries,
}

/// Splits trajectory indices by a seeded shuffle: test first, then
/// validation, the rest for training. Each split is sorted.
pub fn split_trajectories(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    use rand::seq::SliceRandom;
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::Config(format!("{n} trajectories cannot fill train/val/test splits")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let mut test = idx[..n_test].to_vec();
    let mut val = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val, test))
}

fn gather_windows(trajs: &[FieldSeries], ids: &[usize], starts: &[usize], window: usize) -> Result<Option<FieldSeries>> {
    let parts: Vec<FieldSeries> = ids
        .iter()
        .flat_map(|&i| starts.iter().map(move |&s| trajs[i].frame_range(s, s + window)))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok(None);
    }
    FieldSeries::concat(&parts).map(Some)
}

/// Simulates every trajectory (in parallel; each is seeded independently)
/// and slices them into windows.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.solver.validate()?;
    let frames = cfg.solver.saved_frames();
    if frames < cfg.window {
        return Err(Error::Config(format!(
            "{frames} saved frames cannot hold a {}-frame window; raise n_steps",
            cfg.window
        )));
    }
    let starts = window_starts(frames, cfg.window, cfg.window_stride);
    let (train, val, test) = split_trajectories(cfg.n_traj, cfg.val_fraction, cfg.test_fraction, cfg.seed)?;
    let trajs: Vec<FieldSeries> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut sc = cfg.solver;
            sc.seed = rng::derive_seed(cfg.seed, &format!("traj-{i}"));
            Solver::new(sc)?.trajectory()
        })
        .collect::<Result<_>>()?;
    let train_w = gather_windows(&trajs, &train, &starts, cfg.window)?.ok_or_else(|| Error::Config("empty training split".into()))?;
    let val_w = gather_windows(&trajs, &val, &starts, cfg.window)?;
    let test_w = gather_windows(&trajs, &test, &starts, cfg.window)?.ok_or_else(|| Error::Config("empty test split".into()))?;
    let test_parts: Vec<FieldSeries> = test.iter().map(|&i| trajs[i].clone()).collect();
    let test_trajectories = FieldSeries::concat(&test_parts)?;
    let manifest = DatasetManifest {
        n_traj: cfg.n_traj,
        windows: [train_w.batch(), val_w.as_ref().map_or(0, |v| v.batch()), test_w.batch()],
        train,
        val,
        test,
        window_starts: starts,
        config: *cfg,
        seed: cfg.seed,
    };
    Ok(Dataset {
        manifest,
        train: train_w,
        val: val_w,
        test: test_w,
        test_trajectories,
    })
}

impl Dataset {
    fn split_path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.fpk"))
    }

    /// Writes `train.fpk`, `val.fpk` (if any), `test.fpk` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let producer = serde_json::to_value(&self.manifest)?;
        let write = |name: &str, s: &FieldSeries| {
            let header = PackHeader::for_series(s)
                .with_channels(&["u_x", "u_y"])
                .with_seed(self.manifest.seed)
                .with_producer(serde_json::json!({ "generator": "shearflow", "split": name }));
            fieldpack_write(&Self::split_path(dir, name), s, &header)
        };
        write("train", &self.train)?;
        if let Some(v) = &self.val {
            write("val", v)?;
        }
        write("test", &self.test)?;
        write("test_traj", &self.test_trajectories)?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&producer)?;
        std::fs::write(&path, text).map_err(Error::from)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let (train, _) = fieldpack_read(&Self::split_path(dir, "train"))?;
        let val_path = Self::split_path(dir, "val");
        let val = if val_path.exists() { Some(fieldpack_read(&val_path)?.0) } else { None };
        let (test, _) = fieldpack_read(&Self::split_path(dir, "test"))?;
        let (test_trajectories, _) = fieldpack_read(&Self::split_path(dir, "test_traj"))?;
        Ok(Self {
            manifest,
            train,
            val,
            test,
            test_trajectories,
        })
    }
}

/// An all-zero `(1, frames, n, n, 2)` series, handy for shape checks.
pub fn zero_series(frames: usize, n: usize) -> Result<FieldSeries> {
    FieldSeries::unit_square(Array5::zeros((1, frames, n, n, 2)), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{mean_profile, radial_energy_spectrum};

    fn cfg(n: usize) -> SolverConfig {
        SolverConfig { n, ..SolverConfig::default() }
    }

    fn random_spectrum(n: usize, seed: u64) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut r = rng::stream(seed, "t");
        (to_spectral(&gaussian_vec(&mut r, n * n), n), to_spectral(&gaussian_vec(&mut r, n * n), n))
    }

    #[test]
    fn projection_cases() {
        let n = 16;
        let (mut ux, mut uy) = random_spectrum(n, 1);
        leray_project(&mut ux, &mut uy, n);
        let (px, py) = (ux.clone(), uy.clone());
        leray_project(&mut ux, &mut uy, n);
        let diff = ux.iter().chain(&uy).zip(px.iter().chain(&py)).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        assert!(diff < 1e-12);
        let s = FlowState { n, ux, uy, time: 0.0 };
        assert!(s.spectral_divergence() < 1e-12);

        // gradient field u = xi phi -> 0; mean mode survives
        let (phi, _) = random_spectrum(n, 2);
        let mut gx: Vec<Complex64> = (0..n * n).map(|p| phi[p] * signed_freq(p % n, n) as f64).collect();
        let mut gy: Vec<Complex64> = (0..n * n).map(|p| phi[p] * signed_freq(p / n, n) as f64).collect();
        gx[0] = Complex64::new(3.0, 0.0);
        leray_project(&mut gx, &mut gy, n);
        assert_eq!(gx[0], Complex64::new(3.0, 0.0));
        assert!(gx.iter().skip(1).chain(&gy).all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let s = Solver::new(SolverConfig { forcing_amp: 0.0, ..cfg(16) }).unwrap();
        let mut st = FlowState::zeros(16);
        for _ in 0..10 {
            s.step(&mut st).unwrap();
        }
        assert!(st.ux.iter().chain(&st.uy).all(|z| z.norm() == 0.0));
    }

    fn taylor_green_error(n: usize, nu: f64, dt: f64, t_end: f64) -> (f64, f64) {
        let s = Solver::new(SolverConfig { n, nu, dt, forcing_amp: 0.0, ..SolverConfig::default() }).unwrap();
        let mut st = taylor_green(n);
        let steps = (t_end / dt).round() as usize;
        let mut worst_div = 0.0f64;
        for _ in 0..steps {
            s.step(&mut st).unwrap();
            worst_div = worst_div.max(st.max_divergence());
        }
        let (u, v) = st.velocity();
        let exact = taylor_green(n);
        let (eu, ev) = exact.velocity();
        let f = taylor_green_decay(nu, st.time);
        let num: f64 = (0..n * n).map(|p| (u[p] - f * eu[p]).powi(2) + (v[p] - f * ev[p]).powi(2)).sum();
        let den: f64 = (0..n * n).map(|p| (f * eu[p]).powi(2) + (f * ev[p]).powi(2)).sum();
        ((num / den).sqrt(), worst_div)
    }

    #[test]
    fn taylor_green_decays_analytically() {
        let (err, div) = taylor_green_error(64, 0.01, 1e-3, 0.1);
        assert!(err < 1e-3, "{err}");
        assert!(div < 1e-10, "{div}");
    }

    #[test]
    fn self_convergence_is_second_order() {
        // Taylor-Green is integrated exactly by the integrating factor, so
        // the time order is measured by Richardson self-convergence on a
        // forced random field instead
        let run = |dt: f64| {
            let s = Solver::new(SolverConfig { n: 32, nu: 5e-3, dt, ..SolverConfig::default() }).unwrap();
            let mut st = s.init_field();
            for _ in 0..(0.2 / dt).round() as usize {
                s.step(&mut st).unwrap();
            }
            st.velocity().0
        };
        let (a, b, c) = (run(4e-3), run(2e-3), run(1e-3));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let order = (d(&a, &b) / d(&b, &c)).log2();
        assert!(order >= 1.8, "{order}");
    }

    #[test]
    fn divergence_free_and_energy_monotone_without_forcing() {
        let s = Solver::new(SolverConfig { forcing_amp: 0.0, nu: 5e-3, ..cfg(32) }).unwrap();
        let mut st = s.init_field();
        let mut e = st.energy();
        for _ in 0..100 {
            s.step(&mut st).unwrap();
            assert!(st.max_divergence() < 1e-10);
            let e2 = st.energy();
            assert!(e2 <= e, "{e2} > {e}");
            e = e2;
        }
    }

    #[test]
    fn init_kinds() {
        let n = 32;
        let s = Solver::new(SolverConfig { perturbation: 0.0, init: InitKind::Shear, ..cfg(n) }).unwrap();
        let st = s.init_field();
        assert!(st.max_divergence() < 1e-12);
        let (u, v) = st.velocity();
        assert!((0..n * n).all(|p| (u[p] - (TAU * (p / n) as f64 / n as f64).sin()).abs() < 1e-12 && v[p].abs() < 1e-12));

        let r = Solver::new(cfg(n)).unwrap();
        let a = r.init_field();
        assert!((a.rms_speed() - 1.0).abs() < 1e-6);
        assert!(a.max_divergence() < 1e-10);
        assert_eq!(a, r.init_field());
        let other = Solver::new(SolverConfig { seed: 1, ..cfg(n) }).unwrap().init_field();
        assert_ne!(a, other);
    }

    #[test]
    fn cfl_violation_aborts() {
        let s = Solver::new(SolverConfig { dt: 0.5, ..cfg(16) }).unwrap();
        let mut st = s.init_field();
        assert!(matches!(s.step(&mut st), Err(Error::Cfl { .. })));
    }

    #[test]
    fn window_counting_and_splits() {
        assert_eq!(window_starts(20, 8, 1).len(), 13);
        assert_eq!(window_starts(7, 8, 1).len(), 0);
        assert_eq!(window_starts(20, 8, 4), vec![0, 4, 8, 12]);
        let (tr, va, te) = split_trajectories(10, 0.1, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_trajectories(2, 0.5, 0.5, 0).is_err());
    }

    #[test]
    fn dataset_round_trip_and_split_integrity() {
        let cfg = DatasetConfig {
            solver: SolverConfig { n: 16, n_steps: 90, save_stride: 10, ..SolverConfig::default() },
            n_traj: 5,
            window_stride: 1,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 4,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        // 10 saved frames -> 3 windows per trajectory
        assert_eq!(ds.manifest.window_starts, vec![0, 1, 2]);
        assert_eq!(ds.manifest.windows, [9, 3, 3]);
        assert_eq!(ds.train.shape(), [9, 8, 16, 16, 2]);
        // windows of one trajectory overlap by 7 frames and stay together
        let a = ds.train.frame_range(1, 8).unwrap().select(&[0]).unwrap();
        let b = ds.train.frame_range(0, 7).unwrap().select(&[1]).unwrap();
        assert_eq!(a.values(), b.values());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.test_trajectories.shape(), [1, 10, 16, 16, 2]);
        let again = generate_dataset(&cfg).unwrap();
        assert_eq!(again.train, ds.train);
        let short = DatasetConfig { solver: SolverConfig { n_steps: 30, ..cfg.solver }, ..cfg };
        assert!(generate_dataset(&short).is_err());
    }

    #[test]
    fn generated_spectrum_decays_beyond_forcing() {
        let cfg = DatasetConfig {
            solver: SolverConfig { n: 64, n_steps: 200, save_stride: 50, ..SolverConfig::default() },
            n_traj: 6,
            window: 4,
            window_stride: 1,
            val_fraction: 0.0,
            test_fraction: 0.2,
            seed: 1,
        };
        let ds = generate_dataset(&cfg).unwrap();
        let [b, t, _, _, c] = ds.train.shape();
        let mut profiles = Vec::new();
        for i in 0..b {
            for f in 0..t {
                for ch in 0..c {
                    profiles.push(radial_energy_spectrum(ds.train.plane(i, f, ch).view()).unwrap());
                }
            }
        }
        let mean = mean_profile(&profiles).unwrap();
        let e = &mean.energy;
        for k in 2..=24 {
            assert!(e[k + 1] < e[k], "E({}) = {} >= E({k}) = {}", k + 1, e[k + 1], e[k]);
        }
    }
}
