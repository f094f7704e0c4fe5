//! Spectral bias of forward diffusion.
//!
//! Under `dx = g(t) dw` every Fourier mode receives the same noise variance
//! `V(t) = int_0^t g(s)^2 ds`, while signal power of natural fields decays
//! like `|omega|^-alpha`. High frequencies therefore cross any SNR threshold
//! first, with `t_gamma(omega)` proportional to `|omega|^-alpha` for constant
//! `g`. This module provides the closed-form evaluators and a Monte-Carlo
//! experiment that measures the same law on synthesized fields.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{fft2, ifft2, signed_freq, SpectrumProfile};
use crate::rng::{self, Rng};

/// Default bisection horizon.
pub const T_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionCoeff {
    /// `g(s) = g0`.
    Constant { g0: f64 },
    /// `g(s) = a * s`.
    Linear { a: f64 },
    /// Piecewise-linear `g` through `(times[i], values[i])`, held constant
    /// past the last sample. `times` must start at 0 and increase strictly.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl DiffusionCoeff {
    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::arg("tabulated g needs >= 2 matching samples"));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("tabulated times must start at 0 and increase"));
        }
        if values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tabulated g".into()));
        }
        Ok(Self::Tabulated { times, values })
    }

    /// `g(s)`.
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Constant { g0 } => *g0,
            Self::Linear { a } => a * s,
            Self::Tabulated { times, values } => {
                let last = times.len() - 1;
                if s >= times[last] {
                    return values[last];
                }
                let i = times.partition_point(|&t| t <= s).saturating_sub(1);
                let f = (s - times[i]) / (times[i + 1] - times[i]);
                values[i] + f * (values[i + 1] - values[i])
            }
        }
    }

    /// `int_0^t g(s)^2 ds`.
    pub fn accumulated_variance(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::arg(format!("accumulated variance needs t >= 0, got {t}")));
        }
        Ok(match self {
            Self::Constant { g0 } => g0 * g0 * t,
            Self::Linear { a } => a * a * t.powi(3) / 3.0,
            Self::Tabulated { times, .. } => {
                // g is linear on every knot interval, so g^2 is quadratic there
                // and Simpson's rule is exact per piece.
                let simpson = |a: f64, b: f64| {
                    let (ga, gm, gb) = (self.eval(a), self.eval(0.5 * (a + b)), self.eval(b));
                    (b - a) / 6.0 * (ga * ga + 4.0 * gm * gm + gb * gb)
                };
                let mut acc = 0.0;
                for w in times.windows(2) {
                    if w[0] >= t {
                        break;
                    }
                    acc += simpson(w[0], w[1].min(t));
                }
                let end = *times.last().unwrap();
                if t > end {
                    let g = self.eval(end);
                    acc += g * g * (t - end);
                }
                acc
            }
        })
    }
}

pub fn accumulated_noise_variance(coeff: &DiffusionCoeff, t: f64) -> Result<f64> {
    coeff.accumulated_variance(t)
}

/// Anything that can report signal power `|x0_hat(omega)|^2`.
pub trait SignalSpectrum {
    fn power(&self, omega: f64) -> f64;
}

/// A fixed power, independent of frequency.
impl SignalSpectrum for f64 {
    fn power(&self, _omega: f64) -> f64 {
        *self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSpectrum {
    pub alpha: f64,
    pub amplitude: f64,
    pub dc_power: f64,
}

impl PowerLawSpectrum {
    pub fn new(alpha: f64, amplitude: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(amplitude > 0.0) {
            return Err(Error::arg("power law needs alpha > 0 and amplitude > 0"));
        }
        Ok(Self {
            alpha,
            amplitude,
            dc_power: 0.0,
        })
    }

    pub fn with_dc_power(mut self, dc: f64) -> Self {
        self.dc_power = dc;
        self
    }
}

impl SignalSpectrum for PowerLawSpectrum {
    fn power(&self, omega: f64) -> f64 {
        let w = omega.abs();
        if w == 0.0 {
            self.dc_power
        } else {
            self.amplitude * w.powf(-self.alpha)
        }
    }
}

/// A measured radial spectrum; power at `omega` is the mean per-cell energy
/// of bin `floor(|omega|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSpectrum {
    pub per_cell: Vec<f64>,
}

impl EmpiricalSpectrum {
    pub fn from_profile(profile: &SpectrumProfile, h: usize, w: usize) -> Self {
        let counts = bin_counts(h, w);
        let per_cell = profile
            .energy
            .iter()
            .zip(&counts)
            .map(|(&e, &n)| if n == 0 { 0.0 } else { e / n as f64 })
            .collect();
        Self { per_cell }
    }
}

impl SignalSpectrum for EmpiricalSpectrum {
    fn power(&self, omega: f64) -> f64 {
        let k = omega.abs().floor() as usize;
        self.per_cell.get(k).copied().unwrap_or(0.0)
    }
}

/// `|x0_hat(omega)|^2 / V(t)`; infinite at `t = 0`.
pub fn snr_at(spectrum: &impl SignalSpectrum, coeff: &DiffusionCoeff, t: f64, omega: f64) -> Result<f64> {
    let v = coeff.accumulated_variance(t)?;
    if t == 0.0 || v == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(spectrum.power(omega) / v)
}

/// First time at which the SNR at `omega` falls to `gamma`.
pub fn threshold_time(spectrum: &impl SignalSpectrum, coeff: &DiffusionCoeff, gamma: f64, omega: f64) -> Result<f64> {
    threshold_time_with_horizon(spectrum, coeff, gamma, omega, T_MAX)
}

pub fn threshold_time_with_horizon(
    spectrum: &impl SignalSpectrum,
    coeff: &DiffusionCoeff,
    gamma: f64,
    omega: f64,
    horizon: f64,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::arg(format!("gamma must be positive, got {gamma}")));
    }
    let target = spectrum.power(omega) / gamma;
    if !target.is_finite() || target < 0.0 {
        return Err(Error::arg(format!("signal power at omega = {omega} is not usable")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    if let DiffusionCoeff::Constant { g0 } = coeff {
        let t = target / (g0 * g0);
        if !(t <= horizon) {
            return Err(Error::HorizonExceeded { horizon });
        }
        return Ok(t);
    }
    if coeff.accumulated_variance(horizon)? < target {
        return Err(Error::HorizonExceeded { horizon });
    }
    let (mut lo, mut hi) = (0.0, horizon);
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if coeff.accumulated_variance(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Real `H x W` field whose Fourier magnitudes follow the power law exactly,
/// with uniformly random phases. Magnitudes refer to the unnormalized forward
/// transform.
pub fn synth_power_law_field(spec: &PowerLawSpectrum, h: usize, w: usize, seed: u64) -> Result<Vec<f64>> {
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("power-law synthesis needs even H, W >= 2, got {h}x{w}")));
    }
    let mut rng = rng::stream(seed, "power-law-phases");
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        let u = signed_freq(y, h);
        for x in 0..w {
            let v = signed_freq(x, w);
            let i = y * w + x;
            let j = ((h - y) % h) * w + (w - x) % w;
            if j < i {
                buf[i] = buf[j].conj();
                continue;
            }
            let r = ((u * u + v * v) as f64).sqrt();
            let mag = spec.power(r).sqrt();
            buf[i] = if i == j {
                // self-conjugate cell: must be real
                if rng.gen::<bool>() { Complex64::new(mag, 0.0) } else { Complex64::new(-mag, 0.0) }
            } else {
                Complex64::from_polar(mag, rng.gen_range(0.0..std::f64::consts::TAU))
            };
        }
    }
    ifft2(&mut buf, h, w);
    Ok(buf.into_iter().map(|c| c.re).collect())
}

fn bin_counts(h: usize, w: usize) -> Vec<usize> {
    let mut counts = vec![0; crate::fields::k_max(h, w) + 1];
    for y in 0..h {
        for x in 0..w {
            counts[crate::fields::radial_bin(signed_freq(y, h), signed_freq(x, w))] += 1;
        }
    }
    counts
}

/// Mean `|omega|` of the cells in each radial bin.
pub fn bin_mean_frequency(h: usize, w: usize) -> Vec<f64> {
    let mut sum = vec![0.0; crate::fields::k_max(h, w) + 1];
    let mut n = vec![0usize; sum.len()];
    for y in 0..h {
        let u = signed_freq(y, h);
        for x in 0..w {
            let v = signed_freq(x, w);
            let k = crate::fields::radial_bin(u, v);
            sum[k] += ((u * u + v * v) as f64).sqrt();
            n[k] += 1;
        }
    }
    sum.iter().zip(&n).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

/// Bins with complete rings: 1 through `min(H, W)/2 - 1`.
pub fn full_ring_bins(h: usize, w: usize) -> std::ops::Range<usize> {
    1..h.min(w) / 2
}

/// Band-summed power of the unnormalized FFT of `field`, per radial bin.
fn band_power(spectrum: &[Complex64], h: usize, w: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        let u = signed_freq(y, h);
        for x in 0..w {
            let k = crate::fields::radial_bin(u, signed_freq(x, w));
            out[k] += spectrum[y * w + x].norm_sqr();
        }
    }
}

/// Least-squares line `y = slope * x + intercept` with the standard error of
/// the slope.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(Error::arg("line fit needs >= 2 matching points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("line fit needs distinct x values"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok((slope, intercept, se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub omega: Vec<f64>,
    pub t_gamma: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Least-squares standard error of the slope.
    pub slope_ci: f64,
    /// Set when fewer than 10 trials were used; `slope_ci` is inflated.
    pub widened_ci: bool,
}

impl ThresholdCurve {
    pub fn from_points(omega: Vec<f64>, t_gamma: Vec<f64>) -> Result<Self> {
        let lx: Vec<f64> = omega.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = t_gamma.iter().map(|v| v.ln()).collect();
        let (slope, intercept, slope_ci) = fit_line(&lx, &ly)?;
        Ok(Self {
            omega,
            t_gamma,
            slope,
            intercept,
            slope_ci,
            widened_ci: false,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("omega,t_gamma\n");
        for (o, t) in self.omega.iter().zip(&self.t_gamma) {
            s.push_str(&format!("{o},{t}\n"));
        }
        s
    }
}

/// Closed-form curve over the full-ring bins of an `H x W` grid.
pub fn analytic_threshold_curve(
    spectrum: &impl SignalSpectrum,
    coeff: &DiffusionCoeff,
    gamma: f64,
    h: usize,
    w: usize,
) -> Result<ThresholdCurve> {
    let freqs = bin_mean_frequency(h, w);
    let omega: Vec<f64> = full_ring_bins(h, w).map(|k| freqs[k]).collect();
    let t = omega
        .iter()
        .map(|&o| threshold_time(spectrum, coeff, gamma, o))
        .collect::<Result<Vec<_>>>()?;
    ThresholdCurve::from_points(omega, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasExperiment {
    pub alpha: f64,
    pub gamma: f64,
    pub grid: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// Points on the geometric time grid per decade.
    pub steps_per_decade: usize,
}

impl BiasExperiment {
    pub fn new(alpha: f64, gamma: f64, grid: usize, n_trials: usize, seed: u64) -> Self {
        Self {
            alpha,
            gamma,
            grid,
            n_trials,
            seed,
            steps_per_decade: 12,
        }
    }
}

/// Geometric time grid that brackets every expected crossing time by a
/// factor of 8 on either side.
fn time_grid(t_lo: f64, t_hi: f64, per_decade: usize) -> Vec<f64> {
    let a = (t_lo / 8.0).log10();
    let b = (t_hi * 8.0).log10();
    let n = ((b - a) * per_decade as f64).ceil() as usize + 1;
    (0..=n).map(|i| 10f64.powf(a + (b - a) * i as f64 / n as f64)).collect()
}

/// Monte-Carlo measurement of `t_gamma` per radial band.
///
/// Each trial synthesizes a power-law field, then accumulates a Wiener path
/// `n(t) = int g dw` on a geometric time grid (increments drawn in pixel
/// space and transformed). The band SNR is band-summed signal power over
/// band-summed noise power; the crossing of `gamma` is located by log-linear
/// interpolation between grid points. Per-band times are averaged in log
/// space over trials and fitted against the band's mean `|omega|`.
pub fn empirical_bias_experiment(exp: &BiasExperiment, coeff: &DiffusionCoeff) -> Result<ThresholdCurve> {
    let n = exp.grid;
    if exp.n_trials == 0 {
        return Err(Error::arg("bias experiment needs at least one trial"));
    }
    if !(exp.gamma > 0.0) {
        return Err(Error::arg("gamma must be positive"));
    }
    let spec = PowerLawSpectrum::new(exp.alpha, 1.0)?;
    let freqs = bin_mean_frequency(n, n);
    let bins: Vec<usize> = full_ring_bins(n, n).collect();
    if bins.len() < 2 {
        return Err(Error::shape("grid too small for a slope fit"));
    }

    // Expected per-cell noise power after time t is V(t) * H * W.
    let cells = (n * n) as f64;
    let expected = |k: usize| threshold_time(&(spec.power(freqs[k]) / cells), coeff, exp.gamma, 1.0);
    let t_lo = expected(*bins.last().unwrap())?;
    let t_hi = expected(bins[0])?;
    let grid = time_grid(t_lo.min(t_hi), t_hi.max(t_lo), exp.steps_per_decade);
    let variances = grid
        .iter()
        .map(|&t| coeff.accumulated_variance(t))
        .collect::<Result<Vec<_>>>()?;

    let trial = |i: usize| -> Result<Vec<f64>> {
        let trial_seed = rng::derive_seed(exp.seed, &format!("bias-trial-{i}"));
        let field = synth_power_law_field(&spec, n, n, trial_seed)?;
        let mut sig: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut sig, n, n);
        let mut signal = vec![0.0; freqs.len()];
        band_power(&sig, n, n, &mut signal);

        let mut rng = rng::stream(trial_seed, "wiener");
        let mut noise = vec![Complex64::new(0.0, 0.0); n * n];
        let mut inc = vec![Complex64::new(0.0, 0.0); n * n];
        let mut power = vec![0.0; freqs.len()];
        let mut prev_v = 0.0;
        let mut prev_snr: Vec<f64> = vec![f64::INFINITY; freqs.len()];
        let mut crossing = vec![f64::NAN; freqs.len()];
        for (j, (&t, &v)) in grid.iter().zip(&variances).enumerate() {
            let sd = (v - prev_v).max(0.0).sqrt();
            prev_v = v;
            for c in inc.iter_mut() {
                *c = Complex64::new(sd * rng.sample::<f64, _>(StandardNormal), 0.0);
            }
            fft2(&mut inc, n, n);
            for (a, b) in noise.iter_mut().zip(&inc) {
                *a += b;
            }
            band_power(&noise, n, n, &mut power);
            for &k in &bins {
                if !crossing[k].is_nan() {
                    continue;
                }
                let snr = signal[k] / power[k];
                if snr < exp.gamma {
                    crossing[k] = if j == 0 {
                        t
                    } else {
                        let (t0, s0, s1) = (grid[j - 1].ln(), prev_snr[k].ln(), snr.ln());
                        let f = (s0 - exp.gamma.ln()) / (s0 - s1);
                        (t0 + f * (t.ln() - t0)).exp()
                    };
                }
                prev_snr[k] = snr;
            }
        }
        if bins.iter().any(|&k| crossing[k].is_nan()) {
            return Err(Error::HorizonExceeded {
                horizon: *grid.last().unwrap(),
            });
        }
        Ok(crossing)
    };

    let per_trial = (0..exp.n_trials).into_par_iter().map(trial).collect::<Result<Vec<_>>>()?;
    let omega: Vec<f64> = bins.iter().map(|&k| freqs[k]).collect();
    let t_gamma: Vec<f64> = bins
        .iter()
        .map(|&k| {
            let mean_log = per_trial.iter().map(|c| c[k].ln()).sum::<f64>() / exp.n_trials as f64;
            mean_log.exp()
        })
        .collect();
    let mut curve = ThresholdCurve::from_points(omega, t_gamma)?;
    if exp.n_trials < 10 {
        curve.widened_ci = true;
        curve.slope_ci *= (10.0 / exp.n_trials as f64).sqrt();
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFlatness {
    pub bins: Vec<usize>,
    /// Mean per-cell noise power in each bin, averaged over trials.
    pub per_cell_power: Vec<f64>,
    /// Coefficient of variation of `per_cell_power` across bins.
    pub relative_spread: f64,
}

/// Per-band noise power of `int_0^t g dw` on an `n x n` grid.
pub fn noise_flatness(coeff: &DiffusionCoeff, t: f64, n: usize, n_trials: usize, seed: u64) -> Result<NoiseFlatness> {
    let v = coeff.accumulated_variance(t)?;
    let sd = v.sqrt();
    let bins: Vec<usize> = full_ring_bins(n, n).collect();
    let counts = bin_counts(n, n);
    let trials: Vec<Vec<f64>> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng: Rng = rng::stream(seed, &format!("flatness-{i}"));
            let mut buf: Vec<Complex64> = (0..n * n)
                .map(|_| Complex64::new(sd * rng.sample::<f64, _>(StandardNormal), 0.0))
                .collect();
            fft2(&mut buf, n, n);
            let mut p = vec![0.0; counts.len()];
            band_power(&buf, n, n, &mut p);
            p
        })
        .collect();
    let per_cell_power: Vec<f64> = bins
        .iter()
        .map(|&k| trials.iter().map(|p| p[k]).sum::<f64>() / (n_trials * counts[k]) as f64)
        .collect();
    let m = per_cell_power.iter().sum::<f64>() / per_cell_power.len() as f64;
    let var = per_cell_power.iter().map(|p| (p - m).powi(2)).sum::<f64>() / per_cell_power.len() as f64;
    Ok(NoiseFlatness {
        bins,
        per_cell_power,
        relative_spread: var.sqrt() / m,
    })
}
