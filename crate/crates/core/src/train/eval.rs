use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{train, RunReport};
use super::{frames_tensor, out_path, write_json, ExperimentConfig, Model, RunOptions};
use crate::autodiff::Tensor;
use crate::backbone::Variant;
use crate::error::{Error, Result};
use crate::fields::{compute_metrics, mean_profile, residual_spectrum, FieldSeries, MetricReport, SpectrumProfile};
use crate::interpolant::{draw_noise, ode_integrate, OdeIntegrator};
use crate::rng;

/// Per-pixel mean of the target frames `k..2k` over all training windows,
/// as a `(1, k, H, W, C)` series.
pub fn climatology(train: &FieldSeries, k: usize) -> Result<FieldSeries> {
    let [b, t, h, w, c] = train.shape();
    if t < 2 * k || b == 0 {
        return Err(Error::shape(format!("cannot take a {k}-frame climatology of {:?}", train.shape())));
    }
    let mut acc = vec![0.0; k * h * w * c];
    for s in 0..b {
        let frames = frames_tensor(train, s, k, k)?;
        acc.iter_mut().zip(&frames.data).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= b as f64);
    FieldSeries::from_f64([1, k, h, w, c], &acc, train.dx, train.dy, train.dt)
}

fn repeat(series: &FieldSeries, n: usize) -> Result<FieldSeries> {
    FieldSeries::concat(&vec![series.clone(); n])
}

/// Generates one target window per context window `(B, k, H, W, C)`.
///
/// Generative variants integrate the probability-flow ODE from Gaussian
/// noise (drawn from `seed`, window by window) with `steps` Heun steps; the
/// surrogate predicts directly and ignores the noise.
pub fn sample_windows(model: &Model, contexts: &FieldSeries, steps: usize, seed: u64) -> Result<FieldSeries> {
    let c = &model.backbone.cfg;
    let [b, t, h, w, ch] = contexts.shape();
    if (t, h, w, ch) != (c.frames, c.height, c.width, c.channels) {
        return Err(Error::shape(format!(
            "context windows {:?} do not match the trained geometry ({}, {}, {}, {})",
            contexts.shape(),
            c.frames,
            c.height,
            c.width,
            c.channels
        )));
    }
    let ctxs = (0..b)
        .map(|i| model.norm.normalize(&frames_tensor(contexts, i, 0, t)?))
        .collect::<Result<Vec<_>>>()?;
    let mut noise_rng = rng::stream(seed, "sample-noise");
    let noise: Vec<Tensor> = ctxs.iter().map(|x| draw_noise(&mut noise_rng, x)).collect();
    let generative = c.variant.is_generative();
    let outs = ctxs
        .par_iter()
        .zip(noise.par_iter())
        .map(|(ctx, eps)| {
            let out = if generative {
                let field = |x: &[f64], tt: f64| {
                    let xt = Tensor::new(eps.rows, eps.cols, x.to_vec());
                    Ok(model.backbone.predict(&model.store, &xt, tt, Some(ctx))?.data)
                };
                Tensor::new(eps.rows, eps.cols, ode_integrate(&field, &eps.data, steps, OdeIntegrator::Heun)?)
            } else {
                model.backbone.predict(&model.store, ctx, 0.0, None)?
            };
            model.norm.denormalize(&out)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = outs.iter().flat_map(|o| o.data.iter().copied()).collect();
    FieldSeries::from_f64([b, t, h, w, ch], &data, contexts.dx, contexts.dy, contexts.dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub windows: usize,
    pub model: MetricReport,
    pub climatology: MetricReport,
    /// Mean residual spectrum of the model over windows, frames and channels.
    pub residual_spectrum: SpectrumProfile,
    pub climatology_spectrum: SpectrumProfile,
    /// Residual energy in the top third of wavenumber bins.
    pub high_band_energy: f64,
}

impl EvalSummary {
    pub fn beats_climatology(&self) -> bool {
        self.model.nrmse_or_nan() < self.climatology.nrmse_or_nan()
    }
}

/// Samples every test window (or the first `limit`) from its context half
/// and scores the target half against the model and the climatology.
pub fn evaluate(model: &Model, test: &FieldSeries, clim: &FieldSeries, steps: usize, seed: u64, limit: Option<usize>) -> Result<EvalSummary> {
    let k = model.backbone.cfg.frames;
    let n = limit.map_or(test.batch(), |l| l.min(test.batch()));
    let ids: Vec<usize> = (0..n).collect();
    let test = test.select(&ids)?;
    let ctx = test.frame_range(0, k)?;
    let truth = test.frame_range(k, 2 * k)?;
    let pred = sample_windows(model, &ctx, steps, seed)?;
    let clim = repeat(clim, n)?;
    let spec = residual_spectrum(&pred, &truth)?;
    let residual = mean_profile(spec.iter().map(|r| &r.profile))?;
    let cspec = residual_spectrum(&clim, &truth)?;
    let summary = EvalSummary {
        windows: n,
        model: compute_metrics(&pred, &truth)?,
        climatology: compute_metrics(&clim, &truth)?,
        high_band_energy: residual.high_band_energy(),
        residual_spectrum: residual,
        climatology_spectrum: mean_profile(cspec.iter().map(|r| &r.profile))?,
    };
    info!(
        "eval on {n} windows: nRMSE {:.4} (climatology {:.4})",
        summary.model.nrmse_or_nan(),
        summary.climatology.nrmse_or_nan()
    );
    Ok(summary)
}

/// `wavenumber,mean_log_residual_energy,variant` rows, one block per entry.
/// The log is taken of the bin-wise mean energy (with the spectrum floor).
pub fn spectra_csv(entries: &[(String, SpectrumProfile)]) -> String {
    let mut out = String::from("wavenumber,mean_log_residual_energy,variant\n");
    for (tag, p) in entries {
        for (k, l) in p.log_energy.iter().enumerate() {
            out.push_str(&format!("{k},{l:.12e},{tag}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Generative,
    Surrogate,
}

impl RolloutMode {
    pub fn for_variant(v: Variant) -> Self {
        if v.is_generative() {
            Self::Generative
        } else {
            Self::Surrogate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    /// Frames per block; must equal the model window.
    pub context: usize,
    /// Number of chained blocks.
    pub horizon: usize,
    pub mode: RolloutMode,
}

impl RolloutPlan {
    pub fn new(horizon: usize, mode: RolloutMode) -> Self {
        Self { context: 4, horizon, mode }
    }
}

/// Noise seed of rollout block `j`.
pub fn block_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, &format!("rollout-block-{j}"))
}

/// Chained prediction over full trajectories `(B, frames, H, W, C)`: frames
/// `0..k` seed the rollout, every later context is the previous output, and
/// block `j` is scored against frames `k (j + 1) .. k (j + 2)`.
pub fn rollout_eval(model: &Model, plan: RolloutPlan, trajectories: &FieldSeries, steps: usize, seed: u64) -> Result<Vec<MetricReport>> {
    let k = model.backbone.cfg.frames;
    if plan.context != k {
        return Err(Error::arg(format!("rollout context {} differs from the model window {k}", plan.context)));
    }
    if plan.horizon == 0 {
        return Err(Error::arg("rollout horizon must be at least 1"));
    }
    if plan.mode != RolloutMode::for_variant(model.backbone.cfg.variant) {
        return Err(Error::arg(format!("{:?} rollout requested for a {} model", plan.mode, model.backbone.cfg.variant.tag())));
    }
    let need = k * (plan.horizon + 1);
    if trajectories.frames() < need {
        return Err(Error::arg(format!(
            "horizon {} needs {need} ground-truth frames, trajectories have {}",
            plan.horizon,
            trajectories.frames()
        )));
    }
    let mut ctx = trajectories.frame_range(0, k)?;
    let mut reports = Vec::with_capacity(plan.horizon);
    for j in 0..plan.horizon {
        let pred = sample_windows(model, &ctx, steps, block_seed(seed, j))?;
        let truth = trajectories.frame_range(k * (j + 1), k * (j + 2))?;
        let m = compute_metrics(&pred, &truth)?;
        info!("rollout block {j}: nRMSE {:.4}", m.nrmse_or_nan());
        reports.push(m);
        ctx = pred;
    }
    Ok(reports)
}

/// `noisy - clean` for one mode and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    pub mode: RolloutMode,
    pub metric: String,
    pub clean: f64,
    pub noisy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustnessReport {
    pub delta_sigma: f64,
    pub generative: [RunReport; 2],
    pub surrogate: [RunReport; 2],
    pub deltas: Vec<ModeDelta>,
    /// Observation only: the generative nRMSE grew by no more than the
    /// surrogate's.
    pub generative_less_affected: Option<bool>,
}

fn metric_deltas(mode: RolloutMode, clean: &RunReport, noisy: &RunReport) -> Vec<ModeDelta> {
    let (Some(c), Some(n)) = (&clean.eval, &noisy.eval) else {
        return Vec::new();
    };
    [
        ("mse", c.model.mse, n.model.mse),
        ("nrmse", c.model.nrmse_or_nan(), n.model.nrmse_or_nan()),
        ("max_err", c.model.max_err, n.model.max_err),
    ]
    .into_iter()
    .map(|(m, clean, noisy)| ModeDelta {
        mode,
        metric: m.to_string(),
        clean,
        noisy,
        delta: noisy - clean,
    })
    .collect()
}

/// Trains clean and noise-injected twins of the configured generative model
/// and of the surrogate, under `<out_dir>/{generative,surrogate}_{clean,noisy}`.
pub fn noise_robustness(cfg: &ExperimentConfig, delta_sigma: f64, opts: RunOptions) -> Result<NoiseRobustnessReport> {
    if !(delta_sigma >= 0.0 && delta_sigma.is_finite()) {
        return Err(Error::arg(format!("noise level {delta_sigma} must be non-negative")));
    }
    let gen_variant = if cfg.backbone.variant.is_generative() {
        cfg.backbone.variant
    } else {
        Variant::Full
    };
    let run = |variant: Variant, tag: &str, noise: f64| {
        let mut c = cfg.clone();
        c.backbone.variant = variant;
        c.input_noise = noise;
        c.out_dir = cfg.out_dir.join(tag);
        train(&c, opts).map(|o| o.report)
    };
    let generative = [run(gen_variant, "generative_clean", 0.0)?, run(gen_variant, "generative_noisy", delta_sigma)?];
    let surrogate = [
        run(Variant::Surrogate, "surrogate_clean", 0.0)?,
        run(Variant::Surrogate, "surrogate_noisy", delta_sigma)?,
    ];
    let mut deltas = metric_deltas(RolloutMode::Generative, &generative[0], &generative[1]);
    deltas.extend(metric_deltas(RolloutMode::Surrogate, &surrogate[0], &surrogate[1]));
    let nrmse_delta = |m: RolloutMode| deltas.iter().find(|d| d.mode == m && d.metric == "nrmse").map(|d| d.delta);
    let generative_less_affected = match (nrmse_delta(RolloutMode::Generative), nrmse_delta(RolloutMode::Surrogate)) {
        (Some(g), Some(s)) => Some(g <= s),
        _ => None,
    };
    let report = NoiseRobustnessReport {
        delta_sigma,
        generative,
        surrogate,
        deltas,
        generative_less_affected,
    };
    write_json(&out_path(&cfg.out_dir, "noise_robustness.json")?, &report)?;
    Ok(report)
}
