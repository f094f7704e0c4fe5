//! Optimiser, training loops, sampling, rollout evaluation and run reports.

mod config;
mod eval;
mod fit;
mod optim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use eval::{
    block_seed, climatology, evaluate, noise_robustness, rollout_eval, sample_windows, spectra_csv, EvalSummary, ModeDelta,
    NoiseRobustnessReport, RolloutMode, RolloutPlan,
};
pub use fit::{
    load_mae, pretrain_mae, pretrain_mae_on, train, train_on, EpochLog, MaeBundle, MaeReport, RunReport, StepLog, TrainOutcome,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, CyclicLr};

use crate::autodiff::Tensor;
use crate::backbone::{load_checkpoint, save_checkpoint, Backbone};
use crate::error::{Error, Result};
use crate::fields::FieldSeries;
use crate::params::ParamStore;

/// Environment variable that switches on deterministic mode.
pub const DETERMINISTIC_ENV: &str = "FOURIERFLOW_DETERMINISTIC";

/// True when [`DETERMINISTIC_ENV`] is set to anything but `""`, `0` or `false`.
pub fn deterministic_from_env() -> bool {
    match std::env::var(DETERMINISTIC_ENV) {
        Ok(v) => !matches!(v.trim().to_ascii_lowercase().as_str(), "" | "0" | "false"),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Leaves wall-clock timings out of reports so that two runs of the same
    /// configuration serialise to identical bytes.
    pub deterministic: bool,
}

impl RunOptions {
    pub fn from_env() -> Self {
        Self {
            deterministic: deterministic_from_env(),
        }
    }
}

/// Per-channel affine normalisation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(series: &FieldSeries) -> Self {
        let c = series.channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for (i, &v) in series.values().iter().enumerate() {
            let v = v as f64;
            sum[i % c] += v;
            sq[i % c] += v * v;
            if i % c == 0 {
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols != self.mean.len() {
            return Err(Error::shape(format!("{} channels, normaliser has {}", t.cols, self.mean.len())));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        Ok(Tensor::from_fn(t.rows, t.cols, |r, c| (t.at(r, c) - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        Ok(Tensor::from_fn(t.rows, t.cols, |r, c| t.at(r, c) * self.std[c] + self.mean[c]))
    }
}

/// Normalised context and target halves of one training window, each
/// `[k * H * W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub context: Tensor,
    pub target: Tensor,
}

/// Frames `[start, start + k)` of sample `b` as a `[k * H * W, C]` tensor.
pub fn frames_tensor(series: &FieldSeries, b: usize, start: usize, k: usize) -> Result<Tensor> {
    let [_, t, h, w, c] = series.shape();
    if start + k > t {
        return Err(Error::shape(format!("frames {start}..{} outside a {t}-frame series", start + k)));
    }
    let plane = h * w * c;
    let all = series.sample_f64(b);
    Ok(Tensor::new(k * h * w, c, all[start * plane..(start + k) * plane].to_vec()))
}

/// Splits each window of `series` into context frames `0..k` and target
/// frames `k..2k`.
pub fn window_pairs(series: &FieldSeries, k: usize, norm: &Normalizer) -> Result<Vec<WindowPair>> {
    if series.frames() < 2 * k {
        return Err(Error::shape(format!("{}-frame windows cannot hold {k} context + {k} target frames", series.frames())));
    }
    (0..series.batch())
        .map(|b| {
            Ok(WindowPair {
                context: norm.normalize(&frames_tensor(series, b, 0, k)?)?,
                target: norm.normalize(&frames_tensor(series, b, k, k)?)?,
            })
        })
        .collect()
}

/// A trained network together with the data normalisation it expects.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub store: ParamStore,
    pub norm: Normalizer,
}

impl Model {
    pub fn save(&self, path: &Path, mut extra: serde_json::Value) -> Result<()> {
        if let Some(obj) = extra.as_object_mut() {
            obj.insert("normalizer".into(), serde_json::to_value(&self.norm)?);
        } else {
            extra = serde_json::json!({ "normalizer": self.norm });
        }
        save_checkpoint(path, &self.store, &self.backbone.cfg, extra)
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save_atomic(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let tmp = path.with_extension("fpk.tmp");
        self.save(&tmp, extra)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, cfg, extra) = load_checkpoint(path)?;
        let norm: Normalizer = match extra.get("normalizer") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Normalizer::identity(cfg.channels),
        };
        Ok((
            Self {
                backbone: Backbone::new(cfg)?,
                store,
                norm,
            },
            extra,
        ))
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `<out_dir>/<name>`, creating the directory.
pub(crate) fn out_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
