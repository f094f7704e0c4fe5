use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamWConfig, CyclicLr};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::interpolant::Schedule;
use crate::mae::MaeConfig;
use crate::shearflow::DatasetConfig;

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    /// MAE architecture for `pretrain-mae`; geometry is taken from the backbone.
    pub mae: MaeConfig,
    /// Generator settings used by `gen-data`.
    pub dataset: DatasetConfig,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub lr: CyclicLr,
    pub batch_size: usize,
    pub epochs: usize,
    pub mae_epochs: usize,
    /// Weight of the alignment term.
    pub gamma: f64,
    pub data_dir: PathBuf,
    pub mae_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Heun steps used when sampling for evaluation.
    pub sample_steps: usize,
    /// Std of Gaussian noise added to the (normalised) context inputs of
    /// training windows.
    pub input_noise: f64,
    /// Cap on the number of test windows used for the final evaluation.
    pub eval_windows: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            mae: MaeConfig::from_backbone(&backbone),
            backbone,
            dataset: DatasetConfig::default(),
            schedule: Schedule::Linear,
            optimizer: AdamWConfig::default(),
            lr: CyclicLr::default(),
            batch_size: 16,
            epochs: 20,
            mae_epochs: 10,
            gamma: crate::mae::DEFAULT_GAMMA,
            data_dir: PathBuf::from("data"),
            mae_checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            sample_steps: 16,
            input_noise: 0.0,
            eval_windows: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Alignment is active only for generative variants with `gamma > 0`.
    pub fn uses_alignment(&self) -> bool {
        self.gamma > 0.0 && self.backbone.variant.is_generative()
    }

    /// MAE geometry forced to match the backbone.
    pub fn mae_config(&self) -> MaeConfig {
        let geo = MaeConfig::from_backbone(&self.backbone);
        MaeConfig {
            frames: geo.frames,
            height: geo.height,
            width: geo.width,
            channels: geo.channels,
            patch_h: geo.patch_h,
            patch_w: geo.patch_w,
            stride: geo.stride,
            ..self.mae
        }
    }

    /// Structural checks only; see [`ExperimentConfig::check_files`].
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.lr.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be a non-negative number, got {}", self.gamma));
        }
        if !(self.input_noise >= 0.0 && self.input_noise.is_finite()) {
            return bad(format!("input noise must be non-negative, got {}", self.input_noise));
        }
        let o = self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad(format!("bad optimizer settings {o:?}"));
        }
        Ok(())
    }

    /// Referenced inputs exist.
    pub fn check_files(&self) -> Result<()> {
        if !self.data_dir.join("manifest.json").is_file() {
            return Err(Error::Config(format!("no dataset at {}", self.data_dir.display())));
        }
        if self.uses_alignment() {
            match &self.mae_checkpoint {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::Config(format!("MAE checkpoint {} not found", p.display()))),
                None => return Err(Error::Config("gamma > 0 needs an MAE checkpoint".into())),
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output directory
    /// does not affect results and is left out.
    pub fn hash(&self) -> String {
        let keyed = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&keyed).expect("config serialises");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
