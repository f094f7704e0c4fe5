use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, TokenLayout};
use crate::error::{Error, Result};
use crate::fourier::SpectralConfig;

/// Positional encoding added to (or rotated into) the tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    #[default]
    Absolute,
    Rotary,
}

/// Ablation toggles of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// SFA branch only; the gate is pinned at 1.
    NoFm,
    /// Fourier filters without the frequency weighting.
    NoFreqWeight,
    /// Fusion by plain addition.
    VanillaFusion,
    /// Standard self-attention in place of SFA.
    StandardAttention,
    /// Fourier branch only.
    NoSfa,
    /// Direct prediction from the context window: no time input, no noise,
    /// no cross-attention.
    Surrogate,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoFm,
        Variant::NoFreqWeight,
        Variant::VanillaFusion,
        Variant::StandardAttention,
        Variant::NoSfa,
        Variant::Surrogate,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFm => "no_fm",
            Variant::NoFreqWeight => "no_freq_weight",
            Variant::VanillaFusion => "vanilla_fusion",
            Variant::StandardAttention => "standard_attention",
            Variant::NoSfa => "no_sfa",
            Variant::Surrogate => "surrogate",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown variant {tag:?}")))
    }

    pub fn has_sfa(self) -> bool {
        self != Variant::NoSfa
    }

    pub fn has_fm(self) -> bool {
        self != Variant::NoFm
    }

    pub fn has_gate(self) -> bool {
        self.has_sfa() && self.has_fm() && self != Variant::VanillaFusion
    }

    pub fn is_generative(self) -> bool {
        self != Variant::Surrogate
    }
}

/// Geometry and width of the velocity network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Frames generated per window.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Context window length; must equal `frames`.
    pub context: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Temporal patch extent.
    pub stride: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub kappa: usize,
    pub mode_cap: usize,
    pub n_blocks: usize,
    pub lambda_shrink: f64,
    pub context_depth: usize,
    pub tap_layer: usize,
    pub pos_encoding: PosEncoding,
    pub variant: Variant,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 64,
            width: 64,
            channels: 2,
            context: 4,
            patch_h: 16,
            patch_w: 16,
            stride: 1,
            d_model: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            kappa: 4,
            mode_cap: 3,
            n_blocks: 8,
            lambda_shrink: 0.01,
            context_depth: 2,
            tap_layer: 2,
            pos_encoding: PosEncoding::Absolute,
            variant: Variant::Full,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_h == 0 || self.patch_w == 0 || self.stride == 0 {
            return bad("patch extents must be positive".into());
        }
        if self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return bad(format!(
                "{}x{} grid not divisible by {}x{} patches",
                self.height, self.width, self.patch_h, self.patch_w
            ));
        }
        if self.frames % self.stride != 0 {
            return bad(format!("{} frames not divisible by stride {}", self.frames, self.stride));
        }
        if self.context != self.frames {
            return bad(format!("context length {} must equal the window {}", self.context, self.frames));
        }
        if self.channels == 0 || self.depth == 0 || self.d_model == 0 {
            return bad("channels, depth and d_model must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if (self.d_model / self.heads) % 4 != 0 {
            // split heads and rotary pairs both need even halves
            return bad("head width must be a multiple of 4".into());
        }
        if self.d_model % 8 != 0 {
            // sin/cos pairs over the three positional axes
            return bad("d_model must be a multiple of 8".into());
        }
        if self.n_blocks == 0 || self.d_model % self.n_blocks != 0 {
            return bad(format!("d_model {} not divisible into {} blocks", self.d_model, self.n_blocks));
        }
        if self.tap_layer >= self.depth {
            return bad(format!("tap layer {} outside depth {}", self.tap_layer, self.depth));
        }
        let per_frame = self.layout().per_frame();
        if self.kappa == 0 || self.kappa > per_frame {
            return bad(format!("kappa {} outside 1..={per_frame}", self.kappa));
        }
        if self.mode_cap == 0 {
            return bad("mode_cap must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.frames / self.stride, self.height / self.patch_h, self.width / self.patch_w)
    }

    pub fn tokens(&self) -> usize {
        self.layout().tokens()
    }

    /// Values per token before embedding.
    pub fn patch_dim(&self) -> usize {
        self.stride * self.patch_h * self.patch_w * self.channels
    }

    /// Rows of a window tensor `[frames * height * width, channels]`.
    pub fn window_rows(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn attention_kind(&self) -> AttentionKind {
        match self.variant {
            Variant::StandardAttention => AttentionKind::Standard,
            _ => AttentionKind::Salient,
        }
    }

    pub fn spectral(&self) -> SpectralConfig {
        let l = self.layout();
        SpectralConfig {
            h: l.rows,
            w: l.cols,
            mode_cap: self.mode_cap,
            n_blocks: self.n_blocks,
            lambda_shrink: self.lambda_shrink,
            freq_weighting: self.variant != Variant::NoFreqWeight,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Every ablation of this configuration, base first.
    pub fn ablations(&self) -> Vec<BackboneConfig> {
        Variant::ALL.iter().map(|&v| self.with_variant(v)).collect()
    }
}
