//! Dual-branch velocity network.
//!
//! Each block runs salient flow attention and Fourier mixing in parallel on
//! the time-modulated tokens, fuses them with a sigmoid gate, then applies
//! cross-attention to the encoded context window and an MLP.

mod config;
mod tokens;

use std::path::Path;
use std::sync::Arc;

pub use config::{BackboneConfig, PosEncoding, Variant};
pub use tokens::{sinusoidal_table, time_features, window_tensor, windows_to_series, Patchifier};

use crate::attention::{
    cross_attention, factorized_attention, init_attention, init_factorized, rope_width, AttentionKind, AttentionMasks, RopeTable,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fourier::{afno_filter, init_afno, per_frame, ModePlan, SpectralConfig};
use crate::params::{init, ParamStore};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-6;

/// Precomputed geometry shared by every forward pass of one configuration.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: Patchifier,
    pub masks: AttentionMasks,
    pub spectral: SpectralConfig,
    pub plan: ModePlan,
    pos: Arc<Tensor>,
    rope: Option<RopeTable>,
    ctx_rope: Option<RopeTable>,
}

/// Forward outputs: the velocity window plus internals for alignment and
/// inspection.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub velocity: Var,
    /// Token features after the tap block, `[tokens, d_model]`.
    pub tap: Var,
    /// Per-block gate columns `[tokens, 1]` (empty when the gate is bypassed).
    pub gates: Vec<Var>,
}

/// `G = sigmoid([a, b] w + bias)` broadcast over channels, fused output
/// `G a + (1 - G) b`.
pub fn fuse_gate(g: &mut Graph, store: &ParamStore, prefix: &str, a: Var, b: Var) -> (Var, Var) {
    let cat = g.concat_cols(&[a, b]);
    let logits = g.linear(store, prefix, cat);
    let gate = g.sigmoid(logits);
    let ga = g.mul_col(a, gate);
    let rest = g.one_minus(gate);
    let gb = g.mul_col(b, rest);
    (gate, g.add(ga, gb))
}

/// Combines the branch outputs as the variant prescribes: gated, summed, or
/// whichever branch exists.
pub fn fuse_branches(g: &mut Graph, store: &ParamStore, prefix: &str, variant: Variant, u_sfa: Option<Var>, u_fm: Option<Var>) -> (Option<Var>, Var) {
    match (u_sfa, u_fm) {
        (Some(a), Some(b)) if variant.has_gate() => {
            let (gate, f) = fuse_gate(g, store, prefix, a, b);
            (Some(gate), f)
        }
        (Some(a), Some(b)) => (None, g.add(a, b)),
        (Some(a), None) | (None, Some(a)) => (None, a),
        (None, None) => panic!("every variant keeps one branch"),
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.add_const(scale, 1.0);
    let y = g.mul_row(n, s);
    g.add_row(y, shift)
}

fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let h = g.linear(store, &format!("{prefix}.mlp1"), x);
    let h = g.gelu(h);
    g.linear(store, &format!("{prefix}.mlp2"), h)
}

fn insert_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), init::xavier(rng, fan_in, fan_out));
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

fn insert_zero_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let patch = Patchifier::new(&cfg)?;
        let layout = cfg.layout();
        let masks = AttentionMasks::new(layout, cfg.kappa)?;
        let spectral = cfg.spectral();
        let plan = ModePlan::new(spectral.h, spectral.w, spectral.mode_cap, cfg.d_model)?;
        let (pos, rope, ctx_rope) = match cfg.pos_encoding {
            PosEncoding::Absolute => (sinusoidal_table(layout, cfg.d_model), None, None),
            PosEncoding::Rotary => (
                Tensor::zeros(layout.tokens(), cfg.d_model),
                Some(RopeTable::new(layout, rope_width(cfg.d_model, cfg.heads, cfg.attention_kind()))?),
                Some(RopeTable::new(layout, rope_width(cfg.d_model, cfg.heads, AttentionKind::Standard))?),
            ),
        };
        Ok(Self {
            cfg,
            patch,
            masks,
            spectral,
            plan,
            pos: Arc::new(pos),
            rope,
            ctx_rope,
        })
    }

    /// Fresh parameters for this configuration.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore> {
        let c = &self.cfg;
        let (d, pd) = (c.d_model, c.patch_dim());
        let hidden = c.mlp_ratio * d;
        let mut s = ParamStore::new();
        insert_linear(&mut s, rng, "embed", pd, d);
        if c.variant.is_generative() {
            insert_linear(&mut s, rng, "temb.1", d, d);
            insert_linear(&mut s, rng, "temb.2", d, d);
            insert_linear(&mut s, rng, "ctx.embed", pd, d);
            for i in 0..c.context_depth {
                let p = format!("ctx.blocks.{i}");
                init_factorized(&mut s, &format!("{p}.attn"), d, c.heads, AttentionKind::Standard, rng);
                insert_linear(&mut s, rng, &format!("{p}.mlp1"), d, hidden);
                insert_linear(&mut s, rng, &format!("{p}.mlp2"), hidden, d);
            }
            insert_linear(&mut s, rng, "ctx_in", d, d);
        }
        for l in 0..c.depth {
            let p = format!("blocks.{l}");
            if c.variant.has_sfa() {
                init_factorized(&mut s, &format!("{p}.sfa"), d, c.heads, c.attention_kind(), rng);
            }
            if c.variant.has_fm() {
                init_afno(&mut s, &format!("{p}.fm"), d, &self.spectral, rng)?;
            }
            if c.variant.has_gate() {
                // sigmoid(0) = 1/2: both branches start equally weighted
                insert_zero_linear(&mut s, &format!("{p}.gate"), 2 * d, 1);
            }
            if c.variant.is_generative() {
                init_attention(&mut s, &format!("{p}.cross"), d, c.heads, AttentionKind::Standard, rng);
                insert_zero_linear(&mut s, &format!("{p}.ada"), d, 4 * d);
            }
            insert_linear(&mut s, rng, &format!("{p}.mlp1"), d, hidden);
            insert_linear(&mut s, rng, &format!("{p}.mlp2"), hidden, d);
        }
        if c.variant.is_generative() {
            insert_zero_linear(&mut s, "final.ada", d, 2 * d);
        }
        insert_linear(&mut s, rng, "head", d, pd);
        Ok(s)
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, prefix: &str, window: Var) -> Var {
        let tok = self.patch.patchify(g, window);
        let e = g.linear(store, prefix, tok);
        if self.cfg.pos_encoding == PosEncoding::Absolute {
            let pe = g.constant((*self.pos).clone());
            g.add(e, pe)
        } else {
            e
        }
    }

    /// Encoded context tokens `[tokens, d_model]`.
    pub fn encode_context(&self, g: &mut Graph, store: &ParamStore, ctx: Var) -> Result<Var> {
        let mut x = self.embed(g, store, "ctx.embed", ctx);
        for i in 0..self.cfg.context_depth {
            let p = format!("ctx.blocks.{i}");
            let n = g.layer_norm(x, LN_EPS);
            let a = factorized_attention(
                g,
                store,
                &format!("{p}.attn"),
                n,
                AttentionKind::Standard,
                self.cfg.heads,
                &self.masks,
                self.ctx_rope.as_ref(),
            )?;
            x = g.add(x, a);
            let n = g.layer_norm(x, LN_EPS);
            let m = mlp(g, store, &p, n);
            x = g.add(x, m);
        }
        Ok(x)
    }

    fn time_embedding(&self, g: &mut Graph, store: &ParamStore, t: f64) -> Var {
        let f = g.constant(time_features(t, self.cfg.d_model));
        let h = g.linear(store, "temb.1", f);
        let h = g.silu(h);
        g.linear(store, "temb.2", h)
    }

    /// Velocity for the noised window `x` (`[frames * H * W, C]`) at time
    /// `t` given the context window. The surrogate variant ignores `t` and
    /// expects `x` to be the context window itself, with `ctx = None`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, t: f64, ctx: Option<Var>) -> Result<ForwardOutput> {
        let c = &self.cfg;
        let rows = c.window_rows();
        if g.shape(x) != (rows, c.channels) {
            return Err(Error::shape(format!(
                "window tensor {:?} does not match ({rows}, {})",
                g.shape(x),
                c.channels
            )));
        }
        let d = c.d_model;
        let generative = c.variant.is_generative();
        let mut h = self.embed(g, store, "embed", x);
        let (cond, ctx_tokens) = if generative {
            let ctx = ctx.ok_or_else(|| Error::arg("generative forward needs a context window"))?;
            if g.shape(ctx) != (rows, c.channels) {
                return Err(Error::shape(format!("context tensor {:?} does not match ({rows}, {})", g.shape(ctx), c.channels)));
            }
            let enc = self.encode_context(g, store, ctx)?;
            let inj = g.linear(store, "ctx_in", enc);
            h = g.add(h, inj);
            let temb = self.time_embedding(g, store, t);
            (Some(g.silu(temb)), Some(enc))
        } else {
            (None, None)
        };

        let mut tap = None;
        let mut gates = Vec::new();
        for l in 0..c.depth {
            let p = format!("blocks.{l}");
            let ada = cond.map(|cv| g.linear(store, &format!("{p}.ada"), cv));
            let chunk = |g: &mut Graph, i: usize| ada.map(|a| g.select_cols(a, i * d, (i + 1) * d));
            let (sh1, sc1, sh2, sc2) = (chunk(g, 0), chunk(g, 1), chunk(g, 2), chunk(g, 3));
            let n = match (sh1, sc1) {
                (Some(sh), Some(sc)) => modulate(g, h, sh, sc),
                _ => g.layer_norm(h, LN_EPS),
            };
            let u_sfa = if c.variant.has_sfa() {
                Some(factorized_attention(
                    g,
                    store,
                    &format!("{p}.sfa"),
                    n,
                    c.attention_kind(),
                    c.heads,
                    &self.masks,
                    self.rope.as_ref(),
                )?)
            } else {
                None
            };
            let u_fm = if c.variant.has_fm() {
                let prefix = format!("{p}.fm");
                Some(per_frame(g, n, self.patch.layout.frames, |g, xf| {
                    afno_filter(g, store, &prefix, xf, &self.spectral, &self.plan)
                }))
            } else {
                None
            };
            let (gate, fused) = fuse_branches(g, store, &format!("{p}.gate"), c.variant, u_sfa, u_fm);
            gates.extend(gate);
            h = g.add(h, fused);
            if let Some(enc) = ctx_tokens {
                let n = g.layer_norm(h, LN_EPS);
                let ca = cross_attention(g, store, &format!("{p}.cross"), n, enc, c.heads)?;
                h = g.add(h, ca);
            }
            let n = match (sh2, sc2) {
                (Some(sh), Some(sc)) => modulate(g, h, sh, sc),
                _ => g.layer_norm(h, LN_EPS),
            };
            let m = mlp(g, store, &p, n);
            h = g.add(h, m);
            if l == c.tap_layer {
                tap = Some(h);
            }
        }
        let n = match cond {
            Some(cv) => {
                let a = g.linear(store, "final.ada", cv);
                let sh = g.select_cols(a, 0, d);
                let sc = g.select_cols(a, d, 2 * d);
                modulate(g, h, sh, sc)
            }
            None => g.layer_norm(h, LN_EPS),
        };
        let out = g.linear(store, "head", n);
        let velocity = self.patch.unpatchify(g, out);
        Ok(ForwardOutput {
            velocity,
            tap: tap.expect("tap layer below depth"),
            gates,
        })
    }

    /// Forward pass on plain tensors; returns the output window.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, t: f64, ctx: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = ctx.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, store, xv, t, cv)?;
        Ok(g.value(out.velocity).clone())
    }
}

/// Saves parameters with the configuration in the checkpoint manifest.
pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &BackboneConfig, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "backbone": cfg, "extra": extra });
    store.save(path, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BackboneConfig, serde_json::Value)> {
    let (store, meta) = ParamStore::load(path)?;
    let cfg: BackboneConfig = serde_json::from_value(meta.get("backbone").cloned().unwrap_or_default())
        .map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
    let extra = meta.get("extra").cloned().unwrap_or_default();
    Ok((store, cfg, extra))
}

#[cfg(test)]
mod tests;
