//! Masked-autoencoder surrogate and representation alignment.
//!
//! The MAE tokenizes windows exactly like the velocity network, so its
//! encoder features line up token-for-token with the backbone tap.

use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention, multihead_attention, AttentionKind, AttentionMasks, AttentionSpec, TokenLayout};
use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::{sinusoidal_table, BackboneConfig, Patchifier};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore};
use crate::rng::{self, Rng};

pub const DEFAULT_MASK_RATIO: f64 = 0.75;
pub const DEFAULT_GAMMA: f64 = 0.01;
const LN_EPS: f64 = 1e-6;

/// Tokens hidden from the encoder for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratio_permille: u32,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn tokens(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// Every token visible.
    pub fn none(n: usize) -> Self {
        Self {
            ratio_permille: 0,
            masked: Vec::new(),
            visible: (0..n).collect(),
            seed: 0,
        }
    }
}

/// Masks `round(ratio * n)` tokens drawn uniformly without replacement.
pub fn random_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = (ratio * n as f64).round() as usize;
    let mut r = rng::stream(seed, "mask");
    let mut masked = sample(&mut r, n, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        ratio_permille: (ratio * 1000.0).round() as u32,
        masked,
        visible,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Encoder block whose output serves as the alignment target.
    pub feature_layer: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::from_backbone(&BackboneConfig::default())
    }
}

impl MaeConfig {
    /// Same tubelet geometry as `cfg`.
    pub fn from_backbone(cfg: &BackboneConfig) -> Self {
        Self {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
            patch_h: cfg.patch_h,
            patch_w: cfg.patch_w,
            stride: cfg.stride,
            d_model: 64,
            depth: 2,
            heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            mlp_ratio: 2,
            mask_ratio: DEFAULT_MASK_RATIO,
            feature_layer: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (d, h) in [(self.d_model, self.heads), (self.decoder_dim, self.heads)] {
            if d == 0 || h == 0 || d % h != 0 || d % 8 != 0 {
                return bad("MAE widths must be multiples of 8 and divisible by the head count");
            }
        }
        if self.depth == 0 || self.feature_layer >= self.depth {
            return bad("MAE feature layer must lie inside the encoder");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask ratio must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn same_geometry(&self, cfg: &BackboneConfig) -> bool {
        (self.frames, self.height, self.width, self.channels, self.patch_h, self.patch_w, self.stride)
            == (cfg.frames, cfg.height, cfg.width, cfg.channels, cfg.patch_h, cfg.patch_w, cfg.stride)
    }
}

/// Geometry and fixed tables of one MAE configuration.
#[derive(Debug, Clone)]
pub struct Mae {
    pub cfg: MaeConfig,
    pub patch: Patchifier,
    masks: AttentionMasks,
    enc_pos: Arc<Tensor>,
    dec_pos: Arc<Tensor>,
}

/// Masked-region reconstruction result.
#[derive(Debug, Clone, Copy)]
pub struct MaeOutput {
    /// Predicted token values `[tokens, patch_dim]`.
    pub reconstruction: Var,
    pub loss: Var,
}

fn submask(full: &[bool], n: usize, keep: &[usize]) -> Vec<bool> {
    keep.iter().flat_map(|&i| keep.iter().map(move |&j| full[i * n + j])).collect()
}

/// `sum over masked tokens of |pred - target|^2 / (|masked| * patch_dim)`;
/// zero (with a warning) when nothing is masked.
pub fn masked_mse(g: &mut Graph, pred: Var, target: Var, masked: &[usize]) -> Var {
    if masked.is_empty() {
        log::warn!("masked reconstruction loss over an empty mask is defined as 0");
        return g.constant(Tensor::scalar(0.0));
    }
    let p = g.select_rows(pred, masked);
    let t = g.select_rows(target, masked);
    g.mse(p, t)
}

impl Mae {
    pub fn new(cfg: MaeConfig) -> Result<Self> {
        cfg.validate()?;
        let patch = Patchifier::from_parts(cfg.frames, cfg.height, cfg.width, cfg.channels, (cfg.patch_h, cfg.patch_w, cfg.stride))?;
        let layout: TokenLayout = patch.layout;
        let masks = AttentionMasks::new(layout, 1)?;
        Ok(Self {
            cfg,
            masks,
            enc_pos: Arc::new(sinusoidal_table(layout, cfg.d_model)),
            dec_pos: Arc::new(sinusoidal_table(layout, cfg.decoder_dim)),
            patch,
        })
    }

    pub fn tokens(&self) -> usize {
        self.patch.layout.tokens()
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let c = &self.cfg;
        let mut s = ParamStore::new();
        let lin = |s: &mut ParamStore, rng: &mut Rng, n: &str, i: usize, o: usize| {
            s.insert(format!("{n}.w"), init::xavier(rng, i, o));
            s.insert(format!("{n}.b"), Tensor::zeros(1, o));
        };
        let pd = self.patch.patch_dim;
        lin(&mut s, rng, "enc.embed", pd, c.d_model);
        for (part, d, depth) in [("enc", c.d_model, c.depth), ("dec", c.decoder_dim, c.decoder_depth)] {
            for l in 0..depth {
                let p = format!("{part}.blocks.{l}");
                init_attention(&mut s, &format!("{p}.spatial"), d, c.heads, AttentionKind::Standard, rng);
                init_attention(&mut s, &format!("{p}.temporal"), d, c.heads, AttentionKind::Standard, rng);
                lin(&mut s, rng, &format!("{p}.mlp1"), d, c.mlp_ratio * d);
                lin(&mut s, rng, &format!("{p}.mlp2"), c.mlp_ratio * d, d);
            }
        }
        lin(&mut s, rng, "dec.embed", c.d_model, c.decoder_dim);
        s.insert("dec.mask_token", init::normal(rng, 1, c.decoder_dim, 0.02));
        lin(&mut s, rng, "dec.head", c.decoder_dim, pd);
        s
    }

    /// Factorized spatial-then-temporal block over the tokens listed in
    /// `keep` (in order).
    fn block(&self, g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, keep: &[usize]) -> Result<Var> {
        let n = self.tokens();
        let all = keep.len() == n;
        let spatial_sub;
        let temporal_sub;
        let (spatial, temporal): (&[bool], &[bool]) = if all {
            (&self.masks.spatial, &self.masks.temporal)
        } else {
            spatial_sub = submask(&self.masks.spatial, n, keep);
            temporal_sub = submask(&self.masks.temporal, n, keep);
            (&spatial_sub, &temporal_sub)
        };
        let spec = |mask| AttentionSpec {
            kind: AttentionKind::Standard,
            heads: self.cfg.heads,
            mask: Some(mask),
            background: None,
            rope: None,
        };
        let h = g.layer_norm(x, LN_EPS);
        let y = multihead_attention(g, store, &format!("{prefix}.spatial"), h, &spec(spatial))?;
        let z = multihead_attention(g, store, &format!("{prefix}.temporal"), y, &spec(temporal))?;
        let a = g.add(y, z);
        let x = g.add(x, a);
        let h = g.layer_norm(x, LN_EPS);
        let h = g.linear(store, &format!("{prefix}.mlp1"), h);
        let h = g.gelu(h);
        let h = g.linear(store, &format!("{prefix}.mlp2"), h);
        Ok(g.add(x, h))
    }

    /// Encoder over the `keep` tokens; returns every layer's output.
    fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var, keep: &[usize]) -> Result<Vec<Var>> {
        let vis = g.select_rows(tokens, keep);
        let e = g.linear(store, "enc.embed", vis);
        let pos = Tensor::from_fn(keep.len(), self.cfg.d_model, |r, c| self.enc_pos.at(keep[r], c));
        let pos = g.constant(pos);
        let mut x = g.add(e, pos);
        let mut layers = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            x = self.block(g, store, &format!("enc.blocks.{l}"), x, keep)?;
            layers.push(x);
        }
        Ok(layers)
    }

    /// Reconstructs `window` from its visible tokens and scores the masked
    /// tokens against `target` (both `[frames * H * W, C]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: Var, target: Var, plan: &MaskPlan) -> Result<MaeOutput> {
        let n = self.tokens();
        if plan.tokens() != n {
            return Err(Error::shape(format!("mask plan covers {} tokens, model has {n}", plan.tokens())));
        }
        if plan.visible.is_empty() {
            return Err(Error::arg("mask plan leaves no visible token"));
        }
        let tokens = self.patch.patchify(g, window);
        let enc = *self.encode(g, store, tokens, &plan.visible)?.last().unwrap();
        let dec_vis = g.linear(store, "dec.embed", enc);
        // visible rows first, then one mask token per masked position,
        // permuted back into token order
        let full = if plan.masked.is_empty() {
            dec_vis
        } else {
            let mt = g.param(store, "dec.mask_token");
            let reps = g.select_rows(mt, &vec![0; plan.masked.len()]);
            let stacked = g.concat_rows(&[dec_vis, reps]);
            let mut order = vec![0; n];
            for (slot, &tok) in plan.visible.iter().chain(&plan.masked).enumerate() {
                order[tok] = slot;
            }
            g.select_rows(stacked, &order)
        };
        let pos = g.constant((*self.dec_pos).clone());
        let mut x = g.add(full, pos);
        let every: Vec<usize> = (0..n).collect();
        for l in 0..self.cfg.decoder_depth {
            x = self.block(g, store, &format!("dec.blocks.{l}"), x, &every)?;
        }
        let x = g.layer_norm(x, LN_EPS);
        let reconstruction = g.linear(store, "dec.head", x);
        let target_tokens = self.patch.patchify(g, target);
        let loss = masked_mse(g, reconstruction, target_tokens, &plan.masked);
        Ok(MaeOutput { reconstruction, loss })
    }

    /// Masked reconstruction loss and its parameter gradients for one window.
    pub fn loss_and_grads(&self, store: &ParamStore, window: &Tensor, plan: &MaskPlan) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(window.clone());
        let out = self.forward(&mut g, store, x, x, plan)?;
        let loss = g.item(out.loss);
        Ok((loss, g.backward(out.loss).into_param_grads(store)))
    }

    /// Encoder features of the unmasked window at the configured layer,
    /// `[tokens, d_model]`. Computed outside any caller graph, so no
    /// gradient can reach the MAE parameters.
    pub fn extract_features(&self, store: &ParamStore, window: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(window.clone());
        let tokens = self.patch.patchify(&mut g, x);
        let every: Vec<usize> = (0..self.tokens()).collect();
        let layers = self.encode(&mut g, store, tokens, &every)?;
        Ok(g.value(layers[self.cfg.feature_layer]).clone())
    }
}

/// Two-layer projection `align.1 -> gelu -> align.2` from the generator tap
/// width to the MAE feature width.
pub fn init_alignment_head(store: &mut ParamStore, d_gen: usize, d_mae: usize, rng: &mut Rng) {
    let hidden = d_gen.max(d_mae);
    store.insert("align.1.w", init::xavier(rng, d_gen, hidden));
    store.insert("align.1.b", Tensor::zeros(1, hidden));
    store.insert("align.2.w", init::xavier(rng, hidden, d_mae));
    store.insert("align.2.b", Tensor::zeros(1, d_mae));
}

pub fn project(g: &mut Graph, store: &ParamStore, tap: Var) -> Var {
    let h = g.linear(store, "align.1", tap);
    let h = g.gelu(h);
    g.linear(store, "align.2", h)
}

/// Mean over tokens of `1 - cos(projected_i, target_i)`.
pub fn alignment_loss(g: &mut Graph, projected: Var, target: Var) -> Result<Var> {
    let (a, b) = (g.shape(projected), g.shape(target));
    if a != b {
        return Err(Error::shape(format!("alignment features {a:?} vs MAE features {b:?}")));
    }
    let cos = g.cosine_rows(projected, target);
    let gap = g.one_minus(cos);
    Ok(g.mean(gap))
}

/// `cfm + gamma * align`.
pub fn total_loss(cfm: f64, align: f64, gamma: f64) -> Result<f64> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::arg(format!("alignment weight {gamma} must be non-negative")));
    }
    Ok(cfm + gamma * align)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_param_gradients, GradCheck};

    fn tiny() -> MaeConfig {
        MaeConfig {
            frames: 2,
            height: 4,
            width: 4,
            channels: 1,
            patch_h: 2,
            patch_w: 2,
            stride: 1,
            d_model: 8,
            depth: 2,
            heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mlp_ratio: 2,
            mask_ratio: 0.5,
            feature_layer: 0,
        }
    }

    fn window(seed: u64) -> Tensor {
        init::normal(&mut rng::stream(seed, "w"), 32, 1, 1.0)
    }

    #[test]
    fn mask_counts() {
        let p = random_mask(16, 0.75, 3).unwrap();
        assert_eq!(p.masked.len(), 12);
        assert_eq!(p.visible.len(), 4);
        let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(random_mask(16, 0.0, 3).unwrap().masked.is_empty());
        assert_eq!(random_mask(16, 0.75, 3).unwrap(), p);
        assert!(random_mask(16, 1.0, 3).is_err());
        assert!(random_mask(16, -0.1, 3).is_err());
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let mut hits = [0usize; 16];
        let seeds = 10_000;
        for s in 0..seeds {
            for i in random_mask(16, 0.75, s).unwrap().masked {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / seeds as f64;
            assert!((f - 0.75).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn masked_mse_oracle_and_degenerate_cases() {
        let pred = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let target = Tensor::new(2, 2, vec![0.0, 2.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = masked_mse(&mut g, p, t, &[1]);
        assert_eq!(g.item(l), (4.0 + 9.0) / 2.0);
        let l = masked_mse(&mut g, p, t, &[]);
        assert_eq!(g.item(l), 0.0);
        let l = masked_mse(&mut g, p, p, &[0, 1]);
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn loss_ignores_visible_targets() {
        let m = Mae::new(tiny()).unwrap();
        let s = m.init_params(&mut rng::stream(1, "mae"));
        let plan = random_mask(m.tokens(), 0.5, 4).unwrap();
        let x = window(1);
        let run = |target: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let tv = g.constant(target.clone());
            let out = m.forward(&mut g, &s, xv, tv, &plan).unwrap();
            g.item(out.loss)
        };
        let base = run(&x);
        let tok = m.patch.patchify_tensor(&x);
        let mut perturbed = tok.clone();
        for &v in &plan.visible {
            for c in 0..perturbed.cols {
                perturbed.set(v, c, perturbed.at(v, c) + 3.0);
            }
        }
        assert_eq!(run(&m.patch.unpatchify_tensor(&perturbed)), base);
        let mut hit = tok;
        hit.set(plan.masked[0], 0, hit.at(plan.masked[0], 0) + 3.0);
        assert_ne!(run(&m.patch.unpatchify_tensor(&hit)), base);
    }

    #[test]
    fn encoder_sees_only_visible_tokens() {
        // changing the input at masked positions cannot change the output
        let m = Mae::new(tiny()).unwrap();
        let s = m.init_params(&mut rng::stream(1, "mae"));
        let plan = random_mask(m.tokens(), 0.5, 9).unwrap();
        let x = window(2);
        let recon = |inp: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(inp.clone());
            let out = m.forward(&mut g, &s, xv, xv, &plan).unwrap();
            g.value(out.reconstruction).clone()
        };
        let mut tok = m.patch.patchify_tensor(&x);
        let base = recon(&x);
        for &i in &plan.masked {
            tok.set(i, 1, 100.0);
        }
        assert_eq!(recon(&m.patch.unpatchify_tensor(&tok)), base);
    }

    #[test]
    fn features_are_deterministic_and_shaped() {
        let m = Mae::new(tiny()).unwrap();
        let s = m.init_params(&mut rng::stream(1, "mae"));
        let a = m.extract_features(&s, &window(3)).unwrap();
        assert_eq!(a.shape(), (m.tokens(), 8));
        assert_eq!(a, m.extract_features(&s, &window(3)).unwrap());
    }

    #[test]
    fn alignment_cases_and_oracle() {
        let mut rng = rng::stream(5, "al");
        let f = init::normal(&mut rng, 3, 4, 1.0);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let l = alignment_loss(&mut g, fv, fv).unwrap();
        assert!(g.item(l).abs() < 1e-15);
        let neg = g.scale(fv, -2.0);
        let l = alignment_loss(&mut g, neg, fv).unwrap();
        assert!((g.item(l) - 2.0).abs() < 1e-15);
        let other = init::normal(&mut rng, 3, 4, 1.0);
        let ov = g.constant(other.clone());
        let l = alignment_loss(&mut g, ov, fv).unwrap();
        let oracle: f64 = (0..3)
            .map(|r| {
                let dot: f64 = (0..4).map(|c| f.at(r, c) * other.at(r, c)).sum();
                let na: f64 = (0..4).map(|c| f.at(r, c).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = (0..4).map(|c| other.at(r, c).powi(2)).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.item(l) - oracle).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&g.item(l)));
        let short = g.constant(Tensor::zeros(2, 4));
        assert!(alignment_loss(&mut g, short, fv).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.3, 5.0, 0.0).unwrap(), 1.3);
        assert!((total_loss(1.0, 2.0, 0.01).unwrap() - 1.02).abs() < 1e-15);
        assert!(total_loss(1.0, 2.0, -1.0).is_err());
    }

    #[test]
    fn mae_and_alignment_gradients() {
        let m = Mae::new(tiny()).unwrap();
        let mut s = m.init_params(&mut rng::stream(6, "mae"));
        let plan = random_mask(m.tokens(), 0.5, 2).unwrap();
        let x = window(4);
        let report = check_param_gradients(&s, GradCheck::default(), |g, st| {
            let xv = g.constant(x.clone());
            m.forward(g, st, xv, xv, &plan).unwrap().loss
        });
        assert!(report.worst() < 1e-4, "{} at {:?}", report.worst(), report.worst_name());

        let target = m.extract_features(&s, &x).unwrap();
        let mut head = ParamStore::new();
        init_alignment_head(&mut head, 6, 8, &mut rng::stream(7, "head"));
        head.insert("tap", init::normal(&mut rng::stream(8, "tap"), m.tokens(), 6, 1.0));
        let report = check_param_gradients(&head, GradCheck::default(), |g, st| {
            let tap = g.param(st, "tap");
            let p = project(g, st, tap);
            let t = g.constant(target.clone());
            alignment_loss(g, p, t).unwrap()
        });
        assert!(report.worst() < 1e-4, "{} at {:?}", report.worst(), report.worst_name());

        // total = cfm + gamma * align: gradients combine linearly
        s = head;
        let gamma = 0.01;
        let build = |g: &mut Graph, st: &ParamStore, w_cfm: f64, w_al: f64| {
            let tap = g.param(st, "tap");
            let sq = g.mul(tap, tap);
            let cfm = g.mean(sq);
            let p = project(g, st, tap);
            let t = g.constant(target.clone());
            let al = alignment_loss(g, p, t).unwrap();
            let a = g.scale(cfm, w_cfm);
            let b = g.scale(al, w_al);
            g.add(a, b)
        };
        let grads = |w_cfm, w_al| {
            let mut g = Graph::new();
            let out = build(&mut g, &s, w_cfm, w_al);
            g.backward(out).into_param_grads(&s)
        };
        let (tot, c, a) = (grads(1.0, gamma), grads(1.0, 0.0), grads(0.0, 1.0));
        let tap_c = c.get("tap").unwrap();
        let tap_a = a.get("tap").unwrap();
        let want = tap_c.zip_map(tap_a, |x, y| x + gamma * y);
        assert!(tot.get("tap").unwrap().zip_map(&want, |x, y| (x - y).abs()).max_abs() < 1e-14);
        let report = check_param_gradients(&s, GradCheck::default(), |g, st| build(g, st, 1.0, gamma));
        assert!(report.worst() < 1e-4);
    }

    #[test]
    fn frozen_features_carry_no_gradient() {
        let m = Mae::new(tiny()).unwrap();
        let s = m.init_params(&mut rng::stream(6, "mae"));
        let mut gen = ParamStore::new();
        init_alignment_head(&mut gen, 6, 8, &mut rng::stream(7, "head"));
        let tap = init::normal(&mut rng::stream(8, "tap"), m.tokens(), 6, 1.0);
        let feats = m.extract_features(&s, &window(4)).unwrap();
        let mut g = Graph::new();
        let tv = g.constant(tap);
        let p = project(&mut g, &gen, tv);
        let t = g.constant(feats);
        let l = alignment_loss(&mut g, p, t).unwrap();
        let grads = g.backward(l).into_param_grads(&gen);
        assert!(grads.keys().all(|k| k.starts_with("align.")));
        assert!(s.names().all(|n| !grads.contains_key(n)));
    }
}
