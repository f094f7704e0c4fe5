//! Salient flow attention.
//!
//! Two attention maps are computed from split query/key projections. The
//! first is ordinary softmax attention; the second attends only within each
//! token's spatial neighbourhood, with keys mean-centred over the
//! neighbourhood so that shared background structure cancels. The output is
//! `(A1 - lambda * A2) V`, whose rows sum to `1 - lambda`.
//!
//! Factorised attention is expressed with masks over the full token set:
//! the spatial pass only lets tokens of the same frame interact, the
//! temporal pass only tokens at the same patch position.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore};
use crate::rng::Rng;

/// Token arrangement `(frames, rows, cols)`; token `j` sits at
/// `f * rows * cols + r * cols + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, rows: usize, cols: usize) -> Self {
        Self { frames, rows, cols }
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.per_frame()
    }

    pub fn index(&self, f: usize, r: usize, c: usize) -> usize {
        (f * self.rows + r) * self.cols + c
    }

    /// `(frame, row, col)` of token `j`.
    pub fn coords(&self, j: usize) -> (usize, usize, usize) {
        let p = self.per_frame();
        (j / p, (j % p) / self.cols, j % self.cols)
    }
}

/// Spatial k-nearest neighbours within a frame, self included.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub layout: TokenLayout,
    pub kappa: usize,
    /// Frame-local neighbour positions for every frame-local position.
    local: Vec<Vec<usize>>,
}

impl NeighborIndex {
    /// Global indices of the neighbours of token `j`, nearest first.
    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        let p = self.layout.per_frame();
        let base = (j / p) * p;
        self.local[j % p].iter().map(|&m| base + m).collect()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let p = self.layout.per_frame();
        i / p == j / p && self.local[i % p].contains(&(j % p))
    }
}

/// Ties in distance go to the lowest linear index.
pub fn build_neighbor_index(layout: TokenLayout, kappa: usize) -> Result<NeighborIndex> {
    let p = layout.per_frame();
    if kappa == 0 || kappa > p {
        return Err(Error::arg(format!("kappa = {kappa} must lie in 1..={p}")));
    }
    let local = (0..p)
        .map(|a| {
            let (ra, ca) = ((a / layout.cols) as i64, (a % layout.cols) as i64);
            let mut cand: Vec<(i64, usize)> = (0..p)
                .map(|b| {
                    let (rb, cb) = ((b / layout.cols) as i64, (b % layout.cols) as i64);
                    ((ra - rb).pow(2) + (ca - cb).pow(2), b)
                })
                .collect();
            cand.sort_unstable();
            cand.into_iter().take(kappa).map(|(_, b)| b).collect()
        })
        .collect();
    Ok(NeighborIndex { layout, kappa, local })
}

/// Masks and centring operator shared by every block operating on one
/// layout.
#[derive(Debug, Clone)]
pub struct AttentionMasks {
    pub layout: TokenLayout,
    pub spatial: Arc<Vec<bool>>,
    pub temporal: Arc<Vec<bool>>,
    pub neighbor: Arc<Vec<bool>>,
    /// `I - M`, where row `j` of `M` averages over the neighbourhood of `j`.
    pub centering: Arc<Tensor>,
    pub index: NeighborIndex,
}

impl AttentionMasks {
    pub fn new(layout: TokenLayout, kappa: usize) -> Result<Self> {
        let index = build_neighbor_index(layout, kappa)?;
        let n = layout.tokens();
        let p = layout.per_frame();
        let spatial = (0..n * n).map(|e| e / n / p == e % n / p).collect();
        let temporal = (0..n * n).map(|e| (e / n) % p == (e % n) % p).collect();
        let mut neighbor = vec![false; n * n];
        let mut centering = Tensor::identity(n);
        for j in 0..n {
            for m in index.neighbors(j) {
                neighbor[j * n + m] = true;
                let v = centering.at(j, m) - 1.0 / kappa as f64;
                centering.set(j, m, v);
            }
        }
        Ok(Self {
            layout,
            spatial: Arc::new(spatial),
            temporal: Arc::new(temporal),
            neighbor: Arc::new(neighbor),
            centering: Arc::new(centering),
            index,
        })
    }
}

/// `softmax(q k^T / sqrt(d))`, optionally restricted to `mask`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, mask: Option<&[bool]>) -> Var {
    let d = g.shape(q).1 as f64;
    let logits = g.matmul_nt(q, k);
    let logits = g.scale(logits, 1.0 / d.sqrt());
    g.softmax(logits, mask)
}

pub fn standard_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Var {
    let a = attention_weights(g, q, k, mask);
    g.matmul(a, v)
}

/// Background map: keys centred over each key's neighbourhood, logits kept
/// only inside each query's neighbourhood.
pub fn centered_background_attention(g: &mut Graph, q2: Var, k2: Var, centering: Var, neighbor: &[bool]) -> Var {
    let kc = g.matmul(centering, k2);
    attention_weights(g, q2, kc, Some(neighbor))
}

/// `(A1 - lambda A2) V` with a plain second map.
#[allow(clippy::too_many_arguments)]
pub fn diff_attention(g: &mut Graph, q1: Var, k1: Var, q2: Var, k2: Var, v: Var, lambda: Var, mask: Option<&[bool]>) -> Var {
    let a1 = attention_weights(g, q1, k1, mask);
    let a2 = attention_weights(g, q2, k2, mask);
    combine(g, a1, a2, lambda, v)
}

/// `(A1 - lambda A2~) V` with the centred neighbourhood map.
#[allow(clippy::too_many_arguments)]
pub fn sf_attention(
    g: &mut Graph,
    q1: Var,
    k1: Var,
    q2: Var,
    k2: Var,
    v: Var,
    lambda: Var,
    mask: Option<&[bool]>,
    centering: Var,
    neighbor: &[bool],
) -> Var {
    let a1 = attention_weights(g, q1, k1, mask);
    let a2 = centered_background_attention(g, q2, k2, centering, neighbor);
    combine(g, a1, a2, lambda, v)
}

fn combine(g: &mut Graph, a1: Var, a2: Var, lambda: Var, v: Var) -> Var {
    let a2 = g.scale_by(a2, lambda);
    let a = g.sub(a1, a2);
    g.matmul(a, v)
}

/// Which attention a multi-head layer computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Differential attention with the centred neighbourhood map.
    Salient,
    /// Differential attention with two plain maps.
    Differential,
    Standard,
}

impl AttentionKind {
    fn split(self) -> bool {
        !matches!(self, AttentionKind::Standard)
    }
}

/// Rotary tables for one layout and per-map query width. Rotation pairs
/// cycle through the frame, row and column axes.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub cos: Arc<Vec<f64>>,
    pub sin: Arc<Vec<f64>>,
}

impl RopeTable {
    pub fn new(layout: TokenLayout, width: usize) -> Result<Self> {
        if width % 2 != 0 {
            return Err(Error::arg("rotary width must be even"));
        }
        let pairs = width / 2;
        let per_axis = pairs.div_ceil(3).max(1);
        let n = layout.tokens();
        let mut cos = Vec::with_capacity(n * pairs);
        let mut sin = Vec::with_capacity(n * pairs);
        for j in 0..n {
            let (f, r, c) = layout.coords(j);
            for p in 0..pairs {
                let pos = [f, r, c][p % 3] as f64;
                let freq = 100f64.powf(-((p / 3) as f64) / per_axis as f64);
                let (s, co) = (pos * freq).sin_cos();
                cos.push(co);
                sin.push(s);
            }
        }
        Ok(Self {
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        })
    }
}

/// Registers `{prefix}.{q,k,v,o}` projections (and `lambda` for the
/// differential kinds) for a `d`-wide layer with `heads` heads.
pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, kind: AttentionKind, rng: &mut Rng) {
    for name in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.{name}.w"), init::xavier(rng, d, d));
    }
    store.insert(format!("{prefix}.o.b"), Tensor::zeros(1, d));
    if kind.split() {
        // sigmoid(0) = 0.5
        store.insert(format!("{prefix}.lambda"), Tensor::zeros(1, heads));
    }
}

/// Per-call attention inputs.
pub struct AttentionSpec<'a> {
    pub kind: AttentionKind,
    pub heads: usize,
    pub mask: Option<&'a [bool]>,
    /// `(centering, neighbour mask)` for the salient kind.
    pub background: Option<(&'a Tensor, &'a [bool])>,
    pub rope: Option<&'a RopeTable>,
}

/// Multi-head self-attention of the requested kind with output projection.
pub fn multihead_attention(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, spec: &AttentionSpec<'_>) -> Result<Var> {
    let q = g.linear(store, &format!("{prefix}.q"), x);
    let k = g.linear(store, &format!("{prefix}.k"), x);
    let v = g.linear(store, &format!("{prefix}.v"), x);
    let d = g.shape(q).1;
    let heads = spec.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::arg(format!("d_model {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    if spec.kind.split() && dh % 2 != 0 {
        return Err(Error::arg("differential attention needs an even head width"));
    }
    let centering = match (spec.kind, spec.background) {
        (AttentionKind::Salient, Some((c, _))) => Some(g.constant(c.clone())),
        (AttentionKind::Salient, None) => return Err(Error::arg("salient attention needs a neighbourhood")),
        _ => None,
    };
    let lambda_raw = spec.kind.split().then(|| g.param(store, &format!("{prefix}.lambda")));
    let rotate = |g: &mut Graph, t: Var| match spec.rope {
        Some(r) => g.rope(t, r.cos.clone(), r.sin.clone()),
        None => t,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let vh = g.select_cols(v, lo, hi);
        let out = if let Some(raw) = lambda_raw {
            let mid = lo + dh / 2;
            let q1 = g.select_cols(q, lo, mid);
            let q2 = g.select_cols(q, mid, hi);
            let k1 = g.select_cols(k, lo, mid);
            let k2 = g.select_cols(k, mid, hi);
            let (q1, q2, k1, k2) = (rotate(g, q1), rotate(g, q2), rotate(g, k1), rotate(g, k2));
            let lr = g.select_cols(raw, h, h + 1);
            let lambda = g.sigmoid(lr);
            match centering {
                Some(c) => sf_attention(g, q1, k1, q2, k2, vh, lambda, spec.mask, c, spec.background.unwrap().1),
                None => diff_attention(g, q1, k1, q2, k2, vh, lambda, spec.mask),
            }
        } else {
            let qh = g.select_cols(q, lo, hi);
            let kh = g.select_cols(k, lo, hi);
            let (qh, kh) = (rotate(g, qh), rotate(g, kh));
            standard_attention(g, qh, kh, vh, spec.mask)
        };
        outs.push(out);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(g.linear(store, &format!("{prefix}.o"), cat))
}

/// Multi-head cross-attention: queries from `x`, keys and values from `ctx`.
pub fn cross_attention(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, ctx: Var, heads: usize) -> Result<Var> {
    let q = g.linear(store, &format!("{prefix}.q"), x);
    let k = g.linear(store, &format!("{prefix}.k"), ctx);
    let v = g.linear(store, &format!("{prefix}.v"), ctx);
    let d = g.shape(q).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::arg(format!("d_model {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.select_cols(q, lo, hi);
        let kh = g.select_cols(k, lo, hi);
        let vh = g.select_cols(v, lo, hi);
        outs.push(standard_attention(g, qh, kh, vh, None));
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(g.linear(store, &format!("{prefix}.o"), cat))
}

/// Spatial pass then temporal pass: `y = S(x)`, output `y + T(y)`.
///
/// The spatial pass uses `kind`; the temporal pass uses plain differential
/// attention for the salient kind (no neighbourhood across frames) and the
/// same kind otherwise.
pub fn factorized_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    kind: AttentionKind,
    heads: usize,
    masks: &AttentionMasks,
    rope: Option<&RopeTable>,
) -> Result<Var> {
    let spatial = AttentionSpec {
        kind,
        heads,
        mask: Some(&masks.spatial),
        background: Some((&masks.centering, &masks.neighbor)),
        rope,
    };
    let y = multihead_attention(g, store, &format!("{prefix}.spatial"), x, &spatial)?;
    let temporal = AttentionSpec {
        kind: temporal_kind(kind),
        heads,
        mask: Some(&masks.temporal),
        background: None,
        rope,
    };
    let z = multihead_attention(g, store, &format!("{prefix}.temporal"), y, &temporal)?;
    Ok(g.add(y, z))
}

/// Query width each rotary table must cover for a `d`-wide layer.
pub fn rope_width(d: usize, heads: usize, kind: AttentionKind) -> usize {
    let dh = d / heads;
    if kind.split() {
        dh / 2
    } else {
        dh
    }
}

pub fn temporal_kind(kind: AttentionKind) -> AttentionKind {
    match kind {
        AttentionKind::Salient => AttentionKind::Differential,
        other => other,
    }
}

pub fn init_factorized(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, kind: AttentionKind, rng: &mut Rng) {
    init_attention(store, &format!("{prefix}.spatial"), d, heads, kind, rng);
    init_attention(store, &format!("{prefix}.temporal"), d, heads, temporal_kind(kind), rng);
}
