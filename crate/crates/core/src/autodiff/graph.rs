use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use num_complex::Complex64;

use super::tensor::{gemm, Tensor};
use crate::fields::{fft2, ifft2};
use crate::params::ParamStore;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a gathered position that should be filled with zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm(Var, Arc<Vec<f64>>),
    Gather(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    Mse(Var, Var),
    RFft2 { x: Var, h: usize, w: usize },
    IRFft2 { x: Var, h: usize, w: usize },
    BlockMatMul(Var, Var),
    FreqScale {
        alpha: Var,
        beta: Var,
        eta: Var,
        norms: Arc<Vec<f64>>,
    },
    SoftThreshold(Var, f64),
    CosineRows(Var, Var),
    Rope {
        x: Var,
        cos: Arc<Vec<f64>>,
        sin: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Build a scalar with the op methods, then call
/// [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    param_names: HashMap<Var, String>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a named parameter; `None` if the parameter was never used
    /// or did not influence the output.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.grads[v.0].as_ref())
    }

    /// `(name, gradient)` for every parameter touched by the graph, in name
    /// order. Parameters with no path to the output get a zero tensor.
    pub fn into_param_grads(mut self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = self.grads[v.0].take().unwrap_or_else(|| {
                let t = store.get(name).expect("graph parameter missing from store");
                Tensor::zeros(t.rows, t.cols)
            });
            out.insert(name.clone(), g);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// Number of stored columns of a real-input 2D transform along the last axis.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Stored-mode multiplicity in the Hermitian half spectrum.
fn column_weight(kx: usize, w: usize) -> f64 {
    if kx == 0 || (w % 2 == 0 && kx == w / 2) {
        1.0
    } else {
        2.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (inputs of gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable parameter, recorded once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .shared(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_names.insert(v, name.to_string());
        v
    }

    /// Named parameter read as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Var {
        let value = store
            .shared(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: {m}x{k} by {k2}x{n}");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out.data, false);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt: {m}x{k} by ({n}x{k2})^T");
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, true, &mut out.data, false);
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    /// Multiplies `x [m, nb*bs]` by a block-diagonal matrix whose `nb` blocks
    /// of size `bs x bs` are stacked vertically in `w [nb*bs, bs]`.
    pub fn block_matmul(&mut self, x: Var, w: Var) -> Var {
        let (m, d) = self.shape(x);
        let (wr, bs) = self.shape(w);
        assert_eq!(wr, d, "block_matmul: weight rows {wr} != feature dim {d}");
        assert!(bs > 0 && d % bs == 0, "block_matmul: {d} not divisible by block size {bs}");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Tensor::zeros(m, d);
        for b in 0..d / bs {
            for r in 0..m {
                let xrow = &xv.data[r * d + b * bs..r * d + (b + 1) * bs];
                let orow = &mut out.data[r * d + b * bs..r * d + (b + 1) * bs];
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = &wv.data[(b * bs + i) * bs..(b * bs + i + 1) * bs];
                    for (o, &wij) in orow.iter_mut().zip(wrow) {
                        *o += xi * wij;
                    }
                }
            }
        }
        self.push(out, Op::BlockMatMul(x, w), &[x, w])
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with `b [1, n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(b), (1, n), "add_row: bias must be 1x{n}");
        let bv = self.value(b).data.clone();
        let mut out = self.value(x).clone();
        for r in 0..m {
            out.data[r * n..(r + 1) * n]
                .iter_mut()
                .zip(&bv)
                .for_each(|(o, b)| *o += b);
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// `x * s` with `s [1, n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(s), (1, n), "mul_row: scale must be 1x{n}");
        let sv = self.value(s).data.clone();
        let mut out = self.value(x).clone();
        for r in 0..m {
            out.data[r * n..(r + 1) * n]
                .iter_mut()
                .zip(&sv)
                .for_each(|(o, s)| *o *= s);
        }
        self.push(out, Op::MulRow(x, s), &[x, s])
    }

    /// `x * s` with `s [m, 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(s), (m, 1), "mul_col: scale must be {m}x1");
        let sv = self.value(s).data.clone();
        let mut out = self.value(x).clone();
        for r in 0..m {
            out.data[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= sv[r]);
        }
        self.push(out, Op::MulCol(x, s), &[x, s])
    }

    /// `x * s` for a `1 x 1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by: scalar expected");
        let sv = self.item(s);
        let out = self.value(x).scale(sv);
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn soft_threshold(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).map(|v| soft_threshold(v, lambda));
        self.push(out, Op::SoftThreshold(x, lambda), &[x])
    }

    // ---- row-wise ----

    /// Row softmax. Entries whose `mask` is `false` are excluded from the
    /// normalisation and come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        if let Some(mask) = mask {
            assert_eq!(mask.len(), m * n, "softmax mask size mismatch");
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = xv.row(r);
            let keep = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            let max = (0..n)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite() || max == f64::NEG_INFINITY);
            let mut total = 0.0;
            for c in 0..n {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out.data[r * n + c] = e;
                    total += e;
                }
            }
            assert!(total > 0.0, "softmax row {r} has an empty support");
            out.data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Row layer normalisation without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut out = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                out.data[r * n + c] = (row[c] - mean) * is;
            }
        }
        self.push(out, Op::LayerNorm(x, Arc::new(inv_std)), &[x])
    }

    /// Cosine similarity of matching rows, as an `m x 1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "cosine_rows shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor::zeros(m, 1);
        for r in 0..m {
            let (x, y) = (av.row(r), bv.row(r));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            out.data[r] = dot / (nx * ny);
        }
        self.push(out, Op::CosineRows(a, b), &[a, b])
    }

    /// Rotates column pairs `(2i, 2i+1)` of each row by the tabulated angles.
    /// `cos`/`sin` are `rows x cols/2`.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Var {
        let (m, n) = self.shape(x);
        assert!(n % 2 == 0, "rope needs an even feature width");
        assert_eq!(cos.len(), m * n / 2);
        assert_eq!(sin.len(), m * n / 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            for i in 0..n / 2 {
                let (c, s) = (cos[r * n / 2 + i], sin[r * n / 2 + i]);
                let (a, b) = (xv.at(r, 2 * i), xv.at(r, 2 * i + 1));
                out.set(r, 2 * i, a * c - b * s);
                out.set(r, 2 * i + 1, a * s + b * c);
            }
        }
        self.push(out, Op::Rope { x, cos, sin }, &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let n = av.len() as f64;
        let s: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    // ---- indexing ----

    /// Builds a `rows x cols` tensor whose entry `i` (row-major) is
    /// `x.data[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index does not fill {rows}x{cols}");
        let xv = self.value(x);
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xv.data[i] })
            .collect();
        self.push(Tensor::new(rows, cols, data), Op::Gather(x, index), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(x).len();
        assert_eq!(n, rows * cols, "reshape of {n} entries to {rows}x{cols}");
        self.gather(x, Arc::new((0..n).collect()), rows, cols)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let n = self.shape(x).1;
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * n)..(r + 1) * n).collect();
        self.gather(x, Arc::new(index), rows.len(), n)
    }

    pub fn select_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start < end && end <= n, "column range {start}..{end} outside 0..{n}");
        let index: Vec<usize> = (0..m).flat_map(|r| (r * n + start)..(r * n + end)).collect();
        self.gather(x, Arc::new(index), m, end - start)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let index: Vec<usize> = (0..n).flat_map(|c| (0..m).map(move |r| r * n + c)).collect();
        self.gather(x, Arc::new(index), n, m)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(m, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, m, "concat_cols row mismatch");
            for r in 0..m {
                out.data[r * total + offset..r * total + offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, n, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Tensor::new(rows, n, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    // ---- spectral ----

    /// Real-input 2D DFT (unnormalised) of a grid stored as `x [h*w, d]`
    /// (row `y*w + x`, one column per channel). Returns the Hermitian half
    /// spectrum as `[2*h*wh, d]` with `wh = w/2 + 1`: real parts in the first
    /// `h*wh` rows (mode `ky*wh + kx`), imaginary parts after.
    pub fn rfft2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(n, h * w, "rfft2: {n} rows for a {h}x{w} grid");
        let wh = half_width(w);
        let xv = self.value(x);
        let mut out = Tensor::zeros(2 * h * wh, d);
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for c in 0..d {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(xv.data[i * d + c], 0.0);
            }
            fft2(&mut buf, h, w);
            for ky in 0..h {
                for kx in 0..wh {
                    let z = buf[ky * w + kx];
                    out.data[(ky * wh + kx) * d + c] = z.re;
                    out.data[(h * wh + ky * wh + kx) * d + c] = z.im;
                }
            }
        }
        self.push(out, Op::RFft2 { x, h, w }, &[x])
    }

    /// Inverse of [`Graph::rfft2`]: the missing half of the spectrum is the
    /// conjugate mirror of the stored half, and the result is real.
    pub fn irfft2(&mut self, z: Var, h: usize, w: usize) -> Var {
        let wh = half_width(w);
        let (n, d) = self.shape(z);
        assert_eq!(n, 2 * h * wh, "irfft2: {n} rows for a {h}x{w} half spectrum");
        let zv = self.value(z);
        let mut out = Tensor::zeros(h * w, d);
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for c in 0..d {
            for ky in 0..h {
                for kx in 0..w {
                    buf[ky * w + kx] = if kx < wh {
                        Complex64::new(
                            zv.data[(ky * wh + kx) * d + c],
                            zv.data[(h * wh + ky * wh + kx) * d + c],
                        )
                    } else {
                        let (my, mx) = ((h - ky) % h, w - kx);
                        Complex64::new(
                            zv.data[(my * wh + mx) * d + c],
                            -zv.data[(h * wh + my * wh + mx) * d + c],
                        )
                    };
                }
            }
            ifft2(&mut buf, h, w);
            for (i, b) in buf.iter().enumerate() {
                out.data[i * d + c] = b.re;
            }
        }
        self.push(out, Op::IRFft2 { x: z, h, w }, &[z])
    }

    /// Per-mode multiplier `beta + alpha * |xi|^eta` as an `m x 1` column,
    /// where `norms[i] = |xi_i|`. Zero-norm modes get exactly `beta`.
    pub fn freq_scale(&mut self, alpha: Var, beta: Var, eta: Var, norms: Arc<Vec<f64>>) -> Var {
        let (a, b, e) = (self.item(alpha), self.item(beta), self.item(eta));
        let data = norms
            .iter()
            .map(|&n| if n == 0.0 { b } else { b + a * n.powf(e) })
            .collect();
        let out = Tensor::column_vector(data);
        self.push(
            out,
            Op::FreqScale {
                alpha,
                beta,
                eta,
                norms,
            },
            &[alpha, beta, eta],
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if needs(a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &bv.data, true, &mut ga.data, false);
                    acc(*a, ga);
                }
                if needs(b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, &av.data, true, &g.data, false, &mut gb.data, false);
                    acc(*b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.rows);
                if needs(a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &bv.data, false, &mut ga.data, false);
                    acc(*a, ga);
                }
                if needs(b) {
                    let mut gb = Tensor::zeros(n, k);
                    gemm(n, m, k, &g.data, true, &av.data, false, &mut gb.data, false);
                    acc(*b, gb);
                }
            }
            Op::BlockMatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, d) = xv.shape();
                let bs = wv.cols;
                if needs(x) {
                    let mut gx = Tensor::zeros(m, d);
                    for b in 0..d / bs {
                        for r in 0..m {
                            let grow = &g.data[r * d + b * bs..r * d + (b + 1) * bs];
                            for i in 0..bs {
                                let wrow = &wv.data[(b * bs + i) * bs..(b * bs + i + 1) * bs];
                                gx.data[r * d + b * bs + i] =
                                    grow.iter().zip(wrow).map(|(p, q)| p * q).sum();
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if needs(w) {
                    let mut gw = Tensor::zeros(d, bs);
                    for b in 0..d / bs {
                        for r in 0..m {
                            let grow = &g.data[r * d + b * bs..r * d + (b + 1) * bs];
                            for i in 0..bs {
                                let xi = xv.data[r * d + b * bs + i];
                                if xi == 0.0 {
                                    continue;
                                }
                                let wrow = &mut gw.data[(b * bs + i) * bs..(b * bs + i + 1) * bs];
                                for (o, &gj) in wrow.iter_mut().zip(grow) {
                                    *o += xi * gj;
                                }
                            }
                        }
                    }
                    acc(*w, gw);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q));
                }
                if needs(b) {
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if needs(b) {
                    let n = g.cols;
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..g.rows {
                        gb.data.iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                    acc(*b, gb);
                }
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let n = g.cols;
                if needs(x) {
                    let mut gx = g.clone();
                    for r in 0..g.rows {
                        gx.data[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&sv.data)
                            .for_each(|(o, s)| *o *= s);
                    }
                    acc(*x, gx);
                }
                if needs(s) {
                    let mut gs = Tensor::zeros(1, n);
                    for r in 0..g.rows {
                        for c in 0..n {
                            gs.data[c] += g.data[r * n + c] * xv.data[r * n + c];
                        }
                    }
                    acc(*s, gs);
                }
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let n = g.cols;
                if needs(x) {
                    let mut gx = g.clone();
                    for r in 0..g.rows {
                        gx.data[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= sv.data[r]);
                    }
                    acc(*x, gx);
                }
                if needs(s) {
                    let gs = (0..g.rows)
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(*s, Tensor::column_vector(gs));
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = self.item(*s);
                if needs(x) {
                    acc(*x, g.scale(sv));
                }
                if needs(s) {
                    let xv = self.value(*x);
                    let d: f64 = g.data.iter().zip(&xv.data).map(|(p, q)| p * q).sum();
                    acc(*s, Tensor::scalar(d));
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Silu(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.zip_map(xv, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    }),
                );
            }
            Op::Gelu(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))),
            Op::Relu(x) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::SoftThreshold(x, lambda) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv.abs() > *lambda { gv } else { 0.0 }),
            ),
            Op::Softmax(x) => {
                let (m, n) = y.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        gx.data[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm(x, inv_std) => {
                let (m, n) = y.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for c in 0..n {
                        gx.data[r * n + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = av.shape();
                let mut ga = Tensor::zeros(m, n);
                let mut gb = Tensor::zeros(m, n);
                for r in 0..m {
                    let (x, z) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let cos = y.data[r];
                    let gr = g.data[r];
                    for c in 0..n {
                        ga.data[r * n + c] = gr * (z[c] / (nx * nz) - cos * x[c] / (nx * nx));
                        gb.data[r * n + c] = gr * (x[c] / (nx * nz) - cos * z[c] / (nz * nz));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Rope { x, cos, sin } => {
                let (m, n) = g.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    for i in 0..n / 2 {
                        let (c, s) = (cos[r * n / 2 + i], sin[r * n / 2 + i]);
                        let (ga, gb) = (g.at(r, 2 * i), g.at(r, 2 * i + 1));
                        gx.set(r, 2 * i, ga * c + gb * s);
                        gx.set(r, 2 * i + 1, -ga * s + gb * c);
                    }
                }
                acc(*x, gx);
            }
            Op::SumAll(x) => {
                let (m, n) = self.shape(*x);
                acc(*x, Tensor::filled(m, n, g.item()));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / av.len() as f64;
                let d = av.zip_map(bv, |p, q| k * (p - q));
                if needs(b) {
                    acc(*b, d.scale(-1.0));
                }
                acc(*a, d);
            }
            Op::Gather(x, index) => {
                let (m, n) = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for (i, &src) in index.iter().enumerate() {
                    if src != GATHER_ZERO {
                        gx.data[src] += g.data[i];
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols;
                let mut offset = 0;
                for p in parts {
                    let (m, n) = self.shape(*p);
                    if needs(p) {
                        let mut gp = Tensor::zeros(m, n);
                        for r in 0..m {
                            gp.data[r * n..(r + 1) * n]
                                .copy_from_slice(&g.data[r * total + offset..r * total + offset + n]);
                        }
                        acc(*p, gp);
                    }
                    offset += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (m, n) = self.shape(*p);
                    if needs(p) {
                        acc(*p, Tensor::new(m, n, g.data[offset..offset + m * n].to_vec()));
                    }
                    offset += m * n;
                }
            }
            Op::RFft2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let wh = half_width(w);
                let d = g.cols;
                let mut gx = Tensor::zeros(h * w, d);
                let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
                let n = (h * w) as f64;
                for c in 0..d {
                    buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                    for ky in 0..h {
                        for kx in 0..wh {
                            buf[ky * w + kx] = Complex64::new(
                                g.data[(ky * wh + kx) * d + c],
                                g.data[(h * wh + ky * wh + kx) * d + c],
                            );
                        }
                    }
                    ifft2(&mut buf, h, w);
                    for (i, b) in buf.iter().enumerate() {
                        gx.data[i * d + c] = b.re * n;
                    }
                }
                acc(*x, gx);
            }
            Op::IRFft2 { x, h, w } => {
                let (h, w) = (*h, *w);
                let wh = half_width(w);
                let d = g.cols;
                let mut gz = Tensor::zeros(2 * h * wh, d);
                let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
                let n = (h * w) as f64;
                for c in 0..d {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = Complex64::new(g.data[i * d + c], 0.0);
                    }
                    fft2(&mut buf, h, w);
                    for ky in 0..h {
                        for kx in 0..wh {
                            let k = column_weight(kx, w) / n;
                            let z = buf[ky * w + kx];
                            gz.data[(ky * wh + kx) * d + c] = k * z.re;
                            gz.data[(h * wh + ky * wh + kx) * d + c] = k * z.im;
                        }
                    }
                }
                acc(*x, gz);
            }
            Op::FreqScale {
                alpha,
                beta,
                eta,
                norms,
            } => {
                let (a, e) = (self.item(*alpha), self.item(*eta));
                let (mut ga, mut gb, mut ge) = (0.0, 0.0, 0.0);
                for (i, &n) in norms.iter().enumerate() {
                    let gi = g.data[i];
                    gb += gi;
                    if n != 0.0 {
                        let p = n.powf(e);
                        ga += gi * p;
                        ge += gi * a * p * n.ln();
                    }
                }
                acc(*alpha, Tensor::scalar(ga));
                acc(*beta, Tensor::scalar(gb));
                acc(*eta, Tensor::scalar(ge));
            }
        }
    }
}

/// Convenience layer helpers shared by the network modules.
impl Graph {
    /// `x W + b` with `W [in, out]` and `b [1, out]` looked up by name prefix.
    pub fn linear(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Var {
        let w = self.param(store, &format!("{prefix}.w"));
        let y = self.matmul(x, w);
        let bias = format!("{prefix}.b");
        if store.contains(&bias) {
            let b = self.param(store, &bias);
            self.add_row(y, b)
        } else {
            y
        }
    }
}
