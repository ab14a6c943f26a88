//! A reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation. Batched
//! sequences are stored as stacked rows; ops that act per sample take the
//! segment length `n` (rows per sample) explicitly.

use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Gelu,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Square,
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    segments: usize,
    nq: usize,
    nk: usize,
    key_mask: Option<Vec<bool>>,
    probs: Vec<f64>,
}

struct RbfCache {
    sigma: Var,
    centers: Vec<[f64; 2]>,
    mask: Vec<bool>,
    positions: Vec<[f64; 2]>,
    points: usize,
    floor: f64,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    AddRow { a: Var, row: Var },
    AddSeg { a: Var, seg: Var, n: usize },
    Modulate { x: Var, shift: Var, scale: Var, n: usize },
    GateAdd { x: Var, gate: Var, y: Var, n: usize },
    ScaleRows { a: Var, factors: Vec<f64> },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Unary { a: Var, kind: Unary },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    Reshape { a: Var },
    MeanSeg { a: Var, n: usize },
    MaxSeg { a: Var, argmax: Vec<usize> },
    Attention(Box<AttnCache>),
    RbfBias(Box<RbfCache>),
    Mse { a: Var, target: Tensor },
    CosineLoss { a: Var, target: Tensor },
    Sum { a: Var },
    Mean { a: Var },
    SincosEmbed { t: Var, freqs: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Norm floor used by [`Graph::cosine_loss`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-6;

/// The tape. Build a fresh graph per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A graph for inference only: caches needed by backward are not kept.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.record && self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: self.record && needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x · w (+ b)` with `x: m×k`, `w: k×n`, `b: 1×n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()));
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, s }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar { a }, ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, out.cols()));
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// `a: (S·n)×c`, `seg: S×c`; adds row `s` of `seg` to the `n` rows of sample `s`.
    pub fn add_seg(&mut self, a: Var, seg: Var, n: usize) -> Var {
        let mut out = self.value(a).clone();
        let sv = self.value(seg);
        assert_eq!(out.rows(), sv.rows() * n);
        assert_eq!(out.cols(), sv.cols());
        for r in 0..out.rows() {
            let srow = sv.row(r / n);
            for (o, x) in out.row_mut(r).iter_mut().zip(srow) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(seg);
        self.push(out, Op::AddSeg { a, seg, n }, ng)
    }

    /// AdaLN modulation `x · (1 + scale) + shift`, per sample.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, n: usize) -> Var {
        let xv = self.value(x);
        let (shv, scv) = (self.value(shift), self.value(scale));
        assert_eq!(xv.rows(), shv.rows() * n);
        assert_eq!(shv.shape(), scv.shape());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let (sh, sc) = (shv.row(r / n), scv.row(r / n));
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * (1.0 + sc[c]) + sh[c];
            }
        }
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        self.push(out, Op::Modulate { x, shift, scale, n }, ng)
    }

    /// Gated residual `x + gate · y`, per sample.
    pub fn gate_add(&mut self, x: Var, gate: Var, y: Var, n: usize) -> Var {
        let (xv, gv, yv) = (self.value(x), self.value(gate), self.value(y));
        assert_eq!(xv.shape(), yv.shape());
        assert_eq!(xv.rows(), gv.rows() * n);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let g = gv.row(r / n);
            let yr = yv.row(r);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o += g[c] * yr[c];
            }
        }
        let ng = self.ng(x) || self.ng(gate) || self.ng(y);
        self.push(out, Op::GateAdd { x, gate, y, n }, ng)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(factors.len(), out.rows());
        for (r, f) in factors.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScaleRows { a, factors }, ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols() as f64;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Tanh => f64::tanh,
            Unary::Square => |x| x * x,
        };
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Unary { a, kind }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < tv.rows(), "gather index {i} out of range {}", tv.rows());
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, idx: idx.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape { a }, ng)
    }

    /// Mean over each run of `n` rows: `(S·n)×c → S×c`.
    pub fn mean_seg(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows() % n, 0);
        let s = av.rows() / n;
        let mut out = Tensor::zeros(s, av.cols());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (o, x) in out.row_mut(r / n).iter_mut().zip(src) {
                *o += x / n as f64;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanSeg { a, n }, ng)
    }

    /// Max over each run of `n` rows: `(S·n)×c → S×c`.
    pub fn max_seg(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows() % n, 0);
        let s = av.rows() / n;
        let c = av.cols();
        let mut out = Tensor::filled(s, c, f64::NEG_INFINITY);
        let mut argmax = vec![0; s * c];
        for r in 0..av.rows() {
            let seg = r / n;
            for (j, &x) in av.row(r).iter().enumerate() {
                if x > out.get(seg, j) {
                    out.set(seg, j, x);
                    argmax[seg * c + j] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxSeg { a, argmax }, ng)
    }

    /// Multi-head scaled dot-product attention over `segments` independent
    /// samples.
    ///
    /// `q: (S·nq)×d`, `k, v: (S·nk)×d`. `bias: (S·nq)×nk` is added to the
    /// scaled logits of every head. Keys with `key_mask == false` get `-inf`
    /// logits; a query row with no valid key produces a zero output.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        key_mask: Option<&[bool]>,
        heads: usize,
        segments: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(d % heads, 0, "attention width {d} not divisible by {heads} heads");
        assert_eq!(qv.rows() % segments, 0);
        assert_eq!(kv.rows() % segments, 0);
        let nq = qv.rows() / segments;
        let nk = kv.rows() / segments;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        if let Some(m) = key_mask {
            assert_eq!(m.len(), segments * nk);
        }
        let bv = bias.map(|b| {
            let t = self.value(b);
            assert_eq!(t.shape(), (segments * nq, nk), "attention bias shape");
            t
        });

        let mut out = Tensor::zeros(segments * nq, d);
        let mut probs = vec![0.0; segments * heads * nq * nk];
        let mut scores = vec![0.0; nq * nk];
        for s in 0..segments {
            let valid = |j: usize| key_mask.is_none_or(|m| m[s * nk + j]);
            if (0..nk).all(|j| !valid(j)) {
                continue;
            }
            for h in 0..heads {
                let qs = &qv.data()[s * nq * d + h * dh..];
                let ks = &kv.data()[s * nk * d + h * dh..];
                let vs = &vv.data()[s * nk * d + h * dh..];
                gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    MatRef::new(qs, d as isize, 1),
                    MatRef::new(ks, d as isize, 1).t(),
                    0.0,
                    MatMut::new(&mut scores, nk as isize, 1),
                );
                let p = &mut probs[(s * heads + h) * nq * nk..(s * heads + h + 1) * nq * nk];
                for i in 0..nq {
                    let row = &mut scores[i * nk..(i + 1) * nk];
                    if let Some(bv) = bv {
                        for (x, b) in row.iter_mut().zip(bv.row(s * nq + i)) {
                            *x += b;
                        }
                    }
                    let mut mx = f64::NEG_INFINITY;
                    for (j, x) in row.iter().enumerate() {
                        if valid(j) && *x > mx {
                            mx = *x;
                        }
                    }
                    let mut z = 0.0;
                    let prow = &mut p[i * nk..(i + 1) * nk];
                    for j in 0..nk {
                        prow[j] = if valid(j) { (row[j] - mx).exp() } else { 0.0 };
                        z += prow[j];
                    }
                    for x in prow.iter_mut() {
                        *x /= z;
                    }
                }
                let os = &mut out.data_mut()[s * nq * d + h * dh..];
                gemm(
                    nq,
                    nk,
                    dh,
                    1.0,
                    MatRef::new(p, nk as isize, 1),
                    MatRef::new(vs, d as isize, 1),
                    0.0,
                    MatMut::new(os, d as isize, 1),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || bias.is_some_and(|b| self.ng(b));
        if !self.record {
            probs = Vec::new();
        }
        let cache = AttnCache {
            q,
            k,
            v,
            bias,
            heads,
            segments,
            nq,
            nk,
            key_mask: key_mask.map(<[bool]>::to_vec),
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), ng)
    }

    /// Log of the anisotropic Gaussian spatial prior plus a floor,
    /// `ln(exp(-dx²/σx² - dy²/σy²) + floor)`, laid out as the
    /// `(S·tokens)×points` attention bias.
    ///
    /// `sigma: (S·points)×2` holds `(σx, σy)`; `centers` and `mask` are per
    /// `(sample, point)`; masked entries are zero and get no gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn rbf_log_bias(
        &mut self,
        sigma: Var,
        centers: &[[f64; 2]],
        mask: &[bool],
        points: usize,
        positions: &[[f64; 2]],
        floor: f64,
    ) -> Var {
        let sv = self.value(sigma);
        assert_eq!(sv.cols(), 2);
        assert_eq!(centers.len(), sv.rows());
        assert_eq!(mask.len(), sv.rows());
        assert!(points > 0 && sv.rows().is_multiple_of(points));
        let segments = sv.rows() / points;
        let ntok = positions.len();
        let mut out = Tensor::zeros(segments * ntok, points);
        for s in 0..segments {
            for (j, pos) in positions.iter().enumerate() {
                let row = out.row_mut(s * ntok + j);
                for i in 0..points {
                    let pi = s * points + i;
                    if !mask[pi] {
                        continue;
                    }
                    let p = gaussian_prior(pos, &centers[pi], sv.get(pi, 0), sv.get(pi, 1));
                    row[i] = (p + floor).ln();
                }
            }
        }
        let ng = self.ng(sigma);
        let cache = RbfCache {
            sigma,
            centers: centers.to_vec(),
            mask: mask.to_vec(),
            positions: positions.to_vec(),
            points,
            floor,
        };
        self.push(out, Op::RbfBias(Box::new(cache)), ng)
    }

    /// Mean squared error against a constant target. Returns a `1×1` node.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shape mismatch");
        let n = av.len() as f64;
        let loss = av.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(loss), Op::Mse { a, target: target.clone() }, ng)
    }

    /// Mean over rows of `1 - cos(a_r, target_r)`. Returns a `1×1` node.
    pub fn cosine_loss(&mut self, a: Var, target: &Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "cosine loss shape mismatch");
        let loss = row_cosines(av, target).iter().map(|c| 1.0 - c).sum::<f64>() / av.rows() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(loss), Op::CosineLoss { a, target: target.clone() }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, ng)
    }

    /// `t: S×1 → S×2F`, `[cos(t·f_k)…, sin(t·f_k)…]`.
    pub fn sincos_embed(&mut self, t: Var, freqs: &[f64]) -> Var {
        let tv = self.value(t);
        assert_eq!(tv.cols(), 1);
        let f = freqs.len();
        let out = Tensor::from_fn(tv.rows(), 2 * f, |r, c| {
            let arg = tv.get(r, 0) * freqs[c % f];
            if c < f {
                arg.cos()
            } else {
                arg.sin()
            }
        });
        let ng = self.ng(t);
        self.push(out, Op::SincosEmbed { t, freqs: freqs.to_vec() }, ng)
    }

    /// Mean softmax cross-entropy of `logits: S×K` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len());
        let probs = softmax_rows(lv);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -(probs.get(r, y).max(1e-300)).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Accumulates into a gradient slot in place, creating it zeroed first.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::new(g.data(), n as isize, 1),
                        MatRef::new(wv.data(), n as isize, 1).t(),
                        1.0,
                        MatMut::new(dx.data_mut(), k as isize, 1),
                    );
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::new(xv.data(), k as isize, 1).t(),
                        MatRef::new(g.data(), n as isize, 1),
                        1.0,
                        MatMut::new(dw.data_mut(), n as isize, 1),
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for r in 0..m {
                            for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.slot(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::new(g.data(), n as isize, 1),
                        MatRef::new(bv.data(), n as isize, 1).t(),
                        1.0,
                        MatMut::new(da.data_mut(), k as isize, 1),
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::new(av.data(), k as isize, 1).t(),
                        MatRef::new(g.data(), n as isize, 1),
                        1.0,
                        MatMut::new(db.data_mut(), n as isize, 1),
                    );
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let d = zip_map(g, bv, |x, y| x * y);
                    self.acc(grads, *a, d);
                }
                if self.nodes[b.0].needs_grad {
                    let d = zip_map(g, av, |x, y| x * y);
                    self.acc(grads, *b, d);
                }
            }
            Op::Scale { a, s } => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar { a } => self.acc(grads, *a, g.clone()),
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                if let Some(dr) = self.slot(grads, *row) {
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddSeg { a, seg, n } => {
                self.acc(grads, *a, g.clone());
                if let Some(ds) = self.slot(grads, *seg) {
                    for r in 0..g.rows() {
                        for (d, x) in ds.row_mut(r / n).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale, n } => {
                let n = *n;
                let xv = self.value(*x);
                let scv = self.value(*scale);
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..g.rows() {
                        let sc = scv.row(r / n);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d += g.get(r, c) * (1.0 + sc[c]);
                        }
                    }
                }
                if let Some(dsh) = self.slot(grads, *shift) {
                    for r in 0..g.rows() {
                        for (d, x) in dsh.row_mut(r / n).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
                if let Some(dsc) = self.slot(grads, *scale) {
                    for r in 0..g.rows() {
                        let xr = xv.row(r);
                        for (c, d) in dsc.row_mut(r / n).iter_mut().enumerate() {
                            *d += g.get(r, c) * xr[c];
                        }
                    }
                }
            }
            Op::GateAdd { x, gate, y, n } => {
                let n = *n;
                self.acc(grads, *x, g.clone());
                let (gv, yv) = (self.value(*gate), self.value(*y));
                if let Some(dy) = self.slot(grads, *y) {
                    for r in 0..g.rows() {
                        let gr = gv.row(r / n);
                        for (c, d) in dy.row_mut(r).iter_mut().enumerate() {
                            *d += g.get(r, c) * gr[c];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gate) {
                    for r in 0..g.rows() {
                        let yr = yv.row(r);
                        for (c, d) in dg.row_mut(r / n).iter_mut().enumerate() {
                            *d += g.get(r, c) * yr[c];
                        }
                    }
                }
            }
            Op::ScaleRows { a, factors } => {
                let mut d = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    for x in d.row_mut(r) {
                        *x *= f;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = rstd[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Unary { a, kind } => {
                let xv = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&gi, &x), &yi)| gi * unary_derivative(*kind, x, yi))
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        self.acc(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let start = *start;
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (d, x) in da.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, g.clone().reshaped(r, c));
            }
            Op::MeanSeg { a, n } => {
                let n = *n;
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..da.rows() {
                        for (d, x) in da.row_mut(r).iter_mut().zip(g.row(r / n)) {
                            *d += x / n as f64;
                        }
                    }
                }
            }
            Op::MaxSeg { a, argmax } => {
                let c = g.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, &src) in argmax.iter().enumerate() {
                        let (seg, j) = (i / c, i % c);
                        let v = da.get(src, j) + g.get(seg, j);
                        da.set(src, j, v);
                    }
                }
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
            Op::RbfBias(cache) => {
                let c = cache.as_ref();
                let sv = self.value(c.sigma);
                let ntok = c.positions.len();
                let segments = sv.rows() / c.points;
                if let Some(ds) = self.slot(grads, c.sigma) {
                    for s in 0..segments {
                        for (j, pos) in c.positions.iter().enumerate() {
                            let gr = g.row(s * ntok + j);
                            for i in 0..c.points {
                                let pi = s * c.points + i;
                                if !c.mask[pi] {
                                    continue;
                                }
                                let (sx, sy) = (sv.get(pi, 0), sv.get(pi, 1));
                                let dx = pos[0] - c.centers[pi][0];
                                let dy = pos[1] - c.centers[pi][1];
                                let p = gaussian_prior(pos, &c.centers[pi], sx, sy);
                                let w = gr[i] * p / (p + c.floor);
                                let row = ds.row_mut(pi);
                                row[0] += w * 2.0 * dx * dx / (sx * sx * sx);
                                row[1] += w * 2.0 * dy * dy / (sy * sy * sy);
                            }
                        }
                    }
                }
            }
            Op::Mse { a, target } => {
                let av = self.value(*a);
                let s = 2.0 * g.get(0, 0) / av.len() as f64;
                self.acc(grads, *a, zip_map(av, target, |x, y| s * (x - y)));
            }
            Op::CosineLoss { a, target } => {
                let av = self.value(*a);
                let rows = av.rows() as f64;
                let gs = g.get(0, 0);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let (ar, tr) = (av.row(r), target.row(r));
                    let na_raw = norm(ar);
                    let na = na_raw.max(COSINE_NORM_FLOOR);
                    let nt = norm(tr).max(COSINE_NORM_FLOOR);
                    let cos = dot(ar, tr) / (na * nt);
                    let floored = na_raw < COSINE_NORM_FLOOR;
                    for (i, dd) in d.row_mut(r).iter_mut().enumerate() {
                        let mut dc = tr[i] / (na * nt);
                        if !floored {
                            dc -= cos * ar[i] / (na * na);
                        }
                        *dd = -gs * dc / rows;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Sum { a } => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::Mean { a } => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Tensor::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::SincosEmbed { t, freqs } => {
                let tv = self.value(*t);
                let f = freqs.len();
                let mut dt = Tensor::zeros(tv.rows(), 1);
                for r in 0..tv.rows() {
                    let x = tv.get(r, 0);
                    let mut acc = 0.0;
                    for (k, &fk) in freqs.iter().enumerate() {
                        acc += g.get(r, k) * -(x * fk).sin() * fk;
                        acc += g.get(r, f + k) * (x * fk).cos() * fk;
                    }
                    dt.set(r, 0, acc);
                }
                self.acc(grads, *t, dt);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = g.get(0, 0) / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let v = d.get(r, y) - 1.0;
                    d.set(r, y, v);
                }
                d.scale_assign(s);
                self.acc(grads, *logits, d);
            }
        }
    }

    fn backprop_attention(&self, c: &AttnCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let (nq, nk, heads) = (c.nq, c.nk, c.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = self.nodes[c.q.0].needs_grad.then(|| Tensor::zeros(qv.rows(), d));
        let mut dk = self.nodes[c.k.0].needs_grad.then(|| Tensor::zeros(kv.rows(), d));
        let mut dv = self.nodes[c.v.0].needs_grad.then(|| Tensor::zeros(vv.rows(), d));
        let mut dbias = c
            .bias
            .filter(|b| self.nodes[b.0].needs_grad)
            .map(|_| Tensor::zeros(c.segments * nq, nk));
        let mut dp = vec![0.0; nq * nk];
        for s in 0..c.segments {
            if let Some(m) = &c.key_mask {
                if !m[s * nk..(s + 1) * nk].iter().any(|&b| b) {
                    continue;
                }
            }
            for h in 0..heads {
                let p = &c.probs[(s * heads + h) * nq * nk..(s * heads + h + 1) * nq * nk];
                let go = &g.data()[s * nq * d + h * dh..];
                let qs = &qv.data()[s * nq * d + h * dh..];
                let ks = &kv.data()[s * nk * d + h * dh..];
                let vs = &vv.data()[s * nk * d + h * dh..];
                if let Some(dv) = dv.as_mut() {
                    gemm(
                        nk,
                        nq,
                        dh,
                        1.0,
                        MatRef::new(p, nk as isize, 1).t(),
                        MatRef::new(go, d as isize, 1),
                        1.0,
                        MatMut::new(&mut dv.data_mut()[s * nk * d + h * dh..], d as isize, 1),
                    );
                }
                gemm(
                    nq,
                    dh,
                    nk,
                    1.0,
                    MatRef::new(go, d as isize, 1),
                    MatRef::new(vs, d as isize, 1).t(),
                    0.0,
                    MatMut::new(&mut dp, nk as isize, 1),
                );
                // dp ← dS = P ⊙ (dP − rowdot(dP, P))
                for i in 0..nq {
                    let prow = &p[i * nk..(i + 1) * nk];
                    let drow = &mut dp[i * nk..(i + 1) * nk];
                    let dotp: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dd, pp) in drow.iter_mut().zip(prow) {
                        *dd = pp * (*dd - dotp);
                    }
                    if let Some(db) = dbias.as_mut() {
                        for (o, x) in db.row_mut(s * nq + i).iter_mut().zip(drow.iter()) {
                            *o += x;
                        }
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(
                        nq,
                        nk,
                        dh,
                        scale,
                        MatRef::new(&dp, nk as isize, 1),
                        MatRef::new(ks, d as isize, 1),
                        1.0,
                        MatMut::new(&mut dq.data_mut()[s * nq * d + h * dh..], d as isize, 1),
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        nk,
                        nq,
                        dh,
                        scale,
                        MatRef::new(&dp, nk as isize, 1).t(),
                        MatRef::new(qs, d as isize, 1),
                        1.0,
                        MatMut::new(&mut dk.data_mut()[s * nk * d + h * dh..], d as isize, 1),
                    );
                }
            }
        }
        if let Some(t) = dq {
            self.acc(grads, c.q, t);
        }
        if let Some(t) = dk {
            self.acc(grads, c.k, t);
        }
        if let Some(t) = dv {
            self.acc(grads, c.v, t);
        }
        if let (Some(b), Some(t)) = (c.bias, dbias) {
            self.acc(grads, b, t);
        }
    }
}

/// `exp(-(p_x - c_x)²/σx² - (p_y - c_y)²/σy²)`.
#[inline]
pub fn gaussian_prior(pos: &[f64; 2], center: &[f64; 2], sx: f64, sy: f64) -> f64 {
    let dx = pos[0] - center[0];
    let dy = pos[1] - center[1];
    (-(dx * dx) / (sx * sx) - (dy * dy) / (sy * sy)).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

#[inline]
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    if u.abs() < 0.25 {
        u.tanh()
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let th = gelu_tanh(x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Tanh => 1.0 - y * y,
        Unary::Square => 2.0 * x,
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity per row, with each norm floored at [`COSINE_NORM_FLOOR`].
pub fn row_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let (ar, br) = (a.row(r), b.row(r));
            dot(ar, br) / (norm(ar).max(COSINE_NORM_FLOOR) * norm(br).max(COSINE_NORM_FLOOR))
        })
        .collect()
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn single_key_attention_copies_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_fn(3, 4, |r, c| (r + c) as f64));
        let k = g.constant(Tensor::from_fn(1, 4, |_, c| c as f64));
        let v = g.constant(Tensor::from_vec(1, 4, vec![1.0, -2.0, 3.0, 0.5]));
        let out = g.attention(q, k, v, None, None, 2, 1);
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn fully_masked_segment_yields_zero() {
        let mut g = Graph::new();
        let q = g.param(Tensor::filled(4, 2, 0.3));
        let k = g.param(Tensor::filled(6, 2, 0.1));
        let v = g.param(Tensor::filled(6, 2, 1.0));
        let mask = [true, false, true, false, false, false];
        let out = g.attention(q, k, v, None, Some(&mask), 1, 2);
        assert_eq!(g.value(out).row(0), &[1.0, 1.0]);
        assert_eq!(g.value(out).row(2), &[0.0, 0.0]);
        let loss = g.sum(out);
        let grads = g.backward(loss);
        assert!(grads.get(q).is_some());
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().get(0, 0), 7.0);
    }
}
