//! Expression graph for reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and appended to the tape together
//! with the handles of its inputs. Nodes are stored in execution order, so
//! the tape is already topologically sorted and [`Tape::gradients`] only has
//! to walk it backwards once.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fault;
use super::param::{Gradients, ParamId, ParamSet};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
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

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    ScaleBy(Var, Var),
    Act(Activation, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Element(Var, usize),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    SoftmaxXent {
        logits: Var,
        target: usize,
    },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Recorded forward computation; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// Leaf bound to a parameter. Repeated calls return the same handle.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: params.shared_value(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(x, c))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleBy(x, s))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        self.record(Op::Act(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(x))
    }

    /// Per-row layer normalization with biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    /// `x · wᵀ + b` for `x: m×in`, `w: out×in`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.record(Op::Affine { x, w, b })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows { x, start, len })
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows {
            x,
            rows: rows.to_vec(),
        })
    }

    /// Single element at flat index `i`, as a `[1]` tensor.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        self.record(Op::Element(x, i))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanRows(x))
    }

    /// `-ln softmax(logits)[target]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.record(Op::SoftmaxXent { logits, target })
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let t = match *op {
        Op::Constant | Op::Param(_) | Op::Reshape(_) => {
            unreachable!("leaves and reshapes are not re-evaluated")
        }
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            if b.rows() != k || a.rank() > 2 || b.rank() > 2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            if b.cols() != k || a.rank() > 2 || b.rank() > 2 {
                return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
            }
            Tensor::from_parts(vec![m, n], gemm_nt(a.data(), b.data(), m, k, n))
        }
        Op::Transpose(a) => val(a).transposed(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.shape() != b.shape() {
                return Err(Error::shape("elementwise", a.shape(), b.shape()));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::AddRow(x, r) => {
            let (x, r) = (val(x), val(r));
            let c = x.cols();
            if r.numel() != c {
                return Err(Error::shape("add_row", x.shape(), r.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Scale(x, c) => val(x).map(|v| v * c),
        Op::AddScalar(x, c) => val(x).map(|v| v + c),
        Op::ScaleBy(x, s) => {
            let (x, s) = (val(x), val(s));
            if s.numel() != 1 {
                return Err(Error::shape("scale_by", x.shape(), s.shape()));
            }
            let s = s.item();
            x.map(|v| v * s)
        }
        Op::Act(kind, x) => {
            let x = val(x);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("{kind:?} input")));
            }
            x.map(|v| kind.apply(v))
        }
        Op::SoftmaxRows(x) => {
            let x = val(x);
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (x, g, b) = (val(x), val(gain), val(bias));
            let c = x.cols();
            if g.numel() != c || b.numel() != c {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(c) {
                let (mean, inv) = row_stats(row, eps);
                for j in 0..c {
                    data.push(g.data()[j] * (row[j] - mean) * inv + b.data()[j]);
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (m, din, dout) = (xv.rows(), xv.cols(), wv.rows());
            if wv.rank() != 2 || wv.cols() != din || xv.rank() > 2 {
                return Err(Error::shape("affine", xv.shape(), wv.shape()));
            }
            let mut data = gemm_nt(xv.data(), wv.data(), m, din, dout);
            if let Some(b) = b {
                let bv = val(b);
                if bv.numel() != dout {
                    return Err(Error::shape("affine bias", wv.shape(), bv.shape()));
                }
                for row in data.chunks_mut(dout) {
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            let shape = if xv.rank() == 1 {
                vec![dout]
            } else {
                vec![m, dout]
            };
            Tensor::from_parts(shape, data)
        }
        Op::Concat { ref parts, axis } => concat_values(parts.iter().map(|&p| val(p)), axis)?,
        Op::SliceRows { x, start, len } => {
            let x = val(x);
            if len == 0 || start + len > x.rows() || x.rank() > 2 {
                return Err(Error::Input(format!(
                    "row slice {start}..{} out of range for {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let c = x.cols();
            Tensor::from_parts(
                vec![len, c],
                x.data()[start * c..(start + len) * c].to_vec(),
            )
        }
        Op::SliceCols { x, start, len } => {
            let x = val(x);
            let c = x.cols();
            if len == 0 || start + len > c {
                return Err(Error::Input(format!(
                    "column slice {start}..{} out of range for {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for row in x.data().chunks(c) {
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = len;
            Tensor::from_parts(shape, data)
        }
        Op::GatherRows { x, ref rows } => {
            let x = val(x);
            if rows.is_empty() || rows.iter().any(|&r| r >= x.rows()) {
                return Err(Error::Input(format!(
                    "gather rows {rows:?} out of range for {:?}",
                    x.shape()
                )));
            }
            x.select_rows(rows)
        }
        Op::Element(x, i) => {
            let x = val(x);
            if i >= x.numel() {
                return Err(Error::Input(format!(
                    "element {i} out of range for {:?}",
                    x.shape()
                )));
            }
            Tensor::scalar(x.data()[i])
        }
        Op::Sum(x) => Tensor::scalar(val(x).sum()),
        Op::MeanRows(x) => {
            let x = val(x);
            let (r, c) = (x.rows(), x.cols());
            let mut data = vec![0.0; c];
            for row in x.data().chunks(c) {
                for (o, &v) in data.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in &mut data {
                *o /= r as f64;
            }
            Tensor::from_parts(vec![1, c], data)
        }
        Op::SoftmaxXent { logits, target } => {
            let l = val(logits);
            if target >= l.numel() {
                return Err(Error::Input(format!(
                    "target class {target} out of range for {} logits",
                    l.numel()
                )));
            }
            let max = l.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - l.data()[target])
        }
    };
    Ok(t)
}

impl Tape {
    /// Re-evaluates every recorded operation from its recorded inputs and
    /// reports whether all outputs are bit-identical to the recorded ones.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            match node.op {
                Op::Constant | Op::Param(_) | Op::Reshape(_) => continue,
                _ => {}
            }
            let again = eval(&node.op, &self.nodes)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every recorded node.
    fn node_gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        self.check_loss(loss)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every reachable parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node_grads = self.node_gradients(loss)?;
        let mut out = Gradients::default();
        for (node, g) in self.nodes.iter().zip(&node_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out.add(*id, g);
            }
        }
        Ok(out)
    }

    /// Accumulates `d loss / d p` into each reachable `p.grad`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.accumulate(&grads);
        Ok(())
    }

    /// Gradient of `loss` with respect to arbitrary recorded values; zeros for
    /// values the loss does not depend on.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.node_gradients(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)))
            })
            .collect())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, d: Tensor| accumulate(grads, v, d);
        match self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(
                    a,
                    Tensor::from_parts(av.shape().to_vec(), gemm_nt(g.data(), bv.data(), m, n, k)),
                );
                acc(
                    b,
                    Tensor::from_parts(bv.shape().to_vec(), gemm_tn(av.data(), g.data(), m, k, n)),
                );
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(
                    a,
                    Tensor::from_parts(av.shape().to_vec(), gemm_nn(g.data(), bv.data(), m, n, k)),
                );
                acc(
                    b,
                    Tensor::from_parts(bv.shape().to_vec(), gemm_tn(g.data(), av.data(), m, n, k)),
                );
            }
            Op::Transpose(a) => {
                let t = g.transposed();
                acc(
                    a,
                    Tensor::from_parts(val(a).shape().to_vec(), t.into_data()),
                );
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, zip_map(g, bv, |x, y| x * y));
                acc(b, zip_map(g, av, |x, y| x * y));
            }
            Op::AddRow(x, r) => {
                acc(x, g.clone());
                let rv = val(r);
                acc(r, Tensor::from_parts(rv.shape().to_vec(), col_sums(g)));
            }
            Op::Scale(x, c) => acc(x, g.map(|v| v * c)),
            Op::AddScalar(x, _) => acc(x, g.clone()),
            Op::ScaleBy(x, s) => {
                let sv = val(s).item();
                acc(x, g.map(|v| v * sv));
                let ds: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                acc(s, Tensor::from_parts(val(s).shape().to_vec(), vec![ds]));
            }
            Op::Act(kind, x) => {
                let d = match kind {
                    Activation::Relu => {
                        let sign = if fault::relu_backward_flipped() {
                            -1.0
                        } else {
                            1.0
                        };
                        zip_map(g, val(x), |gv, xv| if xv > 0.0 { sign * gv } else { 0.0 })
                    }
                    Activation::Tanh => zip_map(g, out, |gv, y| gv * (1.0 - y * y)),
                    Activation::Sigmoid => zip_map(g, out, |gv, y| gv * y * (1.0 - y)),
                };
                acc(x, d);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - s)));
                }
                acc(x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv) = (val(x), val(gain));
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (xr, gr) in xv.data().chunks(c).zip(g.data().chunks(c)) {
                    let (mean, inv) = row_stats(xr, eps);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = gr[j] * gv.data()[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let n = c as f64;
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    dx.extend((0..c).map(|j| inv * (dxhat[j] - mean_d - xhat[j] * mean_dx)));
                }
                acc(x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(gain, Tensor::from_parts(gv.shape().to_vec(), dgain));
                acc(bias, Tensor::from_parts(val(bias).shape().to_vec(), dbias));
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (m, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                acc(
                    x,
                    Tensor::from_parts(
                        xv.shape().to_vec(),
                        gemm_nn(g.data(), wv.data(), m, dout, din),
                    ),
                );
                acc(
                    w,
                    Tensor::from_parts(
                        wv.shape().to_vec(),
                        gemm_tn(g.data(), xv.data(), m, dout, din),
                    ),
                );
                if let Some(b) = b {
                    acc(b, Tensor::from_parts(val(b).shape().to_vec(), col_sums(g)));
                }
            }
            Op::Concat { ref parts, axis } => {
                let all_vectors = parts.iter().all(|&p| val(p).rank() == 1);
                if all_vectors || axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        acc(
                            p,
                            Tensor::from_parts(
                                val(p).shape().to_vec(),
                                g.data()[offset..offset + n].to_vec(),
                            ),
                        );
                        offset += n;
                    }
                } else {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let c = pv.cols();
                        let mut d = Vec::with_capacity(pv.numel());
                        for row in g.data().chunks(total) {
                            d.extend_from_slice(&row[offset..offset + c]);
                        }
                        acc(p, Tensor::from_parts(pv.shape().to_vec(), d));
                        offset += c;
                    }
                }
            }
            Op::SliceRows { x, start, .. } => {
                let xv = val(x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for (dr, gr) in d.chunks_mut(c).zip(g.data().chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                acc(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::GatherRows { x, ref rows } => {
                let xv = val(x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data()[k * c + j];
                    }
                }
                acc(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Element(x, idx) => {
                let xv = val(x);
                let mut d = vec![0.0; xv.numel()];
                d[idx] = g.item();
                acc(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                acc(
                    x,
                    Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec()),
                );
            }
            Op::Sum(x) => {
                let xv = val(x);
                acc(x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanRows(x) => {
                let xv = val(x);
                let r = xv.rows() as f64;
                let mut d = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    d.extend(g.data().iter().map(|v| v / r));
                }
                acc(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::SoftmaxXent { logits, target } => {
                let lv = val(logits);
                let mut p = lv.data().to_vec();
                softmax_in_place(&mut p);
                p[target] -= 1.0;
                let up = g.item();
                for v in &mut p {
                    *v *= up;
                }
                acc(logits, Tensor::from_parts(lv.shape().to_vec(), p));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(b.shape().to_vec(), data)
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut s = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, &v) in s.iter_mut().zip(row) {
            *o += v;
        }
    }
    s
}

/// Mean and inverse standard deviation (biased variance) of one row.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn concat_values<'a>(parts: impl Iterator<Item = &'a Tensor>, axis: usize) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    let Some(first) = parts.first() else {
        return Err(Error::Input("concat of zero tensors".into()));
    };
    if parts.iter().all(|p| p.rank() == 1) {
        if axis != 0 {
            return Err(Error::Input(format!("axis {axis} invalid for vectors")));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let n = data.len();
        return Ok(Tensor::from_parts(vec![n], data));
    }
    match axis {
        0 => {
            let c = first.cols();
            if let Some(bad) = parts.iter().find(|p| p.cols() != c || p.rank() > 2) {
                return Err(Error::shape("concat", first.shape(), bad.shape()));
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts
                .iter()
                .flat_map(|p| p.data().iter().copied())
                .collect();
            Ok(Tensor::from_parts(vec![rows, c], data))
        }
        1 => {
            let r = first.rows();
            if let Some(bad) = parts.iter().find(|p| p.rows() != r || p.rank() > 2) {
                return Err(Error::shape("concat", first.shape(), bad.shape()));
            }
            let total: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in &parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Ok(Tensor::from_parts(vec![r, total], data))
        }
        _ => Err(Error::Input(format!("concat axis {axis} unsupported"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let b = t.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(y), t.value(b));

        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = t.constant(m(2, 1, &[0.0, 1.0]));
        let y = t.matmul(a, c).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant(m(3, 2, &[0.0, 0.0, 1000.0, 0.0, 2f64.ln(), 0.0]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() <= 1e-300 && v[3].abs() <= 1e-300);
        assert!((v[4] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[5] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);

        let x = t.constant(Tensor::full(&[4], 7.5));
        let g = t.constant(Tensor::vector(vec![2.0, -1.0, 0.5, 3.0]));
        let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn activation_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(th).item(), 0.0);
        assert_eq!(t.value(sg).item(), 0.5);
        assert!(matches!(
            "gelu".parse::<Activation>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![0.0, 1.0])).unwrap();
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn affine_trivial_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, -2.0, 5.0]));
        let w0 = t.constant(Tensor::zeros(&[2, 3]));
        let c = t.constant(Tensor::vector(vec![4.0, 9.0]));
        let y = t.affine(x, w0, Some(c)).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 9.0]);
        let eye = t.constant(Tensor::identity(3));
        let y = t.affine(x, eye, None).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -2.0, 5.0]);
    }

    #[test]
    fn concat_cases_and_gradient_routing() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::full(&[512], 1.0)).unwrap();
        let b = ps.add("b", Tensor::full(&[512], 2.0)).unwrap();
        let c = ps.add("c", Tensor::full(&[512], 3.0)).unwrap();
        let mut t = Tape::new();
        let (va, vb, vc) = (t.param(&ps, a), t.param(&ps, b), t.param(&ps, c));
        let single = t.concat(&[va], 0).unwrap();
        assert_eq!(t.value(single), t.value(va));
        let y = t.concat(&[va, vb, vc], 0).unwrap();
        assert_eq!(t.shape(y), &[1536]);
        let s = t.sum(y).unwrap();
        let g = t.gradients(s).unwrap();
        for id in [a, b, c] {
            assert_eq!(g.get(id).unwrap(), &Tensor::ones(&[512]));
        }
    }

    #[test]
    fn concat_rejects_mismatched_sides() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 4]));
        assert!(t.concat(&[a, b], 0).is_err());
        assert!(t.concat(&[a, b], 1).is_ok());
        let c = t.constant(Tensor::zeros(&[3, 3]));
        assert!(t.concat(&[a, c], 1).is_err());
    }

    #[test]
    fn backward_scalar_param() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor::scalar(2.5)).unwrap();
        let mut t = Tape::new();
        let v = t.param(&ps, p);
        t.backward(v, &mut ps).unwrap();
        assert_eq!(ps.grad(p).item(), 1.0);
    }

    #[test]
    fn backward_sum_wx_gives_rows_of_x() {
        let mut ps = ParamSet::new();
        let w = ps
            .add(
                "w",
                Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap(),
            )
            .unwrap();
        let unused = ps.add("unused", Tensor::full(&[2], 5.0)).unwrap();
        ps.grad_mut(unused).data_mut().fill(0.25);
        let x = [1.5, -2.0, 4.0];
        let mut t = Tape::new();
        let xv = t.constant(Tensor::vector(x.to_vec()));
        let wv = t.param(&ps, w);
        let y = t.affine(xv, wv, None).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss, &mut ps).unwrap();
        // d/dW_ij sum_i (W x)_i = x_j for every row i.
        assert_eq!(ps.grad(w).data(), &[1.5, -2.0, 4.0, 1.5, -2.0, 4.0]);
        assert_eq!(ps.grad(unused).data(), &[0.25, 0.25]);
        // accumulation contract
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).data(), &[3.0, -4.0, 8.0, 3.0, -4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor::zeros(&[2])).unwrap();
        let mut t = Tape::new();
        let v = t.param(&ps, p);
        assert!(matches!(t.backward(v, &mut ps), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let b = t.matmul(a, a).unwrap();
        let c = t.softmax_rows(b).unwrap();
        let d = t.tanh(c).unwrap();
        t.sum(d).unwrap();
        assert!(t.replay_matches().unwrap());
    }
}
