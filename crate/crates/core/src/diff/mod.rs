//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value, a same-shape
//! gradient accumulator and the rule that routes gradients to its inputs.
//! [`Tape::backward`] walks the nodes in reverse creation order. Parameters
//! enter the tape as leaves bound to a [`ParamStore`] slot, and
//! [`Tape::accumulate_param_grads`] adds their gradients back into the store.
//!
//! Only the primitives the MIL model needs are provided.

mod check;
mod params;

pub use check::{gradient_check, relative_error, GradCheckEntry, GradCheckReport};
pub use params::{Param, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive surrogate for `-inf` on masked logits.
pub const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Tanh,
    /// tanh approximation of GELU.
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Linear { x: Var, w: Var, b: Var },
    Act { x: Var, act: Activation },
    Softmax { x: Var },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    LogSoftmax { x: Var },
    Log { x: Var },
    Pow { x: Var, exponent: f64 },
    Affine { x: Var, scale: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Select { x: Var, index: usize },
    Sum { x: Var },
    Grl { x: Var, lambda: f64 },
    WeightedSum { w: Var, h: Var },
    MaskedMean { h: Var, mask: Vec<bool>, count: usize },
    MaskedMax { h: Var, argmax: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// A single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    /// A constant input. Gradients reach it but go nowhere.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Binds parameter `name` of `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        let value = store.by_index(idx).1.value.clone();
        Ok(self.push(value, Op::Leaf { param: Some(idx) }))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// `x W + b` for `x` of shape `[N, A]` (or `[A]`), `W` of `[A, B]`, `b` of `[B]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.rank() != 2 || bv.rank() != 1 || xv.rank() == 0 {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?}, W {:?}, b {:?}: need x rank 1-2, W rank 2, b rank 1",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (n, a) = xv.dims2();
        let (wa, wb) = wv.dims2();
        if a != wa || bv.numel() != wb {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?} . W {:?} + b {:?} do not conform",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * wb];
        for i in 0..n {
            let row = &mut out[i * wb..(i + 1) * wb];
            row.copy_from_slice(bd);
            for k in 0..a {
                let xik = xd[i * a + k];
                let wrow = &wd[k * wb..(k + 1) * wb];
                for (o, wkj) in row.iter_mut().zip(wrow) {
                    *o += xik * wkj;
                }
            }
        }
        let value = if xv.rank() == 1 {
            Tensor::vector(out)
        } else {
            Tensor::matrix(n, wb, out)?
        };
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match act {
                Activation::Tanh => v.tanh(),
                Activation::Gelu => gelu(v),
            })
            .collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Act { x, act })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = Tensor::vector(softmax_masked(self.value(x).data(), None));
        self.push(value, Op::Softmax { x })
    }

    /// Softmax over the entries of `x` whose mask is true. Masked entries get
    /// weight exactly 0 and receive exactly 0 gradient. `x` may be `[N]` or
    /// `[N, 1]`; the output is `[N]`.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != mask.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("scores {:?} vs mask of {}", xv.shape(), mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask {
                op: "masked_softmax",
            });
        }
        let value = Tensor::vector(softmax_masked(xv.data(), Some(mask)));
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xd = self.value(x).data();
        let m = xd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xd.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::vector(xd.iter().map(|v| v - lse).collect());
        self.push(value, Op::LogSoftmax { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Log { x })
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.powf(exponent)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Pow { x, exponent })
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    /// Scalar entry `index` of a flat view of `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.numel() {
            return Err(Error::shape(
                "select",
                format!("index {index} outside {:?}", xv.shape()),
            ));
        }
        let value = Tensor::scalar(xv.data()[index]);
        Ok(self.push(value, Op::Select { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Gradient reversal: identity forward, `-lambda * upstream` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Grl { x, lambda })
    }

    /// `sum_i w[i] * h[i, :]` over rows in ascending order.
    pub fn weighted_sum(&mut self, w: Var, h: Var) -> Result<Var> {
        let (wv, hv) = (self.value(w), self.value(h));
        let (m, d) = hv.dims2();
        if hv.rank() != 2 || wv.numel() != m {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} vs rows {:?}", wv.shape(), hv.shape()),
            ));
        }
        let mut out = vec![0.0; d];
        for (i, &wi) in wv.data().iter().enumerate() {
            for (o, hij) in out.iter_mut().zip(hv.row(i)) {
                *o += wi * hij;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedSum { w, h }))
    }

    /// Unweighted mean of the rows of `h` whose mask is true.
    pub fn masked_mean(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let hv = self.value(h);
        let (m, d) = hv.dims2();
        check_row_mask("masked_mean", hv, mask)?;
        let count = mask.iter().filter(|&&v| v).count();
        let mut out = vec![0.0; d];
        for i in (0..m).filter(|&i| mask[i]) {
            for (o, hij) in out.iter_mut().zip(hv.row(i)) {
                *o += hij;
            }
        }
        let inv = count as f64;
        out.iter_mut().for_each(|o| *o /= inv);
        Ok(self.push(
            Tensor::vector(out),
            Op::MaskedMean {
                h,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Per-column max over the rows of `h` whose mask is true. Ties go to the
    /// lowest row index.
    pub fn masked_max(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let hv = self.value(h);
        let (m, d) = hv.dims2();
        check_row_mask("masked_max", hv, mask)?;
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![usize::MAX; d];
        for i in (0..m).filter(|&i| mask[i]) {
            for (j, &v) in hv.row(i).iter().enumerate() {
                if v > out[j] || argmax[j] == usize::MAX {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaskedMax { h, argmax }))
    }

    /// Rows chosen by `masked_max` for each column, if `v` came from it.
    pub fn max_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaskedMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Seeds `d loss / d loss = 1` and propagates to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.nodes[loss.0].grad.data_mut()[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(node, before);
        }
        Ok(())
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = node.op {
                store.by_index_mut(idx).1.grad.add_assign(&node.grad);
            }
        }
    }
}

fn check_row_mask(op: &'static str, hv: &Tensor, mask: &[bool]) -> Result<()> {
    let (m, _) = hv.dims2();
    if hv.rank() != 2 || mask.len() != m {
        return Err(Error::shape(
            op,
            format!("rows {:?} vs mask of {}", hv.shape(), mask.len()),
        ));
    }
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptyMask { op });
    }
    Ok(())
}

fn softmax_masked(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let shifted: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if valid(i) { v } else { v + MASK_FILL })
        .collect();
    let m = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = shifted
        .iter()
        .enumerate()
        .map(|(i, &v)| if valid(i) { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

fn pow_deriv(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else if x == 0.0 {
        if p == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        p * x.powf(p - 1.0)
    }
}

fn propagate(node: &Node, before: &mut [Node]) {
    let dy = node.grad.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Linear { x, w, b } => {
            let (n, a) = before[x.0].value.dims2();
            let (_, bcols) = before[w.0].value.dims2();
            {
                let wd = before[w.0].value.data().to_vec();
                let gx = before[x.0].grad.data_mut();
                for i in 0..n {
                    for k in 0..a {
                        let wrow = &wd[k * bcols..(k + 1) * bcols];
                        let dyrow = &dy[i * bcols..(i + 1) * bcols];
                        gx[i * a + k] += wrow.iter().zip(dyrow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            {
                let xd = before[x.0].value.data().to_vec();
                let gw = before[w.0].grad.data_mut();
                for i in 0..n {
                    let dyrow = &dy[i * bcols..(i + 1) * bcols];
                    for k in 0..a {
                        let xik = xd[i * a + k];
                        for (g, d) in gw[k * bcols..(k + 1) * bcols].iter_mut().zip(dyrow) {
                            *g += xik * d;
                        }
                    }
                }
            }
            let gb = before[b.0].grad.data_mut();
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(&dy[i * bcols..(i + 1) * bcols]) {
                    *g += d;
                }
            }
        }
        Op::Act { x, act } => {
            let (xv, xg) = split_value_grad(&mut before[x.0]);
            for ((g, &xi), (&yi, &d)) in xg.iter_mut().zip(xv).zip(y.iter().zip(dy)) {
                let local = match act {
                    Activation::Tanh => 1.0 - yi * yi,
                    Activation::Gelu => gelu_deriv(xi),
                };
                *g += local * d;
            }
        }
        Op::Softmax { x } => {
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            let g = before[x.0].grad.data_mut();
            for i in 0..y.len() {
                g[i] += y[i] * (dy[i] - dot);
            }
        }
        Op::MaskedSoftmax { x, mask } => {
            let dot: f64 = y
                .iter()
                .zip(dy)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| a * b)
                .sum();
            let g = before[x.0].grad.data_mut();
            for i in (0..y.len()).filter(|&i| mask[i]) {
                g[i] += y[i] * (dy[i] - dot);
            }
        }
        Op::LogSoftmax { x } => {
            let total: f64 = dy.iter().sum();
            let g = before[x.0].grad.data_mut();
            for i in 0..y.len() {
                g[i] += dy[i] - y[i].exp() * total;
            }
        }
        Op::Log { x } => {
            let (xv, xg) = split_value_grad(&mut before[x.0]);
            for ((g, &xi), &d) in xg.iter_mut().zip(xv).zip(dy) {
                *g += d / xi;
            }
        }
        Op::Pow { x, exponent } => {
            let (xv, xg) = split_value_grad(&mut before[x.0]);
            for ((g, &xi), &d) in xg.iter_mut().zip(xv).zip(dy) {
                *g += pow_deriv(xi, *exponent) * d;
            }
        }
        Op::Affine { x, scale } => {
            for (g, &d) in before[x.0].grad.data_mut().iter_mut().zip(dy) {
                *g += scale * d;
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                for (g, &d) in before[v.0].grad.data_mut().iter_mut().zip(dy) {
                    *g += d;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            for ((g, bi), d) in before[a.0].grad.data_mut().iter_mut().zip(&bv).zip(dy) {
                *g += bi * d;
            }
            for ((g, ai), d) in before[b.0].grad.data_mut().iter_mut().zip(&av).zip(dy) {
                *g += ai * d;
            }
        }
        Op::Select { x, index } => {
            before[x.0].grad.data_mut()[*index] += dy[0];
        }
        Op::Sum { x } => {
            for g in before[x.0].grad.data_mut() {
                *g += dy[0];
            }
        }
        Op::Grl { x, lambda } => {
            for (g, &d) in before[x.0].grad.data_mut().iter_mut().zip(dy) {
                *g += -lambda * d;
            }
        }
        Op::WeightedSum { w, h } => {
            let (m, d) = before[h.0].value.dims2();
            let wv = before[w.0].value.data().to_vec();
            {
                let hv = before[h.0].value.data().to_vec();
                let gw = before[w.0].grad.data_mut();
                for i in 0..m {
                    gw[i] += hv[i * d..(i + 1) * d]
                        .iter()
                        .zip(dy)
                        .map(|(p, q)| p * q)
                        .sum::<f64>();
                }
            }
            let gh = before[h.0].grad.data_mut();
            for i in 0..m {
                for (g, dj) in gh[i * d..(i + 1) * d].iter_mut().zip(dy) {
                    *g += wv[i] * dj;
                }
            }
        }
        Op::MaskedMean { h, mask, count } => {
            let (_, d) = before[h.0].value.dims2();
            let inv = *count as f64;
            let gh = before[h.0].grad.data_mut();
            for i in (0..mask.len()).filter(|&i| mask[i]) {
                for (g, dj) in gh[i * d..(i + 1) * d].iter_mut().zip(dy) {
                    *g += dj / inv;
                }
            }
        }
        Op::MaskedMax { h, argmax } => {
            let (_, d) = before[h.0].value.dims2();
            let gh = before[h.0].grad.data_mut();
            for (j, &i) in argmax.iter().enumerate() {
                gh[i * d + j] += dy[j];
            }
        }
    }
}

fn split_value_grad(node: &mut Node) -> (&[f64], &mut [f64]) {
    (node.value.data(), node.grad.data_mut())
}
