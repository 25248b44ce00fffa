//! The op tape: recorded forward ops plus the reverse sweep.

use super::{numel, Element, Tensor, TensorError};
use crate::nn::kernels::{self, ConvGeom, TransposeGeom};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One recorded op: kind, input ids, and values saved for backward.
/// Inputs always precede the node that consumes them, so a single reverse
/// sweep visits every node after all of its consumers.
#[derive(Debug, Clone)]
pub(crate) enum Op<E: Element> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: E,
    },
    Sum {
        a: TensorId,
    },
    Mean {
        a: TensorId,
    },
    LeakyRelu {
        a: TensorId,
        alpha: E,
    },
    Sigmoid {
        a: TensorId,
    },
    /// `split` is the channel count contributed by `a`.
    Concat {
        a: TensorId,
        b: TensorId,
        split: usize,
    },
    Conv3d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        geom: TransposeGeom,
    },
    /// `argmax` holds, per output element, the linear input index that won.
    MaxPool3d {
        a: TensorId,
        argmax: Vec<usize>,
    },
    /// `mean`/`invstd` are the per-channel statistics the forward pass
    /// normalized with (batch statistics in train mode, running statistics
    /// otherwise).
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<E>,
        invstd: Vec<E>,
        train: bool,
    },
    BceWithLogits {
        logits: TensorId,
        target: TensorId,
    },
    SoftDice {
        logits: TensorId,
        target: TensorId,
        smooth: E,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<E: Element> {
    pub(crate) tensor: Tensor<E>,
    pub(crate) op: Op<E>,
}

/// Reverse-mode autodiff tape. Records ops as they execute; `backward`
/// replays them in reverse, accumulating gradients by the chain rule.
///
/// The tape is reset explicitly between training steps. Gradients land in
/// each tensor's `grad` field and stay zeroed for tensors the loss does
/// not reach.
#[derive(Debug)]
pub struct Tape<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and re-arms `backward`.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Inserts a tensor as a leaf node and returns its handle.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        id
    }

    /// Leaf that never tracks gradients (inputs, targets).
    pub fn constant(&mut self, tensor: Tensor<E>) -> TensorId {
        self.leaf(tensor.requires_grad(false))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Value of a scalar tensor.
    pub fn value(&self, id: TensorId) -> E {
        self.nodes[id.0].tensor.data[0]
    }

    pub(crate) fn push(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> TensorId {
        let requires_grad = self.op_inputs(&op).iter().any(|i| self.requires_grad(*i));
        let id = TensorId(self.nodes.len());
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// True when every recorded value (and gradient, where present) is
    /// finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.tensor.data.iter().all(|v| v.is_finite())
                && n.tensor
                    .grad
                    .as_ref()
                    .map_or(true, |g| g.iter().all(|v| v.is_finite()))
        })
    }

    fn op_inputs(&self, op: &Op<E>) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::LeakyRelu { a, .. }
            | Op::Sigmoid { a }
            | Op::MaxPool3d { a, .. } => vec![*a],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Conv3d { x, w, b, .. } | Op::ConvTranspose3d { x, w, b, .. } => {
                vec![*x, *w, *b]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BceWithLogits { logits, .. } | Op::SoftDice { logits, .. } => vec![*logits],
        }
    }

    // ── Elementwise and reduction ops ───────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, factor: E) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Scale { a, factor })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check_nonempty("sum", a)?;
        let s = self.data(a).iter().map(|v| v.as_f64()).sum::<f64>();
        Ok(self.push(vec![E::from_f64(s)], vec![1], Op::Sum { a }))
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.check_nonempty("mean", a)?;
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().map(|v| v.as_f64()).sum::<f64>() / n;
        Ok(self.push(vec![E::from_f64(s)], vec![1], Op::Mean { a }))
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_nonempty(&self, op: &'static str, a: TensorId) -> Result<(), TensorError> {
        if self.data(a).is_empty() {
            return Err(TensorError::EmptyTensor { op });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Runs the reverse sweep from a scalar loss. Gradients accumulate into
    /// every tensor with `requires_grad` recorded before the loss; the
    /// loss's own gradient is 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let loss_node = &self.nodes[loss.0].tensor;
        if loss_node.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        self.backward_done = true;

        // Gradients live in a parallel array during the sweep so node data
        // stays immutably borrowable.
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.tensor.requires_grad {
                grads[i] = Some(vec![E::zero(); node.tensor.numel()]);
            }
        }
        if let Some(g) = grads[loss.0].as_mut() {
            g[0] = E::one();
        }

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (before, at) = grads.split_at_mut(i);
            let g = at[0].as_ref().expect("grad allocated");
            self.backprop_node(i, g, before);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad {
                node.tensor.grad = g;
            }
        }
        Ok(())
    }

    /// Adds the backward contribution of node `i` into its inputs' grads.
    /// `grads` covers ids `< i`; entries are `Some` exactly for tensors
    /// that require gradients.
    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
            }
            Op::Mul { a, b } => {
                if grads[a.0].is_some() {
                    let bd = &self.nodes[b.0].tensor.data;
                    let ga = grads[a.0].as_mut().expect("checked");
                    for ((o, &v), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + v * bv;
                    }
                }
                if grads[b.0].is_some() {
                    let ad = &self.nodes[a.0].tensor.data;
                    let gb = grads[b.0].as_mut().expect("checked");
                    for ((o, &v), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + v * av;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o = *o + v * *factor;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let s = g[0];
                    for o in ga.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let s = g[0] / E::from_f64(ga.len() as f64);
                    for o in ga.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::LeakyRelu { a, alpha } => {
                if grads[a.0].is_some() {
                    let xd = &self.nodes[a.0].tensor.data;
                    let ga = grads[a.0].as_mut().expect("checked");
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(xd) {
                        let slope = if x > E::zero() { E::one() } else { *alpha };
                        *o = *o + v * slope;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    // d/dx sigmoid = y(1-y); y is this node's own output.
                    let yd = &node.tensor.data;
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(yd) {
                        *o = *o + v * y * (E::one() - y);
                    }
                }
            }
            Op::Concat { a, b, split } => {
                let a_shape = &self.nodes[a.0].tensor.shape;
                let batch = a_shape[0];
                let spatial: usize = a_shape[2..].iter().product();
                let ca = *split;
                let cb = self.nodes[b.0].tensor.shape[1];
                let row_a = ca * spatial;
                let row_b = cb * spatial;
                let row_out = row_a + row_b;
                if let Some(ga) = grads[a.0].as_mut() {
                    for n in 0..batch {
                        let src = &g[n * row_out..n * row_out + row_a];
                        let dst = &mut ga[n * row_a..(n + 1) * row_a];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for n in 0..batch {
                        let src = &g[n * row_out + row_a..(n + 1) * row_out];
                        let dst = &mut gb[n * row_b..(n + 1) * row_b];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                if grads[x.0].is_some() {
                    let wd = &self.nodes[w.0].tensor.data;
                    let gx = grads[x.0].as_mut().expect("checked");
                    kernels::conv3d_backward_input(g, wd, geom, gx);
                }
                if grads[w.0].is_some() {
                    let xd = &self.nodes[x.0].tensor.data;
                    let gw = grads[w.0].as_mut().expect("checked");
                    kernels::conv3d_backward_weight(g, xd, geom, gw);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    kernels::conv_backward_bias(g, geom.batch, geom.out_ch, gb);
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                if grads[x.0].is_some() {
                    let wd = &self.nodes[w.0].tensor.data;
                    let gx = grads[x.0].as_mut().expect("checked");
                    kernels::convt3d_backward_input(g, wd, geom, gx);
                }
                if grads[w.0].is_some() {
                    let xd = &self.nodes[x.0].tensor.data;
                    let gw = grads[w.0].as_mut().expect("checked");
                    kernels::convt3d_backward_weight(g, xd, geom, gw);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    kernels::conv_backward_bias(g, geom.batch, geom.out_ch, gb);
                }
            }
            Op::MaxPool3d { a, argmax } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for (&src, &v) in argmax.iter().zip(g) {
                        ga[src] = ga[src] + v;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xd = &self.nodes[x.0].tensor.data;
                let gammad = &self.nodes[gamma.0].tensor.data;
                let shape = &self.nodes[x.0].tensor.shape;
                let (batch, ch) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = (batch * spatial) as f64;

                // Per-channel reductions shared by all three input grads.
                let mut sum_dy = vec![0.0f64; ch];
                let mut sum_dy_xhat = vec![0.0f64; ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * spatial;
                        let mu = mean[c].as_f64();
                        let is = invstd[c].as_f64();
                        for k in 0..spatial {
                            let dy = g[base + k].as_f64();
                            let xhat = (xd[base + k].as_f64() - mu) * is;
                            sum_dy[c] += dy;
                            sum_dy_xhat[c] += dy * xhat;
                        }
                    }
                }
                if let Some(gg) = grads[gamma.0].as_mut() {
                    for c in 0..ch {
                        gg[c] = gg[c] + E::from_f64(sum_dy_xhat[c]);
                    }
                }
                if let Some(gb) = grads[beta.0].as_mut() {
                    for c in 0..ch {
                        gb[c] = gb[c] + E::from_f64(sum_dy[c]);
                    }
                }
                if let Some(gx) = grads[x.0].as_mut() {
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * spatial;
                            let mu = mean[c].as_f64();
                            let is = invstd[c].as_f64();
                            let gam = gammad[c].as_f64();
                            if *train {
                                // Batch statistics depend on x, so the
                                // mean/variance paths contribute too.
                                let k1 = sum_dy[c] / m;
                                let k2 = sum_dy_xhat[c] / m;
                                for k in 0..spatial {
                                    let dy = g[base + k].as_f64();
                                    let xhat = (xd[base + k].as_f64() - mu) * is;
                                    let dx = gam * is * (dy - k1 - xhat * k2);
                                    gx[base + k] = gx[base + k] + E::from_f64(dx);
                                }
                            } else {
                                // Running statistics are constants.
                                for k in 0..spatial {
                                    let dy = g[base + k].as_f64();
                                    gx[base + k] = gx[base + k] + E::from_f64(dy * gam * is);
                                }
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, target } => {
                if grads[logits.0].is_some() {
                    let xd = &self.nodes[logits.0].tensor.data;
                    let td = &self.nodes[target.0].tensor.data;
                    let gl = grads[logits.0].as_mut().expect("checked");
                    let scale = g[0] / E::from_f64(xd.len() as f64);
                    for ((o, &x), &t) in gl.iter_mut().zip(xd).zip(td) {
                        *o = *o + scale * (stable_sigmoid(x) - t);
                    }
                }
            }
            Op::SoftDice {
                logits,
                target,
                smooth,
            } => {
                if grads[logits.0].is_some() {
                    let xd = &self.nodes[logits.0].tensor.data;
                    let td = &self.nodes[target.0].tensor.data;
                    let gl = grads[logits.0].as_mut().expect("checked");
                    let mut sum_pt = 0.0f64;
                    let mut sum_p = 0.0f64;
                    let mut sum_t = 0.0f64;
                    for (&x, &t) in xd.iter().zip(td) {
                        let p = stable_sigmoid(x).as_f64();
                        sum_pt += p * t.as_f64();
                        sum_p += p;
                        sum_t += t.as_f64();
                    }
                    let s = smooth.as_f64();
                    let num = 2.0 * sum_pt + s;
                    let den = sum_p + sum_t + s;
                    let g0 = g[0].as_f64();
                    for ((o, &x), &t) in gl.iter_mut().zip(xd).zip(td) {
                        let p = stable_sigmoid(x).as_f64();
                        // d(1 - num/den)/dp = -(2 t den - num) / den^2
                        let dp = -(2.0 * t.as_f64() * den - num) / (den * den);
                        let dx = dp * p * (1.0 - p);
                        *o = *o + E::from_f64(g0 * dx);
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function; never overflows for large |x|.
pub(crate) fn stable_sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(tape: &mut Tape<f64>, data: Vec<f64>, shape: &[usize]) -> TensorId {
        let t = Tensor::from_vec(data, shape).unwrap().requires_grad(true);
        tape.leaf(t)
    }

    #[test]
    fn add_identity_and_mul_identity() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0, -2.0, 3.0], &[3]);
        let zeros = tape.constant(Tensor::zeros(&[3]).unwrap());
        let ones = tape.constant(Tensor::full(&[3], 1.0).unwrap());
        let a = tape.add(x, zeros).unwrap();
        assert_eq!(tape.data(a), tape.data(x));
        let m = tape.mul(x, ones).unwrap();
        assert_eq!(tape.data(m), tape.data(x));
    }

    #[test]
    fn scale_by_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap());
        let y = tape.scale(x, 2.0);
        assert_eq!(tape.data(y), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sum_and_mean() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2, 2, 2], 1.0).unwrap());
        let s = tape.sum(ones).unwrap();
        assert_eq!(tape.value(s), 8.0);
        let c = tape.constant(Tensor::full(&[5], 3.25).unwrap());
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.value(m), 3.25);
    }

    #[test]
    fn sum_accumulates_in_higher_precision() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[10], 0.1).unwrap());
        let s = tape.sum(x).unwrap();
        assert!((tape.value(s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![3.0, 5.0, -7.0], &[3]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_scale_linearity() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0, 2.0], &[2]);
        let y = tape.scale(x, 3.0);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_chain_rule_through_mul() {
        // loss = sum(x * x) at x = [1, 2] has gradient 2x = [2, 4].
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0, 2.0], &[2]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_accumulates_when_tensor_used_twice() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0, 1.0], &[2]);
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0, 2.0], &[2]);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_twice_needs_reset() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![2.0], &[1]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::BackwardAlreadyRun)
        ));
        tape.reset();
        assert!(tape.is_empty());
        let x = leaf_grad(&mut tape, vec![2.0], &[1]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_grad(&mut tape, vec![1.0], &[1]);
        let c = tape.constant(Tensor::full(&[1], 5.0).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn stable_sigmoid_saturates_without_overflow() {
        assert!((stable_sigmoid(50.0f64) - 1.0).abs() < 1e-15);
        assert!(stable_sigmoid(-50.0f64) < 1e-15);
        assert!(stable_sigmoid(-50.0f64) > 0.0);
        assert_eq!(stable_sigmoid(0.0f64), 0.5);
    }
}
