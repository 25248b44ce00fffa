//! Differentiable 3D layer ops: convolution, transposed convolution, max
//! pooling, batch normalization, activations, channel concatenation, and
//! the two segmentation losses.
//!
//! Each op validates shapes, computes its forward value through the
//! kernels in [`kernels`], and records itself on the [`Tape`].

pub mod kernels;

use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, TensorError, TensorId};
use kernels::{ConvGeom, TransposeGeom};

/// Forward phase: train mode uses batch statistics and updates running
/// buffers, infer mode reads the running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Zero-padding policy for `conv3d`. `Same` preserves spatial extents at
/// stride 1; `Valid` shrinks by `kernel - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Convolution parameter record: geometry plus weight/bias buffers.
/// Weight layout is `[out_ch, in_ch, kd, kh, kw]`, bias `[out_ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<E: Element> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: Padding,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> ConvParams<E> {
    /// He-style initialization scaled by fan-in with the Leaky-ReLU gain
    /// `sqrt(2 / (1 + alpha^2))`; bias starts at zero.
    pub fn he_init(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: usize,
        padding: Padding,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, TensorError> {
        let fan_in = (in_channels * kernel.iter().product::<usize>()) as f64;
        let std = (2.0 / ((1.0 + alpha * alpha) * fan_in)).sqrt();
        let weight = Tensor::randn(
            &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            seed,
            std,
        )?;
        let bias = Tensor::zeros(&[out_channels])?;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let expect = [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ];
        if self.weight.shape != expect {
            return Err(TensorError::InvalidShape {
                op: "conv_params",
                detail: format!(
                    "weight shape {:?} inconsistent with fields {:?}",
                    self.weight.shape, expect
                ),
            });
        }
        if self.bias.shape != [self.out_channels] {
            return Err(TensorError::InvalidShape {
                op: "conv_params",
                detail: format!("bias shape {:?}", self.bias.shape),
            });
        }
        Ok(())
    }
}

/// Batch-normalization parameters and running statistics for one channel
/// axis. `momentum` weights the old running value: `r ← m·r + (1−m)·batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<E: Element> {
    pub channels: usize,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<E: Element> BatchNormParams<E> {
    pub fn new(channels: usize) -> Result<Self, TensorError> {
        Ok(Self {
            channels,
            gamma: Tensor::full(&[channels], E::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            epsilon: 1e-5,
            momentum: 0.9,
        })
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running(&mut self, mean: &[E], var: &[E]) {
        let m = E::from_f64(self.momentum);
        let one_m = E::one() - m;
        for c in 0..self.channels {
            self.running_mean[c] = m * self.running_mean[c] + one_m * mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * var[c];
        }
    }
}

impl<E: Element> Tape<E> {
    /// 3D cross-correlation plus bias. Weight layout `[out, in, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                detail: format!("need 5-D input and weight, got {xs:?} and {ws:?}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadParameter {
                op: "conv3d",
                detail: "stride must be positive".into(),
            });
        }
        let (batch, in_ch) = (xs[0], xs[1]);
        let in_dims = [xs[2], xs[3], xs[4]];
        let (out_ch, w_in_ch) = (ws[0], ws[1]);
        let kernel = [ws[2], ws[3], ws[4]];
        if w_in_ch != in_ch {
            return Err(TensorError::ChannelMismatch {
                op: "conv3d",
                expected: w_in_ch,
                got: in_ch,
            });
        }
        if self.shape(b) != [out_ch] {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                detail: format!("bias shape {:?}, want [{out_ch}]", self.shape(b)),
            });
        }
        let (pad, out_dims) = match padding {
            Padding::Same => {
                if stride != 1 || kernel.iter().any(|&k| k % 2 == 0) {
                    return Err(TensorError::BadParameter {
                        op: "conv3d",
                        detail: format!(
                            "same padding needs stride 1 and odd kernel, got stride {stride} kernel {kernel:?}"
                        ),
                    });
                }
                let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
                (pad, in_dims)
            }
            Padding::Valid => {
                const AXES: [&str; 3] = ["depth", "height", "width"];
                for a in 0..3 {
                    if in_dims[a] < kernel[a] {
                        return Err(TensorError::InputTooSmall {
                            op: "conv3d",
                            axis: AXES[a],
                            extent: in_dims[a],
                            kernel: kernel[a],
                        });
                    }
                }
                let out = [
                    (in_dims[0] - kernel[0]) / stride + 1,
                    (in_dims[1] - kernel[1]) / stride + 1,
                    (in_dims[2] - kernel[2]) / stride + 1,
                ];
                ([0, 0, 0], out)
            }
        };
        let geom = ConvGeom {
            batch,
            in_ch,
            out_ch,
            in_dims,
            out_dims,
            kernel,
            stride,
            pad,
        };
        let mut out = vec![E::zero(); batch * out_ch * geom.out_spatial()];
        kernels::conv3d_forward(self.data(x), self.data(w), self.data(b), &geom, &mut out);
        let shape = vec![batch, out_ch, out_dims[0], out_dims[1], out_dims[2]];
        Ok(self.push(out, shape, Op::Conv3d { x, w, b, geom }))
    }

    /// Transposed convolution with kernel extent equal to the stride;
    /// spatial extents multiply by the stride. The adjoint of a
    /// stride-`s` valid convolution with the same weights.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose3d",
                detail: format!("need 5-D input and weight, got {xs:?} and {ws:?}"),
            });
        }
        let kernel = [ws[2], ws[3], ws[4]];
        if stride == 0 || kernel != [stride; 3] {
            return Err(TensorError::BadParameter {
                op: "conv_transpose3d",
                detail: format!("kernel {kernel:?} must equal stride {stride} per axis"),
            });
        }
        let (batch, in_ch) = (xs[0], xs[1]);
        let (out_ch, w_in_ch) = (ws[0], ws[1]);
        if w_in_ch != in_ch {
            return Err(TensorError::ChannelMismatch {
                op: "conv_transpose3d",
                expected: w_in_ch,
                got: in_ch,
            });
        }
        if self.shape(b) != [out_ch] {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose3d",
                detail: format!("bias shape {:?}, want [{out_ch}]", self.shape(b)),
            });
        }
        let in_dims = [xs[2], xs[3], xs[4]];
        let out_dims = [in_dims[0] * stride, in_dims[1] * stride, in_dims[2] * stride];
        let geom = TransposeGeom {
            batch,
            in_ch,
            out_ch,
            in_dims,
            out_dims,
            stride,
        };
        let mut out = vec![E::zero(); batch * out_ch * geom.out_spatial()];
        kernels::convt3d_forward(self.data(x), self.data(w), self.data(b), &geom, &mut out);
        let shape = vec![batch, out_ch, out_dims[0], out_dims[1], out_dims[2]];
        Ok(self.push(out, shape, Op::ConvTranspose3d { x, w, b, geom }))
    }

    /// 2×2×2 max pooling; every spatial extent must be even and halves.
    pub fn maxpool3d(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "maxpool3d",
                detail: format!("need 5-D input, got {xs:?}"),
            });
        }
        const AXES: [&str; 3] = ["depth", "height", "width"];
        for a in 0..3 {
            if xs[2 + a] % 2 != 0 {
                return Err(TensorError::OddExtent {
                    op: "maxpool3d",
                    axis: AXES[a],
                    extent: xs[2 + a],
                });
            }
        }
        let (out, argmax) =
            kernels::maxpool3d_forward(self.data(x), xs[0], xs[1], [xs[2], xs[3], xs[4]]);
        let shape = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2];
        Ok(self.push(out, shape, Op::MaxPool3d { a: x, argmax }))
    }

    /// Per-channel normalization with the supplied statistics, then
    /// scale/shift by gamma/beta. Pass batch statistics with
    /// `train = true` (gradients flow through them) or running statistics
    /// with `train = false` (treated as constants).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[E],
        var: &[E],
        epsilon: f64,
        train: bool,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "batchnorm3d",
                detail: format!("need 5-D input, got {xs:?}"),
            });
        }
        let ch = xs[1];
        for (name, len) in [
            ("gamma", self.data(gamma).len()),
            ("beta", self.data(beta).len()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != ch {
                return Err(TensorError::ChannelMismatch {
                    op: match name {
                        "gamma" => "batchnorm3d gamma",
                        "beta" => "batchnorm3d beta",
                        "mean" => "batchnorm3d mean",
                        _ => "batchnorm3d var",
                    },
                    expected: ch,
                    got: len,
                });
            }
        }
        let invstd: Vec<E> = var
            .iter()
            .map(|&v| E::from_f64(1.0 / (v.as_f64() + epsilon).sqrt()))
            .collect();
        let mean = mean.to_vec();
        let (batch, spatial) = (xs[0], xs[2] * xs[3] * xs[4]);
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![E::zero(); xd.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * spatial;
                let (mu, is, ga, be) = (mean[c], invstd[c], gd[c], bd[c]);
                for k in 0..spatial {
                    out[base + k] = ga * (xd[base + k] - mu) * is + be;
                }
            }
        }
        Ok(self.push(
            out,
            xs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
        ))
    }

    /// Per-channel mean and biased variance of a 5-D activation
    /// (accumulated in f64), for feeding [`Tape::batchnorm3d`].
    pub fn channel_stats(&self, x: TensorId) -> (Vec<E>, Vec<E>) {
        let xs = self.shape(x);
        let (mean, var) = kernels::channel_moments(
            self.data(x),
            xs[0],
            xs[1],
            xs[2] * xs[3] * xs[4],
        );
        (
            mean.into_iter().map(E::from_f64).collect(),
            var.into_iter().map(E::from_f64).collect(),
        )
    }

    /// `x` where positive, `alpha·x` otherwise.
    pub fn leaky_relu(&mut self, x: TensorId, alpha: E) -> Result<TensorId, TensorError> {
        let a = alpha.as_f64();
        if !(0.0..1.0).contains(&a) {
            return Err(TensorError::BadParameter {
                op: "leaky_relu",
                detail: format!("alpha {a} outside [0, 1)"),
            });
        }
        let data: Vec<E> = self
            .data(x)
            .iter()
            .map(|&v| if v > E::zero() { v } else { alpha * v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::LeakyRelu { a: x, alpha }))
    }

    /// Numerically stable logistic function; outputs in (0, 1).
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<E> = self
            .data(x)
            .iter()
            .map(|&v| crate::tensor::tape::stable_sigmoid(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, Op::Sigmoid { a: x })
    }

    /// Concatenates along the channel axis; `a` occupies the leading
    /// channels. Batch and spatial extents must match.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 5 || sb.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "concat_channels",
                detail: format!("need 5-D inputs, got {sa:?} and {sb:?}"),
            });
        }
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let spatial: usize = sa[2..].iter().product();
        let (row_a, row_b) = (ca * spatial, cb * spatial);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for n in 0..batch {
            out.extend_from_slice(&ad[n * row_a..(n + 1) * row_a]);
            out.extend_from_slice(&bd[n * row_b..(n + 1) * row_b]);
        }
        let shape = vec![batch, ca + cb, sa[2], sa[3], sa[4]];
        Ok(self.push(out, shape, Op::Concat { a, b, split: ca }))
    }

    /// Mean binary cross-entropy over voxels, evaluated in the stable
    /// log-sum-exp form `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits_loss(
        &mut self,
        logits: TensorId,
        target: TensorId,
    ) -> Result<TensorId, TensorError> {
        self.check_loss_inputs("bce_with_logits", logits, target)?;
        let xd = self.data(logits);
        let td = self.data(target);
        let mut acc = 0.0f64;
        for (&x, &t) in xd.iter().zip(td) {
            let x = x.as_f64();
            let t = t.as_f64();
            acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let val = E::from_f64(acc / xd.len() as f64);
        Ok(self.push(vec![val], vec![1], Op::BceWithLogits { logits, target }))
    }

    /// Soft Dice loss `1 − (2·Σpt + s) / (Σp + Σt + s)` with `p` the
    /// sigmoid of the logits and smoothing `s = 1`.
    pub fn soft_dice_loss(
        &mut self,
        logits: TensorId,
        target: TensorId,
    ) -> Result<TensorId, TensorError> {
        self.check_loss_inputs("soft_dice", logits, target)?;
        let smooth = E::one();
        let xd = self.data(logits);
        let td = self.data(target);
        let (mut sum_pt, mut sum_p, mut sum_t) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &t) in xd.iter().zip(td) {
            let p = crate::tensor::tape::stable_sigmoid(x).as_f64();
            sum_pt += p * t.as_f64();
            sum_p += p;
            sum_t += t.as_f64();
        }
        let s = smooth.as_f64();
        let val = E::from_f64(1.0 - (2.0 * sum_pt + s) / (sum_p + sum_t + s));
        Ok(self.push(
            vec![val],
            vec![1],
            Op::SoftDice {
                logits,
                target,
                smooth,
            },
        ))
    }

    fn check_loss_inputs(
        &self,
        op: &'static str,
        logits: TensorId,
        target: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(logits) != self.shape(target) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(logits).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        if self
            .data(target)
            .iter()
            .any(|&t| t != E::zero() && t != E::one())
        {
            return Err(TensorError::BadParameter {
                op,
                detail: "target must be binary (0/1)".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SplitMix64;

    // ── Independent brute-force references ──────────────────────────
    // Straight transcriptions of the op definitions, kept free of the
    // kernel code paths they check.

    #[allow(clippy::too_many_arguments)]
    fn oracle_conv3d(
        x: &[f64],
        xs: [usize; 5],
        w: &[f64],
        ws: [usize; 5],
        bias: &[f64],
        stride: usize,
        pad: [usize; 3],
        out_dims: [usize; 3],
    ) -> Vec<f64> {
        let [n, ci, id, ih, iw] = xs;
        let [co, _, kd, kh, kw] = ws;
        let [od, oh, ow] = out_dims;
        let mut out = vec![0.0; n * co * od * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut acc = bias[o];
                            for c in 0..ci {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let zi = (zo * stride + kz) as isize - pad[0] as isize;
                                            let yi = (yo * stride + ky) as isize - pad[1] as isize;
                                            let xi = (xo * stride + kx) as isize - pad[2] as isize;
                                            if zi < 0
                                                || yi < 0
                                                || xi < 0
                                                || zi >= id as isize
                                                || yi >= ih as isize
                                                || xi >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xv = x[(((b * ci + c) * id + zi as usize) * ih
                                                + yi as usize)
                                                * iw
                                                + xi as usize];
                                            let wv = w[(((o * ci + c) * kd + kz) * kh + ky) * kw
                                                + kx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * co + o) * od + zo) * oh + yo) * ow + xo] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    // Direct adjoint summation: scatter every input voxel into its block.
    fn oracle_convt3d(
        x: &[f64],
        xs: [usize; 5],
        w: &[f64],
        ws: [usize; 5],
        bias: &[f64],
        s: usize,
    ) -> Vec<f64> {
        let [n, ci, id, ih, iw] = xs;
        let co = ws[0];
        let (od, oh, ow) = (id * s, ih * s, iw * s);
        let mut out = vec![0.0; n * co * od * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for v in out[(b * co + o) * od * oh * ow..(b * co + o + 1) * od * oh * ow]
                    .iter_mut()
                {
                    *v = bias[o];
                }
                for c in 0..ci {
                    for z in 0..id {
                        for y in 0..ih {
                            for xv in 0..iw {
                                let inp = x[(((b * ci + c) * id + z) * ih + y) * iw + xv];
                                for kz in 0..s {
                                    for ky in 0..s {
                                        for kx in 0..s {
                                            let wv = w[((o * ci + c) * s * s * s)
                                                + (kz * s + ky) * s
                                                + kx];
                                            out[(((b * co + o) * od + z * s + kz) * oh
                                                + y * s
                                                + ky)
                                                * ow
                                                + xv * s
                                                + kx] += inp * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    // Exhaustive per-block max.
    fn oracle_maxpool(x: &[f64], n: usize, c: usize, dims: [usize; 3]) -> Vec<f64> {
        let [id, ih, iw] = dims;
        let (od, oh, ow) = (id / 2, ih / 2, iw / 2);
        let mut out = vec![f64::NEG_INFINITY; n * c * od * oh * ow];
        for nc in 0..n * c {
            for zi in 0..id {
                for yi in 0..ih {
                    for xi in 0..iw {
                        let v = x[nc * id * ih * iw + (zi * ih + yi) * iw + xi];
                        let oi = nc * od * oh * ow + ((zi / 2) * oh + yi / 2) * ow + xi / 2;
                        if v > out[oi] {
                            out[oi] = v;
                        }
                    }
                }
            }
        }
        out
    }

    fn randn_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| rng.next_normal()).collect()
    }

    fn tape_with<E: Element>(data: Vec<E>, shape: &[usize]) -> (Tape<E>, TensorId) {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::from_vec(data, shape).unwrap());
        (tape, id)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    // ── conv3d ──────────────────────────────────────────────────────

    #[test]
    fn conv3d_identity_kernel_preserves_input() {
        let x = randn_vec(27, 3);
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // center of the 3×3×3 kernel
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(Tensor::from_vec(x.clone(), &[1, 1, 3, 3, 3]).unwrap());
        let wi = tape.constant(Tensor::from_vec(w, &[1, 1, 3, 3, 3]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1]).unwrap());
        let out = tape.conv3d(xi, wi, bi, 1, Padding::Same).unwrap();
        assert!(max_abs_diff(tape.data(out), &x) == 0.0);
    }

    #[test]
    fn conv3d_zero_kernel_gives_zeros() {
        let (mut tape, xi) = tape_with(randn_vec(27, 5), &[1, 1, 3, 3, 3]);
        let wi = tape.constant(Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1]).unwrap());
        let out = tape.conv3d(xi, wi, bi, 1, Padding::Same).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_ones_cube_neighbor_counts() {
        // All-ones 3³ input and kernel: each output voxel counts its
        // in-bounds neighbors.
        let (mut tape, xi) = tape_with(vec![1.0; 27], &[1, 1, 3, 3, 3]);
        let wi = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1]).unwrap());
        let out = tape.conv3d(xi, wi, bi, 1, Padding::Same).unwrap();
        let o = tape.data(out);
        let at = |z: usize, y: usize, x: usize| o[(z * 3 + y) * 3 + x];
        assert_eq!(at(1, 1, 1), 27.0); // center
        assert_eq!(at(0, 0, 0), 8.0); // corner
        assert_eq!(at(1, 1, 0), 18.0); // face center
        assert_eq!(at(0, 1, 0), 12.0); // edge center
        // And the whole volume against the reference.
        let oracle = oracle_conv3d(
            &vec![1.0; 27],
            [1, 1, 3, 3, 3],
            &vec![1.0; 27],
            [1, 1, 3, 3, 3],
            &[0.0],
            1,
            [1, 1, 1],
            [3, 3, 3],
        );
        assert!(max_abs_diff(o, &oracle) == 0.0);
    }

    #[test]
    fn conv3d_matches_oracle_on_random_cases() {
        // (shape, weight shape, stride, padding)
        let cases: Vec<([usize; 5], [usize; 5], usize, Padding)> = vec![
            ([1, 1, 4, 4, 4], [2, 1, 3, 3, 3], 1, Padding::Same),
            ([2, 3, 5, 4, 6], [2, 3, 3, 3, 3], 1, Padding::Same),
            ([1, 2, 5, 5, 5], [3, 2, 3, 3, 3], 1, Padding::Valid),
            ([1, 2, 4, 4, 4], [2, 2, 1, 1, 1], 1, Padding::Same),
            ([1, 1, 7, 7, 7], [2, 1, 3, 3, 3], 2, Padding::Valid),
        ];
        for (i, (xs, ws, stride, padding)) in cases.into_iter().enumerate() {
            let x = randn_vec(xs.iter().product(), 100 + i as u64);
            let w = randn_vec(ws.iter().product(), 200 + i as u64);
            let bias = randn_vec(ws[0], 300 + i as u64);
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(Tensor::from_vec(x.clone(), &xs).unwrap());
            let wi = tape.constant(Tensor::from_vec(w.clone(), &ws).unwrap());
            let bi = tape.constant(Tensor::from_vec(bias.clone(), &[ws[0]]).unwrap());
            let out = tape.conv3d(xi, wi, bi, stride, padding).unwrap();
            let os = tape.shape(out).to_vec();
            let pad = match padding {
                Padding::Same => [ws[2] / 2, ws[3] / 2, ws[4] / 2],
                Padding::Valid => [0, 0, 0],
            };
            let oracle = oracle_conv3d(
                &x,
                xs,
                &w,
                ws,
                &bias,
                stride,
                pad,
                [os[2], os[3], os[4]],
            );
            assert!(
                max_abs_diff(tape.data(out), &oracle) < 1e-12,
                "case {i} disagrees with reference"
            );
        }
    }

    #[test]
    fn conv3d_linear_in_input() {
        // conv(a·x + b·y) == a·conv(x) + b·conv(y) once the bias is
        // discounted.
        let (a, b) = (0.7f64, -1.3f64);
        let x = randn_vec(64, 11);
        let y = randn_vec(64, 12);
        let w = randn_vec(27, 13);
        let bias = vec![0.45];
        let run = |input: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(Tensor::from_vec(input, &[1, 1, 4, 4, 4]).unwrap());
            let wi = tape.constant(Tensor::from_vec(w.clone(), &[1, 1, 3, 3, 3]).unwrap());
            let bi = tape.constant(Tensor::from_vec(bias.clone(), &[1]).unwrap());
            let out = tape.conv3d(xi, wi, bi, 1, Padding::Same).unwrap();
            tape.data(out).to_vec()
        };
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = run(mixed);
        let (cx, cy) = (run(x), run(y));
        for i in 0..lhs.len() {
            let rhs = a * (cx[i] - bias[0]) + b * (cy[i] - bias[0]) + bias[0];
            assert!((lhs[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn conv3d_rejects_channel_mismatch_and_undersized_input() {
        let (mut tape, xi) = tape_with(vec![0.0f32; 2 * 8], &[1, 2, 2, 2, 2]);
        let wi = tape.constant(Tensor::zeros(&[1, 3, 1, 1, 1]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1]).unwrap());
        assert!(matches!(
            tape.conv3d(xi, wi, bi, 1, Padding::Valid),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let wi = tape.constant(Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap());
        assert!(matches!(
            tape.conv3d(xi, wi, bi, 1, Padding::Valid),
            Err(TensorError::InputTooSmall { .. })
        ));
    }

    // ── conv_transpose3d ────────────────────────────────────────────

    #[test]
    fn convt3d_broadcasts_single_voxel() {
        let v = 2.5;
        let (mut tape, xi) = tape_with(vec![v], &[1, 1, 1, 1, 1]);
        let wi = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1]).unwrap());
        let out = tape.conv_transpose3d(xi, wi, bi, 2).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 2, 2, 2]);
        assert!(tape.data(out).iter().all(|&o| o == v));
    }

    #[test]
    fn convt3d_zero_kernel_gives_zeros() {
        let (mut tape, xi) = tape_with(randn_vec(8, 21), &[1, 1, 2, 2, 2]);
        let wi = tape.constant(Tensor::zeros(&[2, 1, 2, 2, 2]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[2]).unwrap());
        let out = tape.conv_transpose3d(xi, wi, bi, 2).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convt3d_matches_scatter_add_oracle() {
        let xs = [1usize, 2, 2, 3, 2];
        let ws = [3usize, 2, 2, 2, 2];
        let x = randn_vec(xs.iter().product(), 31);
        let w = randn_vec(ws.iter().product(), 32);
        let bias = randn_vec(3, 33);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(Tensor::from_vec(x.clone(), &xs).unwrap());
        let wi = tape.constant(Tensor::from_vec(w.clone(), &ws).unwrap());
        let bi = tape.constant(Tensor::from_vec(bias.clone(), &[3]).unwrap());
        let out = tape.conv_transpose3d(xi, wi, bi, 2).unwrap();
        assert_eq!(tape.shape(out), &[1, 3, 4, 6, 4]);
        let oracle = oracle_convt3d(&x, xs, &w, ws, &bias, 2);
        assert!(max_abs_diff(tape.data(out), &oracle) < 1e-12);
    }

    #[test]
    fn convt3d_doubles_each_extent() {
        let (mut tape, xi) = tape_with(randn_vec(3 * 4 * 5, 41), &[1, 1, 3, 4, 5]);
        let wi = tape.constant(Tensor::randn(&[2, 1, 2, 2, 2], 7, 0.1).unwrap());
        let bi = tape.constant(Tensor::zeros(&[2]).unwrap());
        let out = tape.conv_transpose3d(xi, wi, bi, 2).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 6, 8, 10]);
    }

    // ── maxpool3d ───────────────────────────────────────────────────

    #[test]
    fn maxpool_constant_volume_stays_constant() {
        let (mut tape, xi) = tape_with(vec![3.5f64; 4 * 4 * 4], &[1, 1, 4, 4, 4]);
        let out = tape.maxpool3d(xi).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 2, 2, 2]);
        assert!(tape.data(out).iter().all(|&v| v == 3.5));
    }

    #[test]
    fn maxpool_enumerated_block() {
        let (mut tape, xi) = tape_with((1..=8).map(|v| v as f64).collect(), &[1, 1, 2, 2, 2]);
        let out = tape.maxpool3d(xi).unwrap();
        assert_eq!(tape.data(out), &[8.0]);
    }

    #[test]
    fn maxpool_matches_block_scan_oracle() {
        let x = randn_vec(2 * 4 * 4 * 4, 55);
        let (mut tape, xi) = tape_with(x.clone(), &[1, 2, 4, 4, 4]);
        let out = tape.maxpool3d(xi).unwrap();
        let oracle = oracle_maxpool(&x, 1, 2, [4, 4, 4]);
        assert_eq!(tape.data(out), &oracle[..]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let (mut tape, xi) = tape_with(vec![0.0f32; 2 * 4 * 4], &[1, 1, 2, 4, 4]);
        let _ = xi;
        let bad = tape.constant(Tensor::zeros(&[1, 1, 3, 4, 4]).unwrap());
        match tape.maxpool3d(bad) {
            Err(TensorError::OddExtent { axis, extent, .. }) => {
                assert_eq!(axis, "depth");
                assert_eq!(extent, 3);
            }
            other => panic!("expected OddExtent, got {other:?}"),
        }
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(
            Tensor::from_vec(vec![7.0; 8], &[1, 1, 2, 2, 2])
                .unwrap()
                .requires_grad(true),
        );
        let out = tape.maxpool3d(xi).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xi).unwrap();
        assert_eq!(g[0], 1.0);
        assert!(g[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_dominates_every_block_member() {
        let x = randn_vec(4 * 4 * 4, 77);
        let (mut tape, xi) = tape_with(x.clone(), &[1, 1, 4, 4, 4]);
        let out = tape.maxpool3d(xi).unwrap();
        let o = tape.data(out);
        for zi in 0..4 {
            for yi in 0..4 {
                for xv in 0..4 {
                    let pooled = o[((zi / 2) * 2 + yi / 2) * 2 + xv / 2];
                    assert!(pooled >= x[(zi * 4 + yi) * 4 + xv]);
                }
            }
        }
    }

    // ── batchnorm3d ─────────────────────────────────────────────────

    fn bn_forward(
        x: Vec<f64>,
        shape: &[usize],
        gamma: Vec<f64>,
        beta: Vec<f64>,
    ) -> (Tape<f64>, TensorId) {
        let ch = shape[1];
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(Tensor::from_vec(x, shape).unwrap());
        let gi = tape.constant(Tensor::from_vec(gamma, &[ch]).unwrap());
        let bi = tape.constant(Tensor::from_vec(beta, &[ch]).unwrap());
        let (mean, var) = tape.channel_stats(xi);
        let out = tape
            .batchnorm3d(xi, gi, bi, &mean, &var, 1e-5, true)
            .unwrap();
        (tape, out)
    }

    #[test]
    fn batchnorm_constant_input_collapses_to_beta() {
        let (tape, out) = bn_forward(vec![4.2; 2 * 8], &[1, 2, 2, 2, 2], vec![1.0; 2], vec![
            0.0; 2
        ]);
        assert!(tape.data(out).iter().all(|&v| v.abs() < 1e-3));
    }

    #[test]
    fn batchnorm_shift_moves_channel_mean() {
        let x = randn_vec(2 * 64, 61);
        let (tape, out) = bn_forward(x, &[1, 2, 4, 4, 4], vec![1.0; 2], vec![5.0; 2]);
        let o = tape.data(out);
        for c in 0..2 {
            let mean: f64 = o[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0;
            assert!((mean - 5.0).abs() < 1e-6, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn batchnorm_normalizes_channel_moments() {
        // Recompute moments directly from the output.
        let x: Vec<f64> = randn_vec(2 * 64, 62)
            .into_iter()
            .map(|v| 3.0 * v + 7.0)
            .collect();
        let (tape, out) = bn_forward(x, &[1, 2, 4, 4, 4], vec![1.0; 2], vec![0.0; 2]);
        let o = tape.data(out);
        for c in 0..2 {
            let ch = &o[c * 64..(c + 1) * 64];
            let mean: f64 = ch.iter().sum::<f64>() / 64.0;
            let var: f64 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap());
        let gi = tape.constant(Tensor::zeros(&[3]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[2]).unwrap());
        let (mean, var) = tape.channel_stats(xi);
        assert!(matches!(
            tape.batchnorm3d(xi, gi, bi, &mean, &var, 1e-5, true),
            Err(TensorError::ChannelMismatch { .. })
        ));
    }

    // ── activations ─────────────────────────────────────────────────

    #[test]
    fn leaky_relu_values() {
        let (mut tape, xi) = tape_with(vec![2.0f64, -1.0, 0.0], &[3]);
        let out = tape.leaky_relu(xi, 0.3).unwrap();
        assert_eq!(tape.data(out), &[2.0, -0.3, 0.0]);
    }

    #[test]
    fn leaky_relu_alpha_range_checked() {
        let (mut tape, xi) = tape_with(vec![1.0f64], &[1]);
        assert!(tape.leaky_relu(xi, 1.0).is_err());
        assert!(tape.leaky_relu(xi, -0.1).is_err());
        assert!(tape.leaky_relu(xi, 0.0).is_ok());
    }

    #[test]
    fn sigmoid_reference_points() {
        let (mut tape, xi) = tape_with(vec![0.0f64, 50.0, -50.0, 1.0], &[4]);
        let out = tape.sigmoid(xi);
        let o = tape.data(out);
        assert_eq!(o[0], 0.5);
        assert!((o[1] - 1.0).abs() < 1e-15);
        assert!(o[2] < 1e-15 && o[2] > 0.0);
        assert!((o[3] - 0.7310585786).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_symmetry_and_range() {
        let xs = randn_vec(256, 71);
        let (mut tape, xi) = tape_with(xs.iter().map(|v| 5.0 * v).collect(), &[256]);
        let neg = tape.scale(xi, -1.0);
        let a = tape.sigmoid(xi);
        let b = tape.sigmoid(neg);
        for (&pa, &pb) in tape.data(a).iter().zip(tape.data(b)) {
            assert!(pa > 0.0 && pa < 1.0);
            assert!((pa - (1.0 - pb)).abs() < 1e-12);
        }
    }

    // ── concat ──────────────────────────────────────────────────────

    #[test]
    fn concat_preserves_slots() {
        let a: Vec<f64> = (0..2 * 8).map(|v| v as f64).collect();
        let b: Vec<f64> = (100..100 + 3 * 8).map(|v| v as f64).collect();
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(Tensor::from_vec(a.clone(), &[1, 2, 2, 2, 2]).unwrap());
        let bi = tape.constant(Tensor::from_vec(b.clone(), &[1, 3, 2, 2, 2]).unwrap());
        let out = tape.concat_channels(ai, bi).unwrap();
        assert_eq!(tape.shape(out), &[1, 5, 2, 2, 2]);
        assert_eq!(&tape.data(out)[..16], &a[..]);
        assert_eq!(&tape.data(out)[16..], &b[..]);
    }

    #[test]
    fn concat_backward_splits_at_channel_boundary() {
        let mut tape = Tape::<f64>::new();
        let ai = tape.leaf(
            Tensor::from_vec(randn_vec(8, 81), &[1, 1, 2, 2, 2])
                .unwrap()
                .requires_grad(true),
        );
        let bi = tape.leaf(
            Tensor::from_vec(randn_vec(16, 82), &[1, 2, 2, 2, 2])
                .unwrap()
                .requires_grad(true),
        );
        let cat = tape.concat_channels(ai, bi).unwrap();
        let weights = tape.constant(Tensor::from_vec(randn_vec(24, 83), &[1, 3, 2, 2, 2]).unwrap());
        let prod = tape.mul(cat, weights).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let wd = tape.data(weights).to_vec();
        assert_eq!(tape.grad(ai).unwrap(), &wd[..8]);
        assert_eq!(tape.grad(bi).unwrap(), &wd[8..]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]).unwrap());
        let bi = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 4]).unwrap());
        assert!(matches!(
            tape.concat_channels(ai, bi),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    // ── losses ──────────────────────────────────────────────────────

    #[test]
    fn bce_zero_logits_is_ln2() {
        let (mut tape, xi) = tape_with(vec![0.0f64; 8], &[1, 1, 2, 2, 2]);
        let t: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let ti = tape.constant(Tensor::from_vec(t, &[1, 1, 2, 2, 2]).unwrap());
        let loss = tape.bce_with_logits_loss(xi, ti).unwrap();
        assert!((tape.value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_near_perfect_prediction() {
        let t: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let logits: Vec<f64> = t.iter().map(|&v| if v > 0.5 { 50.0 } else { -50.0 }).collect();
        let (mut tape, xi) = tape_with(logits, &[1, 1, 2, 2, 2]);
        let ti = tape.constant(Tensor::from_vec(t, &[1, 1, 2, 2, 2]).unwrap());
        let loss = tape.soft_dice_loss(xi, ti).unwrap();
        assert!(tape.value(loss) < 1e-3);
    }

    #[test]
    fn losses_match_scalar_loop_oracle() {
        let logits = randn_vec(8, 91);
        let target: Vec<f64> = randn_vec(8, 92)
            .into_iter()
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();

        // Independent high-precision evaluation of both closed forms.
        let mut bce = 0.0;
        let (mut spt, mut sp, mut st) = (0.0, 0.0, 0.0);
        for (&x, &t) in logits.iter().zip(&target) {
            bce += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
            let p = 1.0 / (1.0 + (-x).exp());
            spt += p * t;
            sp += p;
            st += t;
        }
        bce /= 8.0;
        let dice = 1.0 - (2.0 * spt + 1.0) / (sp + st + 1.0);

        let (mut tape, xi) = tape_with(logits, &[1, 1, 2, 2, 2]);
        let ti = tape.constant(Tensor::from_vec(target, &[1, 1, 2, 2, 2]).unwrap());
        let lb = tape.bce_with_logits_loss(xi, ti).unwrap();
        let ld = tape.soft_dice_loss(xi, ti).unwrap();
        assert!((tape.value(lb) - bce).abs() < 1e-9);
        assert!((tape.value(ld) - dice).abs() < 1e-9);
    }

    #[test]
    fn losses_reject_bad_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[4]).unwrap());
        let b = tape.constant(Tensor::zeros(&[5]).unwrap());
        assert!(matches!(
            tape.bce_with_logits_loss(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let t = tape.constant(Tensor::full(&[4], 0.5).unwrap());
        assert!(matches!(
            tape.soft_dice_loss(a, t),
            Err(TensorError::BadParameter { .. })
        ));
    }

    #[test]
    fn loss_bounds_on_random_inputs() {
        for seed in 0..20u64 {
            let logits: Vec<f64> = randn_vec(16, seed).into_iter().map(|v| 4.0 * v).collect();
            let target: Vec<f64> = randn_vec(16, seed + 1000)
                .into_iter()
                .map(|v| if v > 0.3 { 1.0 } else { 0.0 })
                .collect();
            let (mut tape, xi) = tape_with(logits, &[1, 1, 4, 2, 2]);
            let ti = tape.constant(Tensor::from_vec(target, &[1, 1, 4, 2, 2]).unwrap());
            let lb = tape.bce_with_logits_loss(xi, ti).unwrap();
            let ld = tape.soft_dice_loss(xi, ti).unwrap();
            assert!(tape.value(lb) >= 0.0);
            let d = tape.value(ld);
            assert!((0.0..1.0).contains(&d));
        }
    }
}
