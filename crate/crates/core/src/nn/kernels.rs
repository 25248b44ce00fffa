//! Dense 3D convolution, transposed convolution, and pooling kernels.
//!
//! All buffers are row-major `(batch, channel, depth, height, width)` with
//! the width index fastest, so the innermost loops walk contiguous rows.
//! The stride-1 paths accumulate whole rows through slice iterators, which
//! the compiler vectorizes; a scalar fallback covers other strides.
//! Everything is single-threaded and accumulates in a fixed order, so a
//! given input always produces bitwise-identical output.

use crate::tensor::Element;

/// Geometry of a direct convolution, fixed at record time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Input (depth, height, width).
    pub in_dims: [usize; 3],
    /// Output (depth, height, width).
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    /// Zero padding per spatial axis.
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }
    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.iter().product::<usize>()
    }
}

/// Geometry of a transposed convolution with kernel extent equal to the
/// stride (non-overlapping blocks), the only variant used here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransposeGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    /// Always `in_dims * stride`.
    pub out_dims: [usize; 3],
    pub stride: usize,
}

impl TransposeGeom {
    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }
    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }
}

#[inline(always)]
fn axis_range(out_extent: usize, in_extent: usize, k: usize, pad: usize) -> (usize, usize) {
    // Output positions o (stride 1) for which i = o + k - pad lands in
    // [0, in_extent).
    let lo = pad.saturating_sub(k);
    let hi = (in_extent + pad).saturating_sub(k).min(out_extent);
    (lo, hi.max(lo))
}

/// Direct cross-correlation plus bias. `out` must be zero-length-checked by
/// the caller; it is fully overwritten.
pub fn conv3d_forward<E: Element>(x: &[E], w: &[E], bias: &[E], g: &ConvGeom, out: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();

    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let out_base = (n * g.out_ch + co) * out_csz;
            out[out_base..out_base + out_csz].fill(bias[co]);
            for ci in 0..g.in_ch {
                let in_base = (n * g.in_ch + ci) * in_csz;
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt =
                                w[(((co * g.in_ch + ci) * kd + kz) * kh + ky) * kw + kx];
                            if g.stride == 1 {
                                let (zlo, zhi) = axis_range(od, id, kz, pd);
                                let (ylo, yhi) = axis_range(oh, ih, ky, ph);
                                let (xlo, xhi) = axis_range(ow, iw, kx, pw);
                                if xhi <= xlo {
                                    continue;
                                }
                                for zo in zlo..zhi {
                                    let zi = zo + kz - pd;
                                    for yo in ylo..yhi {
                                        let yi = yo + ky - ph;
                                        let orow = out_base + (zo * oh + yo) * ow;
                                        let irow = in_base + (zi * ih + yi) * iw + xlo + kx - pw;
                                        let dst = &mut out[orow + xlo..orow + xhi];
                                        let src = &x[irow..irow + (xhi - xlo)];
                                        for (o, &v) in dst.iter_mut().zip(src) {
                                            *o = *o + wgt * v;
                                        }
                                    }
                                }
                            } else {
                                conv_scalar_accum(
                                    x, in_base, g, kz, ky, kx, wgt, out, out_base,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// General-stride scalar path; the stride-1 row path above covers the hot
/// case.
#[allow(clippy::too_many_arguments)]
fn conv_scalar_accum<E: Element>(
    x: &[E],
    in_base: usize,
    g: &ConvGeom,
    kz: usize,
    ky: usize,
    kx: usize,
    wgt: E,
    out: &mut [E],
    out_base: usize,
) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [pd, ph, pw] = g.pad;
    for zo in 0..od {
        let zi = (zo * g.stride + kz) as isize - pd as isize;
        if zi < 0 || zi >= id as isize {
            continue;
        }
        for yo in 0..oh {
            let yi = (yo * g.stride + ky) as isize - ph as isize;
            if yi < 0 || yi >= ih as isize {
                continue;
            }
            for xo in 0..ow {
                let xi = (xo * g.stride + kx) as isize - pw as isize;
                if xi < 0 || xi >= iw as isize {
                    continue;
                }
                let iv = x[in_base + ((zi as usize) * ih + yi as usize) * iw + xi as usize];
                let oi = out_base + (zo * oh + yo) * ow + xo;
                out[oi] = out[oi] + wgt * iv;
            }
        }
    }
}

/// Accumulates d(loss)/d(input) given the output gradient. Adds into `gx`.
pub fn conv3d_backward_input<E: Element>(gout: &[E], w: &[E], g: &ConvGeom, gx: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();

    for n in 0..g.batch {
        for ci in 0..g.in_ch {
            let in_base = (n * g.in_ch + ci) * in_csz;
            for co in 0..g.out_ch {
                let out_base = (n * g.out_ch + co) * out_csz;
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt =
                                w[(((co * g.in_ch + ci) * kd + kz) * kh + ky) * kw + kx];
                            if g.stride == 1 {
                                // i = o + k - pad  ⇒  o = i - k + pad
                                let (zlo, zhi) = in_axis_range(id, od, kz, pd);
                                let (ylo, yhi) = in_axis_range(ih, oh, ky, ph);
                                let (xlo, xhi) = in_axis_range(iw, ow, kx, pw);
                                if xhi <= xlo {
                                    continue;
                                }
                                for zi in zlo..zhi {
                                    let zo = zi + pd - kz;
                                    for yi in ylo..yhi {
                                        let yo = yi + ph - ky;
                                        let irow = in_base + (zi * ih + yi) * iw;
                                        let orow = out_base + (zo * oh + yo) * ow + xlo + pw - kx;
                                        let dst = &mut gx[irow + xlo..irow + xhi];
                                        let src = &gout[orow..orow + (xhi - xlo)];
                                        for (o, &v) in dst.iter_mut().zip(src) {
                                            *o = *o + wgt * v;
                                        }
                                    }
                                }
                            } else {
                                scatter_input_grad(
                                    gout, out_base, g, kz, ky, kx, wgt, gx, in_base,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn in_axis_range(in_extent: usize, out_extent: usize, k: usize, pad: usize) -> (usize, usize) {
    // Input positions i (stride 1) for which o = i + pad - k lands in
    // [0, out_extent).
    let lo = k.saturating_sub(pad);
    let hi = (out_extent + k).saturating_sub(pad).min(in_extent);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn scatter_input_grad<E: Element>(
    gout: &[E],
    out_base: usize,
    g: &ConvGeom,
    kz: usize,
    ky: usize,
    kx: usize,
    wgt: E,
    gx: &mut [E],
    in_base: usize,
) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [pd, ph, pw] = g.pad;
    for zo in 0..od {
        let zi = (zo * g.stride + kz) as isize - pd as isize;
        if zi < 0 || zi >= id as isize {
            continue;
        }
        for yo in 0..oh {
            let yi = (yo * g.stride + ky) as isize - ph as isize;
            if yi < 0 || yi >= ih as isize {
                continue;
            }
            for xo in 0..ow {
                let xi = (xo * g.stride + kx) as isize - pw as isize;
                if xi < 0 || xi >= iw as isize {
                    continue;
                }
                let ii = in_base + ((zi as usize) * ih + yi as usize) * iw + xi as usize;
                gx[ii] = gx[ii] + wgt * gout[out_base + (zo * oh + yo) * ow + xo];
            }
        }
    }
}

/// Accumulates d(loss)/d(weight) given the output gradient. Adds into `gw`.
pub fn conv3d_backward_weight<E: Element>(gout: &[E], x: &[E], g: &ConvGeom, gw: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();

    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let out_base = (n * g.out_ch + co) * out_csz;
            for ci in 0..g.in_ch {
                let in_base = (n * g.in_ch + ci) * in_csz;
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wi = (((co * g.in_ch + ci) * kd + kz) * kh + ky) * kw + kx;
                            let mut acc = E::zero();
                            if g.stride == 1 {
                                let (zlo, zhi) = axis_range(od, id, kz, pd);
                                let (ylo, yhi) = axis_range(oh, ih, ky, ph);
                                let (xlo, xhi) = axis_range(ow, iw, kx, pw);
                                if xhi <= xlo {
                                    continue;
                                }
                                for zo in zlo..zhi {
                                    let zi = zo + kz - pd;
                                    for yo in ylo..yhi {
                                        let yi = yo + ky - ph;
                                        let orow = out_base + (zo * oh + yo) * ow;
                                        let irow = in_base + (zi * ih + yi) * iw + xlo + kx - pw;
                                        let go = &gout[orow + xlo..orow + xhi];
                                        let xs = &x[irow..irow + (xhi - xlo)];
                                        for (&a, &b) in go.iter().zip(xs) {
                                            acc = acc + a * b;
                                        }
                                    }
                                }
                            } else {
                                for zo in 0..od {
                                    let zi = (zo * g.stride + kz) as isize - pd as isize;
                                    if zi < 0 || zi >= id as isize {
                                        continue;
                                    }
                                    for yo in 0..oh {
                                        let yi = (yo * g.stride + ky) as isize - ph as isize;
                                        if yi < 0 || yi >= ih as isize {
                                            continue;
                                        }
                                        for xo in 0..ow {
                                            let xi =
                                                (xo * g.stride + kx) as isize - pw as isize;
                                            if xi < 0 || xi >= iw as isize {
                                                continue;
                                            }
                                            let iv = x[in_base
                                                + ((zi as usize) * ih + yi as usize) * iw
                                                + xi as usize];
                                            acc = acc
                                                + gout[out_base + (zo * oh + yo) * ow + xo] * iv;
                                        }
                                    }
                                }
                            }
                            gw[wi] = gw[wi] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(bias): the output gradient summed per channel.
pub fn conv_backward_bias<E: Element>(gout: &[E], batch: usize, out_ch: usize, gb: &mut [E]) {
    let csz = gout.len() / (batch * out_ch);
    for n in 0..batch {
        for co in 0..out_ch {
            let base = (n * out_ch + co) * csz;
            let mut acc = E::zero();
            for &v in &gout[base..base + csz] {
                acc = acc + v;
            }
            gb[co] = gb[co] + acc;
        }
    }
}

/// Transposed convolution forward: every input voxel paints one
/// `stride³` output block per channel pair. Weight layout is
/// `[out_ch, in_ch, k, k, k]`; output is fully overwritten.
pub fn convt3d_forward<E: Element>(x: &[E], w: &[E], bias: &[E], g: &TransposeGeom, out: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let s = g.stride;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();
    let kvol = s * s * s;

    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let out_base = (n * g.out_ch + co) * out_csz;
            out[out_base..out_base + out_csz].fill(bias[co]);
            for ci in 0..g.in_ch {
                let in_base = (n * g.in_ch + ci) * in_csz;
                for kz in 0..s {
                    for ky in 0..s {
                        for kx in 0..s {
                            let wgt =
                                w[(co * g.in_ch + ci) * kvol + (kz * s + ky) * s + kx];
                            for z in 0..id {
                                let zo = z * s + kz;
                                for y in 0..ih {
                                    let yo = y * s + ky;
                                    let irow = in_base + (z * ih + y) * iw;
                                    let orow = out_base + (zo * oh + yo) * ow + kx;
                                    for xv in 0..iw {
                                        let oi = orow + xv * s;
                                        out[oi] = out[oi] + wgt * x[irow + xv];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`convt3d_forward`] w.r.t. the input. Adds into `gx`.
pub fn convt3d_backward_input<E: Element>(gout: &[E], w: &[E], g: &TransposeGeom, gx: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let s = g.stride;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();
    let kvol = s * s * s;

    for n in 0..g.batch {
        for ci in 0..g.in_ch {
            let in_base = (n * g.in_ch + ci) * in_csz;
            for co in 0..g.out_ch {
                let out_base = (n * g.out_ch + co) * out_csz;
                for kz in 0..s {
                    for ky in 0..s {
                        for kx in 0..s {
                            let wgt =
                                w[(co * g.in_ch + ci) * kvol + (kz * s + ky) * s + kx];
                            for z in 0..id {
                                let zo = z * s + kz;
                                for y in 0..ih {
                                    let yo = y * s + ky;
                                    let irow = in_base + (z * ih + y) * iw;
                                    let orow = out_base + (zo * oh + yo) * ow + kx;
                                    for xv in 0..iw {
                                        gx[irow + xv] =
                                            gx[irow + xv] + wgt * gout[orow + xv * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// d(loss)/d(weight) for the transposed convolution. Adds into `gw`.
pub fn convt3d_backward_weight<E: Element>(gout: &[E], x: &[E], g: &TransposeGeom, gw: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let s = g.stride;
    let in_csz = g.in_spatial();
    let out_csz = g.out_spatial();
    let kvol = s * s * s;

    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let out_base = (n * g.out_ch + co) * out_csz;
            for ci in 0..g.in_ch {
                let in_base = (n * g.in_ch + ci) * in_csz;
                for kz in 0..s {
                    for ky in 0..s {
                        for kx in 0..s {
                            let wi = (co * g.in_ch + ci) * kvol + (kz * s + ky) * s + kx;
                            let mut acc = E::zero();
                            for z in 0..id {
                                let zo = z * s + kz;
                                for y in 0..ih {
                                    let yo = y * s + ky;
                                    let irow = in_base + (z * ih + y) * iw;
                                    let orow = out_base + (zo * oh + yo) * ow + kx;
                                    for xv in 0..iw {
                                        acc = acc + x[irow + xv] * gout[orow + xv * s];
                                    }
                                }
                            }
                            gw[wi] = gw[wi] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2×2 max pooling. Returns the pooled buffer and, per output element,
/// the linear index of the winning input element. Ties go to the lowest
/// linear index (the scan is in ascending index order with a strict
/// comparison), which fixes the backward routing deterministically.
pub fn maxpool3d_forward<E: Element>(
    x: &[E],
    batch: usize,
    ch: usize,
    in_dims: [usize; 3],
) -> (Vec<E>, Vec<usize>) {
    let [id, ih, iw] = in_dims;
    let (od, oh, ow) = (id / 2, ih / 2, iw / 2);
    let in_csz = id * ih * iw;
    let out_csz = od * oh * ow;
    let mut out = vec![E::zero(); batch * ch * out_csz];
    let mut argmax = vec![0usize; out.len()];

    for nc in 0..batch * ch {
        let in_base = nc * in_csz;
        let out_base = nc * out_csz;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = E::neg_infinity();
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let ii = in_base
                                    + ((zo * 2 + dz) * ih + yo * 2 + dy) * iw
                                    + xo * 2
                                    + dx;
                                if x[ii] > best {
                                    best = x[ii];
                                    best_i = ii;
                                }
                            }
                        }
                    }
                    let oi = out_base + (zo * oh + yo) * ow + xo;
                    out[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
    }
    (out, argmax)
}

/// Per-channel mean and biased variance over `(batch, spatial)`,
/// accumulated in f64.
pub fn channel_moments<E: Element>(
    x: &[E],
    batch: usize,
    ch: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; ch];
    let mut var = vec![0.0f64; ch];
    let m = (batch * spatial) as f64;
    for n in 0..batch {
        for c in 0..ch {
            let base = (n * ch + c) * spatial;
            for &v in &x[base..base + spatial] {
                mean[c] += v.as_f64();
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for n in 0..batch {
        for c in 0..ch {
            let base = (n * ch + c) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v.as_f64() - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}
