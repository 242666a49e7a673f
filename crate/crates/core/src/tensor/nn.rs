//! Neural-net kernels (conv3d, normalization, resampling) and their tape
//! builder methods. The kernels are plain sequential loops; data-level
//! parallelism lives higher up (batch elements, subjects, folds).

use super::tape::{Op, Tape, Var};
use super::{NdTensor, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3dDims {
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Pool3dDims {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

/// Output extent of a conv axis; errors unless (e + 2p - k) / stride is a
/// non-negative exact integer.
pub fn conv3d_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::shape(
            "conv3d",
            format!("extent {extent} with k={k} stride={stride} padding={padding} has no exact output extent"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

// ---- raw matmul kernels ----

/// C[m,n] += A[m,k] @ B[k,n]
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T
pub(crate) fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n]
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// ---- conv3d kernels ----

/// Valid output range [lo, hi) along one axis for a fixed kernel offset.
fn axis_range(out_extent: usize, in_extent: usize, stride: usize, off: isize) -> (usize, usize) {
    // ix = ox*stride + off must lie in [0, in_extent)
    let lo = if off >= 0 {
        0
    } else {
        let need = (-off) as usize;
        need.div_ceil(stride)
    };
    let hi_excl = {
        // largest ox with ox*stride + off <= in_extent-1
        let limit = in_extent as isize - 1 - off;
        if limit < 0 {
            0
        } else {
            (limit as usize) / stride + 1
        }
    };
    (lo.min(out_extent), hi_excl.min(out_extent))
}

pub(crate) fn conv3d_forward<T: Scalar>(input: &[T], kernel: &[T], out: &mut [T], dims: &Conv3dDims) {
    let &Conv3dDims { c_in, d, h, w, c_out, k, od, oh, ow, stride, padding } = dims;
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    for co in 0..c_out {
        let out_c = &mut out[co * out_sp..(co + 1) * out_sp];
        for ci in 0..c_in {
            let in_c = &input[ci * in_sp..(ci + 1) * in_sp];
            for kz in 0..k {
                let offz = kz as isize - padding as isize;
                let (zlo, zhi) = axis_range(od, d, stride, offz);
                for ky in 0..k {
                    let offy = ky as isize - padding as isize;
                    let (ylo, yhi) = axis_range(oh, h, stride, offy);
                    for kx in 0..k {
                        let wv = kernel[(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                        let offx = kx as isize - padding as isize;
                        let (xlo, xhi) = axis_range(ow, w, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = (oz * stride) as isize + offz;
                            for oy in ylo..yhi {
                                let iy = (oy * stride) as isize + offy;
                                let in_row = &in_c[(iz as usize * h + iy as usize) * w..][..w];
                                let out_row =
                                    &mut out_c[(oz * oh + oy) * ow..][..ow];
                                if stride == 1 {
                                    let src = &in_row[(xlo as isize + offx) as usize
                                        ..(xhi as isize - 1 + offx) as usize + 1];
                                    for (ov, &iv) in
                                        out_row[xlo..xhi].iter_mut().zip(src)
                                    {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = (ox * stride) as isize + offx;
                                        out_row[ox] += wv * in_row[ix as usize];
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

pub(crate) fn conv3d_backward_input<T: Scalar>(
    kernel: &[T],
    gout: &[T],
    gin: &mut [T],
    dims: &Conv3dDims,
) {
    let &Conv3dDims { c_in, d, h, w, c_out, k, od, oh, ow, stride, padding } = dims;
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    for ci in 0..c_in {
        let gin_c = &mut gin[ci * in_sp..(ci + 1) * in_sp];
        for co in 0..c_out {
            let gout_c = &gout[co * out_sp..(co + 1) * out_sp];
            for kz in 0..k {
                let offz = kz as isize - padding as isize;
                let (zlo, zhi) = axis_range(od, d, stride, offz);
                for ky in 0..k {
                    let offy = ky as isize - padding as isize;
                    let (ylo, yhi) = axis_range(oh, h, stride, offy);
                    for kx in 0..k {
                        let wv = kernel[(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                        let offx = kx as isize - padding as isize;
                        let (xlo, xhi) = axis_range(ow, w, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = (oz * stride) as isize + offz;
                            for oy in ylo..yhi {
                                let iy = (oy * stride) as isize + offy;
                                let gin_row =
                                    &mut gin_c[(iz as usize * h + iy as usize) * w..][..w];
                                let gout_row = &gout_c[(oz * oh + oy) * ow..][..ow];
                                if stride == 1 {
                                    let dst = &mut gin_row[(xlo as isize + offx) as usize
                                        ..(xhi as isize - 1 + offx) as usize + 1];
                                    for (iv, &gv) in
                                        dst.iter_mut().zip(&gout_row[xlo..xhi])
                                    {
                                        *iv += wv * gv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = (ox * stride) as isize + offx;
                                        gin_row[ix as usize] += wv * gout_row[ox];
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

pub(crate) fn conv3d_backward_kernel<T: Scalar>(
    input: &[T],
    gout: &[T],
    gkernel: &mut [T],
    dims: &Conv3dDims,
) {
    let &Conv3dDims { c_in, d, h, w, c_out, k, od, oh, ow, stride, padding } = dims;
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    for co in 0..c_out {
        let gout_c = &gout[co * out_sp..(co + 1) * out_sp];
        for ci in 0..c_in {
            let in_c = &input[ci * in_sp..(ci + 1) * in_sp];
            for kz in 0..k {
                let offz = kz as isize - padding as isize;
                let (zlo, zhi) = axis_range(od, d, stride, offz);
                for ky in 0..k {
                    let offy = ky as isize - padding as isize;
                    let (ylo, yhi) = axis_range(oh, h, stride, offy);
                    for kx in 0..k {
                        let offx = kx as isize - padding as isize;
                        let (xlo, xhi) = axis_range(ow, w, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oz in zlo..zhi {
                            let iz = (oz * stride) as isize + offz;
                            for oy in ylo..yhi {
                                let iy = (oy * stride) as isize + offy;
                                let in_row = &in_c[(iz as usize * h + iy as usize) * w..][..w];
                                let gout_row = &gout_c[(oz * oh + oy) * ow..][..ow];
                                if stride == 1 {
                                    let src = &in_row[(xlo as isize + offx) as usize
                                        ..(xhi as isize - 1 + offx) as usize + 1];
                                    for (&gv, &iv) in gout_row[xlo..xhi].iter().zip(src) {
                                        acc += gv * iv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = (ox * stride) as isize + offx;
                                        acc += gout_row[ox] * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                        gkernel[(((co * c_in + ci) * k + kz) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

// ---- group norm ----

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    g: &[T],
    groups: usize,
    mean: &[T],
    inv_std: &[T],
    channels: usize,
    spatial: usize,
    wants: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let cpg = channels / groups;
    let m = T::of_f64((cpg * spatial) as f64);
    let (want_x, want_gamma, want_beta) = wants;
    let mut dx = want_x.then(|| vec![T::zero(); channels * spatial]);
    let mut dgamma = want_gamma.then(|| vec![T::zero(); channels]);
    let mut dbeta = want_beta.then(|| vec![T::zero(); channels]);

    for grp in 0..groups {
        let mu = mean[grp];
        let istd = inv_std[grp];
        let c0 = grp * cpg;
        // Per-group sums of dxhat and dxhat * xhat.
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        if want_x {
            for c in c0..c0 + cpg {
                let gc = gamma[c];
                for (&gi, &xi) in g[c * spatial..(c + 1) * spatial]
                    .iter()
                    .zip(&x[c * spatial..(c + 1) * spatial])
                {
                    let dxhat = gi * gc;
                    let xhat = (xi - mu) * istd;
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
        }
        for c in c0..c0 + cpg {
            let gc = gamma[c];
            let mut dg = T::zero();
            let mut db = T::zero();
            for (i, (&gi, &xi)) in g[c * spatial..(c + 1) * spatial]
                .iter()
                .zip(&x[c * spatial..(c + 1) * spatial])
                .enumerate()
            {
                let xhat = (xi - mu) * istd;
                if let Some(dx) = dx.as_mut() {
                    let dxhat = gi * gc;
                    dx[c * spatial + i] = istd * (dxhat - s1 / m - xhat * s2 / m);
                }
                dg += gi * xhat;
                db += gi;
            }
            if let Some(dgamma) = dgamma.as_mut() {
                dgamma[c] = dg;
            }
            if let Some(dbeta) = dbeta.as_mut() {
                dbeta[c] = db;
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---- resampling ----

pub(crate) fn upsample3d_backward<T: Scalar>(gout: &[T], gin: &mut [T], f: usize, dims: &Pool3dDims) {
    let &Pool3dDims { c, d, h, w } = dims;
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        for z in 0..d * f {
            for y in 0..h * f {
                for x in 0..w * f {
                    let gi = gout[((ch * d * f + z) * oh + y) * ow + x];
                    gin[((ch * d + z / f) * h + y / f) * w + x / f] += gi;
                }
            }
        }
    }
}

pub(crate) fn downsample3d_backward<T: Scalar>(gout: &[T], gin: &mut [T], s: usize, dims: &Pool3dDims) {
    let &Pool3dDims { c, d, h, w } = dims;
    let (od, oh, ow) = (out_down(d, s), out_down(h, s), out_down(w, s));
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let gi = gout[((ch * od + z) * oh + y) * ow + x];
                    gin[((ch * d + z * s) * h + y * s) * w + x * s] += gi;
                }
            }
        }
    }
}

fn out_down(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

// ---- tape builders ----

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of a [C_in, D, H, W] input with a
    /// [C_out, C_in, k, k, k] kernel.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        let [c_in, d, h, w] = ishape[..] else {
            return Err(Error::shape("conv3d", format!("input must be rank 4, got {ishape:?}")));
        };
        let [c_out, kc_in, k0, k1, k2] = kshape[..] else {
            return Err(Error::shape("conv3d", format!("kernel must be rank 5, got {kshape:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape(
                "conv3d",
                format!("kernel input-channel axis {kc_in} vs input channel axis {c_in}"),
            ));
        }
        if k0 != k1 || k1 != k2 {
            return Err(Error::shape("conv3d", format!("kernel must be cubic, got {k0}x{k1}x{k2}")));
        }
        if k0 % 2 == 0 {
            return Err(Error::config(format!("conv3d kernel extent must be odd, got {k0}")));
        }
        if stride == 0 {
            return Err(Error::config("conv3d stride must be positive"));
        }
        let od = conv3d_out_extent(d, k0, stride, padding)?;
        let oh = conv3d_out_extent(h, k0, stride, padding)?;
        let ow = conv3d_out_extent(w, k0, stride, padding)?;
        let dims = Conv3dDims { c_in, d, h, w, c_out, k: k0, od, oh, ow, stride, padding };
        let mut out = vec![T::zero(); c_out * od * oh * ow];
        conv3d_forward(self.value(input).data(), self.value(kernel).data(), &mut out, &dims);
        let value = NdTensor::new(vec![c_out, od, oh, ow], out)?;
        let needs = self.nodes[input.0].needs_grad || self.nodes[kernel.0].needs_grad;
        Ok(self.push(value, Op::Conv3d { input, kernel, dims }, needs))
    }

    /// Broadcast-add a per-channel bias over the trailing spatial axes.
    pub fn channel_bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let channels = shape[0];
        let spatial: usize = shape[1..].iter().product();
        if self.value(bias).shape() != [channels] {
            return Err(Error::shape(
                "channel_bias_add",
                format!("bias {:?} vs channel axis {channels}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for c in 0..channels {
            let bv = b[c];
            for o in &mut out[c * spatial..(c + 1) * spatial] {
                *o += bv;
            }
        }
        let value = NdTensor::new(shape, out)?;
        let needs = self.nodes[x.0].needs_grad || self.nodes[bias.0].needs_grad;
        Ok(self.push(value, Op::ChannelBiasAdd { x, bias, channels, spatial }, needs))
    }

    /// GroupNorm over a [C, ...] tensor: per-group zero mean / unit variance
    /// across (channels-in-group x spatial), then per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let channels = shape[0];
        let spatial: usize = shape[1..].iter().product();
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {channels} channels not divisible by {groups} groups"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::config("group_norm: eps must be positive"));
        }
        check_vec("group_norm gamma", self.value(gamma).shape(), channels)?;
        check_vec("group_norm beta", self.value(beta).shape(), channels)?;

        let cpg = channels / groups;
        let xv = self.value(x).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut out = vec![T::zero(); channels * spatial];
        let mut means = vec![T::zero(); groups];
        let mut inv_stds = vec![T::zero(); groups];
        for grp in 0..groups {
            let lo = grp * cpg * spatial;
            let hi = lo + cpg * spatial;
            // f64 accumulation keeps constant fields exactly at zero mean.
            let m64 = (cpg * spatial) as f64;
            let mu64 = xv[lo..hi].iter().map(|v| v.as_f64()).sum::<f64>() / m64;
            let var64 = xv[lo..hi]
                .iter()
                .map(|v| {
                    let dv = v.as_f64() - mu64;
                    dv * dv
                })
                .sum::<f64>()
                / m64;
            let mu = T::of_f64(mu64);
            let istd = T::one() / (T::of_f64(var64) + eps).sqrt();
            means[grp] = mu;
            inv_stds[grp] = istd;
            for c in grp * cpg..(grp + 1) * cpg {
                let (gc, bc) = (gam[c], bet[c]);
                for (o, &v) in out[c * spatial..(c + 1) * spatial]
                    .iter_mut()
                    .zip(&xv[c * spatial..(c + 1) * spatial])
                {
                    *o = gc * (v - mu) * istd + bc;
                }
            }
        }
        let value = NdTensor::new(shape, out)?;
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            value,
            Op::GroupNorm { x, gamma, beta, groups, eps, mean: means, inv_std: inv_stds, channels, spatial },
            needs,
        ))
    }

    /// Per-channel affine modulation gamma[c] * x + beta[c] broadcast over
    /// the spatial axes.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let channels = shape[0];
        let spatial: usize = shape[1..].iter().product();
        check_vec("film gamma", self.value(gamma).shape(), channels)?;
        check_vec("film beta", self.value(beta).shape(), channels)?;
        let xv = self.value(x).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut out = vec![T::zero(); channels * spatial];
        for c in 0..channels {
            let (gc, bc) = (gam[c], bet[c]);
            for (o, &v) in out[c * spatial..(c + 1) * spatial]
                .iter_mut()
                .zip(&xv[c * spatial..(c + 1) * spatial])
            {
                *o = gc * v + bc;
            }
        }
        let value = NdTensor::new(shape, out)?;
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(value, Op::Film { x, gamma, beta, channels, spatial }, needs))
    }

    /// Nearest-neighbour upsampling of a [C, d, h, w] tensor by an integer
    /// factor per axis.
    pub fn upsample3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [c, d, h, w] = shape[..] else {
            return Err(Error::shape("upsample3d", format!("expected rank 4, got {shape:?}")));
        };
        if factor == 0 {
            return Err(Error::config("upsample3d factor must be positive"));
        }
        let dims = Pool3dDims { c, d, h, w };
        let (nd, nh, nw) = (d * factor, h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * nd * nh * nw];
        for ch in 0..c {
            for z in 0..nd {
                for y in 0..nh {
                    let src_row = &xv[((ch * d + z / factor) * h + y / factor) * w..][..w];
                    let dst_row = &mut out[((ch * nd + z) * nh + y) * nw..][..nw];
                    for (x_o, dst) in dst_row.iter_mut().enumerate() {
                        *dst = src_row[x_o / factor];
                    }
                }
            }
        }
        let value = NdTensor::new(vec![c, nd, nh, nw], out)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Upsample3d { x, factor, dims }, needs))
    }

    /// Strided subsampling: keep every `stride`-th voxel per axis.
    pub fn downsample3d(&mut self, x: Var, stride: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [c, d, h, w] = shape[..] else {
            return Err(Error::shape("downsample3d", format!("expected rank 4, got {shape:?}")));
        };
        if stride == 0 {
            return Err(Error::config("downsample3d stride must be positive"));
        }
        let dims = Pool3dDims { c, d, h, w };
        let (od, oh, ow) = (out_down(d, stride), out_down(h, stride), out_down(w, stride));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * od * oh * ow];
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x_o in 0..ow {
                        out[((ch * od + z) * oh + y) * ow + x_o] =
                            xv[((ch * d + z * stride) * h + y * stride) * w + x_o * stride];
                    }
                }
            }
        }
        let value = NdTensor::new(vec![c, od, oh, ow], out)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Downsample3d { x, stride, dims }, needs))
    }

    /// Concatenate along the leading (channel) axis; trailing axes must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        if ashape.len() != bshape.len() || ashape[1..] != bshape[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("trailing axes differ: {ashape:?} vs {bshape:?}"),
            ));
        }
        let (ca, cb) = (ashape[0], bshape[0]);
        let spatial: usize = ashape[1..].iter().product();
        let mut out = Vec::with_capacity((ca + cb) * spatial);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let mut shape = ashape;
        shape[0] = ca + cb;
        let value = NdTensor::new(shape, out)?;
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(value, Op::ConcatChannels { a, b, ca, cb, spatial }, needs))
    }

    /// Slice channels [from, to) along the leading axis.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let total = shape[0];
        if from >= to || to > total {
            return Err(Error::shape(
                "slice_channels",
                format!("range {from}..{to} out of {total} channels"),
            ));
        }
        let spatial: usize = shape[1..].iter().product();
        let out = self.value(x).data()[from * spatial..to * spatial].to_vec();
        let mut new_shape = shape;
        new_shape[0] = to - from;
        let value = NdTensor::new(new_shape, out)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::SliceChannels { x, from, to, total, spatial }, needs))
    }

    /// Gather rows of a [V, cols] table; gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.value(table).shape().to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("gather_rows", format!("table must be 2-D, got {shape:?}")));
        };
        if indices.is_empty() {
            return Err(Error::config("gather_rows: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &idx in indices {
            out.extend_from_slice(&src[idx * cols..(idx + 1) * cols]);
        }
        let value = NdTensor::new(vec![indices.len(), cols], out)?;
        let needs = self.nodes[table.0].needs_grad;
        Ok(self.push(value, Op::GatherRows { table, indices: indices.to_vec(), cols }, needs))
    }

    /// Mean cross-entropy of [rows, classes] logits against class indices.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("cross_entropy_logits", format!("expected 2-D logits, got {shape:?}")));
        };
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy_logits",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::config(format!("cross_entropy_logits: class {bad} out of {cols}")));
        }
        let src = self.value(logits).data();
        let mut softmax = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (o, &v) in softmax[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                denom += e;
            }
            for o in &mut softmax[r * cols..(r + 1) * cols] {
                *o /= denom;
            }
            loss -= softmax[r * cols + targets[r]].ln();
        }
        loss /= T::of_f64(rows as f64);
        let needs = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            NdTensor::scalar(loss),
            Op::CrossEntropyLogits { logits, targets: targets.to_vec(), softmax, rows, cols },
            needs,
        ))
    }
}

fn check_vec(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape != [len] {
        return Err(Error::shape(op, format!("expected [{len}], got {shape:?}")));
    }
    Ok(())
}
