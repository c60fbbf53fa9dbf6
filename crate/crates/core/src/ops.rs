//! Untracked forward kernels and the backward helpers the tape uses.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(0, format!("conv2d input must be [C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::dim(
                0,
                format!("conv2d kernel must be [C_out,C_in,k,k], got {kernel:?}"),
            ));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::dim(
                1,
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::dim(3, format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let k = kh;
        if h + 2 * pad < k {
            return Err(Error::dim(1, format!("height {h} (+2*{pad}) smaller than kernel {k}")));
        }
        if w + 2 * pad < k {
            return Err(Error::dim(2, format!("width {w} (+2*{pad}) smaller than kernel {k}")));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x: [C,H,W]` into `[C·k·k, H'·W']`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let sy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let sx = (ox * g.stride + kj) as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            dst[oy * g.ow + ox] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto `[C,H,W]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_len();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let sy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let sx = (ox * g.stride + kj) as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            plane[sy as usize * g.w + sx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let cols = im2col(input.data(), &g);
    let mut out = vec![T::zero(); g.c_out * g.out_len()];
    T::gemm(
        g.c_out,
        g.patch_len(),
        g.out_len(),
        kernel.data(),
        false,
        &cols,
        false,
        &mut out,
        false,
    );
    Ok((Tensor::new([g.c_out, g.oh, g.ow], out)?, cols, g))
}

/// Gradients `(d_input, d_kernel)` of a convolution given the saved columns.
pub(crate) fn conv2d_backward<T: Real>(
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, kk, n) = (g.c_out, g.patch_len(), g.out_len());
    let d_kernel = need_kernel.then(|| {
        let mut dk = vec![T::zero(); m * kk];
        T::gemm(m, n, kk, grad_out, false, cols, true, &mut dk, false);
        dk
    });
    let d_input = need_input.then(|| {
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(kk, m, n, kernel, true, grad_out, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    (d_input, d_kernel)
}

/// Cross-correlation of `input: [C_in,H,W]` with `kernel: [C_out,C_in,k,k]`.
///
/// Output side is `floor((H + 2·padding − k) / stride) + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(input, kernel, stride, padding).map(|(t, _, _)| t)
}

pub(crate) struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn check_group_norm(shape: &[usize], gamma: &[usize], beta: &[usize], group_size: usize) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::dim(0, format!("group_norm input must be [C,H,W], got {shape:?}")));
    }
    let c = shape[0];
    if group_size == 0 || c % group_size != 0 {
        return Err(Error::Config(format!(
            "group size {group_size} does not divide {c} channels"
        )));
    }
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(
            0,
            format!("group_norm affine params must be [{c}], got {gamma:?} and {beta:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    group_size: usize,
    eps: T,
) -> (Tensor<T>, GroupNormSaved<T>) {
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let groups = c / group_size;
    let glen = group_size * plane;
    let n = T::of(glen as f64);
    let data = x.data();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let span = gi * glen..(gi + 1) * glen;
        let xs = &data[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for (ci, chunk) in xs.chunks(plane).enumerate() {
            let ch = gi * group_size + ci;
            let base = gi * glen + ci * plane;
            for (j, &v) in chunk.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[base + j] = xh;
                out[base + j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out).expect("same shape");
    (out, GroupNormSaved { xhat, inv_std })
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub(crate) fn group_norm_backward<T: Real>(
    grad_out: &[T],
    shape: &[usize],
    gamma: &[T],
    saved: &GroupNormSaved<T>,
    group_size: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let glen = group_size * plane;
    let n = T::of(glen as f64);
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let span = ch * plane..(ch + 1) * plane;
        for (&g, &xh) in grad_out[span.clone()].iter().zip(&saved.xhat[span]) {
            dgamma[ch] += g * xh;
            dbeta[ch] += g;
        }
    }
    for (gi, &istd) in saved.inv_std.iter().enumerate() {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in gi * glen..(gi + 1) * glen {
            let d = grad_out[i] * gamma[i / plane];
            sum_d += d;
            sum_dx += d * saved.xhat[i];
        }
        for i in gi * glen..(gi + 1) * glen {
            let d = grad_out[i] * gamma[i / plane];
            dx[i] = istd / n * (n * d - sum_d - saved.xhat[i] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-group feature normalization of `x: [C,H,W]` followed by a per-channel affine map.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    group_size: usize,
    eps: T,
) -> Result<Tensor<T>> {
    check_group_norm(x.shape(), gamma.shape(), beta.shape(), group_size)?;
    Ok(group_norm_forward(x, gamma.data(), beta.data(), group_size, eps).0)
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
pub(crate) fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..src * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::dim(0, format!("upsample input must be [C,H,W], got {:?}", x.shape())));
    }
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![T::zero(); c * oh * ow];
    let data = x.data();
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

pub(crate) fn upsample_bilinear_backward<T: Real>(grad_out: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * wy0 * wx0;
                d[y0 * w + x1] += v * wy0 * wx1;
                d[y1 * w + x0] += v * wy1 * wx0;
                d[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    i,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, len, inner)` for reducing `shape` along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(axis, format!("axis out of range for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// L2 norm along `axis`; the axis is removed from the result. Zero slices give 0.
pub fn l2_norm_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let s: T = (0..len)
                .map(|l| {
                    let v = d[(o * len + l) * inner + i];
                    v * v
                })
                .sum();
            out[o * inner + i] = s.sqrt();
        }
    }
    shaped(reduced_shape(x.shape(), axis), out)
}

pub fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            out[o * inner + i] = (0..len).map(|l| d[(o * len + l) * inner + i]).sum();
        }
    }
    shaped(reduced_shape(x.shape(), axis), out)
}

/// Mean over the spatial axes of `[C,H,W]`, giving `[C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::dim(0, format!("global_avg_pool needs [C,H,W], got {:?}", x.shape())));
    }
    let plane = x.shape()[1] * x.shape()[2];
    let n = T::of(plane as f64);
    let out = x.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() / n).collect();
    Tensor::new([x.shape()[0]], out)
}

pub(crate) fn shaped<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    if shape.is_empty() {
        Ok(Tensor::scalar(data[0]))
    } else {
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_trailing_alignment() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
    }

    #[test]
    fn broadcast_map_repeats_rows() {
        let m = broadcast_map(&[1, 3], &[2, 3]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 1], &[2, 3]);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn conv_output_side_uses_floor() {
        let g = ConvGeom::new(&[3, 64, 64], &[16, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (32, 32));
    }

    #[test]
    fn conv_errors_name_the_axis() {
        let e = ConvGeom::new(&[2, 4, 4], &[1, 3, 3, 3], 1, 0).unwrap_err();
        assert!(matches!(e, Error::Dimension { axis: 1, .. }));
        let e = ConvGeom::new(&[3, 2, 8], &[1, 3, 3, 3], 1, 0).unwrap_err();
        assert!(matches!(e, Error::Dimension { axis: 1, .. }));
        let e = ConvGeom::new(&[3, 8, 2], &[1, 3, 3, 3], 1, 0).unwrap_err();
        assert!(matches!(e, Error::Dimension { axis: 2, .. }));
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::<f64>::full([2, 3, 3], 1.5);
        let y = upsample_bilinear(&x, 4).unwrap();
        assert_eq!(y.shape(), &[2, 12, 12]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let x = Tensor::<f64>::full([4, 5, 5], -0.25);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == -0.25));
    }
}
