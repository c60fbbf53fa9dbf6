//! Patch cross-similarity between two feature maps.
//!
//! Both maps are tiled into non-overlapping `α×α` patches in row-major order.
//! For patch `k` of the second map, slice `k` of the result holds its inner
//! product (summed over the window and all channels) with every patch of the
//! first map, laid out on the `(h/α)×(w/α)` patch grid. Viewed as a `z×z`
//! matrix (`z = (h/α)·(w/α)`), `cross_similarity(y, y')` is the Gram matrix
//! between the patches of `y'` (rows) and `y` (columns).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossSimTensor<T> {
    /// `[z, h/α, w/α]`
    pub values: Tensor<T>,
    pub alpha: usize,
    /// `(c, h, w)` of the inputs.
    pub source_shape: (usize, usize, usize),
}

impl<T: Real> CrossSimTensor<T> {
    pub fn patch_count(&self) -> usize {
        self.values.shape()[0]
    }

    /// Entry for second-map patch `k` at first-map patch `m` (both row-major).
    pub fn at(&self, k: usize, m: usize) -> T {
        let z = self.patch_count();
        self.values.data()[k * z + m]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PatchGrid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub alpha: usize,
    pub gh: usize,
    pub gw: usize,
}

impl PatchGrid {
    pub fn new(shape: &[usize], alpha: usize) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::dim(0, format!("feature map must be [c,h,w], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if alpha == 0 || h % alpha != 0 || w % alpha != 0 {
            return Err(Error::Config(format!(
                "patch side {alpha} must divide the map sides {h}x{w}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            alpha,
            gh: h / alpha,
            gw: w / alpha,
        })
    }

    pub fn z(&self) -> usize {
        self.gh * self.gw
    }

    /// Length of one flattened patch, ordered (channel, row, col).
    pub fn d(&self) -> usize {
        self.c * self.alpha * self.alpha
    }

    pub fn pair(y: &[usize], y_prime: &[usize], alpha: usize) -> Result<Self> {
        if y != y_prime {
            let axis = y.iter().zip(y_prime).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::dim(
                axis,
                format!("cross-similarity operands differ: {y:?} vs {y_prime:?}"),
            ));
        }
        Self::new(y, alpha)
    }
}

/// Rows of the returned `[z, d]` matrix are the flattened patches.
pub(crate) fn patch_matrix<T: Real>(data: &[T], g: &PatchGrid) -> Vec<T> {
    let (a, d) = (g.alpha, g.d());
    let mut out = vec![T::zero(); g.z() * d];
    for pr in 0..g.gh {
        for pc in 0..g.gw {
            let row = &mut out[(pr * g.gw + pc) * d..(pr * g.gw + pc + 1) * d];
            let mut idx = 0;
            for ch in 0..g.c {
                for u in 0..a {
                    let src = (ch * g.h + pr * a + u) * g.w + pc * a;
                    row[idx..idx + a].copy_from_slice(&data[src..src + a]);
                    idx += a;
                }
            }
        }
    }
    out
}

/// Inverse of [`patch_matrix`].
pub(crate) fn unpatch_matrix<T: Real>(mat: &[T], g: &PatchGrid) -> Vec<T> {
    let (a, d) = (g.alpha, g.d());
    let mut out = vec![T::zero(); g.c * g.h * g.w];
    for pr in 0..g.gh {
        for pc in 0..g.gw {
            let row = &mat[(pr * g.gw + pc) * d..(pr * g.gw + pc + 1) * d];
            let mut idx = 0;
            for ch in 0..g.c {
                for u in 0..a {
                    let dst = (ch * g.h + pr * a + u) * g.w + pc * a;
                    out[dst..dst + a].copy_from_slice(&row[idx..idx + a]);
                    idx += a;
                }
            }
        }
    }
    out
}

// Every entry is an index-ordered dot product, so swapping the operands
// reproduces the transpose bit for bit.
fn gram<T: Real>(rows: &[T], cols: &[T], z: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); z * z];
    for k in 0..z {
        let a = &rows[k * d..(k + 1) * d];
        for m in 0..z {
            let b = &cols[m * d..(m + 1) * d];
            let mut s = T::zero();
            for (x, y) in a.iter().zip(b) {
                s += *x * *y;
            }
            out[k * z + m] = s;
        }
    }
    out
}

pub(crate) fn forward<T: Real>(y: &Tensor<T>, y_prime: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    let g = PatchGrid::pair(y.shape(), y_prime.shape(), alpha)?;
    let rows = patch_matrix(y_prime.data(), &g);
    let cols = patch_matrix(y.data(), &g);
    Tensor::new([g.z(), g.gh, g.gw], gram(&rows, &cols, g.z(), g.d()))
}

/// Gradients `(d_y, d_y_prime)` for an upstream gradient on the `[z, gh, gw]` output.
pub(crate) fn backward<T: Real>(
    y: &[T],
    y_prime: &[T],
    g: &PatchGrid,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let (z, d) = (g.z(), g.d());
    let rows = patch_matrix(y_prime, g);
    let cols = patch_matrix(y, g);
    let mut d_rows = vec![T::zero(); z * d];
    T::gemm(z, z, d, grad_out, false, &cols, false, &mut d_rows, false);
    let mut d_cols = vec![T::zero(); z * d];
    T::gemm(z, z, d, grad_out, true, &rows, false, &mut d_cols, false);
    (unpatch_matrix(&d_cols, g), unpatch_matrix(&d_rows, g))
}

/// Splits `y: [c,h,w]` into its `α×α` tiles in row-major order.
pub fn patchify<T: Real>(y: &Tensor<T>, alpha: usize) -> Result<Vec<Tensor<T>>> {
    let g = PatchGrid::new(y.shape(), alpha)?;
    let mat = patch_matrix(y.data(), &g);
    mat.chunks(g.d())
        .map(|row| Tensor::new([g.c, alpha, alpha], row.to_vec()))
        .collect()
}

/// Reassembles tiles produced by [`patchify`] onto a `grid_h × grid_w` grid.
pub fn unpatchify<T: Real>(patches: &[Tensor<T>], grid_h: usize, grid_w: usize) -> Result<Tensor<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Contract("no patches to reassemble".into()))?;
    if patches.len() != grid_h * grid_w {
        return Err(Error::dim(
            0,
            format!("{} patches for a {grid_h}x{grid_w} grid", patches.len()),
        ));
    }
    let (c, alpha) = (first.shape()[0], first.shape()[1]);
    let g = PatchGrid::new(&[c, grid_h * alpha, grid_w * alpha], alpha)?;
    let mut mat = Vec::with_capacity(g.z() * g.d());
    for p in patches {
        if p.shape() != first.shape() {
            return Err(Error::dim(1, "patches differ in shape"));
        }
        mat.extend_from_slice(p.data());
    }
    Tensor::new([c, g.h, g.w], unpatch_matrix(&mat, &g))
}

/// Cross-similarity of every patch of `y_prime` against the whole of `y`.
pub fn cross_similarity<T: Real>(
    y: &Tensor<T>,
    y_prime: &Tensor<T>,
    alpha: usize,
) -> Result<CrossSimTensor<T>> {
    let values = forward(y, y_prime, alpha)?;
    Ok(CrossSimTensor {
        values,
        alpha,
        source_shape: (y.shape()[0], y.shape()[1], y.shape()[2]),
    })
}

/// Loop-by-loop evaluation of the same quantity, sharing no code with
/// [`cross_similarity`]. Used as a test oracle.
pub fn cross_similarity_naive<T: Real>(
    y: &Tensor<T>,
    y_prime: &Tensor<T>,
    alpha: usize,
) -> Result<CrossSimTensor<T>> {
    if y.shape() != y_prime.shape() || y.rank() != 3 {
        return Err(Error::dim(0, "operands must share a [c,h,w] shape"));
    }
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    if alpha == 0 || h % alpha != 0 || w % alpha != 0 {
        return Err(Error::Config(format!("alpha {alpha} must divide {h}x{w}")));
    }
    let (gh, gw) = (h / alpha, w / alpha);
    let at = |t: &Tensor<T>, ch: usize, r: usize, col: usize| t.data()[(ch * h + r) * w + col];
    let mut out = Vec::with_capacity(gh * gw * gh * gw);
    for pr in 0..gh {
        for pc in 0..gw {
            for i in 0..gh {
                for j in 0..gw {
                    let mut s = T::zero();
                    for ch in 0..c {
                        for u in 0..alpha {
                            for v in 0..alpha {
                                s += at(y_prime, ch, pr * alpha + u, pc * alpha + v)
                                    * at(y, ch, i * alpha + u, j * alpha + v);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    Ok(CrossSimTensor {
        values: Tensor::new([gh * gw, gh, gw], out)?,
        alpha,
        source_shape: (c, h, w),
    })
}
