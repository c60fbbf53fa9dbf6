//! Second-view generation: random patch masking and photometric jitter.
//!
//! Views never differ geometrically, so unmasked pixels correspond one-to-one.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Patches of side `rho` selected for masking on a `grid_h × grid_w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub rho: usize,
    masked: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn new(grid_h: usize, grid_w: usize, rho: usize, mut masked: Vec<(usize, usize)>) -> Result<Self> {
        masked.sort_unstable();
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate masked patch".into()));
        }
        if let Some(&(r, c)) = masked.iter().find(|&&(r, c)| r >= grid_h || c >= grid_w) {
            return Err(Error::Contract(format!(
                "patch ({r},{c}) outside {grid_h}x{grid_w} grid"
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            rho,
            masked,
        })
    }

    pub fn empty(grid_h: usize, grid_w: usize, rho: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            rho,
            masked: Vec::new(),
        }
    }

    /// Masked `(row, col)` patch coordinates in row-major order.
    pub fn masked(&self) -> &[(usize, usize)] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.masked
            .binary_search(&(row / self.rho, col / self.rho))
            .is_ok()
    }
}

/// Number of masked cells for a ratio: `floor(ratio · cells)`.
pub fn mask_count(cells: usize, ratio: f64) -> usize {
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    ((ratio * cells as f64) + 1e-9).floor() as usize
}

/// Uniformly chooses `floor(ratio · cells)` distinct `rho × rho` patches.
pub fn sample_mask(h: usize, w: usize, rho: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    if rho == 0 || h % rho != 0 || w % rho != 0 {
        return Err(Error::Config(format!(
            "mask patch side {rho} must divide the image {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (gh, gw) = (h / rho, w / rho);
    let cells = gh * gw;
    let picked = index::sample(rng, cells, mask_count(cells, ratio).min(cells));
    let masked = picked.into_iter().map(|i| (i / gw, i % gw)).collect();
    MaskSpec::new(gh, gw, rho, masked)
}

/// Replaces every pixel of every masked patch, independently per channel, with an
/// `N(0, 1)` draw. Everything else is copied unchanged.
pub fn apply_mask<T: Real>(image: &Tensor<T>, spec: &MaskSpec, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::dim(0, format!("image must be [C,H,W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h != spec.grid_h * spec.rho {
        return Err(Error::dim(1, format!("height {h} vs mask grid {}x{}", spec.grid_h, spec.rho)));
    }
    if w != spec.grid_w * spec.rho {
        return Err(Error::dim(2, format!("width {w} vs mask grid {}x{}", spec.grid_w, spec.rho)));
    }
    let mut out = image.detached();
    let data = out.data_mut();
    let rho = spec.rho;
    for &(pr, pc) in spec.masked() {
        for ch in 0..c {
            for r in pr * rho..(pr + 1) * rho {
                let row = (ch * h + r) * w;
                for col in pc * rho..(pc + 1) * rho {
                    let v: f64 = rng.sample(StandardNormal);
                    data[row + col] = T::of(v);
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel contrast and brightness perturbation around the channel mean.
/// `strength = 0` returns the input unchanged.
pub fn photometric_jitter<T: Real>(image: &Tensor<T>, strength: f64, rng: &mut impl Rng) -> Tensor<T> {
    let s = strength.clamp(0.0, 1.0);
    let c = image.shape().first().copied().unwrap_or(1);
    let plane = image.numel() / c;
    let mut out = image.detached();
    for chunk in out.data_mut().chunks_mut(plane) {
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let contrast = T::of(1.0 + 0.4 * s * (2.0 * u - 1.0));
        let brightness = T::of(0.2 * s * (2.0 * v - 1.0));
        let mean = chunk.iter().copied().sum::<T>() / T::of(plane as f64);
        let offset = (T::one() - contrast) * mean + brightness;
        chunk.iter_mut().for_each(|x| *x = contrast * *x + offset);
    }
    out
}

/// Standardizes each channel of `[C,H,W]` to zero mean and unit variance.
/// Constant channels are only centred.
pub fn normalize_channels<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let c = image.shape().first().copied().unwrap_or(1);
    let plane = image.numel() / c;
    let n = T::of(plane as f64);
    let mut out = image.detached();
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let std = var.sqrt();
        let scale = if std > T::of(1e-6) { T::one() / std } else { T::one() };
        chunk.iter_mut().for_each(|x| *x = (*x - mean) * scale);
    }
    out
}
