//! Coarse Bernoulli keep-masks, their bilinear dense forms, and the blend that
//! swaps dropped regions for a blurred copy of the frame.
//!
//! Bit `j` of mask `k` is draw `j` of ChaCha8 stream `k` under the batch's
//! master seed, so one mask can be rebuilt without replaying the others.
//! Masks are not shifted or cropped after upsampling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::{resize_plane, ImageTensor, ScalarField};

/// Coarse mask grid, `(cells across, cells down)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub w: usize,
    pub h: usize,
}

impl Grid {
    pub const fn new(w: usize, h: usize) -> Self {
        Self { w, h }
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self::new(7, 7)
    }
}

pub(crate) fn check_keep_prob(p: f32) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!(
            "keep probability must lie in (0, 1), got {p}; the 1/(1-p) normalizer is singular at 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    pub grid: Grid,
    /// Row-major, 1 = keep.
    pub bits: Vec<u8>,
    pub keep_prob: f32,
    pub master_seed: u64,
    pub index: u64,
}

impl CoarseMask {
    /// Draw mask `index` of the stream family keyed by `master_seed`.
    pub fn generate(grid: Grid, keep_prob: f32, master_seed: u64, index: u64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        if grid.cells() == 0 {
            return Err(Error::param("mask grid has no cells"));
        }
        let mut rng = keyed_rng(master_seed, index);
        let p = keep_prob as f64;
        let bits = (0..grid.cells())
            .map(|_| u8::from(rng.random::<f64>() < p))
            .collect();
        Ok(Self {
            grid,
            bits,
            keep_prob,
            master_seed,
            index,
        })
    }

    /// Rebuild from the recorded seed lineage.
    pub fn regenerate(&self) -> Result<Self> {
        Self::generate(self.grid, self.keep_prob, self.master_seed, self.index)
    }

    pub fn as_field(&self) -> ScalarField {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        ScalarField::new(self.grid.w, self.grid.h, data).expect("grid is nonempty")
    }

    /// Bilinear upsample to `(w, h)`.
    pub fn dense(&self, w: usize, h: usize) -> Result<ScalarField> {
        let bits: Vec<f32> = self.bits.iter().map(|&b| b as f32).collect();
        let data = resize_plane(&bits, self.grid.w, self.grid.h, w, h)?;
        ScalarField::new(w, h, data)
    }

    pub fn kept_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }
}

/// JSON audit record for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub master_seed: u64,
    pub n: usize,
    pub p: f32,
    pub grid: Grid,
    pub target: (usize, usize),
}

/// `n` coarse masks plus their dense forms at the target resolution.
///
/// Dense forms are recomputed on demand by [`MaskBatch::dense`]; large batches
/// would not fit in memory otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub masks: Vec<CoarseMask>,
    pub p: f32,
    pub grid: Grid,
    pub target: (usize, usize),
    pub master_seed: u64,
}

pub fn sample_mask_batch(
    n: usize,
    p: f32,
    grid: Grid,
    target: (usize, usize),
    master_seed: u64,
) -> Result<MaskBatch> {
    check_keep_prob(p)?;
    if n == 0 {
        return Err(Error::param("mask batch needs at least one mask"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::param("mask target resolution is empty"));
    }
    let masks = (0..n as u64)
        .into_par_iter()
        .map(|k| CoarseMask::generate(grid, p, master_seed, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskBatch {
        masks,
        p,
        grid,
        target,
        master_seed,
    })
}

impl MaskBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dense(&self, k: usize) -> Result<ScalarField> {
        self.masks[k].dense(self.target.0, self.target.1)
    }

    pub fn dense_all(&self) -> Result<Vec<ScalarField>> {
        (0..self.len()).map(|k| self.dense(k)).collect()
    }

    /// Cells that no mask in the batch dropped. Their scores carry no
    /// occlusion events and are reported as undefined.
    pub fn never_dropped_cells(&self) -> Vec<usize> {
        (0..self.grid.cells())
            .filter(|&c| self.masks.iter().all(|m| m.bits[c] == 1))
            .collect()
    }

    pub fn manifest(&self) -> BatchManifest {
        BatchManifest {
            master_seed: self.master_seed,
            n: self.len(),
            p: self.p,
            grid: self.grid,
            target: self.target,
        }
    }

    /// Pixel whose bilinear sample position falls exactly on the center of
    /// `cell`, if the target resolution has one (odd integer upscale factors).
    pub fn cell_center_pixel(&self, cell: usize) -> Option<(usize, usize)> {
        cell_center_pixel(self.grid, self.target, cell)
    }
}

pub fn cell_center_pixel(grid: Grid, target: (usize, usize), cell: usize) -> Option<(usize, usize)> {
    let axis = |c: usize, n_in: usize, n_out: usize| -> Option<usize> {
        (0..n_out).find(|&i| (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5 == c as f64)
    };
    Some((
        axis(cell % grid.w, grid.w, target.0)?,
        axis(cell / grid.w, grid.h, target.1)?,
    ))
}

/// `obs * mask + blurred * (1 - mask)`, channelwise. `mask = 1` returns `obs`
/// bit for bit and `mask = 0` returns `blurred`.
pub fn blend(obs: &ImageTensor, blurred: &ImageTensor, mask: &ScalarField) -> Result<ImageTensor> {
    if obs.dims() != blurred.dims() || obs.channels() != blurred.channels() {
        return Err(Error::dims("blend: observation and blurred frame differ in shape"));
    }
    if obs.dims() != mask.dims() {
        return Err(Error::dims(format!(
            "blend: mask {:?} vs image {:?}",
            mask.dims(),
            obs.dims()
        )));
    }
    let a = obs.unit_samples();
    let b = blurred.unit_samples();
    let c = obs.channels();
    let out: Vec<f32> = a
        .iter()
        .zip(b.iter())
        .enumerate()
        .map(|(i, (&x, &y))| blend_px(x, y, mask.data()[i / c]))
        .collect();
    let img = ImageTensor::from_f32(obs.width(), obs.height(), c, out)?;
    Ok(match obs.encoding() {
        crate::tensor::Encoding::F32 => img,
        crate::tensor::Encoding::U8 => img.to_u8(),
    })
}

/// Branch-free so the per-pixel cost does not depend on the mask values: at
/// `m = 1` the blur term is `y * 0 = 0` and at `m = 0` the frame term is.
#[inline]
pub(crate) fn blend_px(x: f32, y: f32, m: f32) -> f32 {
    let m = m.clamp(0.0, 1.0);
    (x * m + y * (1.0 - m)).clamp(x.min(y), x.max(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_prob_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f32::NAN] {
            assert!(sample_mask_batch(1, p, Grid::default(), (7, 7), 0).is_err());
        }
        assert!(sample_mask_batch(0, 0.3, Grid::default(), (7, 7), 0).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let a = sample_mask_batch(3, 0.3, Grid::default(), (14, 14), 0).unwrap();
        let b = sample_mask_batch(3, 0.3, Grid::default(), (14, 14), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dense_all().unwrap(), b.dense_all().unwrap());
        for m in &a.masks {
            assert_eq!(&m.regenerate().unwrap(), m);
        }
        let c = sample_mask_batch(3, 0.3, Grid::default(), (14, 14), 1).unwrap();
        assert_ne!(a.masks, c.masks);
    }

    #[test]
    fn masks_are_random_access() {
        let batch = sample_mask_batch(20, 0.5, Grid::new(3, 3), (3, 3), 42).unwrap();
        let lone = CoarseMask::generate(Grid::new(3, 3), 0.5, 42, 17).unwrap();
        assert_eq!(batch.masks[17], lone);
    }

    #[test]
    fn keep_frequency_matches_p() {
        // 10^5 draws per cell: binomial sd = sqrt(0.21 / 1e5) ≈ 0.00145, so
        // [0.295, 0.305] is about ±3.4 sd.
        let n = 100_000;
        let batch = sample_mask_batch(n, 0.3, Grid::default(), (7, 7), 0).unwrap();
        for cell in 0..49 {
            let kept = batch.masks.iter().filter(|m| m.bits[cell] == 1).count();
            let freq = kept as f64 / n as f64;
            assert!((0.295..=0.305).contains(&freq), "cell {cell}: {freq}");
        }
    }

    #[test]
    fn dense_masks_stay_in_unit_interval() {
        let batch = sample_mask_batch(10, 0.4, Grid::default(), (50, 31), 3).unwrap();
        for d in batch.dense_all().unwrap() {
            assert!(d.min() >= 0.0 && d.max() <= 1.0);
        }
    }

    #[test]
    fn never_dropped_cells_are_reported() {
        let batch = sample_mask_batch(1, 0.5, Grid::new(4, 4), (4, 4), 9).unwrap();
        let expected: Vec<usize> = (0..16).filter(|&c| batch.masks[0].bits[c] == 1).collect();
        assert_eq!(batch.never_dropped_cells(), expected);
        let big = sample_mask_batch(200, 0.3, Grid::default(), (7, 7), 0).unwrap();
        assert!(big.never_dropped_cells().is_empty());
    }

    #[test]
    fn cell_centers_exist_for_odd_factors() {
        let g = Grid::new(7, 7);
        assert_eq!(cell_center_pixel(g, (21, 21), 0), Some((1, 1)));
        assert_eq!(cell_center_pixel(g, (21, 21), 8), Some((4, 4)));
        assert_eq!(cell_center_pixel(g, (7, 7), 10), Some((3, 1)));
        assert_eq!(cell_center_pixel(g, (28, 28), 0), None);
    }

    #[test]
    fn blend_extremes_and_midpoint() {
        let obs = ImageTensor::from_f32(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let blur = ImageTensor::from_f32(2, 1, 3, vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap();
        let ones = ScalarField::constant(2, 1, 1.0).unwrap();
        let zeros = ScalarField::zeros(2, 1).unwrap();
        assert_eq!(blend(&obs, &blur, &ones).unwrap(), obs);
        assert_eq!(blend(&obs, &blur, &zeros).unwrap(), blur);

        let white = ImageTensor::filled(2, 2, 1, 1.0).unwrap();
        let black = ImageTensor::filled(2, 2, 1, 0.0).unwrap();
        let half = ScalarField::constant(2, 2, 0.5).unwrap();
        let mid = blend(&white, &black, &half).unwrap();
        assert!(mid.as_f32().unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn blend_rejects_mismatched_dims() {
        let a = ImageTensor::filled(2, 2, 1, 0.0).unwrap();
        let b = ImageTensor::filled(2, 1, 1, 0.0).unwrap();
        let m = ScalarField::zeros(2, 2).unwrap();
        assert!(blend(&a, &b, &m).is_err());
        assert!(blend(&a, &a, &ScalarField::zeros(1, 2).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blend_is_convex(
                xs in proptest::collection::vec(0.0f32..=1.0, 12),
                ys in proptest::collection::vec(0.0f32..=1.0, 12),
                ms in proptest::collection::vec(0.0f32..=1.0, 4),
            ) {
                let a = ImageTensor::from_f32(2, 2, 3, xs.clone()).unwrap();
                let b = ImageTensor::from_f32(2, 2, 3, ys.clone()).unwrap();
                let m = ScalarField::new(2, 2, ms).unwrap();
                let out = blend(&a, &b, &m).unwrap();
                for (i, &v) in out.as_f32().unwrap().iter().enumerate() {
                    prop_assert!(v >= xs[i].min(ys[i]) && v <= xs[i].max(ys[i]));
                }
            }
        }
    }
}
