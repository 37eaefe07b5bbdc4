//! Region-restricted perturbations: Gaussian noise, fBM texture, smooth
//! geometric warps, and coarse patch occlusion.
//!
//! Noise works in `[0, 1]` intensity space and texture in `[0, 255]`, so the
//! published constants keep their literal meaning. Outside the region every
//! operator except patch copies the input pixel unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{blend, CoarseMask, Grid};
use crate::metrics::{Label, SemanticPartition};
use crate::rng::{derive_seed, standard_normal_field};
use crate::tensor::{
    gaussian_blur, gaussian_blur_plane, warp_bilinear, Border, Encoding, ImageTensor, MultiViewObservation,
    ScalarField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Noise,
    Texture,
    Geometric,
    Patch,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Noise => "noise",
            PerturbationKind::Texture => "texture",
            PerturbationKind::Geometric => "geometric",
            PerturbationKind::Patch => "patch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConstants {
    pub noise_sigma: f32,
    pub texture_alpha: f32,
    pub texture_octaves: usize,
    pub texture_sigma_base: f32,
    pub texture_amp_decay: f32,
    pub geo_beta: f32,
    pub geo_sigma: f32,
    pub patch_keep_p: f32,
    pub patch_grid: Grid,
    /// Blur standing in for occluded patches.
    pub patch_blur_sigma: f32,
}

impl Default for PerturbationConstants {
    fn default() -> Self {
        Self {
            noise_sigma: 0.25,
            texture_alpha: 60.0,
            texture_octaves: 4,
            texture_sigma_base: 1.5,
            texture_amp_decay: 0.5,
            geo_beta: 25.0,
            geo_sigma: 10.0,
            patch_keep_p: 0.3,
            patch_grid: Grid::new(7, 7),
            patch_blur_sigma: 9.0,
        }
    }
}

fn default_region() -> Vec<Label> {
    vec![Label::Nuis]
}

fn default_lambda() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Strength in `[0, 1]`. Noise uses `λ · noise_sigma` as its std.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default = "default_region")]
    pub region: Vec<Label>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub constants: PerturbationConstants,
    /// Confine patch occlusion to the region too (the plain operator is
    /// global).
    #[serde(default)]
    pub patch_region_restricted: bool,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, lambda: f32, seed: u64) -> Self {
        Self {
            kind,
            lambda,
            region: default_region(),
            seed,
            constants: PerturbationConstants::default(),
            patch_region_restricted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn region_mask(&self, partition: &SemanticPartition) -> ScalarField {
        partition.mask_of(|l| self.region.contains(&l))
    }
}

fn check_mask(img: &ImageTensor, mask: &ScalarField) -> Result<()> {
    if img.dims() != mask.dims() {
        return Err(Error::dims(format!(
            "region mask {:?} vs image {:?}",
            mask.dims(),
            img.dims()
        )));
    }
    Ok(())
}

/// Build the output from per-sample values: region pixels get `f(i, x)`,
/// others are copied. The input encoding is kept.
fn confine<F>(img: &ImageTensor, mask: &ScalarField, mut f: F) -> Result<ImageTensor>
where
    F: FnMut(usize, f32) -> f32,
{
    check_mask(img, mask)?;
    let c = img.channels();
    let src = img.unit_samples();
    let out: Vec<f32> = src
        .iter()
        .enumerate()
        .map(|(i, &x)| if mask.data()[i / c] != 0.0 { f(i, x) } else { x })
        .collect();
    let o = ImageTensor::from_f32(img.width(), img.height(), c, out)?;
    Ok(match img.encoding() {
        Encoding::F32 => o,
        Encoding::U8 => o.to_u8(),
    })
}

/// `len` draws of `N(0, sigma²)`.
pub fn gaussian_noise(len: usize, sigma: f32, seed: u64) -> Vec<f32> {
    standard_normal_field(len, seed, 1)
        .into_iter()
        .map(|z| z * sigma)
        .collect()
}

/// `clip(V + ε, 0, 1)` inside the region, `V` outside.
pub fn perturb_noise(img: &ImageTensor, region: &ScalarField, sigma: f32, seed: u64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        check_mask(img, region)?;
        return Ok(img.clone());
    }
    let eps = gaussian_noise(img.len(), sigma, seed);
    confine(img, region, |i, x| (x + eps[i]).clamp(0.0, 1.0))
}

/// Standardized fBM field: `Σ_k decay^k · blur(z_k, base · 2^k)` over
/// independent `N(0, 1)` fields `z_k`, divided by its own std.
pub fn fbm_field(w: usize, h: usize, c: &PerturbationConstants, seed: u64) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; w * h];
    let mut amp = 1.0f64;
    for k in 0..c.texture_octaves {
        let z = standard_normal_field(w * h, seed, 100 + k as u64);
        let sigma = c.texture_sigma_base * (1u32 << k) as f32;
        let smooth = gaussian_blur_plane(&z, w, h, sigma, Border::Reflect)?;
        for (a, &v) in acc.iter_mut().zip(&smooth) {
            *a += amp * v as f64;
        }
        amp *= c.texture_amp_decay as f64;
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let std = (acc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 1e-12) {
        return Err(Error::Perturbation(format!("fBM field is constant (std {std})")));
    }
    Ok(acc.iter().map(|v| (v / std) as f32).collect())
}

/// `clip(V₂₅₅ + λ α F, 0, 255)` inside the region with `F` the standardized
/// fBM field, shared across channels.
pub fn perturb_texture(
    img: &ImageTensor,
    region: &ScalarField,
    lambda: f32,
    c: &PerturbationConstants,
    seed: u64,
) -> Result<ImageTensor> {
    check_mask(img, region)?;
    if lambda == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    let field = fbm_field(w, h, c, seed)?;
    let ch = img.channels();
    let gain = lambda as f64 * c.texture_alpha as f64;
    confine(img, region, |i, x| {
        let v = x as f64 * 255.0 + gain * field[i / ch] as f64;
        (v.clamp(0.0, 255.0) / 255.0) as f32
    })
}

/// Smoothed displacement fields `(dx, dy)`, each scaled so its largest
/// magnitude is exactly `λ β`.
pub fn displacement_fields(
    w: usize,
    h: usize,
    lambda: f32,
    c: &PerturbationConstants,
    seed: u64,
) -> Result<(ScalarField, ScalarField)> {
    let make = |stream: u64| -> Result<ScalarField> {
        let z = standard_normal_field(w * h, seed, stream);
        let s = gaussian_blur_plane(&z, w, h, c.geo_sigma, Border::Reflect)?;
        let peak = s.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { lambda * c.geo_beta / peak } else { 0.0 };
        ScalarField::new(w, h, s.iter().map(|v| (v * scale).clamp(-lambda * c.geo_beta, lambda * c.geo_beta)).collect())
    };
    Ok((make(200)?, make(201)?))
}

/// Warp the region by a smooth random displacement; copy the rest.
pub fn perturb_geometric(
    img: &ImageTensor,
    region: &ScalarField,
    lambda: f32,
    c: &PerturbationConstants,
    seed: u64,
) -> Result<ImageTensor> {
    check_mask(img, region)?;
    if lambda == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    let (dx, dy) = displacement_fields(w, h, lambda, c, seed)?;
    let warped = warp_bilinear(&img.to_f32(), &dx, &dy)?;
    let wv = warped.as_f32().expect("f32 warp");
    confine(img, region, |i, _| wv[i])
}

/// The coarse keep-mask used by [`perturb_patch`].
pub fn patch_mask(c: &PerturbationConstants, seed: u64) -> Result<CoarseMask> {
    CoarseMask::generate(c.patch_grid, c.patch_keep_p, seed, 0)
}

/// `V m + V_blur (1 − m)` with one Bernoulli coarse mask. Global unless a
/// region is given.
pub fn perturb_patch(
    img: &ImageTensor,
    region: Option<&ScalarField>,
    c: &PerturbationConstants,
    seed: u64,
) -> Result<ImageTensor> {
    let mask = patch_mask(c, seed)?;
    perturb_patch_with(img, region, &mask, c)
}

/// [`perturb_patch`] with an explicit mask.
pub fn perturb_patch_with(
    img: &ImageTensor,
    region: Option<&ScalarField>,
    mask: &CoarseMask,
    c: &PerturbationConstants,
) -> Result<ImageTensor> {
    let (w, h) = img.dims();
    let dense = mask.dense(w, h)?;
    let blurred = gaussian_blur(img, c.patch_blur_sigma)?;
    let out = blend(img, &blurred, &dense)?;
    match region {
        None => Ok(out),
        Some(r) => {
            let o = out.unit_samples();
            confine(img, r, |i, _| o[i])
        }
    }
}

/// Apply `spec` to one image. Region-restricted kinds need a partition.
pub fn apply(img: &ImageTensor, partition: Option<&SemanticPartition>, spec: &PerturbationSpec) -> Result<ImageTensor> {
    apply_seeded(img, partition, spec, spec.seed)
}

fn apply_seeded(
    img: &ImageTensor,
    partition: Option<&SemanticPartition>,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<ImageTensor> {
    spec.validate()?;
    let c = &spec.constants;
    let needs_region = spec.kind != PerturbationKind::Patch || spec.patch_region_restricted;
    let region = match (needs_region, partition) {
        (false, _) => None,
        (true, Some(p)) => Some(spec.region_mask(p)),
        (true, None) => {
            return Err(Error::param(format!(
                "{} perturbation needs a semantic partition",
                spec.kind.as_str()
            )))
        }
    };
    match spec.kind {
        PerturbationKind::Noise => perturb_noise(img, region.as_ref().unwrap(), spec.lambda * c.noise_sigma, seed),
        PerturbationKind::Texture => perturb_texture(img, region.as_ref().unwrap(), spec.lambda, c, seed),
        PerturbationKind::Geometric => perturb_geometric(img, region.as_ref().unwrap(), spec.lambda, c, seed),
        PerturbationKind::Patch => perturb_patch(img, region.as_ref(), c, seed),
    }
}

/// Apply `spec` to every view, each with its own seed derived from the spec
/// seed and the view's position.
pub fn apply_obs(
    obs: &MultiViewObservation,
    partitions: &BTreeMap<String, SemanticPartition>,
    spec: &PerturbationSpec,
) -> Result<MultiViewObservation> {
    let names: Vec<String> = obs.view_names();
    obs.map_views(|name, img| {
        let idx = names.iter().position(|n| n == name).unwrap_or(0) as u64;
        apply_seeded(img, partitions.get(name), spec, derive_seed(spec.seed, &[idx]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize, c: usize) -> ImageTensor {
        let data = (0..w * h * c).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageTensor::from_f32(w, h, c, data).unwrap()
    }

    fn left_half(w: usize, h: usize) -> ScalarField {
        ScalarField::new(w, h, (0..w * h).map(|i| (i % w < w / 2) as u8 as f32).collect()).unwrap()
    }

    #[test]
    fn published_constants() {
        let c = PerturbationConstants::default();
        assert_eq!(c.noise_sigma, 0.25);
        assert_eq!(c.texture_alpha, 60.0);
        assert_eq!(c.texture_octaves, 4);
        assert_eq!(c.texture_sigma_base, 1.5);
        assert_eq!(c.texture_amp_decay, 0.5);
        assert_eq!(c.geo_beta, 25.0);
        assert_eq!(c.geo_sigma, 10.0);
        assert_eq!(c.patch_keep_p, 0.3);
        assert_eq!(c.patch_grid, Grid::new(7, 7));
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = gradient(20, 12, 3);
        let r = ScalarField::constant(20, 12, 1.0).unwrap();
        let c = PerturbationConstants::default();
        assert_eq!(perturb_noise(&img, &r, 0.0, 1).unwrap(), img);
        assert_eq!(perturb_texture(&img, &r, 0.0, &c, 1).unwrap(), img);
        assert_eq!(perturb_geometric(&img, &r, 0.0, &c, 1).unwrap(), img);
    }

    #[test]
    fn empty_region_is_identity() {
        let img = gradient(20, 12, 3);
        let r = ScalarField::zeros(20, 12).unwrap();
        let c = PerturbationConstants::default();
        assert_eq!(perturb_noise(&img, &r, 0.25, 1).unwrap(), img);
        assert_eq!(perturb_texture(&img, &r, 1.0, &c, 1).unwrap(), img);
        assert_eq!(perturb_geometric(&img, &r, 1.0, &c, 1).unwrap(), img);
    }

    #[test]
    fn fbm_is_standardized() {
        let f = fbm_field(64, 48, &PerturbationConstants::default(), 3).unwrap();
        let n = f.len() as f64;
        let mean = f.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = f.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
    }

    #[test]
    fn texture_bound_and_confinement() {
        let img = gradient(40, 30, 3);
        let r = left_half(40, 30);
        let c = PerturbationConstants::default();
        let lambda = 0.4;
        let out = perturb_texture(&img, &r, lambda, &c, 9).unwrap();
        let field = fbm_field(40, 30, &c, 9).unwrap();
        let fmax = field.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let (a, b) = (img.as_f32().unwrap(), out.as_f32().unwrap());
        for i in 0..a.len() {
            let px = i / 3;
            if r.data()[px] == 0.0 {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            } else {
                assert!(((b[i] - a[i]) as f64 * 255.0).abs() <= lambda as f64 * 60.0 * fmax + 1e-3);
            }
            assert!((0.0..=1.0).contains(&b[i]));
        }
    }

    #[test]
    fn displacement_peak_is_lambda_beta() {
        let c = PerturbationConstants::default();
        let (dx, dy) = displacement_fields(50, 40, 0.6, &c, 4).unwrap();
        let peak = |f: &ScalarField| f.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak(&dx) - 15.0).abs() < 1e-4);
        assert!((peak(&dy) - 15.0).abs() < 1e-4);
    }

    #[test]
    fn patch_extremes() {
        let img = gradient(21, 14, 3);
        let c = PerturbationConstants::default();
        let keep = CoarseMask {
            grid: c.patch_grid,
            bits: vec![1; 49],
            keep_prob: 0.3,
            master_seed: 0,
            index: 0,
        };
        assert_eq!(perturb_patch_with(&img, None, &keep, &c).unwrap(), img);
        let drop = CoarseMask { bits: vec![0; 49], ..keep };
        let blurred = gaussian_blur(&img, c.patch_blur_sigma).unwrap();
        assert_eq!(perturb_patch_with(&img, None, &drop, &c).unwrap(), blurred);
    }

    #[test]
    fn u8_images_keep_their_encoding() {
        let img = gradient(16, 16, 3).to_u8();
        let r = left_half(16, 16);
        let out = perturb_noise(&img, &r, 0.25, 2).unwrap();
        assert_eq!(out.encoding(), Encoding::U8);
        let (a, b) = (img.as_u8().unwrap(), out.as_u8().unwrap());
        for i in 0..a.len() {
            if r.data()[i / 3] == 0.0 {
                assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn spec_json_defaults() {
        let s: PerturbationSpec = serde_json::from_str("{\"kind\":\"texture\",\"lambda\":0.5}").unwrap();
        assert_eq!(s.region, vec![Label::Nuis]);
        assert_eq!(s.constants, PerturbationConstants::default());
        assert!(PerturbationSpec::new(PerturbationKind::Noise, 1.5, 0).validate().is_err());
    }

    #[test]
    fn region_kinds_need_a_partition() {
        let img = gradient(8, 8, 3);
        let spec = PerturbationSpec::new(PerturbationKind::Noise, 1.0, 0);
        assert!(apply(&img, None, &spec).is_err());
        let patch = PerturbationSpec::new(PerturbationKind::Patch, 1.0, 0);
        assert!(apply(&img, None, &patch).is_ok());
    }
}
