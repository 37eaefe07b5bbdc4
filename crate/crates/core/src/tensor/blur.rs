use super::{ImageTensor, ScalarField};
use crate::error::{Error, Result};

/// How samples outside the grid are addressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Half-sample symmetric: `d c b a | a b c d | d c b a`.
    Reflect,
    /// Periodic.
    Wrap,
}

impl Border {
    pub(crate) fn index(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Border::Wrap => i.rem_euclid(n) as usize,
            Border::Reflect => {
                let period = 2 * n;
                let r = i.rem_euclid(period);
                (if r < n { r } else { period - 1 - r }) as usize
            }
        }
    }
}

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("blur sigma must be positive, got {sigma}")));
    }
    let sigma = sigma as f64;
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

fn convolve_rows(src: &[f32], w: usize, h: usize, taps: &[f64], border: Border) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f64;
            for (j, &t) in taps.iter().enumerate() {
                let sx = border.index(x as isize + j as isize - radius, w);
                acc += t * row[sx] as f64;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn convolve_cols(src: &[f64], w: usize, h: usize, taps: &[f64], border: Border) -> Vec<f32> {
    let radius = (taps.len() / 2) as isize;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (j, &t) in taps.iter().enumerate() {
                let sy = border.index(y as isize + j as isize - radius, h);
                acc += t * src[sy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Separable Gaussian blur of one `w x h` plane.
pub fn gaussian_blur_plane(
    plane: &[f32],
    w: usize,
    h: usize,
    sigma: f32,
    border: Border,
) -> Result<Vec<f32>> {
    if plane.len() != w * h {
        return Err(Error::dims(format!("plane length {} != {w}x{h}", plane.len())));
    }
    let taps = gaussian_kernel(sigma)?;
    let rows = convolve_rows(plane, w, h, &taps, border);
    Ok(convolve_cols(&rows, w, h, &taps, border))
}

/// Per-channel Gaussian blur with reflected borders. Output keeps the input's
/// dimensions and encoding.
pub fn gaussian_blur(img: &ImageTensor, sigma: f32) -> Result<ImageTensor> {
    let (w, h) = img.dims();
    let planes = img
        .planes()
        .iter()
        .map(|p| gaussian_blur_plane(p, w, h, sigma, Border::Reflect))
        .collect::<Result<Vec<_>>>()?;
    img.with_planes_like(&planes)
}

pub fn gaussian_blur_field(field: &ScalarField, sigma: f32) -> Result<ScalarField> {
    let (w, h) = field.dims();
    let data = gaussian_blur_plane(field.data(), w, h, sigma, Border::Reflect)?;
    ScalarField::new(w, h, data)
}
