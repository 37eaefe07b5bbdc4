//! Pixel containers, field numerics and file formats shared by every module.
//!
//! Images are kept as `f32` in `[0, 1]` internally. `u8` encoding only shows up
//! at file boundaries (PNG frames, PGM partitions) and on the wire.

mod blur;
pub mod io;
mod resample;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use blur::{gaussian_blur, gaussian_blur_field, gaussian_blur_plane, gaussian_kernel, Border};
pub use resample::{bilinear_resize, resize_plane, sample_bilinear, warp_bilinear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Encoding {
    U8,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// Row-major, channel-interleaved image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: PixelData,
}

fn check_shape(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::param(format!("empty image {width}x{height}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::param(format!("unsupported channel count {channels}")));
    }
    if len != width * height * channels {
        return Err(Error::dims(format!(
            "data length {len} != {width}x{height}x{channels}"
        )));
    }
    Ok(())
}

/// `x * 255` rounded half-to-even and clamped into `u8`.
pub fn unit_to_u8(x: f32) -> u8 {
    (x * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

impl ImageTensor {
    pub fn from_f32(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_shape(width, height, channels, data.len())?;
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::param(format!("pixel {i} = {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: PixelData::F32(data),
        })
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_shape(width, height, channels, data.len())?;
        Ok(Self {
            width,
            height,
            channels,
            data: PixelData::U8(data),
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::from_f32(width, height, channels, vec![value; width * height * channels])
    }

    /// Build an image from per-channel planes. Values are clamped into `[0, 1]`.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::dims("plane length differs from width x height"));
        }
        let mut data = vec![0.0f32; n * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v.clamp(0.0, 1.0);
            }
        }
        Self::from_f32(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encoding(&self) -> Encoding {
        match self.data {
            PixelData::U8(_) => Encoding::U8,
            PixelData::F32(_) => Encoding::F32,
        }
    }

    pub fn data(&self) -> &PixelData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            PixelData::F32(v) => Some(v),
            PixelData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            PixelData::U8(v) => Some(v),
            PixelData::F32(_) => None,
        }
    }

    /// Same image in `f32` encoding.
    pub fn to_f32(&self) -> ImageTensor {
        match &self.data {
            PixelData::F32(_) => self.clone(),
            PixelData::U8(v) => ImageTensor {
                width: self.width,
                height: self.height,
                channels: self.channels,
                data: PixelData::F32(v.iter().map(|&b| u8_to_unit(b)).collect()),
            },
        }
    }

    /// Same image in `u8` encoding (round half to even).
    pub fn to_u8(&self) -> ImageTensor {
        match &self.data {
            PixelData::U8(_) => self.clone(),
            PixelData::F32(v) => ImageTensor {
                width: self.width,
                height: self.height,
                channels: self.channels,
                data: PixelData::U8(v.iter().map(|&x| unit_to_u8(x)).collect()),
            },
        }
    }

    /// Interleaved samples as `f32` in `[0, 1]`, converting when `u8`-encoded.
    pub fn unit_samples(&self) -> std::borrow::Cow<'_, [f32]> {
        match &self.data {
            PixelData::F32(v) => std::borrow::Cow::Borrowed(v),
            PixelData::U8(v) => std::borrow::Cow::Owned(v.iter().map(|&b| u8_to_unit(b)).collect()),
        }
    }

    /// De-interleave into one `width x height` plane per channel.
    pub fn planes(&self) -> Vec<Vec<f32>> {
        let samples = self.unit_samples();
        let n = self.width * self.height;
        (0..self.channels)
            .map(|c| (0..n).map(|i| samples[i * self.channels + c]).collect())
            .collect()
    }

    /// Rebuild with the same encoding as `self` from `f32` planes.
    pub(crate) fn with_planes_like(&self, planes: &[Vec<f32>]) -> Result<ImageTensor> {
        let out = ImageTensor::from_planes(self.width, self.height, planes)?;
        Ok(match self.encoding() {
            Encoding::F32 => out,
            Encoding::U8 => out.to_u8(),
        })
    }

    /// Expand to three channels (grayscale is replicated).
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        match &self.data {
            PixelData::U8(v) => ImageTensor {
                width: self.width,
                height: self.height,
                channels: 3,
                data: PixelData::U8(v.iter().flat_map(|&b| [b, b, b]).collect()),
            },
            PixelData::F32(v) => ImageTensor {
                width: self.width,
                height: self.height,
                channels: 3,
                data: PixelData::F32(v.iter().flat_map(|&b| [b, b, b]).collect()),
            },
        }
    }
}

/// Row-major `f32` grid of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("empty field {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::dims(format!(
                "field data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("field value {i} is not finite")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::constant(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Multiply every value by `c`.
    pub fn scaled(&self, c: f32) -> Result<ScalarField> {
        ScalarField::new(self.width, self.height, self.data.iter().map(|v| v * c).collect())
    }
}

/// The visual context at one timestep: one image per named camera view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewObservation {
    pub views: BTreeMap<String, ImageTensor>,
    pub timestep: usize,
}

impl MultiViewObservation {
    pub fn new(views: BTreeMap<String, ImageTensor>, timestep: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::param("observation has no views"));
        }
        if timestep == 0 {
            return Err(Error::param("timesteps are 1-based"));
        }
        let mut encodings = views.values().map(ImageTensor::encoding);
        let first = encodings.next();
        if encodings.any(|e| Some(e) != first) {
            return Err(Error::param("views mix u8 and f32 encodings"));
        }
        Ok(Self { views, timestep })
    }

    /// A single-view observation, mostly for tests and small tools.
    pub fn single(view: &str, image: ImageTensor, timestep: usize) -> Result<Self> {
        Self::new(BTreeMap::from([(view.to_string(), image)]), timestep)
    }

    pub fn view_names(&self) -> Vec<String> {
        self.views.keys().cloned().collect()
    }

    pub fn view(&self, name: &str) -> Option<&ImageTensor> {
        self.views.get(name)
    }

    /// Apply `f` to every view, keeping names and timestep.
    pub fn map_views<F>(&self, mut f: F) -> Result<MultiViewObservation>
    where
        F: FnMut(&str, &ImageTensor) -> Result<ImageTensor>,
    {
        let views = self
            .views
            .iter()
            .map(|(name, img)| Ok((name.clone(), f(name, img)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        MultiViewObservation::new(views, self.timestep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_range_are_validated() {
        assert!(ImageTensor::from_f32(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageTensor::from_f32(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::from_f32(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::from_f32(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ScalarField::new(2, 1, vec![0.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn u8_conversion_rounds_half_to_even() {
        // 0.5 * 255 = 127.5 -> 128 (even); 1.5/255 * 255 = 1.5 -> 2
        assert_eq!(unit_to_u8(0.5), 128);
        assert_eq!(unit_to_u8(2.5 / 255.0), 2);
        assert_eq!(unit_to_u8(0.0), 0);
        assert_eq!(unit_to_u8(1.0), 255);
    }

    #[test]
    fn u8_round_trip_is_lossless() {
        let bytes: Vec<u8> = (0..=255).collect();
        let img = ImageTensor::from_u8(256, 1, 1, bytes.clone()).unwrap();
        assert_eq!(img.to_f32().to_u8().as_u8().unwrap(), &bytes[..]);
    }

    #[test]
    fn planes_round_trip() {
        let img = ImageTensor::from_f32(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let planes = img.planes();
        assert_eq!(planes[1], vec![0.2, 0.5]);
        assert_eq!(ImageTensor::from_planes(2, 1, &planes).unwrap(), img);
    }

    #[test]
    fn observation_rejects_mixed_encodings() {
        let a = ImageTensor::filled(1, 1, 3, 0.0).unwrap();
        let b = a.to_u8();
        let views = BTreeMap::from([("front".to_string(), a), ("wrist".to_string(), b)]);
        assert!(MultiViewObservation::new(views, 1).is_err());
    }
}
