//! File formats: grayscale little-endian PFM for fields, binary PGM for
//! partitions and mask audits, 8-bit RGB PNG for frames and overlays.
//!
//! PFM layout written here, byte for byte:
//!
//! ```text
//! Pf\n<width> <height>\n-1.0\n<width*height f32 little-endian, bottom row first>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ImageTensor, ScalarField};
use crate::error::{Error, Result};
use crate::metrics::{Label, SemanticPartition};

/// Whitespace-delimited header tokenizer shared by the netpbm-family readers.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    allow_comments: bool,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8], allow_comments: bool) -> Self {
        Self {
            bytes,
            pos: 0,
            allow_comments,
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.allow_comments && self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(what, "missing header token"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(what, "header token is not ASCII"))
    }

    fn dimension(&mut self, what: &str) -> Result<usize> {
        let tok = self.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::format(tok, format!("invalid {what}"))),
        }
    }

    /// Consume the single whitespace byte that separates header from payload.
    fn payload(self, what: &str) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(Error::format(what, "header not terminated by whitespace")),
        }
    }
}

pub fn encode_pfm(field: &ScalarField) -> Vec<u8> {
    let (w, h) = field.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for &v in &field.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ScalarField> {
    let mut header = Header::new(bytes, false);
    let magic = header.token("magic")?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::format(magic, "color PFM is not supported")),
        _ => return Err(Error::format(magic, "not a grayscale PFM")),
    }
    let w = header.dimension("width")?;
    let h = header.dimension("height")?;
    let scale_tok = header.token("scale")?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::format(scale_tok, "scale is not a number"))?;
    if scale.is_nan() || scale == 0.0 {
        return Err(Error::format(scale_tok, "scale must be nonzero"));
    }
    if scale > 0.0 {
        return Err(Error::format(scale_tok, "big-endian PFM is not supported"));
    }
    let payload = header.payload(scale_tok)?;
    let need = w * h * 4;
    if payload.len() < need {
        return Err(Error::format(
            "payload",
            format!("truncated: {} of {need} bytes", payload.len()),
        ));
    }
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let (row, x) = (i / w, i % w);
        let y = h - 1 - row;
        data[y * w + x] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    ScalarField::new(w, h, data)
}

pub fn write_pfm(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pfm(field))?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ScalarField> {
    decode_pfm(&fs::read(path)?)
}

/// Binary (P5) PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dims(format!(
            "pgm payload {} != {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parse a P5 PGM, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut header = Header::new(bytes, true);
    let magic = header.token("magic")?;
    if magic != "P5" {
        return Err(Error::format(magic, "expected binary PGM (P5)"));
    }
    let w = header.dimension("width")?;
    let h = header.dimension("height")?;
    let maxval = header.token("maxval")?;
    if maxval != "255" {
        return Err(Error::format(maxval, "maxval must be 255"));
    }
    let payload = header.payload(maxval)?;
    if payload.len() < w * h {
        return Err(Error::format(
            "payload",
            format!("truncated: {} of {} bytes", payload.len(), w * h),
        ));
    }
    Ok((w, h, payload[..w * h].to_vec()))
}

pub fn write_pgm(width: usize, height: usize, pixels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// Partition labels stored as PGM values 1 (ACT), 2 (SUP), 3 (NUIS).
pub fn decode_partition_pgm(bytes: &[u8]) -> Result<SemanticPartition> {
    let (w, h, pixels) = decode_pgm(bytes)?;
    let labels = pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            Label::from_code(v).ok_or_else(|| {
                Error::format(format!("pixel {i}"), format!("unknown partition label {v}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SemanticPartition::new(w, h, labels)
}

pub fn read_partition_pgm(path: impl AsRef<Path>) -> Result<SemanticPartition> {
    decode_partition_pgm(&fs::read(path)?)
}

pub fn write_partition_pgm(partition: &SemanticPartition, path: impl AsRef<Path>) -> Result<()> {
    let codes: Vec<u8> = partition.labels().iter().map(|l| l.code()).collect();
    write_pgm(partition.width(), partition.height(), &codes, path)
}

/// Dense mask in `[0, 1]` exported as 0..255 for audit.
pub fn write_mask_pgm(mask: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&v| super::unit_to_u8(v.clamp(0.0, 1.0))).collect();
    write_pgm(mask.width(), mask.height(), &px, path)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_u8(w as usize, h as usize, 3, rgb.into_raw())
}

/// Write as 8-bit RGB (grayscale is replicated).
pub fn write_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let rgb = img.to_rgb().to_u8();
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        rgb.as_u8().expect("u8 after conversion").to_vec(),
    )
    .ok_or_else(|| Error::dims("png buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_round_trip_is_bit_identical() {
        let f = ScalarField::new(3, 2, vec![0.0, 0.5, -1.0, 7.0, 1e-8, 42.0]).unwrap();
        let back = decode_pfm(&encode_pfm(&f)).unwrap();
        let bits = |s: &ScalarField| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&f));
    }

    #[test]
    fn pfm_layout_is_bottom_up_little_endian() {
        let f = ScalarField::new(1, 2, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&f);
        let mut expected = b"Pf\n1 2\n-1.0\n".to_vec();
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pfm_header_with_exact_payload_is_accepted() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend(std::iter::repeat_n(0u8, 24));
        let f = decode_pfm(&bytes).unwrap();
        assert_eq!(f.dims(), (3, 2));
    }

    #[test]
    fn pfm_rejects_big_endian_scale() {
        let mut bytes = b"Pf\n1 1\n+1.0\n".to_vec();
        bytes.extend_from_slice(&[0; 4]);
        match decode_pfm(&bytes) {
            Err(Error::Format { token, .. }) => assert_eq!(token, "+1.0"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0"),
            Err(Error::Format { token, .. }) if token == "PF"
        ));
        assert!(matches!(
            decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0"),
            Err(Error::Format { token, .. }) if token == "payload"
        ));
        assert!(matches!(
            decode_pfm(b"Pf\nx 2\n-1.0\n"),
            Err(Error::Format { token, .. }) if token == "x"
        ));
    }

    #[test]
    fn partition_pgm_labels() {
        let bytes = encode_pgm(3, 1, &[1, 2, 3]).unwrap();
        let p = decode_partition_pgm(&bytes).unwrap();
        assert_eq!(p.labels(), &[Label::Act, Label::Sup, Label::Nuis]);
        for l in Label::ALL {
            assert!((p.fraction(l) - 1.0 / 3.0).abs() < 1e-12);
        }

        let all_nuis = decode_partition_pgm(&encode_pgm(4, 4, &[3; 16]).unwrap()).unwrap();
        assert_eq!(all_nuis.fraction(Label::Nuis), 1.0);
    }

    #[test]
    fn partition_pgm_reports_first_bad_pixel() {
        let bytes = encode_pgm(4, 1, &[1, 3, 7, 9]).unwrap();
        match decode_partition_pgm(&bytes) {
            Err(Error::Format { token, .. }) => assert_eq!(token, "pixel 2"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pgm_rejects_ascii_magic_and_other_maxval() {
        assert!(decode_pgm(b"P2\n1 1\n255\n1").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        let with_comment = b"P5\n# exported\n1 1\n255\n\x02";
        assert_eq!(decode_pgm(with_comment).unwrap(), (1, 1, vec![2]));
    }

    #[test]
    fn png_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageTensor::from_u8(2, 1, 3, vec![1, 2, 3, 250, 251, 252]).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_any_finite(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = bits
                .iter()
                .map(|&b| f32::from_bits(b))
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let w = data.len();
            let f = ScalarField::new(w, 1, data).unwrap();
            let back = decode_pfm(&encode_pfm(&f)).unwrap();
            let lhs: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let rhs: Vec<u32> = f.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
