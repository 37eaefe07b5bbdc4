use super::{ImageTensor, ScalarField};
use crate::error::{Error, Result};

/// `a + (b - a) t`, exact at `t = 0` and at `a = b`, kept inside
/// `[min(a,b), max(a,b)]`. No branches, so the cost is value independent.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Source taps for one output axis under the half-pixel-center convention.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of one plane (sample centers at `(i + 0.5) * in/out - 0.5`,
/// clamped to the source grid).
pub fn resize_plane(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Result<Vec<f32>> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::param(format!("resize target {out_w}x{out_h} is empty")));
    }
    if src.len() != w * h || w == 0 || h == 0 {
        return Err(Error::dims(format!("plane length {} != {w}x{h}", src.len())));
    }
    let xs = axis_taps(w, out_w);
    let ys = axis_taps(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, ty) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, tx) in &xs {
            let top = lerp(r0[x0] as f64, r0[x1] as f64, tx);
            let bot = lerp(r1[x0] as f64, r1[x1] as f64, tx);
            out.push(lerp(top, bot, ty) as f32);
        }
    }
    Ok(out)
}

pub fn bilinear_resize(field: &ScalarField, out_w: usize, out_h: usize) -> Result<ScalarField> {
    let data = resize_plane(field.data(), field.width(), field.height(), out_w, out_h)?;
    ScalarField::new(out_w, out_h, data)
}

/// Bilinear sample of a plane at continuous pixel coordinates, clamped to the
/// border.
pub fn sample_bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let top = lerp(plane[y0 * w + x0] as f64, plane[y0 * w + x1] as f64, tx);
    let bot = lerp(plane[y1 * w + x0] as f64, plane[y1 * w + x1] as f64, tx);
    lerp(top, bot, ty)
}

/// `out(p) = img(p + (dx(p), dy(p)))`, sampled bilinearly with clamped borders.
pub fn warp_bilinear(img: &ImageTensor, dx: &ScalarField, dy: &ScalarField) -> Result<ImageTensor> {
    let (w, h) = img.dims();
    if dx.dims() != (w, h) || dy.dims() != (w, h) {
        return Err(Error::dims(format!(
            "displacement fields {:?}/{:?} do not match image {w}x{h}",
            dx.dims(),
            dy.dims()
        )));
    }
    let planes: Vec<Vec<f32>> = img
        .planes()
        .iter()
        .map(|plane| {
            (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    sample_bilinear(plane, w, h, x + dx.data()[i] as f64, y + dy.data()[i] as f64)
                        as f32
                })
                .collect()
        })
        .collect();
    img.with_planes_like(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: usize, h: usize, data: &[f32]) -> ScalarField {
        ScalarField::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_resize_is_exact() {
        let f = field(3, 2, &[0.1, 0.7, -3.0, 5.5, 1e-8, 2.0]);
        assert_eq!(bilinear_resize(&f, 3, 2).unwrap(), f);
    }

    #[test]
    fn zero_target_is_rejected() {
        let f = field(1, 1, &[1.0]);
        assert!(bilinear_resize(&f, 0, 3).is_err());
    }

    #[test]
    fn two_by_two_upsample_matches_hand_weights() {
        // Column coordinate for output i is (i + 0.5) / 2 - 0.5, clamped to [0, 1]:
        // i=0 -> 0 (clamped from -0.25), i=1 -> 0.25, i=2 -> 0.75, i=3 -> 1 (clamped).
        let f = field(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let out = bilinear_resize(&f, 4, 4).unwrap();
        let expected_row = [0.0f32, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(x, y), expected_row[x]);
            }
        }
    }

    #[test]
    fn constant_survives_round_trip() {
        let f = ScalarField::constant(7, 7, 0.3).unwrap();
        let up = bilinear_resize(&f, 53, 29).unwrap();
        let back = bilinear_resize(&up, 7, 7).unwrap();
        assert_eq!(back, f);
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn odd_upsample_hits_cell_centers_exactly() {
        let f = field(2, 1, &[0.2, 0.9]);
        let up = bilinear_resize(&f, 6, 1).unwrap();
        // factor 3: output pixel 1 samples source 0 exactly, pixel 4 samples source 1
        assert_eq!(up.get(1, 0), 0.2);
        assert_eq!(up.get(4, 0), 0.9);
    }

    #[test]
    fn zero_warp_is_identity() {
        let data: Vec<f32> = (0..4 * 3 * 3).map(|i| (i as f32) / 36.0).collect();
        let img = ImageTensor::from_f32(4, 3, 3, data).unwrap();
        let z = ScalarField::zeros(4, 3).unwrap();
        assert_eq!(warp_bilinear(&img, &z, &z).unwrap(), img);
    }

    #[test]
    fn integer_shift_moves_pixels_with_clamped_border() {
        let (w, h) = (5, 2);
        let data: Vec<f32> = (0..w * h).map(|i| (i % w) as f32 / 4.0).collect();
        let img = ImageTensor::from_f32(w, h, 1, data.clone()).unwrap();
        let dx = ScalarField::constant(w, h, 1.0).unwrap();
        let dy = ScalarField::zeros(w, h).unwrap();
        let out = warp_bilinear(&img, &dx, &dy).unwrap();
        let out = out.as_f32().unwrap();
        for y in 0..h {
            for x in 0..w {
                let src = (x + 1).min(w - 1);
                assert_eq!(out[y * w + x], data[y * w + src]);
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_columns() {
        let img = ImageTensor::from_f32(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let dx = ScalarField::constant(2, 1, 0.5).unwrap();
        let dy = ScalarField::zeros(2, 1).unwrap();
        let out = warp_bilinear(&img, &dx, &dy).unwrap();
        // 127.5 in [0, 255] terms
        assert_eq!(out.as_f32().unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn warp_rejects_mismatched_fields() {
        let img = ImageTensor::filled(3, 3, 1, 0.0).unwrap();
        let z = ScalarField::zeros(3, 2).unwrap();
        assert!(warp_bilinear(&img, &z, &z).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resize_output_is_bounded(
                w in 1usize..6, h in 1usize..6, ow in 1usize..20, oh in 1usize..20,
                seed in proptest::collection::vec(-100.0f32..100.0, 36)
            ) {
                let f = ScalarField::new(w, h, seed[..w * h].to_vec()).unwrap();
                let out = bilinear_resize(&f, ow, oh).unwrap();
                prop_assert!(out.min() >= f.min());
                prop_assert!(out.max() <= f.max());
            }
        }
    }
}
