use image::RgbImage;

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Smallest accepted raw image side.
pub const MIN_SIDE: u32 = 8;

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f32], q: f64) -> f32 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = (pos - lo as f64) as f32;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

/// Maps the 2nd and 98th percentiles of `channel` to 0 and 1 and clamps.
/// A channel whose percentiles coincide is left as is.
pub fn contrast_stretch(channel: &mut [f32]) {
    let mut sorted = channel.to_vec();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile(&sorted, 0.02);
    let hi = percentile(&sorted, 0.98);
    if hi - lo <= f32::EPSILON {
        return;
    }
    let scale = 1.0 / (hi - lo);
    channel
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) * scale).clamp(0.0, 1.0));
}

/// Bilinear resize of one `h x w` plane to `oh x ow` with half-pixel centers
/// and clamped borders.
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    resize_region(src, h, w, (0.0, 0.0, h as f32, w as f32), oh, ow)
}

/// Bilinear resample of the region `(top, left, height, width)` of an
/// `h x w` plane onto an `oh x ow` grid.
pub(crate) fn resize_region(
    src: &[f32],
    h: usize,
    w: usize,
    (top, left, rh, rw): (f32, f32, f32, f32),
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let sy = rh / oh as f32;
    let sx = rw / ow as f32;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let y = (top + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f32;
        for ox in 0..ow {
            let x = (left + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f32;
            let top_row = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom_row = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top_row * (1.0 - fy) + bottom_row * fy);
        }
    }
    out
}

/// 8-bit RGB image to a `(3, size, size)` tensor in `[0, 1]`: per-channel
/// percentile contrast stretch, then bilinear resize.
pub fn preprocess(img: &RgbImage, size: usize) -> Result<Tensor<f32>> {
    let (w, h) = img.dimensions();
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(DataError::TooSmall {
            width: w,
            height: h,
        });
    }
    if size == 0 {
        return Err(DataError::Config("image size must be positive".into()));
    }
    let (w, h) = (w as usize, h as usize);
    let mut planes = vec![vec![0f32; w * h]; 3];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = f32::from(px.0[c]) / 255.0;
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for plane in &mut planes {
        contrast_stretch(plane);
        data.extend(
            resize_plane(plane, h, w, size, size)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

pub fn decode(path: &std::path::Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_unchanged() {
        let img = RgbImage::from_pixel(20, 12, image::Rgb([100, 150, 200]));
        let t = preprocess(&img, 16).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        for (c, v) in [100.0f32, 150.0, 200.0].iter().enumerate() {
            let plane = &t.data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|p| (p - v / 255.0).abs() < 1e-6));
        }
    }

    #[test]
    fn stretch_maps_percentiles_to_endpoints() {
        let mut ch: Vec<f32> = (0..=255).map(|v| v as f32 / 255.0).collect();
        let sorted = ch.clone();
        let lo = percentile(&sorted, 0.02);
        let hi = percentile(&sorted, 0.98);
        assert!((lo - 0.02).abs() < 1e-6 && (hi - 0.98).abs() < 1e-6);
        contrast_stretch(&mut ch);
        let at = |x: f32| ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        assert_eq!(at(lo), 0.0);
        assert!((at(hi) - 1.0).abs() < 1e-6);
        assert_eq!(ch[0], 0.0);
        assert_eq!(ch[255], 1.0);
        assert!(ch.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn large_input_shape() {
        let img = RgbImage::from_fn(512, 512, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 7])
        });
        let t = preprocess(&img, 64).unwrap();
        assert_eq!(t.shape(), &[3, 64, 64]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_image_rejected() {
        let img = RgbImage::new(7, 20);
        assert!(matches!(
            preprocess(&img, 16),
            Err(DataError::TooSmall { .. })
        ));
    }

    #[test]
    fn identity_resize() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_plane(&src, 3, 4, 3, 4), src);
    }
}
