//! Synthetic stand-in for photographs of piezo elements with two soldered
//! wires.
//!
//! Every image shows a bright disc and two copper wires leaving its top
//! edge, each anchored by a weld blob, over a dark background lit by a
//! per-line gradient. Defective images carry exactly one of: a dark debris
//! blob on the disc, a gap in one wire, or a weld pushed off the disc edge.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, Result};

pub const DEFECT_DEBRIS: u8 = 1;
pub const DEFECT_BROKEN_WIRE: u8 = 2;
pub const DEFECT_MISPLACED_WELD: u8 = 3;

pub const LINE_COUNT: u8 = 3;

/// Per production line: brightness offset, horizontal and vertical
/// illumination slopes.
const LINES: [(f32, f32, f32); LINE_COUNT as usize] =
    [(0.0, 0.10, 0.0), (0.10, -0.05, 0.08), (-0.08, 0.04, -0.10)];

const BACKGROUND: [f32; 3] = [0.18, 0.18, 0.2];
const DISC: [f32; 3] = [0.78, 0.78, 0.74];
const ELECTRODE: [f32; 3] = [0.68, 0.69, 0.66];
const COPPER: [f32; 3] = [0.85, 0.5, 0.22];
const WELD: [f32; 3] = [0.93, 0.9, 0.7];
const DEBRIS: [f32; 3] = [0.12, 0.1, 0.08];
const NOISE_STD: f64 = 0.02;

/// One rendered image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub image: RgbImage,
    pub label: u8,
    pub line_id: u8,
    pub defect_kind: Option<u8>,
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![BACKGROUND; size * size],
        }
    }

    /// Blends `color` wherever `coverage(x, y)` (pixel-center coordinates) is positive.
    fn paint(&mut self, color: [f32; 3], coverage: impl Fn(f32, f32) -> f32) {
        for y in 0..self.size {
            for x in 0..self.size {
                let a = coverage(x as f32 + 0.5, y as f32 + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }

    fn disc(&mut self, (cx, cy): (f32, f32), r: f32, color: [f32; 3]) {
        self.paint(color, |x, y| r + 0.5 - (x - cx).hypot(y - cy));
    }

    fn segment(&mut self, a: (f32, f32), b: (f32, f32), width: f32, color: [f32; 3]) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        self.paint(color, |x, y| {
            let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            let d = (x - a.0 - t * dx).hypot(y - a.1 - t * dy);
            width / 2.0 + 0.5 - d
        });
    }
}

fn lerp(a: (f32, f32), b: (f32, f32), t: f32) -> (f32, f32) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
}

fn render(size: usize, line_id: u8, defect: Option<u8>, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let mut canvas = Canvas::new(size);
    let jitter = |rng: &mut ChaCha8Rng, amp: f32| rng.random_range(-amp..=amp);

    let center = (
        (0.5 + jitter(rng, 0.04)) * s,
        (0.58 + jitter(rng, 0.04)) * s,
    );
    let radius = (0.27 + jitter(rng, 0.02)) * s;
    canvas.disc(center, radius, DISC);
    canvas.disc(center, radius * 0.7, ELECTRODE);

    let broken = if defect == Some(DEFECT_BROKEN_WIRE) {
        Some(rng.random_range(0..2))
    } else {
        None
    };
    let displaced = if defect == Some(DEFECT_MISPLACED_WELD) {
        Some(rng.random_range(0..2))
    } else {
        None
    };
    let wire_width = (0.045 * s).max(1.5);
    for (k, base_deg) in [-122.0f32, -58.0].into_iter().enumerate() {
        let theta = (base_deg + jitter(rng, 8.0)).to_radians();
        let dir = (theta.cos(), theta.sin());
        let reach = if displaced == Some(k) { 1.3 } else { 0.8 };
        let junction = (
            center.0 + radius * reach * dir.0,
            center.1 + radius * reach * dir.1,
        );
        let end = (junction.0 + dir.0 * 0.25 * s + jitter(rng, 0.05) * s, 0.0);
        match broken {
            Some(b) if b == k => {
                let t0 = rng.random_range(0.3..0.45);
                canvas.segment(junction, lerp(junction, end, t0), wire_width, COPPER);
                canvas.segment(lerp(junction, end, t0 + 0.35), end, wire_width, COPPER);
            }
            _ => canvas.segment(junction, end, wire_width, COPPER),
        }
        canvas.disc(junction, 0.06 * s, WELD);
    }

    if defect == Some(DEFECT_DEBRIS) {
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let dist = rng.random_range(0.0..0.5) * radius;
        let spot = (center.0 + dist * angle.cos(), center.1 + dist * angle.sin());
        canvas.disc(spot, rng.random_range(0.07..0.1) * s, DEBRIS);
    }

    let (offset, gx, gy) = LINES[line_id as usize];
    let mut img = RgbImage::new(size as u32, size as u32);
    for (i, p) in canvas.px.iter().enumerate() {
        let (x, y) = ((i % size) as f32 / s - 0.5, (i / size) as f32 / s - 0.5);
        let light = offset + gx * x + gy * y;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let noise: f64 = rng.sample(StandardNormal);
            let v = p[c] + light + (noise * NOISE_STD) as f32;
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        img.put_pixel((i % size) as u32, (i / size) as u32, Rgb(out));
    }
    img
}

/// Renders `n` images of side `size`. Exactly `round(n * defect_fraction)`
/// are defective; which ones, their defect kinds and line ids are drawn
/// from `seed`, and image `i` is rendered from its own substream.
pub fn generate_synthetic(
    n: usize,
    defect_fraction: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<RawSample>> {
    if n == 0 {
        return Err(DataError::Config("sample count must be positive".into()));
    }
    if !(defect_fraction > 0.0 && defect_fraction < 1.0) {
        return Err(DataError::Config(format!(
            "defect fraction {defect_fraction} outside (0, 1)"
        )));
    }
    if size < 8 {
        return Err(DataError::Config(format!("render size {size} below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defective = (n as f64 * defect_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut kinds = vec![None; n];
    for &i in &order[..defective] {
        kinds[i] = Some(rng.random_range(1..=3u8));
    }
    let lines: Vec<u8> = (0..n).map(|_| rng.random_range(0..LINE_COUNT)).collect();
    Ok((0..n)
        .map(|i| {
            let mut sub = ChaCha8Rng::seed_from_u64(seed);
            sub.set_stream(i as u64 + 1);
            RawSample {
                image: render(size, lines[i], kinds[i], &mut sub),
                label: u8::from(kinds[i].is_some()),
                line_id: lines[i],
                defect_kind: kinds[i],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess;

    #[test]
    fn exact_defect_count() {
        let set = generate_synthetic(1000, 0.3, 8, 1).unwrap();
        assert_eq!(set.iter().filter(|s| s.label == 1).count(), 300);
        assert!(set
            .iter()
            .all(|s| (s.label == 1) == s.defect_kind.is_some()));
    }

    #[test]
    fn same_seed_same_images() {
        let a = generate_synthetic(20, 0.5, 32, 7).unwrap();
        let b = generate_synthetic(20, 0.5, 32, 7).unwrap();
        let c = generate_synthetic(20, 0.5, 32, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn line_brightness_is_detectable() {
        let set = generate_synthetic(300, 0.3, 32, 3).unwrap();
        let mut sums = [(0.0f64, 0usize); LINE_COUNT as usize];
        for s in &set {
            let m = s.image.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>()
                / s.image.as_raw().len() as f64;
            sums[s.line_id as usize].0 += m / 255.0;
            sums[s.line_id as usize].1 += 1;
        }
        let means: Vec<f64> = sums.iter().map(|(t, c)| t / *c as f64).collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!((means[i] - means[j]).abs() > 0.04, "{means:?}");
            }
        }
    }

    #[test]
    fn disc_intensity_separates_debris() {
        let size = 64;
        let set = generate_synthetic(400, 0.5, size, 5).unwrap();
        let subset: Vec<(f32, u8)> = set
            .iter()
            .filter(|s| s.defect_kind.is_none() || s.defect_kind == Some(DEFECT_DEBRIS))
            .map(|s| {
                let t = preprocess(&s.image, size).unwrap();
                let (cx, cy, r) = (0.5 * size as f32, 0.58 * size as f32, 0.18 * size as f32);
                let mut acc = (0.0f32, 0usize);
                for c in 0..3 {
                    for y in 0..size {
                        for x in 0..size {
                            if (x as f32 + 0.5 - cx).hypot(y as f32 + 0.5 - cy) < r {
                                acc.0 += t.get(&[c, y, x]);
                                acc.1 += 1;
                            }
                        }
                    }
                }
                (acc.0 / acc.1 as f32, s.label)
            })
            .collect();
        let mean = |label: u8| {
            let v: Vec<f32> = subset
                .iter()
                .filter(|s| s.1 == label)
                .map(|s| s.0)
                .collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        let cut = (mean(0) + mean(1)) / 2.0;
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for &(m, label) in &subset {
            match (m < cut, label == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let f1 = 2.0 * tp / (2.0 * tp + fp + fneg);
        assert!(f1 > 0.6, "baseline F1 {f1}");
    }

    #[test]
    fn bad_arguments() {
        assert!(generate_synthetic(0, 0.3, 16, 0).is_err());
        assert!(generate_synthetic(10, 1.0, 16, 0).is_err());
        assert!(generate_synthetic(10, 0.3, 4, 0).is_err());
    }
}
