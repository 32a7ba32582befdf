use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::resize_region;
use super::{DataError, Result, Sample};
use crate::tensor::Tensor;

/// Probabilities and ranges of the three training-time augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter_p: f64,
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub crop_p: f64,
    /// Fraction of the image area kept by the crop.
    pub crop_area: (f32, f32),
    /// Width / height of the crop.
    pub crop_aspect: (f32, f32),
    pub cutout_p: f64,
    /// Cutout side as a fraction of the image side.
    pub cutout_frac: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_p: 0.5,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            crop_p: 0.5,
            crop_area: (0.7, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            cutout_p: 0.3,
            cutout_frac: 1.0 / 8.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            jitter_p: 0.0,
            crop_p: 0.0,
            cutout_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter_p", self.jitter_p),
            ("crop_p", self.crop_p),
            ("cutout_p", self.cutout_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Config(format!(
                    "{name} = {p} is not a probability"
                )));
            }
        }
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("crop_area", self.crop_area),
            ("crop_aspect", self.crop_aspect),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(DataError::Config(format!(
                    "{name} range ({lo}, {hi}) is invalid"
                )));
            }
        }
        if self.crop_area.1 > 1.0 {
            return Err(DataError::Config("crop_area cannot exceed 1".into()));
        }
        if !(self.cutout_frac > 0.0 && self.cutout_frac <= 1.0) {
            return Err(DataError::Config(format!(
                "cutout_frac = {} outside (0, 1]",
                self.cutout_frac
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn channel_means(img: &Tensor<f32>) -> Vec<f32> {
    let plane = img.shape()[1] * img.shape()[2];
    img.data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f32>() / plane as f32)
        .collect()
}

/// Scales brightness, then contrast around the mean intensity.
pub fn color_jitter(img: &mut Tensor<f32>, brightness: f32, contrast: f32) {
    let data = img.data_mut();
    data.iter_mut().for_each(|v| *v *= brightness);
    let mean = data.iter().sum::<f32>() / data.len().max(1) as f32;
    data.iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
}

/// Crops `(top, left, height, width)` and resamples back to the full size.
pub fn resized_crop(img: &Tensor<f32>, region: (f32, f32, f32, f32)) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let data = img
        .data()
        .chunks(h * w)
        .flat_map(|plane| resize_region(plane, h, w, region, h, w))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape, finite values")
}

/// Sets a `side x side` square at `(top, left)` to the per-channel means of
/// the image.
pub fn cutout(img: &mut Tensor<f32>, top: usize, left: usize, side: usize) {
    let means = channel_means(img);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for (c, plane) in img.data_mut().chunks_mut(h * w).enumerate() {
        let right = (left + side).min(w);
        for row in plane.chunks_mut(w).skip(top).take(side) {
            row[left..right].iter_mut().for_each(|v| *v = means[c]);
        }
    }
}

fn crop_region(
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
) -> (f32, f32, f32, f32) {
    let (hf, wf) = (h as f32, w as f32);
    let log_aspect = (cfg.crop_aspect.0.ln(), cfg.crop_aspect.1.ln());
    for _ in 0..10 {
        let area = uniform(rng, cfg.crop_area) * hf * wf;
        let aspect = uniform(rng, log_aspect).exp();
        let cw = (area * aspect).sqrt();
        let ch = (area / aspect).sqrt();
        if cw <= wf && ch <= hf {
            let top = uniform(rng, (0.0, hf - ch));
            let left = uniform(rng, (0.0, wf - cw));
            return (top, left, ch, cw);
        }
    }
    (0.0, 0.0, hf, wf)
}

/// Applies each augmentation independently with its probability. The label
/// and metadata are kept; the image keeps its shape and stays in `[0, 1]`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut img = sample.image.clone();
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if rng.random_bool(cfg.jitter_p) {
        let b = uniform(rng, cfg.brightness);
        let c = uniform(rng, cfg.contrast);
        color_jitter(&mut img, b, c);
    }
    if rng.random_bool(cfg.crop_p) {
        let region = crop_region(rng, cfg, h, w);
        img = resized_crop(&img, region);
    }
    if rng.random_bool(cfg.cutout_p) {
        let side = ((h.min(w) as f32 * cfg.cutout_frac).round() as usize).clamp(1, h.min(w));
        let top = rng.random_range(0..=h - side);
        let left = rng.random_range(0..=w - side);
        cutout(&mut img, top, left, side);
    }
    Sample {
        image: img,
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(size: usize) -> Sample {
        Sample {
            image: Tensor::from_fn(&[3, size, size], |i| {
                ((i[0] * 7 + i[1] * 3 + i[2] * 5) % 17) as f32 / 16.0
            }),
            label: 1,
            line_id: 2,
            defect_kind: Some(3),
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample(16);
        let out = augment(
            &s,
            &AugmentConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(out, s);
    }

    #[test]
    fn cutout_sets_one_square_to_means() {
        let s = sample(64);
        let cfg = AugmentConfig {
            cutout_p: 1.0,
            ..AugmentConfig::disabled()
        };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let means = channel_means(&s.image);
        let mut changed = Vec::new();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let (a, b) = (s.image.get(&[c, y, x]), out.image.get(&[c, y, x]));
                    if a != b {
                        assert_eq!(b, means[c]);
                        changed.push((y, x));
                    }
                }
            }
        }
        changed.sort_unstable();
        changed.dedup();
        let ys: Vec<usize> = changed.iter().map(|p| p.0).collect();
        let xs: Vec<usize> = changed.iter().map(|p| p.1).collect();
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        assert_eq!((y1 - y0 + 1, x1 - x0 + 1), (8, 8));
        // pixels already equal to the mean do not show up as changed
        assert!(changed.len() <= 64 && changed.len() > 48);
    }

    #[test]
    fn replay_is_bit_identical() {
        let s = sample(32);
        let cfg = AugmentConfig {
            jitter_p: 1.0,
            crop_p: 1.0,
            cutout_p: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a.image, s.image);
        assert_eq!(a.label, s.label);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AugmentConfig {
            crop_p: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
