//! Images, labels and splits: preprocessing, synthetic generation,
//! stratified splitting, class-balanced sampling and augmentation.

mod augment;
mod disk;
mod preprocess;
mod synth;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, color_jitter, cutout, resized_crop, AugmentConfig};
pub use disk::{read_dataset, write_dataset, IndexRow, INDEX_FILE};
pub use preprocess::{contrast_stretch, decode, percentile, preprocess, resize_plane, MIN_SIDE};
pub use synth::{
    generate_synthetic, RawSample, DEFECT_BROKEN_WIRE, DEFECT_DEBRIS, DEFECT_MISPLACED_WELD,
    LINE_COUNT,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {width}x{height} is smaller than 8x8")]
    TooSmall { width: u32, height: u32 },
    #[error("cannot decode {path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error("class {0} has no samples")]
    MissingClass(u8),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Index { path: String, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A preprocessed image with its label (1 = defective) and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: u8,
    pub line_id: u8,
    pub defect_kind: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Disjoint index sets into one sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Split of every sample index.
    pub fn assignment(&self, n: usize) -> Vec<Split> {
        let mut out = vec![Split::Train; n];
        self.val.iter().for_each(|&i| out[i] = Split::Val);
        self.test.iter().for_each(|&i| out[i] = Split::Test);
        out
    }
}

/// Samples plus split membership and train-split sampling weights.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub samples: Vec<Sample>,
    pub indices: SplitIndices,
    /// One weight per entry of `indices.train`.
    pub train_weights: Vec<f64>,
}

impl SplitDataset {
    pub fn new(samples: Vec<Sample>, indices: SplitIndices) -> Result<Self> {
        let labels: Vec<u8> = indices.train.iter().map(|&i| samples[i].label).collect();
        let train_weights = sampler_weights(&labels)?;
        Ok(Self {
            samples,
            indices,
            train_weights,
        })
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        let idx = match which {
            Split::Train => &self.indices.train,
            Split::Val => &self.indices.val,
            Split::Test => &self.indices.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// Allocates `total` slots over classes proportionally to `counts` by the
/// largest-remainder rule (ties to the lower class).
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut alloc: Vec<usize> = counts.iter().map(|&c| c * total / n).collect();
    let mut rest: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (k, c * total % n))
        .collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = total - alloc.iter().sum::<usize>();
    for &(k, _) in rest.iter().take(missing) {
        alloc[k] += 1;
    }
    alloc
}

/// Seeded, class-stratified split of binary labels. The validation and test
/// sizes are `round(n * fraction)`; train receives the remainder. When a
/// split has room for every class and a class has at least three samples,
/// that class is represented in each split.
pub fn split(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Fractions(format!(
            "{fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(DataError::Config(format!("label {bad} is not binary")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 2];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(DataError::MissingClass(c as u8));
        }
    }
    let n = labels.len();
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = (n as f64 * fractions[2]).round() as usize;
    if n_val + n_test > n {
        return Err(DataError::Fractions(format!(
            "{n} samples cannot hold {n_val} val and {n_test} test"
        )));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut val = apportion(&counts, n_val);
    let mut test = apportion(&counts, n_test);
    for alloc in [&mut val, &mut test] {
        if alloc.iter().sum::<usize>() >= counts.len() {
            for c in 0..counts.len() {
                if alloc[c] == 0 && counts[c] >= 3 {
                    let donor = (0..counts.len())
                        .max_by_key(|&k| (alloc[k], usize::MAX - k))
                        .expect("two classes");
                    alloc[donor] -= 1;
                    alloc[c] += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let (v, t) = (val[c], test[c]);
        out.val.extend_from_slice(&members[..v]);
        out.test.extend_from_slice(&members[v..v + t]);
        out.train.extend_from_slice(&members[v + t..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// `1 / (size of the sample's class)` for every sample.
pub fn sampler_weights(labels: &[u8]) -> Result<Vec<f64>> {
    let mut counts = [0usize; 2];
    for &l in labels {
        if l > 1 {
            return Err(DataError::Config(format!("label {l} is not binary")));
        }
        counts[l as usize] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(DataError::MissingClass(c as u8));
        }
    }
    Ok(labels
        .iter()
        .map(|&l| 1.0 / counts[l as usize] as f64)
        .collect())
}

/// Draws `count` positions in `0..weights.len()` with replacement,
/// proportionally to `weights`.
pub fn weighted_draws(weights: &[f64], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| DataError::Config(format!("sampling weights: {e}")))?;
    Ok((0..count).map(|_| rng.sample(&dist)).collect())
}

/// ChaCha8 generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stacks `(3, S, S)` images into an `(N, 3, S, S)` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(DataError::Config(format!(
                    "image shape {:?} differs from {:?}",
                    img.shape(),
                    s
                )));
            }
            Some(_) => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.unwrap_or_default());
    Ok(Tensor::new(full, data)?)
}

/// Preprocesses generated images into samples.
pub fn preprocess_all(raw: &[RawSample], size: usize) -> Result<Vec<Sample>> {
    raw.iter()
        .map(|r| {
            Ok(Sample {
                image: preprocess(&r.image, size)?,
                label: r.label,
                line_id: r.line_id,
                defect_kind: r.defect_kind,
            })
        })
        .collect()
}

/// Generates, preprocesses and splits a synthetic dataset in memory.
pub fn synthetic_dataset(
    n: usize,
    defect_fraction: f64,
    size: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitDataset> {
    let raw = generate_synthetic(n, defect_fraction, size, seed)?;
    let labels: Vec<u8> = raw.iter().map(|r| r.label).collect();
    let indices = split(&labels, fractions, seed)?;
    SplitDataset::new(preprocess_all(&raw, size)?, indices)
}
