//! Dataset directories: `index.csv` plus PNG files under `images/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    decode, preprocess, DataError, RawSample, Result, Sample, Split, SplitDataset, SplitIndices,
};

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub relative_path: String,
    pub label: u8,
    pub line_id: u8,
    pub defect_kind: Option<u8>,
    pub split: String,
}

/// Writes every image as PNG and the index in sample order.
pub fn write_dataset(
    dir: &Path,
    raw: &[RawSample],
    indices: &SplitIndices,
) -> Result<Vec<IndexRow>> {
    fs::create_dir_all(dir.join("images"))?;
    let assignment = indices.assignment(raw.len());
    let mut rows = Vec::with_capacity(raw.len());
    for (i, (r, split)) in raw.iter().zip(&assignment).enumerate() {
        let rel = format!("images/{i:06}.png");
        let path = dir.join(&rel);
        r.image.save(&path).map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })?;
        rows.push(IndexRow {
            relative_path: rel,
            label: r.label,
            line_id: r.line_id,
            defect_kind: r.defect_kind,
            split: split.as_str().to_string(),
        });
    }
    let mut w = csv::Writer::from_path(dir.join(INDEX_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Reads and preprocesses a dataset directory to images of side `size`,
/// keeping the split recorded in the index.
pub fn read_dataset(dir: &Path, size: usize) -> Result<SplitDataset> {
    let index = dir.join(INDEX_FILE);
    let bad = |line: usize, msg: String| DataError::Index {
        path: format!("{}:{line}", index.display()),
        msg,
    };
    let mut reader = csv::Reader::from_path(&index)?;
    let mut samples = Vec::new();
    let mut indices = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, row) in reader.deserialize::<IndexRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.label > 1 {
            return Err(bad(line, format!("label {} is not binary", row.label)));
        }
        let split = Split::parse(&row.split)
            .ok_or_else(|| bad(line, format!("unknown split {:?}", row.split)))?;
        let image = preprocess(&decode(&dir.join(&row.relative_path))?, size)?;
        match split {
            Split::Train => indices.train.push(i),
            Split::Val => indices.val.push(i),
            Split::Test => indices.test.push(i),
        }
        samples.push(Sample {
            image,
            label: row.label,
            line_id: row.line_id,
            defect_kind: row.defect_kind,
        });
    }
    SplitDataset::new(samples, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, preprocess_all, split};

    #[test]
    fn round_trip_and_byte_identical_rerun() {
        let raw = generate_synthetic(20, 0.3, 16, 2).unwrap();
        let labels: Vec<u8> = raw.iter().map(|r| r.label).collect();
        let idx = split(&labels, [0.8, 0.1, 0.1], 2).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &raw, &idx).unwrap();
        write_dataset(b.path(), &raw, &idx).unwrap();
        let ia = fs::read(a.path().join(INDEX_FILE)).unwrap();
        assert_eq!(ia, fs::read(b.path().join(INDEX_FILE)).unwrap());
        let text = String::from_utf8(ia).unwrap();
        assert!(text.starts_with("relative_path,label,line_id,defect_kind,split\n"));

        let ds = read_dataset(a.path(), 16).unwrap();
        assert_eq!(ds.indices, idx);
        assert_eq!(ds.samples, preprocess_all(&raw, 16).unwrap());
    }

    #[test]
    fn bad_split_name_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(INDEX_FILE),
            "relative_path,label,line_id,defect_kind,split\nx.png,0,0,,holdout\n",
        )
        .unwrap();
        let err = read_dataset(dir.path(), 8).unwrap_err().to_string();
        assert!(err.contains(":2") && err.contains("holdout"), "{err}");
    }
}
