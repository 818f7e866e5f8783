//! Labeled datasets and the classic big-endian IDX image/label file format,
//! plus deterministic class-balanced subsampling for small runs.

use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Label space for the digit data; label bytes outside it are rejected.
pub const CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: byte offset {offset}: {what}")]
    Parse { path: PathBuf, offset: usize, what: String },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {class} has {have} samples, need {want}")]
    Insufficient { class: usize, have: usize, want: usize },
}

/// Inputs in [0,1] with integer class labels. Images keep shape
/// `[count, channels, rows, cols]`; flat feature sets use `[count, dim]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Self {
        assert!(!images.shape.is_empty() && images.shape[0] == labels.len());
        assert!(
            images.data.iter().all(|v| (0.0..=1.0).contains(v)),
            "inputs must lie in [0,1]"
        );
        Dataset { images, labels, split: split.into() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample (leading count dimension dropped).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gather the given rows into a batch tensor plus its labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let m = self.sample_len();
        let mut shape = self.images.shape.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * m);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data[i * m..(i + 1) * m]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(shape, data), labels)
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

fn take(bytes: &[u8], off: &mut usize, n: usize, path: &Path) -> Result<usize, DataError> {
    if bytes.len() < *off + n {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            what: format!("file truncated, wanted {n} more bytes"),
        });
    }
    let start = *off;
    *off += n;
    Ok(start)
}

fn take_u32(bytes: &[u8], off: &mut usize, path: &Path) -> Result<u32, DataError> {
    let s = take(bytes, off, 4, path)?;
    Ok(u32::from_be_bytes(bytes[s..s + 4].try_into().expect("4 bytes")))
}

/// Read an image/label file pair: big-endian magic and dimensions, then raw
/// bytes; pixel byte v becomes v/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(images_path)?;
    let mut off = 0;
    let magic = take_u32(&bytes, &mut off, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Parse {
            path: images_path.to_path_buf(),
            offset: off - 4,
            what: format!("expected image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = take_u32(&bytes, &mut off, images_path)? as usize;
    let rows = take_u32(&bytes, &mut off, images_path)? as usize;
    let cols = take_u32(&bytes, &mut off, images_path)? as usize;
    let start = take(&bytes, &mut off, count * rows * cols, images_path)?;
    if off != bytes.len() {
        return Err(DataError::Parse {
            path: images_path.to_path_buf(),
            offset: off,
            what: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    let data: Vec<f64> = bytes[start..].iter().map(|&v| v as f64 / 255.0).collect();
    let images = Tensor::new(vec![count, 1, rows, cols], data);

    let bytes = std::fs::read(labels_path)?;
    let mut off = 0;
    let magic = take_u32(&bytes, &mut off, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Parse {
            path: labels_path.to_path_buf(),
            offset: off - 4,
            what: format!("expected label magic {LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let label_count = take_u32(&bytes, &mut off, labels_path)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }
    let start = take(&bytes, &mut off, count, labels_path)?;
    let mut labels = Vec::with_capacity(count);
    for (i, &b) in bytes[start..start + count].iter().enumerate() {
        if b as usize >= CLASSES {
            return Err(DataError::Parse {
                path: labels_path.to_path_buf(),
                offset: start + i,
                what: format!("label byte {b} outside 0..{CLASSES}"),
            });
        }
        labels.push(b as usize);
    }

    let split = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into());
    let dataset = Dataset::new(images, labels, split);

    // full canonical train split: sanity-check the class balance
    if count == 60_000 {
        for (class, &n) in dataset.class_histogram(CLASSES).iter().enumerate() {
            if !(5_000..=7_000).contains(&n) {
                return Err(DataError::Parse {
                    path: labels_path.to_path_buf(),
                    offset: start,
                    what: format!("class {class} count {n} outside the expected 5000..=7000"),
                });
            }
        }
    }
    Ok(dataset)
}

/// Write the two-file IDX pair; pixels are stored as round(v·255).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    data: &Dataset,
) -> Result<(), DataError> {
    assert_eq!(data.images.shape.len(), 4, "image files need [count, 1, rows, cols]");
    let (count, rows, cols) = (data.images.shape[0], data.images.shape[2], data.images.shape[3]);
    let mut bytes = Vec::with_capacity(16 + count * rows * cols);
    bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend(data.images.data.iter().map(|v| (v * 255.0).round() as u8));
    std::fs::write(images_path, bytes)?;

    let mut bytes = Vec::with_capacity(8 + count);
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend(data.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, bytes)?;
    Ok(())
}

/// Deterministic class-balanced subsample: `per_class` rows of every class
/// present, chosen by seeded shuffle, kept in original order.
pub fn subset(data: &Dataset, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
    let classes = data.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = SeededRng::new(seed);
    let mut chosen = Vec::with_capacity(per_class * classes);
    for class in 0..classes {
        let mut idx: Vec<usize> =
            (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.len() < per_class {
            return Err(DataError::Insufficient { class, have: idx.len(), want: per_class });
        }
        rng.shuffle(&mut idx);
        idx.truncate(per_class);
        chosen.extend(idx);
    }
    chosen.sort_unstable();
    let (images, labels) = data.batch(&chosen);
    Ok(Dataset { images, labels, split: format!("{}-per-class-{per_class}", data.split) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images(count: usize, labels: Vec<usize>) -> Dataset {
        let mut data = Vec::new();
        for i in 0..count {
            for p in 0..12 {
                data.push(((i * 31 + p * 7) % 256) as f64 / 255.0);
            }
        }
        Dataset::new(Tensor::new(vec![count, 1, 4, 3], data), labels, "tiny")
    }

    #[test]
    fn idx_pair_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        let original = tiny_images(2, vec![3, 9]);
        write_idx(&img, &lab, &original).unwrap();
        let loaded = load_idx(&img, &lab).unwrap();
        assert_eq!(loaded.images.shape, vec![2, 1, 4, 3]);
        assert_eq!(loaded.images.data, original.images.data);
        assert_eq!(loaded.labels, vec![3, 9]);
        assert_eq!(loaded.split, "images");
    }

    #[test]
    fn pixel_bytes_map_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 128, 255]);
        std::fs::write(&img, bytes).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(7);
        std::fs::write(&lab, bytes).unwrap();
        let loaded = load_idx(&img, &lab).unwrap();
        assert_eq!(loaded.images.data, vec![0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(loaded.labels, vec![7]);
    }

    #[test]
    fn wrong_magic_is_reported_with_its_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        write_idx(&img, &lab, &tiny_images(1, vec![0])).unwrap();
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, &bytes).unwrap();
        match load_idx(&img, &lab) {
            Err(DataError::Parse { offset, what, .. }) => {
                assert_eq!(offset, 0);
                assert!(what.contains("magic"), "{what}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        write_idx(&img, &lab, &tiny_images(3, vec![0, 1, 2])).unwrap();

        let bytes = std::fs::read(&img).unwrap();
        let cut = dir.path().join("cut.idx");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx(&cut, &lab), Err(DataError::Parse { .. })));

        let short = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1]);
        std::fs::write(&short, bytes).unwrap();
        assert!(matches!(
            load_idx(&img, &short),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn out_of_range_label_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        write_idx(&img, &lab, &tiny_images(1, vec![0])).unwrap();
        let mut bytes = std::fs::read(&lab).unwrap();
        *bytes.last_mut().unwrap() = 10;
        std::fs::write(&lab, &bytes).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(DataError::Parse { .. })));
    }

    #[test]
    fn batch_gathers_rows_in_the_requested_order() {
        let data = tiny_images(4, vec![0, 1, 2, 3]);
        let (x, y) = data.batch(&[2, 0]);
        assert_eq!(x.shape, vec![2, 1, 4, 3]);
        assert_eq!(x.data[..12], data.images.data[24..36]);
        assert_eq!(x.data[12..], data.images.data[..12]);
        assert_eq!(y, vec![2, 0]);
    }

    #[test]
    fn subsets_are_balanced_and_seed_deterministic() {
        let labels = vec![0, 1, 1, 2, 0, 1, 2, 2, 0, 1, 0, 2];
        let data = tiny_images(12, labels);
        let a = subset(&data, 2, 5).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.class_histogram(3), vec![2, 2, 2]);
        let b = subset(&data, 2, 5).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.data, b.images.data);
        let c = subset(&data, 2, 6).unwrap();
        assert!(a.labels != c.labels || a.images.data != c.images.data);

        assert!(subset(&data, 0, 1).unwrap().is_empty());
        assert!(matches!(
            subset(&data, 5, 1),
            Err(DataError::Insufficient { class: 0, have: 4, want: 5 })
        ));
    }

    #[test]
    fn subsets_keep_original_relative_order() {
        let data = tiny_images(6, vec![1, 0, 1, 0, 1, 0]);
        let s = subset(&data, 3, 9).unwrap();
        // all six survive, so order must be the original one
        assert_eq!(s.labels, vec![1, 0, 1, 0, 1, 0]);
        assert_eq!(s.images.data, data.images.data);
    }
}
