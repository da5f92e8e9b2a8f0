//! Image classification datasets: IDX-format loading, normalization,
//! class-subset splits and a procedural digit generator that writes the
//! same IDX files, so experiments run self-contained.

pub mod synth;

use crate::error::{QilError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Read;
use std::path::Path;

/// IDX magic for unsigned-byte rank-3 image files.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte rank-1 label files.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-dataset normalization applied after scaling pixels to [0,1].
pub const NORM_MEAN: f64 = 0.1307;
pub const NORM_STD: f64 = 0.3081;

/// One split of an image dataset: normalized images (N,1,H,W) with their
/// labels, plus bookkeeping about where it came from.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
    /// Class filter this handle was produced with, if any.
    pub classes: Option<Vec<usize>>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gather a batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let src = self.images.data();
        for &i in indices {
            data.extend_from_slice(&src[i * sl..(i + 1) * sl]);
        }
        (
            Tensor::from_vec(&shape, data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous batch `[start, end)`.
    pub fn batch_range(&self, start: usize, end: usize) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = end - start;
        (
            Tensor::from_vec(&shape, self.images.data()[start * sl..end * sl].to_vec()),
            self.labels[start..end].to_vec(),
        )
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| QilError::Data("truncated IDX header".into()))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse an IDX image file: big-endian magic 0x00000803, u32 count, rows,
/// cols, then raw u8 pixels.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(QilError::Format(format!(
            "bad image magic {magic:#010x} in {}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    f.read_exact(&mut pixels)
        .map_err(|_| QilError::Data(format!("truncated image data in {}", path.display())))?;
    Ok((pixels, count, rows, cols))
}

/// Parse an IDX label file: big-endian magic 0x00000801, u32 count, then
/// raw u8 labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(QilError::Format(format!(
            "bad label magic {magic:#010x} in {}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut f)? as usize;
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels)
        .map_err(|_| QilError::Data(format!("truncated label data in {}", path.display())))?;
    Ok(labels)
}

pub fn write_idx_images(path: &Path, pixels: &[u8], rows: usize, cols: usize) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

fn load_split(dir: &Path, images: &str, labels: &str, split: &str) -> Result<DatasetHandle> {
    let (pixels, count, rows, cols) = read_idx_images(&dir.join(images))?;
    let raw_labels = read_idx_labels(&dir.join(labels))?;
    if raw_labels.len() != count {
        return Err(QilError::Data(format!(
            "{split}: {count} images but {} labels",
            raw_labels.len()
        )));
    }
    let data: Vec<f64> = pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - NORM_MEAN) / NORM_STD)
        .collect();
    Ok(DatasetHandle {
        images: Tensor::from_vec(&[count, 1, rows, cols], data),
        labels: raw_labels.into_iter().map(|l| l as usize).collect(),
        split: split.to_string(),
        classes: None,
    })
}

/// Load the standard IDX file quadruple from a directory, scaling pixels
/// to [0,1] and normalizing with the dataset mean/std.
pub fn load_mnist(dir: &Path) -> Result<(DatasetHandle, DatasetHandle)> {
    let train = load_split(
        dir,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "train",
    )?;
    let test = load_split(
        dir,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        "test",
    )?;
    Ok((train, test))
}

/// Partition a dataset by label groups. Groups must be disjoint unless
/// `require_disjoint` is false (the nested-subset protocol).
pub fn split_classes(
    d: &DatasetHandle,
    groups: &[Vec<usize>],
    require_disjoint: bool,
) -> Result<Vec<DatasetHandle>> {
    if require_disjoint {
        let mut seen = std::collections::HashSet::new();
        for g in groups {
            for &c in g {
                if !seen.insert(c) {
                    return Err(QilError::InvalidConfig(format!(
                        "class {c} appears in more than one group"
                    )));
                }
            }
        }
    }
    Ok(groups
        .iter()
        .map(|g| {
            let idx: Vec<usize> = d
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| g.contains(l))
                .map(|(i, _)| i)
                .collect();
            let (images, labels) = d.batch(&idx);
            DatasetHandle {
                images,
                labels,
                split: d.split.clone(),
                classes: Some(g.clone()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset() -> DatasetHandle {
        let n = 6;
        let images = Tensor::from_vec(
            &[n, 1, 2, 2],
            (0..n * 4).map(|v| v as f64 / 10.0).collect(),
        );
        DatasetHandle {
            images,
            labels: vec![0, 1, 2, 3, 4, 5],
            split: "test".into(),
            classes: None,
        }
    }

    #[test]
    fn idx_roundtrip_and_normalization() {
        let dir = tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 128, 255, 64];
        write_idx_images(dir.path().join("train-images-idx3-ubyte").as_path(), &pixels, 2, 2)
            .unwrap();
        write_idx_labels(dir.path().join("train-labels-idx1-ubyte").as_path(), &[7]).unwrap();
        write_idx_images(dir.path().join("t10k-images-idx3-ubyte").as_path(), &pixels, 2, 2)
            .unwrap();
        write_idx_labels(dir.path().join("t10k-labels-idx1-ubyte").as_path(), &[3]).unwrap();
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train.labels, vec![7]);
        assert_eq!(test.labels, vec![3]);
        // pixel 255 normalizes to (1.0 - mean)/std
        let want = (1.0 - NORM_MEAN) / NORM_STD;
        assert!((train.images.data()[2] - want).abs() < 1e-12);
        // pixel 0 normalizes to -mean/std
        let want0 = -NORM_MEAN / NORM_STD;
        assert!((train.images.data()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        // label magic in an image file
        let mut bytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_idx_images(&p),
            Err(QilError::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_a_length_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&2u32.to_be_bytes()); // claims 2 images
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // far too few pixels
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_idx_images(&p), Err(QilError::Data(_))));
    }

    #[test]
    fn split_classes_partitions() {
        let d = tiny_dataset();
        let parts = split_classes(&d, &[vec![0, 1, 2], vec![3, 4]], true).unwrap();
        assert_eq!(parts[0].len(), 3);
        assert_eq!(parts[1].len(), 2);
        assert_eq!(parts[0].len() + parts[1].len() + 1, d.len());
        assert_eq!(parts[1].labels, vec![3, 4]);
        // images follow their samples
        assert_eq!(
            parts[1].images.data()[0],
            d.images.data()[3 * 4],
        );
    }

    #[test]
    fn overlapping_groups_rejected_when_disjoint_required() {
        let d = tiny_dataset();
        assert!(split_classes(&d, &[vec![0, 1], vec![1, 2]], true).is_err());
        // nested series allowed when not requiring disjointness
        let nested = split_classes(&d, &[vec![5], vec![4, 5], vec![3, 4, 5]], false).unwrap();
        assert_eq!(nested[0].len(), 1);
        assert_eq!(nested[1].len(), 2);
        assert_eq!(nested[2].len(), 3);
    }

    #[test]
    fn empty_group_yields_empty_handle() {
        let d = tiny_dataset();
        let parts = split_classes(&d, &[vec![9]], true).unwrap();
        assert!(parts[0].is_empty());
    }
}
