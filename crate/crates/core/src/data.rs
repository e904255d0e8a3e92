//! IDX-format dataset ingestion, splitting, and deterministic batching.
//!
//! The IDX container is big-endian: a 4-byte magic (0x00000803 for image
//! files, 0x00000801 for label files), one big-endian u32 per dimension, and
//! an unsigned-byte payload. Pixels are scaled to [0,1] on load by dividing
//! by 255.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Where a dataset came from, for self-describing run outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub images_path: String,
    pub labels_path: String,
    pub images_sha256: String,
    pub labels_sha256: String,
}

/// A labelled image collection scaled to [0,1].
#[derive(Clone, Debug)]
pub struct ImageDataset {
    /// `[n, 1, side, side]`.
    pub images: Tensor,
    /// One class id per image, each in 0..=9.
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::IdxTruncated {
            path: path.display().to_string(),
            expected: offset + 4,
            found: bytes.len(),
        })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

/// Parse a pair of IDX files into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let image_bytes = read_file(images_path)?;
    let magic = be_u32(&image_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.display().to_string(),
            observed: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = be_u32(&image_bytes, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if image_bytes.len() != expected {
        return Err(Error::IdxTruncated {
            path: images_path.display().to_string(),
            expected: expected - 16,
            found: image_bytes.len().saturating_sub(16),
        });
    }

    let label_bytes = read_file(labels_path)?;
    let magic = be_u32(&label_bytes, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.display().to_string(),
            observed: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n_labels = be_u32(&label_bytes, 4, labels_path)? as usize;
    let expected = 8 + n_labels;
    if label_bytes.len() != expected {
        return Err(Error::IdxTruncated {
            path: labels_path.display().to_string(),
            expected: expected - 8,
            found: label_bytes.len().saturating_sub(8),
        });
    }
    if n != n_labels {
        return Err(Error::IdxPairing {
            images: n,
            labels: n_labels,
        });
    }

    let labels: Vec<u8> = label_bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::data(format!("label {bad} outside 0..=9")));
    }
    let pixels: Vec<f64> = image_bytes[16..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;

    Ok(ImageDataset {
        images,
        labels,
        provenance: Provenance {
            images_path: images_path.display().to_string(),
            labels_path: labels_path.display().to_string(),
            images_sha256: sha256_hex(&image_bytes),
            labels_sha256: sha256_hex(&label_bytes),
        },
    })
}

/// Serialize a dataset back to IDX bytes (testing and fixtures).
pub fn to_idx_bytes(ds: &ImageDataset) -> (Vec<u8>, Vec<u8>) {
    let shape = ds.images.shape();
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    (images, labels)
}

/// Index lists for the train/validation partition of the source training
/// records. A pure function of the seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

pub fn split_train_val(ds: &ImageDataset, val_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!(
            "val_fraction {val_fraction} outside (0,1)"
        )));
    }
    let n = ds.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::contract(format!(
            "val_fraction {val_fraction} degenerates on {n} records"
        )));
    }
    let mut indices: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val = indices[..n_val].to_vec();
    let train = indices[n_val..].to_vec();
    Ok(SplitIndices { train, val })
}

/// Assemble `(x, labels)` for a batch of indices.
pub fn gather_batch(ds: &ImageDataset, indices: &[u32]) -> (Tensor, Vec<usize>) {
    let shape = ds.images.shape();
    let per_image = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(indices.len() * per_image);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let i = i as usize;
        data.extend_from_slice(&ds.images.data()[i * per_image..(i + 1) * per_image]);
        labels.push(ds.labels[i] as usize);
    }
    let x = Tensor::new(
        vec![indices.len(), shape[1], shape[2], shape[3]],
        data,
    )
    .expect("batch shape");
    (x, labels)
}

/// Deterministic shuffled batches over one split part for one epoch. The
/// last partial batch is kept. Cutout is not applied here: for CNN runs the
/// training graph applies it per image so hyperparameter gradients flow.
pub struct BatchIter<'a> {
    ds: &'a ImageDataset,
    order: Vec<u32>,
    batch_size: usize,
    cursor: usize,
}

pub fn batches<'a>(
    ds: &'a ImageDataset,
    part: &[u32],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    if part.is_empty() {
        return Err(Error::contract("empty split part"));
    }
    let mut order = part.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let slice = &self.order[self.cursor..end];
        self.cursor = end;
        Some(gather_batch(self.ds, slice))
    }
}

/// The held-out test set. The only way to read it is through the accessor
/// named for the final-evaluation path, which keeps training-time code from
/// touching test records.
#[derive(Clone, Debug)]
pub struct HeldOutTest(ImageDataset);

impl HeldOutTest {
    pub fn new(ds: ImageDataset) -> Self {
        HeldOutTest(ds)
    }

    pub fn for_final_evaluation(&self) -> &ImageDataset {
        &self.0
    }
}

/// Source training records plus the sequestered test records.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: ImageDataset,
    pub test: HeldOutTest,
}

impl ExperimentData {
    pub fn load(
        train_images: &Path,
        train_labels: &Path,
        test_images: &Path,
        test_labels: &Path,
    ) -> Result<ExperimentData> {
        let train = load_idx(train_images, train_labels)?;
        let test = load_idx(test_images, test_labels)?;
        Ok(ExperimentData {
            train,
            test: HeldOutTest::new(test),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Hand-built two-image fixture; bytes written out literally so the
    /// loader is checked against an independent byte layout.
    fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x02, // n = 2
            0x00, 0x00, 0x00, 0x02, // rows = 2
            0x00, 0x00, 0x00, 0x02, // cols = 2
        ];
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 128]);
        let labels = vec![
            0x00, 0x00, 0x08, 0x01, // magic
            0x00, 0x00, 0x00, 0x02, // n = 2
            7, 3,
        ];
        (images, labels)
    }

    fn write_temp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = fixture_bytes();
        let ip = write_temp(&dir, "imgs", &ib);
        let lp = write_temp(&dir, "lbls", &lb);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![7, 3]);
        let want = [0.0, 51.0, 102.0, 153.0, 204.0, 255.0, 0.0, 128.0];
        for (got, raw) in ds.images.data().iter().zip(want) {
            assert!((got - raw / 255.0).abs() < 1e-12);
        }
        assert_eq!(ds.provenance.images_sha256.len(), 64);
    }

    #[test]
    fn image_magic_in_label_slot_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, _) = fixture_bytes();
        let ip = write_temp(&dir, "imgs", &ib);
        // Pass the images file as labels.
        let err = load_idx(&ip, &ip).unwrap_err();
        match err {
            Error::IdxMagic {
                observed, expected, ..
            } => {
                assert_eq!(observed, IMAGES_MAGIC);
                assert_eq!(expected, LABELS_MAGIC);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut ib, lb) = fixture_bytes();
        ib.truncate(ib.len() - 3);
        let ip = write_temp(&dir, "imgs", &ib);
        let lp = write_temp(&dir, "lbls", &lb);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::IdxTruncated { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_a_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, mut lb) = fixture_bytes();
        lb[7] = 3; // claim 3 labels
        lb.push(1);
        let ip = write_temp(&dir, "imgs", &ib);
        let lp = write_temp(&dir, "lbls", &lb);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::IdxPairing {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn idx_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = fixture_bytes();
        let ip = write_temp(&dir, "imgs", &ib);
        let lp = write_temp(&dir, "lbls", &lb);
        let ds = load_idx(&ip, &lp).unwrap();
        let (ib2, lb2) = to_idx_bytes(&ds);
        assert_eq!(ib, ib2);
        assert_eq!(lb, lb2);
        let ip2 = write_temp(&dir, "imgs2", &ib2);
        let lp2 = write_temp(&dir, "lbls2", &lb2);
        let ds2 = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(ds.images, ds2.images);
        assert_eq!(ds.labels, ds2.labels);
    }

    fn synthetic(n: usize) -> ImageDataset {
        let images = Tensor::zeros(&[n, 1, 2, 2]);
        ImageDataset {
            images,
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            provenance: Provenance {
                images_path: String::new(),
                labels_path: String::new(),
                images_sha256: String::new(),
                labels_sha256: String::new(),
            },
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = synthetic(60000);
        let s1 = split_train_val(&ds, 1.0 / 6.0, 9).unwrap();
        assert_eq!(s1.train.len(), 50000);
        assert_eq!(s1.val.len(), 10000);
        let s2 = split_train_val(&ds, 1.0 / 6.0, 9).unwrap();
        assert_eq!(s1, s2);
        let s3 = split_train_val(&ds, 1.0 / 6.0, 10).unwrap();
        assert_eq!(s3.train.len(), 50000);
        assert_ne!(s1.train, s3.train);
        // Disjoint and covering.
        let mut all: Vec<u32> = s1.train.iter().chain(&s1.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60000).collect::<Vec<u32>>());
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let ds = synthetic(10);
        assert!(split_train_val(&ds, 0.0, 1).is_err());
        assert!(split_train_val(&ds, 1.0, 1).is_err());
        assert!(split_train_val(&ds, 0.001, 1).is_err());
    }

    #[test]
    fn batch_sizes_and_partition() {
        let ds = synthetic(10);
        let part: Vec<u32> = (0..10).collect();
        let it = batches(&ds, &part, 3, 5).unwrap();
        assert_eq!(it.num_batches(), 4);
        let sizes: Vec<usize> = batches(&ds, &part, 3, 5)
            .unwrap()
            .map(|(x, _)| x.shape()[0])
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        // Union of yielded indices equals the part: labels are the identity
        // here, so collecting them recovers the index multiset.
        let mut seen: Vec<usize> = batches(&ds, &part, 3, 5)
            .unwrap()
            .flat_map(|(_, y)| y)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<usize>>());
    }

    #[test]
    fn fixed_epoch_seed_replays_identically() {
        let ds = synthetic(64);
        let part: Vec<u32> = (0..64).collect();
        let a: Vec<Vec<usize>> = batches(&ds, &part, 8, 77)
            .unwrap()
            .map(|(_, y)| y)
            .collect();
        let b: Vec<Vec<usize>> = batches(&ds, &part, 8, 77)
            .unwrap()
            .map(|(_, y)| y)
            .collect();
        assert_eq!(a, b);
        let c: Vec<Vec<usize>> = batches(&ds, &part, 8, 78)
            .unwrap()
            .map(|(_, y)| y)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_part_and_zero_batch_are_contract_errors() {
        let ds = synthetic(4);
        assert!(batches(&ds, &[], 2, 0).is_err());
        assert!(batches(&ds, &[0, 1], 0, 0).is_err());
    }
}
