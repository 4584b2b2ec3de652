//! IDX file ingestion (the standard MNIST container: big-endian header of
//! magic and counts, then raw payload bytes).

use std::fs;
use std::path::Path;

use crate::diffmodels::{Dataset, Example};
use crate::error::{CoreError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CoreError::Truncated {
            path: path.display().to_string(),
            expected: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label pair into a dataset: pixels scaled to [0, 1],
/// ids assigned 0..N-1 in file order, class count inferred from the labels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&image_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(CoreError::BadMagic {
            path: images_path.display().to_string(),
            expected: IMAGES_MAGIC,
            got: magic,
        });
    }
    let n_images = read_u32_be(&image_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&image_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&image_bytes, 12, images_path)? as usize;
    let dim = rows * cols;
    let payload = &image_bytes[16..];
    if payload.len() < n_images * dim {
        return Err(CoreError::Truncated {
            path: images_path.display().to_string(),
            expected: n_images,
            got: payload.len() / dim.max(1),
        });
    }

    let magic = read_u32_be(&label_bytes, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(CoreError::BadMagic {
            path: labels_path.display().to_string(),
            expected: LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_u32_be(&label_bytes, 4, labels_path)? as usize;
    let label_payload = &label_bytes[8..];
    if label_payload.len() < n_labels {
        return Err(CoreError::Truncated {
            path: labels_path.display().to_string(),
            expected: n_labels,
            got: label_payload.len(),
        });
    }

    if n_images != n_labels {
        return Err(CoreError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let num_classes = label_payload[..n_labels]
        .iter()
        .map(|&b| b as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    let examples = (0..n_images)
        .map(|i| {
            let pixels = &payload[i * dim..(i + 1) * dim];
            Example::new(
                pixels.iter().map(|&b| b as f64 / 255.0).collect(),
                label_payload[i] as usize,
                i as u64,
            )
        })
        .collect();
    Dataset::new(examples, num_classes)
}

/// Writes a dataset back out as an IDX image/label pair (used by tests and
/// by the synthetic-corpus export). Pixels are quantised to bytes.
pub fn write_idx(data: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let dim = rows * cols;
    let mut image_bytes = Vec::with_capacity(16 + data.len() * dim);
    image_bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(data.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut label_bytes = Vec::with_capacity(8 + data.len());
    label_bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for ex in data.examples() {
        if ex.input.len() != dim {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: dim,
                got: ex.input.len(),
            });
        }
        for &px in &ex.input {
            image_bytes.push((px.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        label_bytes.push(ex.label as u8);
    }
    fs::write(images_path, image_bytes)?;
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("repair-idx-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trips_a_small_pair() {
        let examples = (0..6)
            .map(|i| {
                Example::new(
                    (0..4).map(|d| ((i * 4 + d) % 256) as f64 / 255.0).collect(),
                    i % 3,
                    i as u64,
                )
            })
            .collect();
        let data = Dataset::new(examples, 3).unwrap();
        let ip = tmp("rt-images.idx");
        let lp = tmp("rt-labels.idx");
        write_idx(&data, 2, 2, &ip, &lp).unwrap();
        let loaded = load_idx(&ip, &lp).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.num_classes(), 3);
        for (a, b) in loaded.examples().iter().zip(data.examples()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.id, b.id);
            for (x, y) in a.input.iter().zip(&b.input) {
                assert!((x - y).abs() < 1.0 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn bad_magic_is_a_distinct_error() {
        let ip = tmp("bad-magic.idx");
        let lp = tmp("bad-magic-labels.idx");
        std::fs::write(&ip, 0x00000807u32.to_be_bytes()).unwrap();
        std::fs::write(&lp, LABELS_MAGIC.to_be_bytes()).unwrap();
        match load_idx(&ip, &lp) {
            Err(CoreError::BadMagic { got, .. }) => assert_eq!(got, 0x807),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let ip = tmp("trunc-images.idx");
        let lp = tmp("trunc-labels.idx");
        // Header promises 5 records of 1x1 but the payload holds 4 bytes.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&5u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&ip, bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbytes.extend_from_slice(&5u32.to_be_bytes());
        lbytes.extend_from_slice(&[0, 1, 0, 1, 0]);
        std::fs::write(&lp, lbytes).unwrap();
        match load_idx(&ip, &lp) {
            Err(CoreError::Truncated { expected, got, .. }) => {
                assert_eq!(expected, 5);
                assert_eq!(got, 4);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_between_files() {
        let ip = tmp("mismatch-images.idx");
        let lp = tmp("mismatch-labels.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&[9, 9]);
        std::fs::write(&ip, bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbytes.extend_from_slice(&3u32.to_be_bytes());
        lbytes.extend_from_slice(&[0, 1, 0]);
        std::fs::write(&lp, lbytes).unwrap();
        match load_idx(&ip, &lp) {
            Err(CoreError::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (2, 3));
            }
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    /// Full-size ingestion check; runs only when the standard files are
    /// present under `REPAIR_DATA_DIR`.
    #[test]
    fn standard_files_when_available() {
        let Ok(dir) = std::env::var("REPAIR_DATA_DIR") else {
            eprintln!("REPAIR_DATA_DIR unset; skipping standard-file check");
            return;
        };
        let dir = std::path::PathBuf::from(dir);
        let train = load_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        );
        let test = load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        );
        match (train, test) {
            (Ok(train), Ok(test)) => {
                assert_eq!(train.len(), 60000);
                assert_eq!(train.examples()[0].input.len(), 784);
                assert_eq!(test.len(), 10000);
            }
            other => panic!("standard files present but unreadable: {other:?}"),
        }
    }
}
