//! CIFAR-10 binary version.
//!
//! Each of `data_batch_1.bin` .. `data_batch_5.bin` (train) and
//! `test_batch.bin` (eval) holds 10000 records of 3073 bytes: one label
//! byte in `0..10`, then 1024 red, 1024 green and 1024 blue bytes, each
//! plane row-major over the 32 x 32 image. The files may sit directly in
//! the root or in a `cifar-10-batches-bin` subdirectory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use crate::dataio::{DatasetHandle, SplitData};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const RECORD_BYTES: usize = 1 + 3 * IMAGE_SIZE * IMAGE_SIZE;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

fn resolve_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Decodes one batch file into `(pixels, labels)`.
pub fn parse_batch(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    let expected = RECORD_BYTES * RECORDS_PER_FILE;
    if bytes.len() != expected {
        return Err(Error::ingestion(
            path,
            format!("size {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut pixels = vec![0f32; RECORDS_PER_FILE * plane * 3];
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    for (n, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::ingestion(path, format!("record {n} has label byte {label}")));
        }
        labels.push(label);
        let out = &mut pixels[n * plane * 3..(n + 1) * plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = rec[1 + c * plane + p] as f32 / 255.0;
            }
        }
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, files: &[&str], first_id: usize) -> Result<SplitData> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        let (p, l) = parse_batch(&path, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Ok(SplitData {
        pixels: Array4::from_shape_vec((n, IMAGE_SIZE, IMAGE_SIZE, 3), pixels).expect("record layout"),
        labels,
        ids: (first_id..first_id + n).collect(),
    })
}

/// 50000 train and 10000 eval images, 10 classes.
pub fn load(root: &Path) -> Result<DatasetHandle> {
    let dir = resolve_dir(root);
    // Check presence up front so a missing file fails before any decoding.
    for name in TRAIN_FILES.iter().chain([&TEST_FILE]) {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::ingestion(path, "file not found"));
        }
    }
    let train = load_files(&dir, &TRAIN_FILES, 0)?;
    let eval = load_files(&dir, &[TEST_FILE], train.len())?;
    Ok(DatasetHandle {
        name: "cifar10".into(),
        n_classes: 10,
        image_size: IMAGE_SIZE,
        channels: 3,
        source: Some(dir),
        train,
        eval,
    })
}
