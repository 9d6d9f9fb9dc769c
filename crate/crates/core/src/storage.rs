//! On-disk dataset container.
//!
//! A container is a directory holding `manifest.json` and one little-endian
//! `f64` blob per array:
//!
//! | blob              | shape      | layout                                   |
//! |-------------------|------------|------------------------------------------|
//! | `operator.bin`    | `m × d²`   | row-major `W`; row `i` gives `A(X)_i`    |
//! | `<split>_x.bin`   | `n × d²`   | one row-major `vec(X)` per instance      |
//! | `<split>_b.bin`   | `n × m`    | one measurement vector per instance      |
//!
//! The manifest records dimensions, seeds, the vectorization convention, and
//! the SHA-256 of every blob; `manifest_sha256` covers the manifest itself
//! (computed with that field blank).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{check_instance, Dataset, GenerationInfo, LowRankInstance, Split};
use crate::error::{Error, Result};
use crate::linalg::{unvectorize, vectorize};
use crate::measurement::MeasurementOperator;

pub const DATASET_FORMAT: &str = "lsvt-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const VEC_CONVENTION: &str = "row-major";
const MANIFEST: &str = "manifest.json";
const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub vec_convention: String,
    pub dtype: String,
    pub generation: GenerationInfo,
    pub splits: BTreeMap<String, usize>,
    pub blobs: BTreeMap<String, BlobInfo>,
    #[serde(default)]
    pub manifest_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8], blob: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            blob: blob.to_string(),
            reason: format!("length {} is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes a blob and returns its descriptor.
pub fn write_blob(dir: &Path, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<BlobInfo> {
    debug_assert_eq!(values.len(), rows * cols);
    let file = format!("{name}.bin");
    let bytes = encode_f64(values);
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobInfo {
        file,
        rows,
        cols,
        sha256: sha256_hex(&bytes),
    })
}

/// Reads a blob, verifying presence, size and checksum.
pub fn read_blob(dir: &Path, name: &str, info: &BlobInfo) -> Result<Vec<f64>> {
    let path = dir.join(&info.file);
    let bytes = fs::read(&path).map_err(|e| Error::Format {
        blob: name.to_string(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    if sha256_hex(&bytes) != info.sha256 {
        return Err(Error::Checksum(name.to_string()));
    }
    let values = decode_f64(&bytes, name)?;
    if values.len() != info.rows * info.cols {
        return Err(Error::Format {
            blob: name.to_string(),
            reason: format!(
                "expected {}×{} values, found {}",
                info.rows,
                info.cols,
                values.len()
            ),
        });
    }
    Ok(values)
}

/// Serializes with the checksum field blank and returns the digest.
pub(crate) fn manifest_digest<T: Serialize>(manifest: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(manifest)?.as_bytes()))
}

impl DatasetManifest {
    fn seal(&mut self) -> Result<()> {
        self.manifest_sha256.clear();
        self.manifest_sha256 = manifest_digest(self)?;
        Ok(())
    }

    fn verify(&self) -> Result<()> {
        let mut blank = self.clone();
        blank.manifest_sha256.clear();
        if manifest_digest(&blank)? != self.manifest_sha256 {
            return Err(Error::Checksum(MANIFEST.to_string()));
        }
        Ok(())
    }
}

/// Reads `manifest.json` from a container and checks its own checksum.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format {
        blob: MANIFEST.to_string(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        blob: MANIFEST.to_string(),
        reason: e.to_string(),
    })?;
    manifest.verify()?;
    if manifest.format != DATASET_FORMAT || manifest.vec_convention != VEC_CONVENTION {
        return Err(Error::Format {
            blob: MANIFEST.to_string(),
            reason: format!(
                "unsupported format `{}` / convention `{}`",
                manifest.format, manifest.vec_convention
            ),
        });
    }
    Ok(manifest)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = dataset.operator.dim();
    let m = dataset.operator.rows();
    let mut blobs = BTreeMap::new();
    let mut splits = BTreeMap::new();

    let w = dataset.operator.matrix();
    let w_row_major: Vec<f64> = (0..m).flat_map(|i| (0..d * d).map(move |j| w[(i, j)])).collect();
    blobs.insert("operator".to_string(), write_blob(dir, "operator", m, d * d, &w_row_major)?);

    for split in Split::ALL {
        let items = dataset.split(split);
        let xs: Vec<f64> = items.iter().flat_map(|inst| vectorize(&inst.x).as_slice().to_vec()).collect();
        let bs: Vec<f64> = items.iter().flat_map(|inst| inst.b.iter().copied()).collect();
        let x_name = format!("{}_x", split.name());
        let b_name = format!("{}_b", split.name());
        blobs.insert(x_name.clone(), write_blob(dir, &x_name, items.len(), d * d, &xs)?);
        blobs.insert(b_name.clone(), write_blob(dir, &b_name, items.len(), m, &bs)?);
        splits.insert(split.name().to_string(), items.len());
    }

    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: FORMAT_VERSION,
        vec_convention: VEC_CONVENTION.to_string(),
        dtype: "float64-le".to_string(),
        generation: dataset.info.clone(),
        splits,
        blobs,
        manifest_sha256: String::new(),
    };
    manifest.seal()?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn blob_info<'a>(manifest: &'a DatasetManifest, name: &str) -> Result<&'a BlobInfo> {
    manifest.blobs.get(name).ok_or_else(|| Error::Format {
        blob: name.to_string(),
        reason: "not listed in manifest".to_string(),
    })
}

fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    op: &MeasurementOperator,
) -> Result<Vec<LowRankInstance>> {
    let count = *manifest
        .splits
        .get(split.name())
        .ok_or_else(|| Error::MissingSplit(split.name().to_string()))?;
    let x_name = format!("{}_x", split.name());
    let b_name = format!("{}_b", split.name());
    let (x_info, b_info) = match (manifest.blobs.get(&x_name), manifest.blobs.get(&b_name)) {
        (Some(x), Some(b)) => (x, b),
        _ => return Err(Error::MissingSplit(split.name().to_string())),
    };
    let d = op.dim();
    let m = op.rows();
    if x_info.rows != count || x_info.cols != d * d || b_info.rows != count || b_info.cols != m {
        return Err(Error::Format {
            blob: x_name,
            reason: "blob shape disagrees with manifest dimensions".to_string(),
        });
    }
    let xs = read_blob(dir, &x_name, x_info)?;
    let bs = read_blob(dir, &b_name, b_info)?;
    let rank = manifest.generation.rank;
    let items: Vec<LowRankInstance> = xs
        .chunks_exact(d * d)
        .zip(bs.chunks_exact(m))
        .map(|(x, b)| LowRankInstance {
            x: unvectorize(x, d),
            b: DVector::from_column_slice(b),
            rank,
        })
        .collect();
    // Spot-check 1% of the instances (at least one).
    let stride = (items.len() / (items.len() / 100).max(1)).max(1);
    for inst in items.iter().step_by(stride) {
        check_instance(op, inst).map_err(|e| Error::Format {
            blob: x_name.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(items)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let gen = &manifest.generation;
    let (d, m) = (gen.dim, gen.rows);
    let op_info = blob_info(&manifest, "operator")?;
    if op_info.rows != m || op_info.cols != d * d {
        return Err(Error::Format {
            blob: "operator".to_string(),
            reason: format!("expected {m}×{} operator", d * d),
        });
    }
    let w = read_blob(dir, "operator", op_info)?;
    let operator =
        MeasurementOperator::from_matrix(d, DMatrix::from_row_slice(m, d * d, &w), ORTHONORMALITY_TOL)
            .map_err(|e| Error::Format {
                blob: "operator".to_string(),
                reason: e.to_string(),
            })?;
    let train = load_split(dir, &manifest, Split::Train, &operator)?;
    let validation = load_split(dir, &manifest, Split::Validation, &operator)?;
    let test = load_split(dir, &manifest, Split::Test, &operator)?;
    Ok(Dataset {
        operator,
        train,
        validation,
        test,
        info: manifest.generation.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SplitSizes};

    fn small() -> Dataset {
        let sizes = SplitSizes {
            train: 6,
            validation: 3,
            test: 2,
        };
        generate_dataset(4, 1, 10, sizes, 5).unwrap()
    }

    fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect()
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let ds = small();
        let first = tempfile::tempdir().unwrap();
        save_dataset(&ds, first.path()).unwrap();
        let loaded = load_dataset(first.path()).unwrap();
        assert_eq!(loaded, ds);
        let second = tempfile::tempdir().unwrap();
        save_dataset(&loaded, second.path()).unwrap();
        assert_eq!(read_all(first.path()), read_all(second.path()));
    }

    #[test]
    fn tampered_manifest_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"rank\": 1", "\"rank\": 2")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(b)) if b == MANIFEST));
    }

    #[test]
    fn tampered_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join("train_x.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(b)) if b == "train_x"));
    }

    #[test]
    fn missing_blob_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("validation_b.bin")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { blob, .. }) => assert_eq!(blob, "validation_b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_test_split_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = save_dataset(&small(), dir.path()).unwrap();
        manifest.splits.remove("test");
        manifest.blobs.remove("test_x");
        manifest.blobs.remove("test_b");
        manifest.seal().unwrap();
        fs::write(
            dir.path().join(MANIFEST),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingSplit(s)) if s == "test"));
    }

    #[test]
    fn operator_blob_is_row_major_w() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let w = read_blob(dir.path(), "operator", &manifest.blobs["operator"]).unwrap();
        let x = &ds.train[0].x;
        let vx = vectorize(x);
        for i in 0..ds.operator.rows() {
            let row = &w[i * 16..(i + 1) * 16];
            let b: f64 = row.iter().zip(vx.iter()).map(|(a, c)| a * c).sum();
            assert!((b - ds.train[0].b[i]).abs() < 1e-12);
        }
    }
}
