//! Weight files: a JSON manifest next to one raw little-endian `f64` blob per matrix.

use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{ModelDims, ModelWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MANIFEST_FORMAT: &str = "neurondream-weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub blobs: Vec<BlobRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRecord {
    pub name: String,
    /// File name relative to the manifest's directory.
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub crc32: u32,
}

fn blob_file_name(name: &str) -> String {
    format!("{name}.bin")
}

fn encode<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for &v in m.data() {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    bytes
}

/// Writes `manifest_path` and one blob per matrix in the same directory.
pub fn save_weights<T: Scalar>(weights: &ModelWeights<T>, manifest_path: &FsPath) -> Result<()> {
    weights.validate()?;
    let dir = manifest_path.parent().unwrap_or_else(|| FsPath::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs = Vec::new();
    for (name, m) in weights.named_matrices() {
        let bytes = encode(m);
        let file = blob_file_name(&name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        blobs.push(BlobRecord {
            name,
            file,
            rows: m.rows(),
            cols: m.cols(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        dims: weights.dims(),
        blobs,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
}

/// Reads a manifest and its blobs. Missing blobs, checksum failures and shape
/// mismatches are reported as distinct errors.
pub fn load_weights<T: Scalar>(manifest_path: &FsPath) -> Result<ModelWeights<T>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Manifest(format!("unexpected format '{}'", manifest.format)));
    }
    if manifest.dims.vocab < 2 {
        return Err(Error::Manifest(format!("vocabulary size {} < 2", manifest.dims.vocab)));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| FsPath::new("."));
    let mut weights = ModelWeights::<T>::zeros(manifest.dims);
    let expected = ModelWeights::<T>::expected_shapes(manifest.dims);
    for ((name, (rows, cols)), slot) in expected.into_iter().zip(weights.matrices_mut()) {
        let Some(rec) = manifest.blobs.iter().find(|b| b.name == name) else {
            return Err(Error::MissingBlob {
                name,
                path: "not listed in manifest".into(),
            });
        };
        if (rec.rows, rec.cols) != (rows, cols) {
            return Err(Error::BlobShape {
                name,
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", rec.rows, rec.cols),
            });
        }
        let path = dir.join(&rec.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingBlob {
                    name,
                    path: path.display().to_string(),
                })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let found = crc32fast::hash(&bytes);
        if found != rec.crc32 {
            return Err(Error::Checksum {
                name,
                expected: rec.crc32,
                found,
            });
        }
        if bytes.len() != rows * cols * 8 {
            return Err(Error::BlobShape {
                name,
                expected: format!("{} bytes", rows * cols * 8),
                found: format!("{} bytes", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        *slot = Matrix::from_vec(rows, cols, data)?;
        slot.validate(&name)?;
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelWeights<f64> {
        let dims = ModelDims { vocab: 7, embed: 16, hidden: 5, visual: 3 };
        ModelWeights::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let w = toy();
        save_weights(&w, &path).unwrap();
        let back: ModelWeights<f64> = load_weights(&path).unwrap();
        for ((_, a), (_, b)) in w.named_matrices().into_iter().zip(back.named_matrices()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_blob_is_checksum_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_weights(&toy(), &path).unwrap();
        let blob = dir.path().join("lang.U_h.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
        match load_weights::<f64>(&path) {
            Err(Error::Checksum { name, .. }) => assert_eq!(name, "lang.U_h"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_weights(&toy(), &path).unwrap();
        fs::remove_file(dir.path().join("visual.P.bin")).unwrap();
        assert!(matches!(load_weights::<f64>(&path), Err(Error::MissingBlob { name, .. }) if name == "visual.P"));
    }

    #[test]
    fn wrong_embedding_width_names_m() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_weights(&toy(), &path).unwrap();
        // Replace M by a consistent 7x17 blob while dims still say d = 16.
        let wide = Matrix::<f64>::filled(7, 17, 0.5);
        let bytes = encode(&wide);
        fs::write(dir.path().join("M.bin"), &bytes).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let rec = manifest.blobs.iter_mut().find(|b| b.name == "M").unwrap();
        rec.cols = 17;
        rec.crc32 = crc32fast::hash(&bytes);
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_weights::<f64>(&path) {
            Err(Error::BlobShape { name, .. }) => assert_eq!(name, "M"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
