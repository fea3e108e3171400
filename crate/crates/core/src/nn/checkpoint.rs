//! Checkpoint layout:
//!
//! ```text
//! magic   8 bytes  "XVIEWCK\n"
//! hlen    u32 LE   length of the JSON header
//! header  hlen bytes of JSON (version, precision, arch, partitions, tensor shapes)
//! payload little-endian tensor values in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Partition};
use super::tensor::{Precision, Real, Tensor};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XVIEWCK\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionHeader {
    pub name: String,
    pub tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub precision: Precision,
    /// Free-form architecture description so checkpoints are self-describing.
    pub arch: serde_json::Value,
    pub trainable: Vec<String>,
    pub partitions: Vec<PartitionHeader>,
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>, arch: &serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        precision: T::PRECISION,
        arch: arch.clone(),
        trainable: store.trainable().iter().cloned().collect(),
        partitions: store
            .partitions()
            .iter()
            .map(|p| PartitionHeader {
                name: p.name.clone(),
                tensors: p
                    .tensors
                    .iter()
                    .map(|(n, t)| TensorHeader {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + store.param_count() * T::PRECISION.byte_width());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.partitions() {
        for (_, t) in &p.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), NnError> {
    if bytes.len() < 12 {
        return Err(NnError::Truncated("file shorter than the fixed prefix".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NnError::CorruptHeader("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(NnError::Truncated(format!(
            "header needs {} bytes, {} available",
            hlen,
            bytes.len() - 12
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| NnError::CorruptHeader(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok((header, 12 + hlen))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointHeader), NnError> {
    let (header, mut offset) = decode_header(bytes)?;
    if header.precision != T::PRECISION {
        return Err(NnError::PrecisionMismatch {
            found: header.precision,
            expected: T::PRECISION,
        });
    }
    let width = T::PRECISION.byte_width();
    let mut store = ParamStore::new();
    for ph in &header.partitions {
        let mut part = Partition {
            name: ph.name.clone(),
            tensors: Vec::with_capacity(ph.tensors.len()),
        };
        for th in &ph.tensors {
            let n: usize = th.shape.iter().product();
            let need = n * width;
            if bytes.len() < offset + need {
                return Err(NnError::Truncated(format!(
                    "payload for {}/{} cut short",
                    ph.name, th.name
                )));
            }
            let data = bytes[offset..offset + need]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            offset += need;
            part.tensors.push((th.name.clone(), Tensor::new(&th.shape, data)));
        }
        store.insert_partition(part);
    }
    if offset != bytes.len() {
        return Err(NnError::CorruptHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    store.set_trainable(header.trainable.iter());
    Ok((store, header))
}

pub fn save_checkpoint<T: Real>(
    store: &ParamStore<T>,
    arch: &serde_json::Value,
    path: &Path,
) -> Result<(), NnError> {
    let bytes = encode_checkpoint(store, arch);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader), NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_partition("enc");
        s.add_partition("locale/train0");
        s.add_tensor("enc", "w", Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, f32::MIN_POSITIVE]));
        s.add_tensor("enc", "b", Tensor::row(&[0.25, -0.5, 0.0]));
        s.add_tensor("locale/train0", "w", Tensor::scalar(7.0));
        s.set_trainable(["locale/train0"]);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let arch = serde_json::json!({"hidden": 3});
        let bytes = encode_checkpoint(&s, &arch);
        let (back, header) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(header.arch, arch);
        assert_eq!(header.precision, Precision::F32);
        assert_eq!(encode_checkpoint(&back, &arch), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&store(), &serde_json::Value::Null, &p).unwrap();
        let (back, _) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(back, store());
    }

    #[test]
    fn truncation_detected_everywhere() {
        let bytes = encode_checkpoint(&store(), &serde_json::Value::Null);
        for cut in [0, 5, 11, 20, bytes.len() - 1] {
            let err = decode_checkpoint::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, NnError::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = encode_checkpoint(&store(), &serde_json::Value::Null);
        bytes.push(0);
        assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(NnError::CorruptHeader(_))));
        let mut bad = encode_checkpoint(&store(), &serde_json::Value::Null);
        bad[0] = b'Y';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(NnError::CorruptHeader(_))));
        let mut garbled = encode_checkpoint(&store(), &serde_json::Value::Null);
        garbled[12] = b'#';
        assert!(matches!(decode_checkpoint::<f32>(&garbled), Err(NnError::CorruptHeader(_))));
    }

    #[test]
    fn version_and_precision_checked() {
        let bytes = encode_checkpoint(&store(), &serde_json::Value::Null);
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(NnError::PrecisionMismatch { .. })
        ));
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        let mut v2 = bytes[..8].to_vec();
        v2.extend_from_slice(&(json.len() as u32).to_le_bytes());
        v2.extend_from_slice(json.as_bytes());
        v2.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(
            decode_checkpoint::<f32>(&v2),
            Err(NnError::VersionMismatch { found: 9, expected: 1 })
        ));
    }
}
