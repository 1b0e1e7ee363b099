//! Checkpoint container: `MSTTS1` magic, little-endian u32 header length, a
//! JSON header with provenance and a tensor manifest, then the raw f32
//! payload (parameters in store order, then batchnorm buffers).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Network, Variant};

pub const MAGIC: &[u8; 6] = b"MSTTS1";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub variant: Variant,
    pub stage: u8,
    pub seed: u64,
    pub config: ModelConfig,
    pub memory_width: usize,
    pub tensors: Vec<ManifestEntry>,
    pub payload_bytes: u64,
    /// Resolved run configuration the checkpoint was produced under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<Value>,
}

/// A loaded checkpoint: the model plus the echoed run configuration.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub run_config: Option<Value>,
}

fn tensor_bytes(t: &Tensor<f32>, out: &mut Vec<u8>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to the container format.
pub fn encode_checkpoint(model: &Model, run_config: Option<&Value>) -> Result<Vec<u8>> {
    let store = &model.store;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let entries = store
        .params()
        .iter()
        .map(|p| (p.name.as_str(), TensorKind::Param, &p.value))
        .chain(
            store
                .buffers()
                .iter()
                .map(|b| (b.name.as_str(), TensorKind::Buffer, &b.value)),
        );
    for (name, kind, value) in entries {
        let start = payload.len();
        tensor_bytes(value, &mut payload);
        tensors.push(ManifestEntry {
            name: name.to_string(),
            kind,
            shape: value.shape().to_vec(),
            offset: start as u64,
            crc32: crc32fast::hash(&payload[start..]),
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        variant: model.variant(),
        stage: model.stage,
        seed: model.seed,
        config: model.network.config.clone(),
        memory_width: model.network.config.memory_width(model.variant()),
        tensors,
        payload_bytes: payload.len() as u64,
        run_config: run_config.cloned(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the container and rebuilds the model it describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing MSTTS1 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() < hlen {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &body[hlen..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let (network, mut store) = Network::build::<f32>(&header.config, header.variant, header.seed)?;
    if network.config != header.config {
        return Err(corrupt("configuration is not resolved for its variant".into()));
    }
    let n_params = store.len();
    let n_buffers = store.buffers().len();
    if header.tensors.len() != n_params + n_buffers {
        return Err(corrupt(format!(
            "manifest lists {} tensors, {} variant has {}",
            header.tensors.len(),
            header.variant,
            n_params + n_buffers
        )));
    }
    let mut cursor = 0u64;
    for (i, entry) in header.tensors.iter().enumerate() {
        let (want_name, want_kind, want_shape) = if i < n_params {
            let p = &store.params()[i];
            (p.name.clone(), TensorKind::Param, p.value.shape().to_vec())
        } else {
            let b = &store.buffers()[i - n_params];
            (b.name.clone(), TensorKind::Buffer, b.value.shape().to_vec())
        };
        if entry.name != want_name || entry.kind != want_kind || entry.shape != want_shape {
            return Err(corrupt(format!(
                "manifest entry {i} is {} {:?} {:?}, expected {want_name} {want_kind:?} {want_shape:?}",
                entry.name, entry.kind, entry.shape
            )));
        }
        let len = 4 * want_shape.iter().product::<usize>() as u64;
        if entry.offset != cursor || cursor + len > payload.len() as u64 {
            return Err(corrupt(format!("tensor {} has a bad offset", entry.name)));
        }
        let raw = &payload[cursor as usize..(cursor + len) as usize];
        if crc32fast::hash(raw) != entry.crc32 {
            return Err(corrupt(format!("checksum mismatch in tensor {}", entry.name)));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&want_shape, data)?;
        if i < n_params {
            store.params_mut()[i].value = value;
        } else {
            store.buffers_mut()[i - n_params].value = value;
        }
        cursor += len;
    }
    if cursor != payload.len() as u64 {
        return Err(corrupt("trailing payload bytes".into()));
    }
    Ok(Checkpoint {
        model: Model {
            network,
            store,
            stage: header.stage,
            seed: header.seed,
        },
        run_config: header.run_config,
    })
}

pub fn save_checkpoint(model: &Model, run_config: Option<&Value>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, run_config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn model(variant: Variant) -> Model {
        let mut m = Model::new(&ModelConfig::pilot(), variant, 11).unwrap();
        for (i, b) in m.store.buffers_mut().iter_mut().enumerate() {
            b.value.fill(0.25 + i as f32);
        }
        m.stage = 1;
        m
    }

    #[test]
    fn round_trip_is_byte_exact_for_every_variant() {
        for v in Variant::ALL {
            let m = model(v);
            let meta = serde_json::json!({"version": 1, "note": "x"});
            let a = encode_checkpoint(&m, Some(&meta)).unwrap();
            let ck = decode_checkpoint(&a).unwrap();
            assert_eq!(ck.model.stage, 1);
            assert_eq!(ck.model.variant(), v);
            let b = encode_checkpoint(&ck.model, ck.run_config.as_ref()).unwrap();
            assert_eq!(a, b, "{v}");
        }
    }

    #[test]
    fn forward_after_reload_is_bitwise_equal() {
        let m = model(Variant::Proposed);
        let ck = decode_checkpoint(&encode_checkpoint(&m, None).unwrap()).unwrap();
        let mut x = Tensor::<f32>::zeros(&[32, 40]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32 / 50.0) - 1.0;
        }
        let text = [3, 1, 4, 1, 5];
        let a = m.synthesize(&text, &x, &x).unwrap();
        let b = ck.model.synthesize(&text, &x, &x).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
    }

    #[test]
    fn flipped_payload_byte_names_the_tensor() {
        let m = model(Variant::BaseG);
        let mut bytes = encode_checkpoint(&m, None).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x10;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        let last = m.store.buffers().last().unwrap().name.clone();
        assert!(err.contains("checksum") && err.contains(&last), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let m = model(Variant::BaseL);
        let mut bytes = encode_checkpoint(&m, None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptCheckpoint(_))));

        let mut bumped = encode_checkpoint(&m, None).unwrap();
        let key = b"\"format_version\":1";
        let at = bumped.windows(key.len()).position(|w| w == key).unwrap();
        bumped[at + key.len() - 1] = b'9';
        assert!(matches!(
            decode_checkpoint(&bumped),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn stage_one_checkpoint_fails_final_expectation() {
        let m = model(Variant::Proposed);
        let ck = decode_checkpoint(&encode_checkpoint(&m, None).unwrap()).unwrap();
        assert!(matches!(ck.model.expect_final(), Err(Error::Provenance(_))));
    }
}
