//! Checkpoints as safetensors archives: every parameter is a little-endian
//! f32 tensor under its dotted name, and the model configuration travels as
//! JSON in the header metadata.
//!
//! The header metadata holds a single key so the serialized bytes do not
//! depend on hash-map iteration order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::ModelConfig;
use super::layers::Params;
use super::network::TriModalNet;
use super::ModelError;

pub const CHECKPOINT_FORMAT: &str = "riskplan-checkpoint-v1";
const META_KEY: &str = "riskplan";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    extra: BTreeMap<String, String>,
}

fn bad(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

/// Serializes parameters, configuration and caller metadata.
pub fn checkpoint_bytes(net: &TriModalNet<f32>, extra: &BTreeMap<String, String>) -> Result<Vec<u8>, ModelError> {
    let named = net.named();
    let payloads: Vec<(String, Vec<usize>, Vec<u8>)> = named
        .iter()
        .map(|(name, p)| {
            let bytes = p.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), p.shape().to_vec(), bytes)
        })
        .collect();
    let views = payloads
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| bad(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config.clone(),
        extra: extra.clone(),
    };
    let meta = HashMap::from([(
        META_KEY.to_string(),
        serde_json::to_string(&header).expect("header serializes"),
    )]);
    safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))
}

/// Rebuilds a network from [`checkpoint_bytes`] output together with the
/// caller metadata.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<(TriModalNet<f32>, BTreeMap<String, String>), ModelError> {
    let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| bad(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing checkpoint header metadata"))?;
    let Header { format, config, extra } =
        serde_json::from_str(raw).map_err(|e| bad(format!("bad header metadata: {e}")))?;
    if format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported checkpoint format {format:?}")));
    }
    let tensors = SafeTensors::deserialize(buf).map_err(|e| bad(e.to_string()))?;
    let mut net = TriModalNet::<f32>::new(&config, 0)?;
    let mut expected = 0;
    for (name, param) in net.named_mut() {
        expected += 1;
        let t = tensors.tensor(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
        if t.dtype() != Dtype::F32 {
            return Err(bad(format!("{name}: expected F32, found {:?}", t.dtype())));
        }
        if t.shape() != param.shape() {
            return Err(bad(format!(
                "{name}: expected shape {:?}, found {:?}",
                param.shape(),
                t.shape()
            )));
        }
        let values: Vec<f32> = t
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *param = Array2::from_shape_vec(param.raw_dim(), values).map_err(|e| bad(format!("{name}: {e}")))?;
    }
    if tensors.len() != expected {
        let known: Vec<String> = net.named().into_iter().map(|(n, _)| n).collect();
        let extra: Vec<&str> = tensors.names().into_iter().filter(|n| !known.iter().any(|k| k == n)).collect();
        return Err(bad(format!("unexpected tensors {extra:?}")));
    }
    Ok((net, extra))
}

pub fn save_checkpoint(path: &Path, net: &TriModalNet<f32>, extra: &BTreeMap<String, String>) -> Result<(), ModelError> {
    let bytes = checkpoint_bytes(net, extra)?;
    let io = |e: std::io::Error| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TriModalNet<f32>, BTreeMap<String, String>), ModelError> {
    let buf = fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    checkpoint_from_bytes(&buf).map_err(|e| match e {
        ModelError::Checkpoint(m) => ModelError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_text: 8,
            image_size: 32,
            patch_size: 16,
            vit_dim: 16,
            vit_layers: 1,
            state_layers: 1,
            decoder_layers: 1,
            num_cameras: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = TriModalNet::<f32>::new(&small(), 7).unwrap();
        let extra: BTreeMap<String, String> = [("epoch", "3"), ("flags", "base"), ("seed", "7")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let bytes = checkpoint_bytes(&net, &extra).unwrap();
        let (back, meta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(meta, extra);
        assert_eq!(back.config, net.config);
        for ((n1, a), (n2, b)) in net.named().into_iter().zip(back.named()) {
            assert_eq!(n1, n2);
            let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{n1}");
        }
        assert_eq!(checkpoint_bytes(&back, &extra).unwrap(), bytes);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let net = TriModalNet::<f32>::new(&small(), 1).unwrap();
        let bytes = checkpoint_bytes(&net, &BTreeMap::new()).unwrap();
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let foreign = safetensors::serialize(Vec::<(&str, TensorView)>::new(), None).unwrap();
        assert!(matches!(checkpoint_from_bytes(&foreign), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/model.safetensors");
        let net = TriModalNet::<f32>::new(&small(), 2).unwrap();
        save_checkpoint(&path, &net, &BTreeMap::new()).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope")),
            Err(ModelError::Io { .. })
        ));
    }
}
