//! Checkpoints: JSON manifest plus a raw little-endian `f32` weight payload.
//!
//! ```json
//! { "kind": "orientation_gcn", "seed": 7,
//!   "tensors": [ { "name": "enc0.weight", "shape": [32, 32] }, ... ],
//!   "hyperparameters": { ... }, "payload": "model.bin" }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub hyperparameters: serde_json::Value,
    pub payload: String,
}

pub fn save_checkpoint<N: Parameterized<f32>>(
    path: impl AsRef<Path>,
    kind: &str,
    net: &N,
    hyperparameters: serde_json::Value,
    seed: u64,
) -> Result<()> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let payload = format!("{stem}.bin");
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let names = net.param_names();
    let params = net.params();
    let tensors = names
        .iter()
        .zip(&params)
        .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
        .collect();
    let bytes: Vec<u8> = params.iter().flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes())).collect();
    let payload_path = dir.join(&payload);
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    let manifest = Checkpoint { kind: kind.into(), seed, tensors, hyperparameters, payload };
    fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; tensors are returned in manifest order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, Vec<Tensor<f32>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Header(e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let payload_path = dir.join(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::PayloadSize { expected: total * 4, found: bytes.len() });
    }
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.shape.iter().product();
        out.push(Tensor::new(t.shape.clone(), floats.by_ref().take(n).collect())?);
    }
    Ok((manifest, out))
}

/// Copies loaded tensors into `net`, checking names and shapes.
pub fn restore<N: Parameterized<f32>>(net: &mut N, manifest: &Checkpoint, tensors: Vec<Tensor<f32>>) -> Result<()> {
    let names = net.param_names();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, network expects {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    for ((dst, name), (entry, src)) in net.params_mut().into_iter().zip(&names).zip(manifest.tensors.iter().zip(tensors)) {
        if &entry.name != name || dst.shape() != src.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;

    #[test]
    fn round_trip_restores_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let net = Dense::<f32>::init(4, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        save_checkpoint(&p, "dense", &net, serde_json::json!({"lr": 0.1}), 5).unwrap();
        let (m, t) = load_checkpoint(&p).unwrap();
        let mut other = Dense::<f32>::init(4, 3, &mut rng);
        restore(&mut other, &m, t).unwrap();
        assert_eq!(other, net);
        let mut wrong = Dense::<f32>::init(5, 3, &mut rng);
        let (m, t) = load_checkpoint(&p).unwrap();
        assert!(restore(&mut wrong, &m, t).is_err());
    }
}
