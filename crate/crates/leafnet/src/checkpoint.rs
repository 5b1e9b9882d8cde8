//! Checkpoint files: a JSON header describing the network layout followed
//! by raw little-endian f32 tensor data. Round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::net::{LayerParam, NetworkParams, NetworkSpec};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFCP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    /// Pixel preprocessing the weights assume; inference must match.
    pixel_normalization: String,
    spec: NetworkSpec,
}

fn tensor_bytes(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for p in params.layers.iter().flatten() {
        match p {
            LayerParam::Conv { weight, bias } => {
                for &v in weight.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                for &v in bias.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerParam::Fc { weight, bias } => {
                for &v in weight.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                for &v in bias.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    bytes
}

/// Content hash of the parameter values plus layout, used as the
/// checkpoint lineage fingerprint.
pub fn params_fingerprint(params: &NetworkParams<f32>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&params.spec).expect("spec serializes"));
    hasher.update(tensor_bytes(params));
    hex::encode(hasher.finalize())
}

pub fn save(params: &NetworkParams<f32>, path: &Path) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        pixel_normalization: "unit-range".into(),
        spec: params.spec.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&tensor_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkParams<f32>> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }

    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let expected = header.spec.param_count() * 4;
    if data.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} bytes of tensor data, spec requires {expected}",
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));

    let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(header.spec.layers.len());
    for layer in &header.spec.layers {
        layers.push(match layer {
            crate::net::LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let weight = Array4::from_shape_vec(
                    (*out_channels, *in_channels, *kernel, *kernel),
                    take(out_channels * in_channels * kernel * kernel),
                )
                .expect("length checked above");
                let bias = Array1::from_vec(take(*out_channels));
                Some(LayerParam::Conv { weight, bias })
            }
            crate::net::LayerSpec::Fc { inputs, outputs } => {
                let weight = Array2::from_shape_vec((*outputs, *inputs), take(inputs * outputs))
                    .expect("length checked above");
                let bias = Array1::from_vec(take(*outputs));
                Some(LayerParam::Fc { weight, bias })
            }
            _ => None,
        });
    }
    Ok(NetworkParams {
        spec: header.spec,
        layers,
    })
}
