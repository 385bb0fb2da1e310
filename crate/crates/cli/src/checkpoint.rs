//! Checkpoints: one line of JSON header followed by the raw little-endian f32
//! parameter blob at `blob_offset`.

use std::fs;
use std::path::Path;

use depth_dissect_core::bins::BinningScheme;
use depth_dissect_core::net::{NetConfig, Network};
use depth_dissect_core::train::{AssignmentTable, EpochLog, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "depth-dissect-checkpoint";
pub const VERSION: u32 = 1;

/// Everything about a trained model besides its weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub init_seed: u64,
    pub scheme: Option<BinningScheme>,
    pub assignments: AssignmentTable,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    blob_offset: usize,
    param_count: usize,
    config: NetConfig,
    metadata: CheckpointMeta,
}

pub fn save(path: &Path, net: &Network<f32>, meta: &CheckpointMeta) -> Result<()> {
    let flat = net.flat_params();
    let mut header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        blob_offset: 0,
        param_count: flat.len(),
        config: net.config().clone(),
        metadata: meta.clone(),
    };
    // The offset is part of the line it measures; iterate until it stops moving.
    let mut line = String::new();
    for _ in 0..4 {
        line = serde_json::to_string(&header).map_err(|e| Error::json(path, e))?;
        line.push('\n');
        if header.blob_offset == line.len() {
            break;
        }
        header.blob_offset = line.len();
    }
    let mut bytes = line.into_bytes();
    debug_assert_eq!(bytes.len(), header.blob_offset);
    bytes.reserve(4 * flat.len());
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing checkpoint header"))?;
    let header: Header = serde_json::from_slice(&bytes[..end]).map_err(|e| Error::json(path, e))?;
    if header.format != FORMAT {
        return Err(Error::format(
            path,
            format!("not a checkpoint (format {:?})", header.format),
        ));
    }
    if header.version != VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            ),
        ));
    }
    let expected = header.config.param_count()?;
    if header.param_count != expected {
        return Err(Error::format(
            path,
            format!(
                "header lists {} parameters, config needs {expected}",
                header.param_count
            ),
        ));
    }
    if header.blob_offset != end + 1 {
        return Err(Error::format(
            path,
            format!(
                "blob offset {} does not follow the header",
                header.blob_offset
            ),
        ));
    }
    let blob = &bytes[header.blob_offset..];
    if blob.len() != 4 * expected {
        return Err(Error::format(
            path,
            format!("expected {} blob bytes, found {}", 4 * expected, blob.len()),
        ));
    }
    let flat: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let net = Network::from_flat(header.config, &flat)?;
    Ok((net, header.metadata))
}
