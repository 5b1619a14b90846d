//! Checkpoint container: a JSON header (shapes, config, metrics,
//! normalizer) followed by a raw little-endian 64-bit parameter payload.
//! Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::PhyUlstm;
use crate::train::{TrainConfig, TrainMetrics, TrainedModel};

const MAGIC: &[u8; 8] = b"PHYULSTM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    metrics: TrainMetrics,
    dt: f64,
    gamma: f64,
    normalizer: crate::dataset::Normalizer,
    lstm_hidden: usize,
    lstm_layers: usize,
    has_hidden_dense: bool,
    arrays: Vec<ArrayEntry>,
}

fn collect_arrays(model: &PhyUlstm) -> (Vec<ArrayEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    model.for_each_param(|name, arr| {
        entries.push(ArrayEntry {
            name: name.to_string(),
            len: arr.len(),
        });
        payload.extend_from_slice(arr);
    });
    model.for_each_bn_stats(|name, arr| {
        entries.push(ArrayEntry {
            name: name.to_string(),
            len: arr.len(),
        });
        payload.extend_from_slice(arr);
    });
    (entries, payload)
}

/// Write a trained model to disk.
pub fn save_checkpoint(
    path: &Path,
    trained: &TrainedModel,
    metrics: &TrainMetrics,
) -> Result<(), CheckpointError> {
    let (arrays, payload) = collect_arrays(&trained.model);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: trained.config.clone(),
        metrics: metrics.clone(),
        dt: trained.dt,
        gamma: trained.gamma,
        normalizer: trained.model.normalizer,
        lstm_hidden: trained.config.hidden,
        lstm_layers: trained.config.lstm_layers,
        has_hidden_dense: trained.model.lstm.hidden_dense.is_some(),
        arrays,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(&header_json).map_err(io_err)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint, validating version, array names/shapes, and payload
/// length against the header and the rebuilt model skeleton.
pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, TrainMetrics), CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Header(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4).map_err(io_err)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            expected: FORMAT_VERSION,
            got: version,
        });
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8).map_err(io_err)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut payload_bytes = Vec::new();
    f.read_to_end(&mut payload_bytes).map_err(io_err)?;
    let expected_scalars: usize = header.arrays.iter().map(|a| a.len).sum();
    if payload_bytes.len() != expected_scalars * 8 {
        return Err(CheckpointError::Truncated {
            expected: expected_scalars * 8,
            got: payload_bytes.len(),
        });
    }
    let mut payload = Vec::with_capacity(expected_scalars);
    for chunk in payload_bytes.chunks_exact(8) {
        payload.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    // Rebuild the skeleton and fill arrays in header order.
    let mut model = PhyUlstm::init(
        &header.config.plan,
        header.lstm_hidden,
        header.lstm_layers,
        header.config.seed,
    )
    .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if !header.has_hidden_dense {
        model.lstm.hidden_dense = None;
    }
    model.normalizer = header.normalizer;

    let mut cursor = 0usize;
    let mut idx = 0usize;
    let mut fill_err: Option<CheckpointError> = None;
    let fill = |name: &str, arr: &mut Vec<f64>,
                    idx: &mut usize,
                    cursor: &mut usize,
                    fill_err: &mut Option<CheckpointError>| {
        if fill_err.is_some() {
            return;
        }
        let Some(entry) = header.arrays.get(*idx) else {
            *fill_err = Some(CheckpointError::Header(format!(
                "model expects array '{name}' but the header lists only {} arrays",
                header.arrays.len()
            )));
            return;
        };
        if entry.name != name || entry.len != arr.len() {
            *fill_err = Some(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                header: vec![entry.len],
                expected: vec![arr.len()],
            });
            return;
        }
        arr.copy_from_slice(&payload[*cursor..*cursor + entry.len]);
        *cursor += entry.len;
        *idx += 1;
    };
    model.for_each_param_mut(|name, arr| fill(name, arr, &mut idx, &mut cursor, &mut fill_err));
    model.for_each_bn_stats_mut(|name, arr| fill(name, arr, &mut idx, &mut cursor, &mut fill_err));
    if let Some(e) = fill_err {
        return Err(e);
    }
    if idx != header.arrays.len() {
        return Err(CheckpointError::Header(format!(
            "header lists {} arrays but the model consumed {idx}",
            header.arrays.len()
        )));
    }

    Ok((
        TrainedModel {
            model,
            config: header.config,
            dt: header.dt,
            gamma: header.gamma,
        },
        header.metrics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Regime;
    use crate::unet::UNetPlan;

    fn small_trained() -> (TrainedModel, TrainMetrics) {
        let config = TrainConfig {
            hidden: 6,
            lstm_layers: 1,
            plan: UNetPlan {
                encoder_filters: vec![3, 4],
                bottleneck_filters: 5,
                kernel: 2,
                pool: 2,
                out_channels: 3,
            },
            ..TrainConfig::default()
        };
        let mut model =
            PhyUlstm::init(&config.plan, config.hidden, config.lstm_layers, 3).unwrap();
        // Touch stats so the round trip carries non-initial values.
        model.unet.encoders[0][0].stats.mean[0] = 0.25;
        model.unet.decoders[1][1].stats.var[2] = 3.5;
        (
            TrainedModel {
                model,
                config,
                dt: 0.05,
                gamma: 1.0,
            },
            TrainMetrics {
                epochs_run: 10,
                best_epoch: 9,
                best_loss: 0.125,
                final_loss: 0.25,
                diverged: false,
                monitored_split: "train".into(),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (trained, metrics) = small_trained();
        save_checkpoint(&path, &trained, &metrics).unwrap();
        let (loaded, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(trained.model, loaded.model);
        assert_eq!(trained.dt, loaded.dt);
        assert_eq!(metrics.best_loss, m2.best_loss);

        // Save the loaded model again: identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded, &m2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn predictions_survive_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (trained, metrics) = small_trained();
        let ag: Vec<f64> = (0..32).map(|i| (i as f64 * 0.21).sin()).collect();
        let before = trained.model.predict(&ag, 0.05, Regime::FullState).unwrap();
        save_checkpoint(&path, &trained, &metrics).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let after = loaded.model.predict(&ag, 0.05, Regime::FullState).unwrap();
        assert_eq!(before.x, after.x);
        assert_eq!(before.v, after.v);
        assert_eq!(before.g, after.g);
        assert_eq!(before.a, after.a);
    }

    #[test]
    fn truncated_payload_is_rejected_with_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (trained, metrics) = small_trained();
        save_checkpoint(&path, &trained, &metrics).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Truncated { expected, got }) => {
                assert!(expected > got);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (trained, metrics) = small_trained();
        save_checkpoint(&path, &trained, &metrics).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field follows the 8-byte magic
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Version { got, .. }) => assert_eq!(got, 99),
            other => panic!("expected Version error, got {other:?}"),
        }
    }
}
