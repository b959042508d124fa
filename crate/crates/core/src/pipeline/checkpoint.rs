//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "SACC" | version u32 | step u64
//! config_len u32 | config utf-8 (the resolved run config)
//! block_count u32
//! per block: name_len u32 | name utf-8 | rank u32 | dims u32 x rank
//!            | payload f32-LE (product of dims)
//! ```
//!
//! Blocks carry parameters (`param.<name>`) and optimizer momentum buffers
//! (`moment.<name>`). Round trips are bit-identical; a version mismatch or a
//! shape mismatch against the embedded config is a hard error.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;
use crate::pipeline::config::RunConfig;
use crate::pipeline::model::SaccaderModel;
use crate::pipeline::train::OptimizerState;

const MAGIC: &[u8; 4] = b"SACC";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub config_text: String,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub moments: OptimizerState,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    step: u64,
    params: &ParamSet<f32>,
    moments: &OptimizerState,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let config_text = cfg.to_text();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    let mut blocks: Vec<(String, &Tensor<f32>)> = params
        .iter()
        .map(|(name, e)| (format!("param.{name}"), &e.tensor))
        .collect();
    blocks.extend(moments.m1.iter().map(|(name, t)| (format!("m1.{name}"), t)));
    blocks.extend(moments.m2.iter().map(|(name, t)| (format!("m2.{name}"), t)));
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, tensor) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(detail.into())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| corrupt("unexpected end of file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?).map_err(|_| corrupt("invalid utf-8"))
    }
}

/// Loads and validates a checkpoint: the embedded config rebuilds the model,
/// and every parameter the model declares must be present with its exact
/// shape.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, SaccaderModel)> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    if r.bytes(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let step = r.u64()?;
    let config_len = r.u32()? as usize;
    let config_text = r.string(config_len)?;
    let config = RunConfig::parse(&config_text)?;

    let block_count = r.u32()? as usize;
    let mut blocks: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..block_count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(corrupt("unreasonable block name length"));
        }
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("block {name}: unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.bytes(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        if blocks.insert(name.clone(), tensor).is_some() {
            return Err(corrupt(format!("duplicate block {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(Error::Io)? != 0 {
        return Err(corrupt("trailing bytes after last block"));
    }

    let model = SaccaderModel::new(config.clone())?;
    // structure (names, shapes, trainable flags) comes from the config;
    // values come from the blocks
    let mut params = model.init_params::<f32>(0);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let key = format!("param.{name}");
        let stored = blocks
            .get(&key)
            .ok_or_else(|| corrupt(format!("missing parameter block {key}")))?;
        let expected = params.get(name).shape().to_vec();
        if stored.shape() != expected {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                stored: stored.shape().to_vec(),
                expected,
            });
        }
        *params.get_mut(name) = stored.clone();
    }
    let mut moments = OptimizerState::default();
    moments.t = step;
    for (key, tensor) in &blocks {
        if let Some(name) = key.strip_prefix("m1.") {
            if !params.contains(name) {
                return Err(corrupt(format!("moment block for unknown parameter {name}")));
            }
            moments.m1.insert(name.to_string(), tensor.clone());
        } else if let Some(name) = key.strip_prefix("m2.") {
            if !params.contains(name) {
                return Err(corrupt(format!("moment block for unknown parameter {name}")));
            }
            moments.m2.insert(name.to_string(), tensor.clone());
        } else if let Some(name) = key.strip_prefix("param.") {
            if !params.contains(name) {
                return Err(corrupt(format!("parameter block {name} not in model")));
            }
        } else {
            return Err(corrupt(format!("unrecognized block {key}")));
        }
    }

    Ok((
        Checkpoint {
            config,
            config_text,
            step,
            params,
            moments,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::RunConfig;

    fn small_cfg() -> RunConfig {
        RunConfig {
            canvas_side: 64,
            glyph_side: 16,
            classes: 4,
            input_side: 16,
            patch_size: 2,
            stage_channels: vec![8, 12],
            parts: vec![4, 4],
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = SaccaderModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(3);
        let mut moments = OptimizerState::default();
        moments.m1.insert(
            "backbone.stage0.lin.w".into(),
            params.get("backbone.stage0.lin.w").clone(),
        );
        moments.m2.insert(
            "backbone.stage0.lin.w".into(),
            params.get("backbone.stage0.lin.w").clone(),
        );
        let p1 = dir.path().join("a.sacc");
        let p2 = dir.path().join("b.sacc");
        save_checkpoint(&p1, &cfg, 42, &params, &moments).unwrap();
        let (loaded, _) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        save_checkpoint(&p2, &loaded.config, loaded.step, &loaded.params, &loaded.moments).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "save -> load -> save must reproduce bytes");
    }

    #[test]
    fn loaded_params_match_saved_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = SaccaderModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(9);
        let path = dir.path().join("c.sacc");
        save_checkpoint(&path, &cfg, 0, &params, &OptimizerState::default()).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        for (name, e) in params.iter() {
            assert_eq!(e.tensor, *loaded.params.get(name), "{name}");
            assert_eq!(
                loaded.params.is_trainable(name),
                params.is_trainable(name),
                "{name} trainable flag"
            );
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = SaccaderModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(1);
        let path = dir.path().join("d.sacc");
        save_checkpoint(&path, &cfg, 7, &params, &OptimizerState::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("trunc.sacc");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut garbled = bytes.clone();
        garbled[0] = b'X';
        let bad = dir.path().join("bad.sacc");
        std::fs::write(&bad, &garbled).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = SaccaderModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(1);
        let path = dir.path().join("v.sacc");
        save_checkpoint(&path, &cfg, 7, &params, &OptimizerState::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn shape_mismatch_against_config_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = SaccaderModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f32>(1);
        // write with a doctored config that implies different shapes
        let mut other = cfg.clone();
        other.stage_channels = vec![8, 16];
        let path = dir.path().join("s.sacc");
        save_checkpoint(&path, &other, 0, &params, &OptimizerState::default()).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointShape { .. }) => {}
            Err(e) => panic!("expected shape error, got {e}"),
            Ok(_) => panic!("expected shape error, got success"),
        }
    }
}
