//! Binary checkpoints: the run configuration as JSON followed by every named
//! parameter tensor.

use std::path::Path;

use bevnav_core::codec::{ByteReader, ByteWriter, PayloadKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoders::Model;
use crate::error::{ModelError, Result};
use crate::tensor::Mat;

pub fn encode(config: &Config, model: &Model) -> Vec<u8> {
    let mut w = ByteWriter::with_header(PayloadKind::Checkpoint);
    w.str(&serde_json::to_string(config).expect("config serializes"));
    w.u64(model.params.len() as u64);
    for (_, p) in model.params.iter() {
        w.str(&p.name);
        w.u32(p.value.rows as u32);
        w.u32(p.value.cols as u32);
        w.f64s(&p.value.data);
    }
    w.finish()
}

/// Rebuilds the model described by the stored configuration and loads its
/// parameters, checking every name and shape.
pub fn decode(data: &[u8]) -> Result<(Config, Model)> {
    let mut r = ByteReader::open(data, PayloadKind::Checkpoint)?;
    let config: Config =
        serde_json::from_str(r.str()?).map_err(|e| ModelError::Checkpoint(format!("configuration: {e}")))?;
    config.validate()?;
    // name length prefix + two shape words + data length prefix
    let n = r.len_prefix(8 + 4 + 4 + 8)?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s()?;
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name}: {rows}x{cols} does not hold {} values",
                data.len()
            )));
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    r.finish()?;
    // refuse before allocating a model far larger than the payload
    let stored: usize = tensors.iter().map(|(_, m)| m.data.len()).sum();
    if stored < config.model.min_param_count() {
        return Err(ModelError::Checkpoint(format!(
            "{stored} stored values cannot fill a model of at least {} values",
            config.model.min_param_count()
        )));
    }
    let mut model = Model::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.params.load(tensors)?;
    Ok((config, model))
}

pub fn load(path: &Path) -> Result<(Config, Model)> {
    decode(&std::fs::read(path)?)
}
