//! `SDC1` ESD checkpoint files.
//!
//! The header carries the config hash, epoch and best validation loss, a
//! one-line JSON record of the model settings (ESD config, shells,
//! responses, CSD config), then the name and shape of every parameter
//! block and the width of every batch-norm layer. The payload holds the
//! parameters in header order, each batch-norm layer's running mean and
//! variance, and the Adam first and second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_bytes, write_bytes, HeaderReader, HeaderWriter};
use crate::autodiff::{AdamState, BnStats, ParamStore, Tensor};
use crate::csd::CsdConfig;
use crate::error::{Error, Result};
use crate::esd::{EsdCheckpoint, EsdConfig};
use crate::signal_model::ResponseSet;

pub const CHECKPOINT_MAGIC: &str = "SDC1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: EsdConfig,
    shells: Vec<f64>,
    responses: ResponseSet,
    csd: CsdConfig,
}

pub fn encode_checkpoint(ck: &EsdCheckpoint) -> Vec<u8> {
    let meta = Meta {
        config: ck.config.clone(),
        shells: ck.shells.clone(),
        responses: ck.responses.clone(),
        csd: ck.csd.clone(),
    };
    let mut h = HeaderWriter::new(CHECKPOINT_MAGIC);
    h.field("version", VERSION)
        .field("config_hash", &ck.config_hash)
        .field("epoch", ck.epoch)
        .field("best_val_loss", ck.best_val_loss)
        .field("meta", serde_json::to_string(&meta).expect("checkpoint metadata serializes"))
        .field("params", ck.params.len());
    let mut payload = Vec::with_capacity(3 * ck.params.n_scalars());
    for (name, t) in ck.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        h.line("param", [name.to_string(), shape.join("x")]);
        payload.extend_from_slice(t.data());
    }
    h.field("bn_layers", ck.bn.len());
    for s in &ck.bn {
        h.field("bn", s.mean.len());
        payload.extend_from_slice(&s.mean);
        payload.extend_from_slice(&s.var);
    }
    h.field("adam_step", ck.adam.step);
    for buf in ck.adam.m.iter().chain(&ck.adam.v) {
        payload.extend_from_slice(buf);
    }
    h.finish(&payload)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<EsdCheckpoint> {
    let mut r = HeaderReader::parse(path, CHECKPOINT_MAGIC, bytes)?;
    r.version(VERSION)?;
    let config_hash: String = r.field("config_hash")?;
    let epoch: usize = r.field("epoch")?;
    let best_val_loss: f64 = r.field("best_val_loss")?;
    let meta: Meta = serde_json::from_str(&r.text("meta")?).map_err(|e| r.error(format!("meta: {e}")))?;
    let n: usize = r.field("params")?;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.values::<String>("param", 2)?;
        let shape = v[1]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| r.error(format!("bad shape {:?} for {}", v[1], v[0]))))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((v[0].clone(), shape));
    }
    let n_bn: usize = r.field("bn_layers")?;
    let widths = (0..n_bn).map(|_| r.field::<usize>("bn")).collect::<Result<Vec<_>>>()?;
    let step: u64 = r.field("adam_step")?;
    let mut params = ParamStore::new();
    for (name, shape) in &shapes {
        let data = r.take(shape.iter().product())?;
        params.add(name.clone(), Tensor::new(shape.clone(), data).map_err(|e| Error::format(path, e.to_string()))?);
    }
    let bn = widths
        .iter()
        .map(|&c| {
            Ok(BnStats {
                mean: r.take(c)?,
                var: r.take(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = shapes.iter().map(|(_, s)| s.iter().product()).collect();
    let m = sizes.iter().map(|&s| r.take(s)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&s| r.take(s)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(EsdCheckpoint {
        config: meta.config,
        config_hash,
        shells: meta.shells,
        responses: meta.responses,
        csd: meta.csd,
        epoch,
        best_val_loss,
        params,
        bn,
        adam: AdamState { step, m, v },
    })
}

pub fn write_checkpoint(path: &Path, ck: &EsdCheckpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<EsdCheckpoint> {
    decode_checkpoint(path, &read_bytes(path)?)
}
