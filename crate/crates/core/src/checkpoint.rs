//! Model checkpoint: a JSON header (config plus a parameter manifest of
//! name/shape/byte-offset) followed immediately by raw little-endian f32
//! parameter data. Offsets are relative to the first byte after the header.
//! Optimizer moments are stored as ordinary entries so training can resume
//! exactly.

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::ModelState;
use crate::vit::{ViTConfig, ViTParams};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub vit: ViTConfig,
    pub classes: usize,
    pub epoch: u32,
    pub opt_backbone_steps: u64,
    pub opt_agg_steps: u64,
    pub best_metric: Option<f64>,
    pub entries: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, state: &ModelState, best_metric: Option<f64>) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    named.extend(state.backbone.named_tensors());
    named.extend(state.agg.named_tensors());
    let base_names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let nb = state.opt_backbone.m.len();
    for (i, m) in state.opt_backbone.m.iter().enumerate() {
        named.push((format!("optim.{}.m", base_names[i]), m));
    }
    for (i, v) in state.opt_backbone.v.iter().enumerate() {
        named.push((format!("optim.{}.v", base_names[i]), v));
    }
    for (i, m) in state.opt_agg.m.iter().enumerate() {
        named.push((format!("optim.{}.m", base_names[nb + i]), m));
    }
    for (i, v) in state.opt_agg.v.iter().enumerate() {
        named.push((format!("optim.{}.v", base_names[nb + i]), v));
    }

    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 4) as u64;
    }

    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        vit: state.vit_cfg.clone(),
        classes: state.classes(),
        epoch: state.epoch,
        opt_backbone_steps: state.opt_backbone.t,
        opt_agg_steps: state.opt_agg.t,
        best_metric,
        entries,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    for (_, t) in &named {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<CheckpointHeader>();
    let header = stream
        .next()
        .ok_or_else(|| Error::Data("checkpoint: missing header".into()))??;
    let data_start = stream.byte_offset();
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint: unsupported version {}",
            header.format_version
        )));
    }
    let data = &bytes[data_start..];

    let read_tensor = |e: &ParamEntry| -> Result<Tensor<f32>> {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > data.len() {
            return Err(Error::Data(format!(
                "checkpoint: entry {} out of bounds",
                e.name
            )));
        }
        let vals: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(e.shape.clone(), vals)
    };
    let by_name: HashMap<&str, &ParamEntry> = header
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let fetch = |name: &str| -> Result<Tensor<f32>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint: missing entry {name}")))?;
        read_tensor(e)
    };

    // Rebuild parameters through the canonical naming.
    let template = ViTParams::<f32>::init(&header.vit, 0)?;
    let names: Vec<String> = template
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut backbone = template;
    for (t, name) in backbone.tensors_mut().into_iter().zip(&names) {
        let loaded = fetch(name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::Data(format!("checkpoint: shape mismatch for {name}")));
        }
        *t = loaded;
    }
    let d = header.vit.embed_dim;
    let agg = crate::aggregator::AggregatorParams {
        w: fetch("agg.w")?,
        b: fetch("agg.b")?,
    };
    if agg.w.shape() != [header.classes, d] {
        return Err(Error::Data("checkpoint: aggregator shape mismatch".into()));
    }

    let mut all_names = names.clone();
    all_names.push("agg.w".into());
    all_names.push("agg.b".into());
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    for name in &all_names {
        moments_m.push(fetch(&format!("optim.{name}.m"))?);
        moments_v.push(fetch(&format!("optim.{name}.v"))?);
    }
    let nb = names.len();
    let opt_backbone = AdamState {
        m: moments_m[..nb].to_vec(),
        v: moments_v[..nb].to_vec(),
        t: header.opt_backbone_steps,
    };
    let opt_agg = AdamState {
        m: moments_m[nb..].to_vec(),
        v: moments_v[nb..].to_vec(),
        t: header.opt_agg_steps,
    };

    let state = ModelState::from_loaded(
        header.vit.clone(),
        backbone,
        agg,
        opt_backbone,
        opt_agg,
        header.epoch,
    );
    Ok((state, header.best_metric))
}

/// Read only the header (cheap compatibility checks).
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<CheckpointHeader>();
    Ok(stream
        .next()
        .ok_or_else(|| Error::Data("checkpoint: missing header".into()))??)
}
