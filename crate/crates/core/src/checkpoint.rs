//! `CKPT1` checkpoints: magic, `u32` little-endian header length, a JSON
//! header (model config, tensor manifest, optional training progress), then
//! every manifest tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{with_path, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

/// Where a training run stands, enough to resume it bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub adam: AdamState<f32>,
    /// Position of the sampling RNG stream.
    pub rng_word_pos: u128,
    pub best_score: Option<f64>,
    pub best_iteration: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    iteration: u64,
    adam_t: u64,
    /// Decimal string: JSON numbers cannot carry 128 bits.
    rng_word_pos: String,
    best_score: Option<f64>,
    best_iteration: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    training: Option<Progress>,
}

pub struct Checkpoint {
    pub model: Model<f32>,
    pub training: Option<TrainingState>,
}

fn tensors<'a>(model: &'a Model<f32>, training: Option<&'a TrainingState>) -> Vec<(String, &'a [usize], &'a [f32])> {
    let mut out = Vec::new();
    for p in model.params.iter() {
        out.push((p.name.clone(), p.value.shape(), p.value.data()));
    }
    for s in &model.running.slots {
        out.push((format!("running.{}.mean", s.name), std::slice::from_ref(&0usize), &s.mean[..]));
        out.push((format!("running.{}.var", s.name), std::slice::from_ref(&0usize), &s.var[..]));
    }
    if let Some(t) = training {
        for (p, m) in model.params.iter().zip(&t.adam.m) {
            out.push((format!("adam.m.{}", p.name), m.shape(), m.data()));
        }
        for (p, v) in model.params.iter().zip(&t.adam.v) {
            out.push((format!("adam.v.{}", p.name), v.shape(), v.data()));
        }
    }
    out
}

pub fn encode(model: &Model<f32>, training: Option<&TrainingState>) -> Result<Vec<u8>> {
    let items = tensors(model, training);
    let mut manifest = Vec::with_capacity(items.len());
    let mut offset = 0;
    for (name, shape, data) in &items {
        // Running statistics are vectors; their placeholder shape is replaced here.
        let shape = if shape == &[0] { vec![data.len()] } else { shape.to_vec() };
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape,
            offset,
        });
        offset += data.len();
    }
    let header = Header {
        config: model.config.clone(),
        manifest,
        training: training.map(|t| Progress {
            iteration: t.iteration,
            adam_t: t.adam.t,
            rng_word_pos: t.rng_word_pos.to_string(),
            best_score: t.best_score,
            best_iteration: t.best_iteration,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &items {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt("bad magic, expected CKPT1".into()));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(fmt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| fmt(format!("header: {e}")))?;
    let payload = &body[len..];
    let total: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(fmt(format!("payload is {} bytes, manifest needs {}", payload.len(), total * 4)));
    }
    let read = |e: &ManifestEntry| -> Vec<f32> {
        let n: usize = e.shape.iter().product();
        payload[e.offset * 4..(e.offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };

    let mut model = Model::<f32>::new(header.config.clone(), 0).map_err(|e| fmt(format!("config: {e}")))?;
    let mut entries = header.manifest.iter();
    let mut expect = |name: &str, shape: &[usize]| -> Result<&ManifestEntry> {
        let e = entries
            .next()
            .ok_or_else(|| fmt(format!("manifest ends before {name}")))?;
        if e.name != name || e.shape != shape {
            return Err(fmt(format!(
                "manifest mismatch: found {} {:?}, model expects {name} {shape:?}",
                e.name, e.shape
            )));
        }
        let offset_ok = e.offset.checked_add(shape.iter().product()).is_some_and(|end| end <= total);
        if !offset_ok {
            return Err(fmt(format!("offset of {name} out of range")));
        }
        Ok(e)
    };
    for p in model.params.iter_mut() {
        let e = expect(&p.name, p.value.shape())?;
        p.value = Tensor::from_vec(&e.shape, read(e))?;
    }
    for s in model.running.slots.iter_mut() {
        let c = s.mean.len();
        s.mean = read(expect(&format!("running.{}.mean", s.name), &[c])?);
        s.var = read(expect(&format!("running.{}.var", s.name), &[c])?);
    }
    let training = match header.training {
        None => None,
        Some(p) => {
            let mut adam = AdamState::for_params(&model.params)?;
            adam.t = p.adam_t;
            for (par, m) in model.params.iter().zip(adam.m.iter_mut()) {
                let e = expect(&format!("adam.m.{}", par.name), par.value.shape())?;
                *m = Tensor::from_vec(&e.shape, read(e))?;
            }
            for (par, v) in model.params.iter().zip(adam.v.iter_mut()) {
                let e = expect(&format!("adam.v.{}", par.name), par.value.shape())?;
                *v = Tensor::from_vec(&e.shape, read(e))?;
            }
            Some(TrainingState {
                iteration: p.iteration,
                adam,
                rng_word_pos: p
                    .rng_word_pos
                    .parse()
                    .map_err(|_| fmt("bad RNG position".into()))?,
                best_score: p.best_score,
                best_iteration: p.best_iteration,
            })
        }
    };
    if let Some(extra) = entries.next() {
        return Err(fmt(format!("unexpected manifest entry {}", extra.name)));
    }
    Ok(Checkpoint { model, training })
}

pub fn save(path: &Path, model: &Model<f32>, training: Option<&TrainingState>) -> Result<()> {
    fs::write(path, encode(model, training)?).map_err(|e| with_path(e, path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
