//! Checkpoint persistence.
//!
//! Layout: 4 magic bytes, a little-endian u32 format version, a little-endian
//! u64 header length, a JSON header (model kind, config, schema,
//! standardization, batch-norm running statistics, tensor manifest), then the
//! raw little-endian float payload. Floats are stored at full 64-bit training
//! precision so save, load and forward are bit-exact.

use crate::conditions::ConditionSchema;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::mcdm::{DiffusionConfig, McDiffusion};
use crate::mcvae::{McVae, VaeConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"MCKP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct InjectorStats {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    vae_config: Option<VaeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diffusion_config: Option<DiffusionConfig>,
    schema: ConditionSchema,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
    #[serde(skip_serializing_if = "Option::is_none")]
    injectors: Option<Vec<InjectorStats>>,
    tensors: Vec<TensorEntry>,
}

pub enum Model {
    Vae(McVae),
    Diffusion(McDiffusion),
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    match model {
        Model::Vae(m) => save_vae(m, path),
        Model::Diffusion(m) => save_diffusion(m, path),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (header, payload) = read_file(path)?;
    match header.model.as_str() {
        "vae" => Ok(Model::Vae(build_vae(header, payload)?)),
        "diffusion" => Ok(Model::Diffusion(build_diffusion(header, payload)?)),
        other => Err(Error::IncompatibleVersion(format!("unknown model kind {other:?}"))),
    }
}

pub fn save_vae(model: &McVae, path: &Path) -> Result<()> {
    let header = Header {
        model: "vae".into(),
        vae_config: Some(model.config.clone()),
        diffusion_config: None,
        schema: model.schema().clone(),
        standardization: model.standardization.clone(),
        injectors: None,
        tensors: manifest(&model.store),
    };
    write_file(path, &header, &model.store)
}

pub fn load_vae(path: &Path) -> Result<McVae> {
    let (header, payload) = read_file(path)?;
    if header.model != "vae" {
        return Err(Error::IncompatibleVersion(format!(
            "expected a vae checkpoint, found {:?}",
            header.model
        )));
    }
    build_vae(header, payload)
}

pub fn save_diffusion(model: &McDiffusion, path: &Path) -> Result<()> {
    let header = Header {
        model: "diffusion".into(),
        vae_config: None,
        diffusion_config: Some(model.config.clone()),
        schema: model.schema().clone(),
        standardization: None,
        injectors: Some(
            model
                .injectors
                .iter()
                .map(|i| InjectorStats {
                    running_mean: i.running_mean.clone(),
                    running_var: i.running_var.clone(),
                })
                .collect(),
        ),
        tensors: manifest(&model.store),
    };
    write_file(path, &header, &model.store)
}

pub fn load_diffusion(path: &Path) -> Result<McDiffusion> {
    let (header, payload) = read_file(path)?;
    if header.model != "diffusion" {
        return Err(Error::IncompatibleVersion(format!(
            "expected a diffusion checkpoint, found {:?}",
            header.model
        )));
    }
    build_diffusion(header, payload)
}

fn manifest(store: &crate::params::ParamStore) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    store
        .iter()
        .map(|(name, v)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                offset,
            };
            offset += v.len() as u64;
            e
        })
        .collect()
}

fn write_file(path: &Path, header: &Header, store: &crate::params::ParamStore) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, v) in store.iter() {
        for &x in v.iter() {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint("file shorter than the fixed header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::IncompatibleVersion(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::CorruptCheckpoint("header length overflow".into()))?;
    if bytes.len() < payload_start {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::CorruptCheckpoint(format!("malformed header: {e}")))?;
    let payload_bytes = &bytes[payload_start..];
    if payload_bytes.len() % 8 != 0 {
        return Err(Error::CorruptCheckpoint("payload not a whole number of floats".into()));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    validate_manifest(&header.tensors, payload.len() as u64)?;
    Ok((header, payload))
}

/// Manifest entries must be contiguous, non-overlapping and payload-bounded.
fn validate_manifest(tensors: &[TensorEntry], payload_len: u64) -> Result<()> {
    let mut expected = 0u64;
    for e in tensors {
        if e.offset != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {:?} at offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        expected += e.shape.iter().product::<usize>() as u64;
    }
    if expected != payload_len {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest covers {expected} elements, payload holds {payload_len}"
        )));
    }
    Ok(())
}

fn restore_store(
    store: &mut crate::params::ParamStore,
    tensors: &[TensorEntry],
    payload: &[f64],
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} tensors in the manifest, the model declares {}",
            tensors.len(),
            store.len()
        )));
    }
    for e in tensors {
        let idx = store.index_of(&e.name).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("unknown tensor {:?}", e.name))
        })?;
        let v = store.value_mut(idx);
        if v.shape() != e.shape.as_slice() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {:?}: manifest shape {:?}, model shape {:?}",
                e.name,
                e.shape,
                v.shape()
            )));
        }
        let start = e.offset as usize;
        let src = &payload[start..start + v.len()];
        v.as_slice_mut().unwrap().copy_from_slice(src);
    }
    Ok(())
}

fn build_vae(header: Header, payload: Vec<f64>) -> Result<McVae> {
    let config = header
        .vae_config
        .ok_or_else(|| Error::CorruptCheckpoint("vae checkpoint without vae_config".into()))?;
    let mut model = McVae::init(&config, &header.schema, 0)?;
    restore_store(&mut model.store, &header.tensors, &payload)?;
    model.standardization = header.standardization;
    Ok(model)
}

fn build_diffusion(header: Header, payload: Vec<f64>) -> Result<McDiffusion> {
    let config = header.diffusion_config.ok_or_else(|| {
        Error::CorruptCheckpoint("diffusion checkpoint without diffusion_config".into())
    })?;
    let mut model = McDiffusion::init(&config, &header.schema, 0)?;
    restore_store(&mut model.store, &header.tensors, &payload)?;
    let stats = header
        .injectors
        .ok_or_else(|| Error::CorruptCheckpoint("diffusion checkpoint without BN stats".into()))?;
    if stats.len() != model.injectors.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} BN stat blocks for {} injectors",
            stats.len(),
            model.injectors.len()
        )));
    }
    for (inj, s) in model.injectors.iter_mut().zip(stats) {
        if s.running_mean.len() != inj.running_mean.len()
            || s.running_var.len() != inj.running_var.len()
        {
            return Err(Error::CorruptCheckpoint("BN stat width mismatch".into()));
        }
        inj.running_mean = s.running_mean;
        inj.running_var = s.running_var;
    }
    Ok(model)
}
