//! On-disk formats: 8-bit PNG images, the array container for bias fields and
//! the model checkpoint container.
//!
//! Both binary containers share one layout, all integers little-endian:
//!
//! ```text
//! magic     6 bytes   "ACEARR" or "ACECKP"
//! version   u16
//! dtype     u8        1 = f64
//! reserved  u8
//! meta_len  u32
//! meta      meta_len bytes of UTF-8 JSON (shapes, names, metadata)
//! payload   row-major f64 values of every array, in header order
//! checksum  32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{BiasField, BiasKind};
use crate::autoencoder::AutoencoderBackend;
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::nn::{ParamRole, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Tensor3};
use crate::unet::{ToyUnet, UnetConfig};

pub const ARRAY_MAGIC: &[u8; 6] = b"ACEARR";
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ACECKP";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const PREFIX: usize = 6 + 2 + 1 + 1 + 4;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write an 8-bit PNG; returns the SHA-256 of the encoded file.
pub fn write_png(img: &ImageTensor, path: &Path) -> Result<String> {
    let (h, w, c) = img.shape();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(Error::Format(format!("cannot write a {other}-channel PNG"))),
    };
    let mut buf = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut buf),
        &img.to_u8(),
        w as u32,
        h as u32,
        color,
    )?;
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&buf))
}

/// Read a PNG as RGB (grayscale files stay single-channel).
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => ImageTensor::from_u8(h, w, 1, g.as_raw()),
        other => ImageTensor::from_u8(h, w, 3, other.to_rgb8().as_raw()),
    }
}

fn encode_container<T: Serialize>(magic: &[u8; 6], meta: &T, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let n: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(PREFIX + meta.len() + 8 * n + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(0);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for a in arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Validate and split a container into its metadata and flat payload.
fn decode_container<T: DeserializeOwned>(magic: &[u8; 6], bytes: &[u8], what: &str) -> Result<(T, Vec<f64>)> {
    if bytes.len() < PREFIX + 32 {
        return Err(Error::Checksum(format!("{what}: truncated container")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(what.to_string()));
    }
    if &body[..6] != magic {
        return Err(Error::Format(format!("{what}: bad magic bytes")));
    }
    let version = u16::from_le_bytes([body[6], body[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{what}: unknown version {version}")));
    }
    if body[8] != DTYPE_F64 {
        return Err(Error::Format(format!("{what}: unknown dtype tag {}", body[8])));
    }
    let meta_len = u32::from_le_bytes(body[10..14].try_into().expect("4 bytes")) as usize;
    let payload = body
        .get(PREFIX + meta_len..)
        .ok_or_else(|| Error::Format(format!("{what}: metadata overruns file")))?;
    let meta = serde_json::from_slice(&body[PREFIX..PREFIX + meta_len])?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format(format!("{what}: ragged payload")));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((meta, values))
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    shape: [usize; 3],
    kind: BiasKind,
    timesteps: Vec<usize>,
    mc_samples: usize,
    sources: Vec<String>,
}

pub fn encode_array(field: &BiasField) -> Result<Vec<u8>> {
    let (h, w, c) = field.data.shape();
    let meta = ArrayMeta {
        shape: [h, w, c],
        kind: field.kind,
        timesteps: field.timesteps.clone(),
        mc_samples: field.mc_samples,
        sources: field.sources.clone(),
    };
    encode_container(ARRAY_MAGIC, &meta, &[field.data.as_slice()])
}

pub fn decode_array(bytes: &[u8]) -> Result<BiasField> {
    let (meta, values): (ArrayMeta, _) = decode_container(ARRAY_MAGIC, bytes, "array file")?;
    let [h, w, c] = meta.shape;
    Ok(BiasField {
        kind: meta.kind,
        data: Tensor3::from_vec(h, w, c, values)?,
        timesteps: meta.timesteps,
        mc_samples: meta.mc_samples,
        sources: meta.sources,
    })
}

/// Returns the SHA-256 of the written file.
pub fn export_array(field: &BiasField, path: &Path) -> Result<String> {
    let bytes = encode_array(field)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn import_array(path: &Path) -> Result<BiasField> {
    decode_array(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleMeta {
    pub fn of(s: &NoiseSchedule) -> Self {
        Self {
            timesteps: s.timesteps(),
            beta_start: s.beta_start(),
            beta_end: s.beta_end(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Backbone weights, plus adapters when present.
    Full,
    /// Adapter weights only, to be applied on a matching backbone.
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub unet: UnetConfig,
    pub adapter_rank: Option<usize>,
    /// Hash of the backbone the adapters were trained on.
    pub base_hash: String,
    pub schedule: ScheduleMeta,
    pub backend: AutoencoderBackend,
    arrays: Vec<ArrayEntry>,
}

/// A model with the schedule and autoencoder it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyUnet,
    pub schedule: NoiseSchedule,
    pub backend: AutoencoderBackend,
}

fn checkpoint_bytes(
    kind: CheckpointKind,
    model: &ToyUnet,
    sched: &NoiseSchedule,
    backend: &AutoencoderBackend,
) -> Result<Vec<u8>> {
    let keep = |role: ParamRole| kind == CheckpointKind::Full || role.is_adapter();
    let selected: Vec<_> = model.params().iter().filter(|p| keep(p.role)).collect();
    if selected.is_empty() {
        return Err(Error::invalid("model has no adapters to save"));
    }
    let meta = CheckpointMeta {
        kind,
        unet: model.config().clone(),
        adapter_rank: model.adapter_rank(),
        base_hash: model.base_hash(),
        schedule: ScheduleMeta::of(sched),
        backend: backend.clone(),
        arrays: selected
            .iter()
            .map(|p| ArrayEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                role: p.role,
            })
            .collect(),
    };
    let data: Vec<&[f64]> = selected.iter().map(|p| p.data.as_slice()).collect();
    encode_container(CHECKPOINT_MAGIC, &meta, &data)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore)> {
    let (meta, values): (CheckpointMeta, Vec<f64>) = decode_container(CHECKPOINT_MAGIC, bytes, "checkpoint")?;
    let mut store = ParamStore::new();
    let mut offset = 0;
    for a in &meta.arrays {
        let n: usize = a.shape.iter().product();
        let data = values
            .get(offset..offset + n)
            .ok_or_else(|| Error::Format(format!("checkpoint payload too short for `{}`", a.name)))?;
        store.push(a.name.clone(), a.shape.clone(), a.role, data.to_vec());
        offset += n;
    }
    if offset != values.len() {
        return Err(Error::Format("checkpoint payload has trailing values".into()));
    }
    Ok((meta, store))
}

/// Save backbone (and any adapter) weights; returns the file hash.
pub fn save_checkpoint(model: &ToyUnet, sched: &NoiseSchedule, backend: &AutoencoderBackend, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(CheckpointKind::Full, model, sched, backend)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Save only the adapter weights of a finetuned model.
pub fn save_adapters(model: &ToyUnet, sched: &NoiseSchedule, backend: &AutoencoderBackend, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(CheckpointKind::Adapters, model, sched, backend)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, store) = parse_checkpoint(&bytes)?;
    if meta.kind != CheckpointKind::Full {
        return Err(Error::Format("adapter checkpoint needs a backbone; use load_adapters".into()));
    }
    let mut model = ToyUnet::new(meta.unet.clone(), 0);
    if let Some(rank) = meta.adapter_rank {
        model.attach_adapters(rank, 0)?;
    }
    model.params_mut().load_from(&store)?;
    if model.params().len() != store.len() {
        return Err(Error::Format("checkpoint has parameters the model does not".into()));
    }
    Ok(Checkpoint {
        model,
        schedule: meta.schedule.build()?,
        backend: meta.backend,
    })
}

/// Apply an adapter checkpoint to `base`, optionally folding the adapters
/// into the base weights.
pub fn load_adapters(base: &ToyUnet, path: &Path, merge: bool) -> Result<ToyUnet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, store) = parse_checkpoint(&bytes)?;
    if meta.kind != CheckpointKind::Adapters {
        return Err(Error::Format("not an adapter checkpoint".into()));
    }
    if meta.base_hash != base.base_hash() {
        return Err(Error::invalid("adapter checkpoint was trained on a different backbone"));
    }
    let rank = meta.adapter_rank.ok_or_else(|| Error::Format("adapter checkpoint without rank".into()))?;
    let mut model = base.clone();
    if model.has_adapters() {
        return Err(Error::invalid("backbone already carries adapters"));
    }
    model.attach_adapters(rank, 0)?;
    let mut full = model.params().clone();
    for p in full.iter_mut().filter(|p| p.role.is_adapter()) {
        let src = store
            .iter()
            .find(|q| q.name == p.name && q.shape == p.shape)
            .ok_or_else(|| Error::Format(format!("adapter checkpoint lacks `{}`", p.name)))?;
        p.data.clone_from(&src.data);
    }
    model.params_mut().load_from(&full)?;
    if merge {
        model.merge_adapters();
    }
    Ok(model)
}
