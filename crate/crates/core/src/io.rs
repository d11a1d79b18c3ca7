//! On-disk formats.
//!
//! # Dataset container
//!
//! A directory holding `manifest.json` and one blob per sequence,
//! `seq_00000.bin`, `seq_00001.bin`, ... Each blob is a sequence of
//! little-endian IEEE-754 single-precision floats, row-major, with sections in
//! this order and no padding:
//!
//! | section        | shape             |
//! |----------------|-------------------|
//! | `velocity`     | `[T, 2, K, L]`    |
//! | `density`      | `[T, K, L]`       |
//! | `masks`        | `[R, N, K, L]`    |
//! | `projections`  | `[N, 2, K, L]`    |
//! | `observations` | `[T, 2, N, K, L]` |
//!
//! `R` is the number of radar ranges listed in the manifest. The manifest
//! records the generation settings, grid, normalization, per-sequence radar
//! positions and `content_hash`: the lowercase hex SHA-256 of the manifest
//! JSON serialized with an empty `content_hash`, followed by every blob in
//! order. Loading recomputes the hash and checks every blob size.
//!
//! # Checkpoint
//!
//! A single file:
//!
//! | bytes    | content                                              |
//! |----------|------------------------------------------------------|
//! | 8        | magic `RFLWCKPT`                                     |
//! | 4        | format version, `u32` little-endian                  |
//! | 8        | header length `h`, `u64` little-endian               |
//! | `h`      | header JSON: model settings, run info, tensor names, shapes |
//! | ...      | every tensor as little-endian `f64`, in header order |
//! | 32       | SHA-256 of all preceding bytes                       |
//!
//! Parameters are stored in double precision whatever the training precision.
//!
//! # Reconstructions
//!
//! Same framing as a checkpoint with magic `RFLWRECN`: the header JSON
//! describes the method, range, grid and channel count; the body holds one
//! `[T, C, K, L]` little-endian `f32` array per test sequence, in header
//! order, followed by the SHA-256 of everything before it. `C` is 3
//! (`vx, vy, q`) for methods that reconstruct densities and 2 for VVP.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::VaeConfig;
use crate::data::{Dataset, DatasetConfig, RecordShape, SequenceRecord};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, NormalizationSpec};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::radar::RadarRange;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "radarflow-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFLWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RECONSTRUCTION_MAGIC: &[u8; 8] = b"RFLWRECN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub file: String,
    pub radars: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub geometry: GridGeometry,
    pub normalization: NormalizationSpec,
    pub sections: Vec<(String, usize)>,
    pub sequences: Vec<SequenceEntry>,
    pub content_hash: String,
}

fn blob_name(i: usize) -> String {
    format!("seq_{i:05}.bin")
}

fn f32_bytes(parts: &[&[f32]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len() * 4).sum());
    for p in parts {
        for v in *p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn record_bytes(r: &SequenceRecord) -> Vec<u8> {
    f32_bytes(&[&r.velocity, &r.density, &r.masks, &r.projections, &r.observations])
}

fn content_hash(manifest: &Manifest, blobs: &[Vec<u8>]) -> Result<String> {
    let mut m = manifest.clone();
    m.content_hash.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&m)?);
    for b in blobs {
        h.update(b);
    }
    Ok(hex::encode(h.finalize()))
}

fn manifest_for(ds: &Dataset) -> Manifest {
    let shape = ds.shape();
    Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: ds.config.clone(),
        geometry: ds.geometry,
        normalization: ds.normalization,
        sections: shape.sections().iter().map(|(n, len)| (n.to_string(), *len)).collect(),
        sequences: ds.sequences.iter().enumerate().map(|(i, s)| SequenceEntry { file: blob_name(i), radars: s.radars.clone() }).collect(),
        content_hash: String::new(),
    }
}

/// Content hash the container of `ds` would carry.
pub fn dataset_hash(ds: &Dataset) -> Result<String> {
    let blobs: Vec<_> = ds.sequences.iter().map(record_bytes).collect();
    content_hash(&manifest_for(ds), &blobs)
}

/// Writes a dataset container into `dir`, creating it if needed. Returns the content hash.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<String> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let blobs: Vec<_> = ds.sequences.iter().map(record_bytes).collect();
    let mut manifest = manifest_for(ds);
    manifest.content_hash = content_hash(&manifest, &blobs)?;
    for (entry, blob) in manifest.sequences.iter().zip(&blobs) {
        fs::write(dir.join(&entry.file), blob)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest.content_hash)
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Reads and verifies a dataset container.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown container format `{}`", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported container version {}", manifest.version)));
    }
    let shape = RecordShape {
        frames: manifest.config.simulation.frames,
        radars: manifest.config.radars,
        ranges: manifest.config.ranges.len(),
        cells: manifest.geometry.cells(),
    };
    let expected: Vec<(String, usize)> = shape.sections().iter().map(|(n, l)| (n.to_string(), *l)).collect();
    if manifest.sections != expected {
        return Err(Error::Format(format!("section table {:?} does not match the declared shapes {expected:?}", manifest.sections)));
    }
    let mut blobs = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != 4 * shape.total() {
            return Err(Error::Format(format!("{} holds {} bytes, expected {}", entry.file, bytes.len(), 4 * shape.total())));
        }
        blobs.push(bytes);
    }
    let found = content_hash(&manifest, &blobs)?;
    if found != manifest.content_hash {
        return Err(Error::HashMismatch { expected: manifest.content_hash.clone(), found });
    }
    let sequences = manifest
        .sequences
        .iter()
        .zip(&blobs)
        .map(|(entry, bytes)| {
            let mut values = read_f32(bytes).into_iter();
            let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f32>>();
            let [v, rho, m, p, o] = shape.sections().map(|(_, n)| n);
            SequenceRecord {
                radars: entry.radars.clone(),
                velocity: take(v),
                density: take(rho),
                masks: take(m),
                projections: take(p),
                observations: take(o),
            }
        })
        .collect();
    let ds = Dataset { config: manifest.config, geometry: manifest.geometry, normalization: manifest.normalization, sequences };
    ds.validate()?;
    Ok(ds)
}

/// Which network a checkpoint belongs to, with its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Ours { config: ModelConfig },
    Vae { config: VaeConfig },
}

/// Provenance of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub range: RadarRange,
    pub n_train: usize,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub validation_loss: Option<f64>,
    pub normalization: NormalizationSpec,
    pub dataset_hash: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub info: RunInfo,
    pub params: ParamStore<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelKind,
    info: RunInfo,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let header = CheckpointHeader {
        model: ckpt.model.clone(),
        info: ckpt.info.clone(),
        tensors: p
            .ids()
            .map(|id| TensorEntry { name: p.name(id).to_string(), shape: p.get(id).shape().to_vec(), trainable: p.is_trainable(id) })
            .collect(),
    };
    let mut data = Vec::with_capacity(8 * p.iter().map(|(_, t)| t.len()).sum::<usize>());
    for (_, t) in p.iter() {
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(frame(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &data))
}

fn frame(magic: &[u8; 8], header: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + header.len() + data.len() + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Splits a framed file into header JSON and data after checking magic,
/// version and checksum.
fn unframe<'a>(magic: &[u8; 8], what: &str, bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    let fixed = magic.len() + 4 + 8;
    if bytes.len() < fixed + 32 {
        return Err(Error::Format(format!("{what} truncated to {} bytes", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported {what} version {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(format!("{what} checksum mismatch")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if header_len > body.len() - fixed {
        return Err(Error::Format(format!("{what} header length exceeds file size")));
    }
    Ok((&body[fixed..fixed + header_len], &body[fixed + header_len..]))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, data) = unframe(CHECKPOINT_MAGIC, "checkpoint", bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(header)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != 8 * total {
        return Err(Error::Format(format!("checkpoint holds {} data bytes, header declares {}", data.len(), 8 * total)));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamStore::new();
    for t in header.tensors {
        if params.find(&t.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", t.name)));
        }
        let n = t.shape.iter().product();
        let tensor = Tensor::new(&t.shape, values.by_ref().take(n).collect());
        if t.trainable {
            params.add(t.name, tensor);
        } else {
            params.add_fixed(t.name, tensor);
        }
    }
    Ok(Checkpoint { model: header.model, info: header.info, params })
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionHeader {
    pub method: String,
    pub range: RadarRange,
    pub geometry: GridGeometry,
    pub frames: usize,
    pub channels: usize,
    /// Dataset sequence ids, one per stored array.
    pub sequences: Vec<usize>,
}

/// Reconstructed test sequences, each `[T, C, K, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructions {
    pub header: ReconstructionHeader,
    pub data: Vec<Vec<f32>>,
}

impl Reconstructions {
    fn per_sequence(&self) -> usize {
        let h = &self.header;
        h.frames * h.channels * h.geometry.cells()
    }
}

pub fn reconstructions_bytes(r: &Reconstructions) -> Result<Vec<u8>> {
    let per = r.per_sequence();
    if r.data.len() != r.header.sequences.len() || r.data.iter().any(|d| d.len() != per) {
        return Err(Error::Shape("reconstruction arrays do not match their header".into()));
    }
    let parts: Vec<&[f32]> = r.data.iter().map(|d| d.as_slice()).collect();
    Ok(frame(RECONSTRUCTION_MAGIC, &serde_json::to_vec(&r.header)?, &f32_bytes(&parts)))
}

pub fn reconstructions_from_bytes(bytes: &[u8]) -> Result<Reconstructions> {
    let (header, data) = unframe(RECONSTRUCTION_MAGIC, "reconstruction", bytes)?;
    let header: ReconstructionHeader = serde_json::from_slice(header)?;
    let r = Reconstructions { header, data: Vec::new() };
    let per = r.per_sequence();
    if data.len() != 4 * per * r.header.sequences.len() {
        return Err(Error::Format(format!(
            "reconstruction holds {} data bytes, header declares {}",
            data.len(),
            4 * per * r.header.sequences.len()
        )));
    }
    let values = read_f32(data);
    let data = if per == 0 { vec![Vec::new(); r.header.sequences.len()] } else { values.chunks(per).map(|c| c.to_vec()).collect() };
    Ok(Reconstructions { data, ..r })
}

pub fn save_reconstructions(r: &Reconstructions, path: &Path) -> Result<()> {
    write_atomic(path, &reconstructions_bytes(r)?)
}

pub fn load_reconstructions(path: &Path) -> Result<Reconstructions> {
    reconstructions_from_bytes(&fs::read(path)?)
}
