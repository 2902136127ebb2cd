//! One checkpoint format for every model: a versioned header carrying a
//! kind tag and a configuration digest, then named parameter blobs as
//! little-endian 64-bit floats.
//!
//! The digest is the sha256 of the owning model's canonical configuration,
//! so loading against a different configuration fails loudly instead of
//! silently reshaping or reinterpreting weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autoencoder::Autoencoder;
use crate::config::{BottleneckMode, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, LatentHead};
use crate::mapping::{Mapping, MappingVariant};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BOVCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Hex sha256 of a configuration's canonical JSON form.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub digest: String,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| bad(path, format!("truncated reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| bad(path, format!("truncated reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, path: &Path, what: &str) -> Result<String> {
    let len = read_u32(r, path, what)? as usize;
    if len > 1 << 20 {
        return Err(bad(path, format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad(path, format!("truncated reading {what}")))?;
    String::from_utf8(buf).map_err(|_| bad(path, format!("{what} is not valid utf-8")))
}

/// Writes `store` under the given kind tag and configuration digest.
pub fn save(path: &Path, kind: &str, digest: &str, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_bytes(&mut w, kind.as_bytes())?;
    write_bytes(&mut w, digest.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, tensor) in store.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad(path, "file too short for the magic bytes"))?;
    if &magic != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic bytes)"));
    }
    let version = read_u32(r, path, "format version")?;
    if version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!("format version {version} is not the supported {FORMAT_VERSION}"),
        ));
    }
    let kind = read_string(r, path, "kind tag")?;
    let digest = read_string(r, path, "config digest")?;
    Ok(CheckpointHeader { version, kind, digest })
}

/// Reads just the header, for staging and resumability checks.
pub fn peek(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, path)
}

/// Reads the named parameters, verifying kind tag and digest first.
pub fn load(path: &Path, kind: &str, digest: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.kind != kind {
        return Err(bad(path, format!("kind tag is {:?}, expected {kind:?}", header.kind)));
    }
    if header.digest != digest {
        return Err(bad(
            path,
            format!(
                "config digest mismatch: checkpoint was written for {} but the \
                 current configuration digests to {}",
                header.digest, digest
            ),
        ));
    }
    let count = read_u32(&mut r, path, "parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name = read_string(&mut r, path, &format!("name of parameter {i}"))?;
        let rank = read_u32(&mut r, path, &format!("rank of {name}"))? as usize;
        if rank > 2 {
            return Err(bad(path, format!("parameter {name} has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path, &format!("shape of {name}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(bad(path, format!("parameter {name} size {numel} is implausible")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| bad(path, format!("truncated reading data of {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push((name, Tensor::new(shape, data)));
    }
    Ok(params)
}

fn load_into(path: &Path, kind: &str, digest: &str, store: &mut ParamStore) -> Result<()> {
    let params = load(path, kind, digest)?;
    store.load_named(&params).map_err(|reason| bad(path, reason))
}

#[derive(Serialize)]
struct AutoencoderConfigId<'a> {
    vocab_size: usize,
    mode: BottleneckMode,
    config: &'a ModelConfig,
}

pub fn autoencoder_digest(vocab_size: usize, mode: BottleneckMode, config: &ModelConfig) -> String {
    digest_of(&AutoencoderConfigId { vocab_size, mode, config })
}

pub fn save_autoencoder(ae: &Autoencoder, path: &Path) -> Result<()> {
    let digest = autoencoder_digest(ae.vocab_size(), ae.mode(), ae.config());
    save(path, "autoencoder", &digest, ae.store())
}

pub fn load_autoencoder(
    path: &Path,
    vocab_size: usize,
    mode: BottleneckMode,
    config: &ModelConfig,
) -> Result<Autoencoder> {
    let digest = autoencoder_digest(vocab_size, mode, config);
    let mut ae = Autoencoder::new(vocab_size, mode, config, &mut Rng::new(0))?;
    load_into(path, "autoencoder", &digest, ae.store_mut())?;
    Ok(ae)
}

#[derive(Serialize)]
struct HeadConfigId {
    kind: HeadKind,
    d: usize,
}

pub fn head_digest(kind: HeadKind, d: usize) -> String {
    digest_of(&HeadConfigId { kind, d })
}

pub fn save_head(head: &LatentHead, path: &Path) -> Result<()> {
    let digest = head_digest(head.kind(), head.dim());
    save(path, &format!("head.{}", head.kind().name()), &digest, head.store())
}

/// Loads a head and marks it trained; untrained heads are never saved.
pub fn load_head(path: &Path, kind: HeadKind, d: usize) -> Result<LatentHead> {
    let digest = head_digest(kind, d);
    let mut head = LatentHead::new(kind, d, &mut Rng::new(0))?;
    load_into(path, &format!("head.{}", kind.name()), &digest, head.store_mut())?;
    head.mark_trained();
    Ok(head)
}

#[derive(Serialize)]
struct MappingConfigId {
    variant: MappingVariant,
    d: usize,
}

pub fn mapping_digest(variant: MappingVariant, d: usize) -> String {
    digest_of(&MappingConfigId { variant, d })
}

pub fn save_mapping(mapping: &Mapping, path: &Path) -> Result<()> {
    let digest = mapping_digest(mapping.variant(), mapping.dim());
    save(path, &format!("mapping.{}", mapping.variant().name()), &digest, mapping.store())
}

pub fn load_mapping(path: &Path, variant: MappingVariant, d: usize) -> Result<Mapping> {
    let digest = mapping_digest(variant, d);
    let mut mapping = Mapping::new(variant, d, &mut Rng::new(0))?;
    load_into(path, &format!("mapping.{}", variant.name()), &digest, mapping.store_mut())?;
    Ok(mapping)
}

pub fn path_error(path: PathBuf, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path, reason: reason.into() }
}
