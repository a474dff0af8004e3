//! Binary record files and the directory manifest.
//!
//! Record layout, little-endian:
//!
//! ```text
//! "FKVC" | version u32 | chunk_id [u8; 16] | variant u8 | native_start u32
//! layers u16 | heads u16 | head_dim u16 | tokens u32
//! per layer: K (tokens*heads*head_dim f32), then V
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChunkKVRecord, Variant};
use crate::bytes::Reader;
use crate::corpus::ChunkId;
use crate::error::{Error, Result};
use crate::kv::{LayerKv, LayeredKV};

pub const RECORD_MAGIC: &[u8; 4] = b"FKVC";
pub const RECORD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn serialize_record(rec: &ChunkKVRecord) -> Vec<u8> {
    let kv = &rec.kv;
    let mut out = Vec::with_capacity(41 + rec.size_bytes() as usize);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&rec.chunk_id.0);
    out.push(rec.variant as u8);
    out.extend_from_slice(&rec.native_start.to_le_bytes());
    out.extend_from_slice(&(kv.num_layers() as u16).to_le_bytes());
    out.extend_from_slice(&(kv.heads() as u16).to_le_bytes());
    out.extend_from_slice(&(kv.head_dim() as u16).to_le_bytes());
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    for l in kv.layers() {
        for x in l.k.iter().chain(&l.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn deserialize_record(bytes: &[u8]) -> Result<ChunkKVRecord> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != RECORD_MAGIC {
        return Err(Error::BadMagic { expected: "FKVC" });
    }
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::VersionMismatch { expected: RECORD_VERSION, found: version });
    }
    let chunk_id = ChunkId(r.take(16)?.try_into().unwrap());
    let variant = match r.u8()? {
        0 => Variant::Isolated,
        1 => Variant::Fused,
        v => return Err(Error::Contract(format!("unknown record variant {v}"))),
    };
    let native_start = r.u32()?;
    let layers = r.u16()? as usize;
    let heads = r.u16()? as usize;
    let head_dim = r.u16()? as usize;
    let tokens = r.u32()? as usize;
    let n = tokens * heads * head_dim;
    let mut kv_layers = Vec::with_capacity(layers);
    for _ in 0..layers {
        let k = r.f32s(n)?;
        let v = r.f32s(n)?;
        kv_layers.push(LayerKv { k, v });
    }
    if r.remaining() != 0 {
        return Err(Error::Contract(format!("{} trailing bytes in record", r.remaining())));
    }
    let positions = (native_start..native_start + tokens as u32).collect();
    let kv = LayeredKV::from_parts(kv_layers, positions, heads, head_dim)?;
    ChunkKVRecord::new(chunk_id, kv, variant)
}

pub fn write_record_file(path: &Path, rec: &ChunkKVRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so readers never observe a partial file
    let tmp = path.with_extension("fkvc.tmp");
    fs::write(&tmp, serialize_record(rec)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_record_file(path: &Path) -> Result<ChunkKVRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_record(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub variant: Variant,
    pub native_start: u32,
}

/// `manifest.json`: chunk id (hex) to record file, plus the system prompt cache.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<ManifestEntry>,
    pub records: BTreeMap<ChunkId, ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn record_path(dir: &Path, id: &ChunkId) -> PathBuf {
        dir.join("records").join(format!("{}.fkvc", id.to_hex()))
    }
}

/// Writes `records` and the system prompt cache under `dir` with a manifest.
pub fn write_store_dir(
    dir: &Path,
    system: Option<&ChunkKVRecord>,
    records: &[&ChunkKVRecord],
) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    if let Some(sys) = system {
        let rel = "system.fkvc".to_string();
        write_record_file(&dir.join(&rel), sys)?;
        manifest.system = Some(ManifestEntry {
            path: rel,
            variant: sys.variant,
            native_start: sys.native_start,
        });
    }
    for rec in records {
        let rel = format!("records/{}.fkvc", rec.chunk_id.to_hex());
        write_record_file(&dir.join(&rel), rec)?;
        manifest.records.insert(
            rec.chunk_id,
            ManifestEntry { path: rel, variant: rec.variant, native_start: rec.native_start },
        );
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loads every record listed in the manifest under `dir`.
pub fn read_store_dir(dir: &Path) -> Result<(Option<ChunkKVRecord>, Vec<ChunkKVRecord>)> {
    let manifest = Manifest::load(dir)?;
    let system = manifest
        .system
        .as_ref()
        .map(|e| read_record_file(&dir.join(&e.path)))
        .transpose()?;
    let records = manifest
        .records
        .values()
        .map(|e| read_record_file(&dir.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((system, records))
}
