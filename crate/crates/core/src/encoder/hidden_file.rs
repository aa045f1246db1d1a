//! Binary container for hidden states exported by external models.
//!
//! Layout (little-endian): magic `CAPH`, `u32` version, `u32` record count,
//! then per record a `u16` id length, the UTF-8 id, `u32` h, n, d and
//! `h·n·d` `f32` values (layer-major, then token, then dim). A JSON sidecar
//! `<container>.manifest.json` lists each id with its byte offset and dims.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hidden::{HiddenSourceTag, HiddenStates};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAPH";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Byte offset of the record's id-length field.
    pub offset: u64,
    pub h: u32,
    pub n: u32,
    pub d: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestEntry>,
}

pub fn manifest_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::dim(format!("{what} {v} does not fit the container format")))
}

/// Writes `records` and the manifest sidecar. Values are narrowed to `f32`.
pub fn write_container(path: &Path, records: &[(&str, &HiddenStates)]) -> Result<Manifest> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&to_u32(records.len(), "record count")?.to_le_bytes())?;
    let mut offset = 12u64;
    let mut entries = Vec::with_capacity(records.len());
    for (id, hs) in records {
        let id_len = u16::try_from(id.len()).map_err(|_| Error::dim(format!("id of {} bytes", id.len())))?;
        let (h, n, d) = (to_u32(hs.depth(), "depth")?, to_u32(hs.len(), "length")?, to_u32(hs.dim(), "dim")?);
        entries.push(ManifestEntry { id: id.to_string(), offset, h, n, d });
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for v in [h, n, d] {
            out.write_all(&v.to_le_bytes())?;
        }
        for &v in hs.tensor().data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        offset += 2 + id.len() as u64 + 12 + 4 * hs.tensor().len() as u64;
    }
    out.flush()?;
    let manifest = Manifest { version: VERSION, records: entries };
    std::fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read handle on a container. Loads reopen the file, so one handle can
/// serve concurrent readers.
#[derive(Clone, Debug)]
pub struct HiddenStateFile {
    path: PathBuf,
    manifest: Manifest,
    file_len: u64,
}

impl HiddenStateFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let file_len = f.metadata()?.len();
        let mut header = [0u8; 12];
        f.read_exact(&mut header).map_err(|_| Error::integrity(path, "shorter than the container header"))?;
        if &header[..4] != MAGIC {
            return Err(Error::integrity(path, "bad magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::integrity(path, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let mpath = manifest_path(path);
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
        if manifest.records.len() != count as usize {
            return Err(Error::integrity(
                &mpath,
                format!("manifest lists {} records, container {count}", manifest.records.len()),
            ));
        }
        Ok(Self { path: path.to_path_buf(), manifest, file_len })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.records.iter().map(|r| r.id.as_str())
    }

    pub fn load(&self, id: &str) -> Result<HiddenStates> {
        let entry = self
            .manifest
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::NotFound(format!("instance {id:?} in {}", self.path.display())))?;
        let truncated = || Error::integrity(&self.path, format!("record {id:?} runs past end of file"));
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut len = [0u8; 2];
        f.read_exact(&mut len).map_err(|_| truncated())?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        f.read_exact(&mut name).map_err(|_| truncated())?;
        if name != id.as_bytes() {
            return Err(Error::integrity(&self.path, format!("offset of {id:?} points at another record")));
        }
        let mut dims = [0u8; 12];
        f.read_exact(&mut dims).map_err(|_| truncated())?;
        let dim = |i: usize| u32::from_le_bytes(dims[4 * i..4 * i + 4].try_into().unwrap());
        let (h, n, d) = (dim(0), dim(1), dim(2));
        if (h, n, d) != (entry.h, entry.n, entry.d) {
            return Err(Error::dim(format!(
                "record {id:?}: manifest says {}×{}×{}, record header {h}×{n}×{d}",
                entry.h, entry.n, entry.d
            )));
        }
        let count = h as u64 * n as u64 * d as u64;
        if count == 0 {
            return Err(Error::integrity(&self.path, format!("record {id:?} has an empty extent")));
        }
        let start = f.stream_position()?;
        if start + 4 * count > self.file_len {
            return Err(truncated());
        }
        let mut raw = vec![0u8; 4 * count as usize];
        f.read_exact(&mut raw).map_err(|_| truncated())?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let states = Tensor::new(vec![h as usize, n as usize, d as usize], data)?;
        HiddenStates::new(states, Vec::new(), HiddenSourceTag::File)
    }
}

/// One-shot load of a single record.
pub fn load_hidden_states(path: &Path, id: &str) -> Result<HiddenStates> {
    HiddenStateFile::open(path)?.load(id)
}
