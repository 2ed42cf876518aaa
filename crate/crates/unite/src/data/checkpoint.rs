//! Checkpoint container: a length-prefixed JSON manifest followed by
//! concatenated tensor-file payloads.
//!
//! The manifest carries the step counter, an echo of the run configuration,
//! and the word positions of every rng stream, so a load reproduces training
//! bit-exactly from the saved step.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file;
use crate::error::{Result, UniteError};
use crate::tensor::{ParamTag, Tensor};

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub tag: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's file blob, relative to the blob region.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub step: u64,
    /// Echo of the run configuration this state was produced under.
    pub config: serde_json::Value,
    /// Stream name -> ChaCha word position (u128 as decimal string).
    pub rng_pos: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    pub rng_pos: BTreeMap<String, u128>,
    /// Tensors in manifest order.
    pub tensors: Vec<(String, ParamTag, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
            .ok_or_else(|| UniteError::Format(format!("checkpoint missing tensor `{name}`")))
    }

    pub fn rng(&self, name: &str) -> Result<u128> {
        self.rng_pos
            .get(name)
            .copied()
            .ok_or_else(|| UniteError::Format(format!("checkpoint missing rng stream `{name}`")))
    }
}

pub fn save(
    path: impl AsRef<Path>,
    step: u64,
    config: &serde_json::Value,
    rng_pos: &BTreeMap<String, u128>,
    tensors: &[(String, ParamTag, &Tensor)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, tag, t) in tensors {
        let offset = blob.len() as u64;
        tensor_file::write_to(&mut blob, t)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            tag: tag.as_str().to_string(),
            shape: t.shape.clone(),
            offset,
        });
    }
    let header = Header {
        version: VERSION,
        step,
        config: config.clone(),
        rng_pos: rng_pos.iter().map(|(k, v)| (k.clone(), v.to_string())).collect(),
        entries,
    };
    let hbytes = serde_json::to_vec(&header)
        .map_err(|e| UniteError::Format(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(hbytes.len() as u32).to_le_bytes())?;
    w.write_all(&hbytes)?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(UniteError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut lb = [0u8; 4];
    r.read_exact(&mut lb)?;
    let hlen = u32::from_le_bytes(lb) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| UniteError::Format(format!("header decode: {e}")))?;
    if header.version != VERSION {
        return Err(UniteError::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let mut cur = Cursor::new(&blob[e.offset as usize..]);
        let t = tensor_file::read_from(&mut cur)?;
        if t.shape != e.shape {
            return Err(UniteError::Format(format!(
                "tensor `{}` shape {:?} disagrees with manifest {:?}",
                e.name, t.shape, e.shape
            )));
        }
        tensors.push((e.name.clone(), ParamTag::parse(&e.tag)?, t));
    }
    let mut rng_pos = BTreeMap::new();
    for (k, v) in &header.rng_pos {
        let pos: u128 = v
            .parse()
            .map_err(|_| UniteError::Format(format!("bad rng position `{v}`")))?;
        rng_pos.insert(k.clone(), pos);
    }
    Ok(Checkpoint { step: header.step, config: header.config, rng_pos, tensors })
}
