//! `LMCK` checkpoints: magic, version, metadata text, named-tensor table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ParamStore;
use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const MAGIC: &[u8; 4] = b"LMCK";
pub const VERSION: u32 = 1;

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form text; the trainers store the TOML config used for the run.
    pub metadata: String,
    pub tensors: Vec<(String, DenseTensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: &str) -> Self {
        Self {
            metadata: metadata.to_string(),
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_str(w, &self.metadata)?;
        binio::write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            binio::write_str(w, name)?;
            t.write_body(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MAGIC, "checkpoint")?;
        let version = binio::read_u32(r)?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let metadata = binio::read_str(r, "checkpoint")?;
        let count = binio::read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = binio::read_str(r, "checkpoint")?;
            tensors.push((name, DenseTensor::read_body(r)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }
}
