//! Framed binary container of named `f64` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCL1"  u32 version
//! repeated: u64 name_len, name bytes (UTF-8), u64 rank, rank × u64 dims,
//!           product(dims) × f64 payload
//! ```
//!
//! The same container stores run checkpoints and cached tasks.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::classifier::Batch;
use crate::ndcore::{FlatVector, LayoutMap, Matrix};
use crate::tasks::{Task, TaskDescriptor};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MCL1";
pub const FORMAT_VERSION: u32 = 1;

/// Name of the record holding the SHA-256 of the resolved config.
pub const CONFIG_HASH_RECORD: &str = "config_sha256";

const DESCRIPTOR_PREFIX: &str = "descriptor:";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "record {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::arg(format!("duplicate record name {name}")));
        }
        self.records.push(Record { name, dims, data });
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &FlatVector) -> Result<()> {
        self.push(name, vec![v.len()], v.as_slice().to_vec())
    }

    /// One rank-2 record per layout segment, named `{prefix}/{segment}`.
    pub fn push_layers(&mut self, prefix: &str, layout: &LayoutMap, flat: &FlatVector) -> Result<()> {
        for (seg, m) in layout.segments().iter().zip(layout.unflatten(flat)?) {
            self.push_matrix(format!("{prefix}/{}", seg.name), &m)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("checkpoint has no record named {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let r = self.require(name)?;
        match r.dims[..] {
            [rows, cols] => Matrix::from_vec(rows, cols, r.data.clone()),
            _ => Err(Error::format(format!("record {name} has rank {}, expected 2", r.dims.len()))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<FlatVector> {
        Ok(FlatVector::new(self.require(name)?.data.clone()))
    }

    /// Inverse of [`Checkpoint::push_layers`].
    pub fn layers(&self, prefix: &str, layout: &LayoutMap) -> Result<FlatVector> {
        let mats = layout
            .segments()
            .iter()
            .map(|seg| self.matrix(&format!("{prefix}/{}", seg.name)))
            .collect::<Result<Vec<_>>>()?;
        layout.flatten(&mats.iter().collect::<Vec<_>>())
    }

    pub fn set_config_hash(&mut self, digest: &[u8; 32]) -> Result<()> {
        let words = digest
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        self.push(CONFIG_HASH_RECORD, vec![8], words)
    }

    /// Lowercase hex of the stored config digest.
    pub fn config_hash_hex(&self) -> Option<String> {
        let r = self.get(CONFIG_HASH_RECORD)?;
        if r.data.len() != 8 {
            return None;
        }
        Some(r.data.iter().map(|&w| format!("{:08x}", w as u32)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u64).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut ckpt = Checkpoint::new();
        while cur.pos < bytes.len() {
            let name_len = cur.len_field()?;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format("record name is not UTF-8"))?
                .to_string();
            let rank = cur.len_field()?;
            let dims = (0..rank).map(|_| cur.len_field()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(format!("record {name}: dims {dims:?} overflow")))?;
            let payload = cur.take(count.checked_mul(8).ok_or_else(|| Error::format("payload size overflow"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ckpt.push(name, dims, data)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("checkpoint truncated at byte {}", self.pos),
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn len_field(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(format!("length field {v} does not fit in memory")))
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn push_batch(ckpt: &mut Checkpoint, split: &str, b: &Batch) -> Result<()> {
    ckpt.push_matrix(format!("{split}/inputs"), b.inputs())?;
    let labels = b.labels().iter().map(|&l| l as f64).collect();
    ckpt.push(format!("{split}/labels"), vec![b.len()], labels)?;
    ckpt.push(format!("{split}/num_classes"), vec![1], vec![b.num_classes() as f64])
}

fn read_batch(ckpt: &Checkpoint, split: &str) -> Result<Batch> {
    let inputs = ckpt.matrix(&format!("{split}/inputs"))?;
    let labels = ckpt.require(&format!("{split}/labels"))?.data.iter().map(|&l| l as usize).collect();
    let classes = ckpt.require(&format!("{split}/num_classes"))?.data.first().copied().unwrap_or(0.0) as usize;
    Batch::new(inputs, labels, classes)
}

/// Stores a task with its descriptor JSON in an empty record's name.
pub fn save_task(task: &Task, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    let json = serde_json::to_string(&task.descriptor).map_err(|e| Error::format(e.to_string()))?;
    ckpt.push(format!("{DESCRIPTOR_PREFIX}{json}"), vec![0], Vec::new())?;
    push_batch(&mut ckpt, "train", &task.train)?;
    push_batch(&mut ckpt, "valid", &task.valid)?;
    push_batch(&mut ckpt, "test", &task.test)?;
    ckpt.save(path)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<Task> {
    let ckpt = Checkpoint::load(path)?;
    let json = ckpt
        .records
        .iter()
        .find_map(|r| r.name.strip_prefix(DESCRIPTOR_PREFIX))
        .ok_or_else(|| Error::format("cached task has no descriptor record"))?;
    let descriptor: TaskDescriptor = serde_json::from_str(json).map_err(|e| Error::format(e.to_string()))?;
    Ok(Task {
        train: read_batch(&ckpt, "train")?,
        valid: read_batch(&ckpt, "valid")?,
        test: read_batch(&ckpt, "test")?,
        descriptor,
    })
}
