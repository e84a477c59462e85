//! Versioned binary containers for trained weights and calibration grams.
//!
//! Checkpoint file (`.dvc`):
//!
//! ```text
//! magic "DVC1" | u32 version = 1
//! str task | str config_hash | u64 step
//! u32 n_params, then per parameter:
//!   str name | u8 kind (0 linear, 1 conv, 2 other) | u8 rank
//!   rank x u32 dims | dims-product x f64 data
//! ```
//!
//! Gram sidecar (`.dvg`):
//!
//! ```text
//! magic "DVG1" | u32 version = 1
//! u32 n_layers, then per layer:
//!   str name | u32 dim | u64 rows_seen | dim*dim x f64 accumulator
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. All integers and floats
//! are little-endian. Parameter order is preserved, so a load/save round trip
//! is byte-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use duoview_tensor::nn::{GramLayer, GramStats, ParamKind, ParamStore};
use duoview_tensor::Array;

use crate::CoreError;

const CKPT_MAGIC: [u8; 4] = *b"DVC1";
const GRAM_MAGIC: [u8; 4] = *b"DVG1";
const VERSION: u32 = 1;

/// Provenance carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    /// Which task (or combination) the weights were trained for.
    pub task: String,
    /// Hash of the training configuration that produced them.
    pub config_hash: String,
    /// Optimizer steps taken.
    pub step: u64,
}

/// A named parameter map plus its provenance.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

struct Writer<'a> {
    w: BufWriter<fs::File>,
    path: &'a Path,
}

impl<'a> Writer<'a> {
    fn create(path: &'a Path) -> Result<Self, CoreError> {
        let f = fs::File::create(path).map_err(CoreError::io(path.display().to_string()))?;
        Ok(Self { w: BufWriter::new(f), path })
    }

    fn bytes(&mut self, buf: &[u8]) -> Result<(), CoreError> {
        self.w.write_all(buf).map_err(CoreError::io(self.path.display().to_string()))
    }

    fn u32(&mut self, v: u32) -> Result<(), CoreError> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<(), CoreError> {
        self.bytes(&v.to_le_bytes())
    }

    fn str(&mut self, s: &str) -> Result<(), CoreError> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    fn f64s(&mut self, v: &[f64]) -> Result<(), CoreError> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), CoreError> {
        self.w.flush().map_err(CoreError::io(self.path.display().to_string()))
    }
}

struct Reader<'a> {
    r: BufReader<fs::File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self, CoreError> {
        let f = fs::File::open(path).map_err(CoreError::io(path.display().to_string()))?;
        Ok(Self { r: BufReader::new(f), path })
    }

    fn bad(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Format { path: self.path.display().to_string(), detail: detail.into() }
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<(), CoreError> {
        self.r.read_exact(buf).map_err(CoreError::io(self.path.display().to_string()))
    }

    fn u32(&mut self) -> Result<u32, CoreError> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CoreError> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn str(&mut self) -> Result<String, CoreError> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf)?;
        String::from_utf8(buf).map_err(|_| self.bad("string is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CoreError> {
        let mut buf = vec![0u8; n * 8];
        self.bytes(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), CoreError> {
        let mut m = [0u8; 4];
        self.bytes(&mut m)?;
        if &m != want {
            return Err(self.bad("bad magic"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.bad(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CoreError> {
    let mut w = Writer::create(path)?;
    w.bytes(&CKPT_MAGIC)?;
    w.u32(VERSION)?;
    w.str(&ckpt.meta.task)?;
    w.str(&ckpt.meta.config_hash)?;
    w.u64(ckpt.meta.step)?;
    w.u32(ckpt.params.len() as u32)?;
    for (name, param) in ckpt.params.iter() {
        w.str(name)?;
        w.bytes(&[param.kind.code(), param.array.shape().len() as u8])?;
        for &d in param.array.shape() {
            w.u32(d as u32)?;
        }
        w.f64s(param.array.data())?;
    }
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CoreError> {
    let mut r = Reader::open(path)?;
    r.magic(&CKPT_MAGIC)?;
    let meta = CheckpointMeta { task: r.str()?, config_hash: r.str()?, step: r.u64()? };
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let mut head = [0u8; 2];
        r.bytes(&mut head)?;
        let kind = ParamKind::from_code(head[0])
            .ok_or_else(|| r.bad(format!("unknown parameter kind {}", head[0])))?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        let array = Array::new(shape, data).map_err(|e| r.bad(e.to_string()))?;
        if params.contains(&name) {
            return Err(r.bad(format!("duplicate parameter {name}")));
        }
        params.insert(&name, array, kind);
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_grams(path: &Path, grams: &GramStats) -> Result<(), CoreError> {
    let mut w = Writer::create(path)?;
    w.bytes(&GRAM_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(grams.len() as u32)?;
    for (name, layer) in grams.iter() {
        w.str(name)?;
        w.u32(layer.dim as u32)?;
        w.u64(layer.rows_seen)?;
        w.f64s(&layer.gram)?;
    }
    w.finish()
}

pub fn load_grams(path: &Path) -> Result<GramStats, CoreError> {
    let mut r = Reader::open(path)?;
    r.magic(&GRAM_MAGIC)?;
    let n = r.u32()? as usize;
    let mut grams = GramStats::new();
    for _ in 0..n {
        let name = r.str()?;
        let dim = r.u32()? as usize;
        let rows_seen = r.u64()?;
        let gram = r.f64s(dim * dim)?;
        grams.insert_layer(name, GramLayer { dim, rows_seen, gram });
    }
    Ok(grams)
}
