//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MARGLCKP"
//! version    u32       1
//! config     u32 length + UTF-8 key=value text (the model configuration)
//! meta       u32 length + UTF-8 key=value text (free-form run metadata)
//! blocks     u32 count, then per block:
//!              u16 name length + UTF-8 name
//!              u8 rank, then rank × u32 dimensions
//!              product(dims) × f32 values, row-major
//! ```
//!
//! The relation matrix is stored as the block `graph.intra`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::network::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"MARGLCKP";
pub const VERSION: u32 = 1;
const INTRA_BLOCK: &str = "graph.intra";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub meta: KeyValues,
    pub blocks: Vec<Block>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: KeyValues) -> Self {
        let mut blocks: Vec<Block> = model
            .params()
            .into_iter()
            .map(|p| Block {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let intra = &model.graph().intra;
        blocks.push(Block {
            name: INTRA_BLOCK.into(),
            shape: vec![intra.nrows(), intra.ncols()],
            data: intra.iter().map(|&v| v as f32).collect(),
        });
        Self {
            config: model.config.to_kv(),
            meta,
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for text in [self.config.to_text(), self.meta.to_text()] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated while reading {what}")))?;
            Ok(buf)
        };
        if take(8, "magic")?.as_slice() != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4, "version")?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut texts = Vec::new();
        for what in ["config", "metadata"] {
            let len = u32_at(take(4, what)?) as usize;
            let text = String::from_utf8(take(len, what)?).map_err(|_| bad(format!("{what} is not UTF-8")))?;
            texts.push(KeyValues::parse(&text).map_err(|e| bad(format!("{what}: {e}")))?);
        }
        let count = u32_at(take(4, "block count")?) as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = u16::from_le_bytes(take(2, "block name")?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len, "block name")?)
                .map_err(|_| bad(format!("block {i} name is not UTF-8")))?;
            let rank = take(1, "block rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| take(4, "block shape").map(|b| u32_at(b) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(4 * n, &format!("block {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blocks.push(Block { name, shape, data });
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        let meta = texts.pop().expect("two texts");
        let config = texts.pop().expect("two texts");
        Ok(Self { config, meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.config, ModelConfig::default())
            .map_err(|e| bad(format!("stored configuration is invalid: {e}")))
    }

    /// Rebuilds the model, checking that every parameter is present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config()?, 0)?;
        let mut seen = vec![false; self.blocks.len()];
        for p in model.params_mut() {
            let (i, b) = self
                .blocks
                .iter()
                .enumerate()
                .find(|(_, b)| b.name == p.name)
                .ok_or_else(|| bad(format!("missing parameter block {}", p.name)))?;
            if b.shape != p.shape {
                return Err(bad(format!(
                    "block {} has shape {:?}, model expects {:?}",
                    p.name, b.shape, p.shape
                )));
            }
            p.value = b.data.iter().map(|&v| v as f64).collect();
            seen[i] = true;
        }
        let c = model.config.num_aus;
        let (i, intra) = self
            .blocks
            .iter()
            .enumerate()
            .find(|(_, b)| b.name == INTRA_BLOCK)
            .ok_or_else(|| bad(format!("missing block {INTRA_BLOCK}")))?;
        if intra.shape != [c, c] {
            return Err(bad(format!("{INTRA_BLOCK} has shape {:?}, expected [{c}, {c}]", intra.shape)));
        }
        seen[i] = true;
        let a0 = Array2::from_shape_vec((c, c), intra.data.iter().map(|&v| v as f64).collect())
            .expect("shape checked");
        model.set_intra(a0).map_err(|e| bad(e.to_string()))?;
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("unexpected block {}", self.blocks[i].name)));
        }
        Ok(model)
    }
}

pub fn save_model(model: &Model, meta: KeyValues, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, meta).save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, KeyValues)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model().map_err(|e| match e {
        Error::Checkpoint(m) => bad(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((model, ck.meta))
}
