//! Model checkpoint files.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "S2FTCKPT"
//! version  u32      1
//! kind     u32      1 = transformer block stack, 2 = deep linear chain
//! block stack: n_blocks u32, d u32, h u32, k u32,
//!              then per block the weights Wq, Wk, Wv, Wo, Wup, Wgate, Wdown
//!              as row-major f64
//! chain:       n_dims u32, dims as u32s, then W_1..W_L row-major f64
//! ```
//!
//! A JSON sidecar `<path>.json` records dims and the seed used to create the
//! model (if any).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{DeepLinearNet, TransformerBlockSpec, TransformerModel, BLOCK_WEIGHTS};

const MAGIC: &[u8; 8] = b"S2FTCKPT";
const VERSION: u32 = 1;
const KIND_BLOCK: u32 = 1;
const KIND_CHAIN: u32 = 2;

#[derive(Debug, Clone)]
pub enum ModelCheckpoint {
    Block(TransformerModel),
    Chain(DeepLinearNet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub schema_version: u32,
    pub kind: String,
    pub dims: serde_json::Value,
    pub seed: Option<u64>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint, seed: Option<u64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let sidecar = match ckpt {
        ModelCheckpoint::Block(model) => {
            write_u32(&mut w, KIND_BLOCK)?;
            let b0 = &model.blocks[0];
            write_u32(&mut w, model.blocks.len() as u32)?;
            write_u32(&mut w, b0.d as u32)?;
            write_u32(&mut w, b0.h as u32)?;
            write_u32(&mut w, b0.k_inner as u32)?;
            for block in &model.blocks {
                for kind in BLOCK_WEIGHTS {
                    write_matrix(&mut w, block.weight(kind))?;
                }
            }
            CheckpointSidecar {
                schema_version: VERSION,
                kind: "block".into(),
                dims: serde_json::json!({
                    "n_blocks": model.blocks.len(),
                    "d": b0.d, "h": b0.h, "k": b0.k_inner,
                }),
                seed,
            }
        }
        ModelCheckpoint::Chain(net) => {
            write_u32(&mut w, KIND_CHAIN)?;
            let dims = net.dims();
            write_u32(&mut w, dims.len() as u32)?;
            for d in &dims {
                write_u32(&mut w, *d as u32)?;
            }
            for layer in &net.layers {
                write_matrix(&mut w, layer)?;
            }
            CheckpointSidecar {
                schema_version: VERSION,
                kind: "chain".into(),
                dims: serde_json::json!({ "dims": dims }),
                seed,
            }
        }
    };
    w.flush()?;
    let sidecar_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path, json)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic in {}", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    match read_u32(&mut r)? {
        KIND_BLOCK => {
            let n_blocks = read_u32(&mut r)? as usize;
            let d = read_u32(&mut r)? as usize;
            let h = read_u32(&mut r)? as usize;
            let k = read_u32(&mut r)? as usize;
            let mut blocks = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                blocks.push(TransformerBlockSpec {
                    d,
                    h,
                    k_inner: k,
                    wq: read_matrix(&mut r, d, d)?,
                    wk: read_matrix(&mut r, d, d)?,
                    wv: read_matrix(&mut r, d, d)?,
                    wo: read_matrix(&mut r, d, d)?,
                    wup: read_matrix(&mut r, k, d)?,
                    wgate: read_matrix(&mut r, k, d)?,
                    wdown: read_matrix(&mut r, d, k)?,
                });
            }
            Ok(ModelCheckpoint::Block(TransformerModel { blocks }))
        }
        KIND_CHAIN => {
            let n_dims = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(n_dims);
            for _ in 0..n_dims {
                dims.push(read_u32(&mut r)? as usize);
            }
            let mut layers = Vec::with_capacity(n_dims.saturating_sub(1));
            for w in dims.windows(2) {
                layers.push(read_matrix(&mut r, w[1], w[0])?);
            }
            Ok(ModelCheckpoint::Chain(DeepLinearNet::new(layers)?))
        }
        other => Err(Error::Format(format!("unknown checkpoint kind {other}"))),
    }
}
