//! Binary checkpoint: magic, version, config header, then every tensor as
//! `rows: u32, cols: u32, data: [f64]`, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Talker, TalkerConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::ndcompute::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDMTALK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_err<T>(reason: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    })
}

fn header(cfg: &TalkerConfig) -> [u32; 13] {
    [
        cfg.vocab.size as u32,
        cfg.vocab.mask,
        cfg.vocab.eos,
        cfg.vocab.pad,
        cfg.source_vocab as u32,
        cfg.d_model as u32,
        cfg.heads as u32,
        cfg.layers as u32,
        cfg.d_ff as u32,
        cfg.fusion_ff as u32,
        cfg.block_size as u32,
        cfg.anchors as u32,
        cfg.max_len as u32,
    ]
}

pub fn write_checkpoint<W: Write>(talker: &Talker, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in header(talker.config()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in talker.tensors() {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.data().len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).or_else(|_| fmt_err("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Talker> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).or_else(|_| fmt_err("file too short"))?;
    if &magic != CHECKPOINT_MAGIC {
        return fmt_err("bad magic bytes");
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return fmt_err(format!("unsupported version {version}"));
    }
    let mut h = [0u32; 13];
    for v in h.iter_mut() {
        *v = read_u32(&mut r)?;
    }
    let cfg = TalkerConfig {
        vocab: Vocabulary {
            size: h[0] as usize,
            mask: h[1],
            eos: h[2],
            pad: h[3],
        },
        source_vocab: h[4] as usize,
        d_model: h[5] as usize,
        heads: h[6] as usize,
        layers: h[7] as usize,
        d_ff: h[8] as usize,
        fusion_ff: h[9] as usize,
        block_size: h[10] as usize,
        anchors: h[11] as usize,
        max_len: h[12] as usize,
    };
    cfg.validate()?;
    let mut tensors = Vec::new();
    for (i, (er, ec)) in cfg.param_shapes().into_iter().enumerate() {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if (rows, cols) != (er, ec) {
            return fmt_err(format!(
                "tensor {} is {rows}x{cols}, header implies {er}x{ec}",
                Talker::tensor_name(&cfg, i)
            ));
        }
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf).or_else(|_| fmt_err("truncated tensor data"))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return fmt_err("trailing bytes after last tensor");
    }
    Talker::from_tensors(cfg, tensors)
}

pub fn save_checkpoint(talker: &Talker, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(talker, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Talker> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
