//! Checkpoint serialization.
//!
//! Layout: the magic line `TRIEQCKPT v1`, one JSON header line (config,
//! vocab hash, tensor manifest, training metadata, optimizer-state flag),
//! then every parameter tensor as raw little-endian f32 in manifest order,
//! then, if present, the optimizer's first and second moments in the same
//! order. Loading what was saved is bit-identical at the file level.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::{Model, ModelConfig, ModelError};

pub const CKPT_MAGIC: &str = "TRIEQCKPT v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<(String, usize, usize)>,
    pub step: u64,
    pub dev_wer_history: Vec<f64>,
    pub has_optimizer_state: bool,
}

/// Optimizer moments saved alongside parameters (optional).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
}

pub struct Checkpoint {
    pub model: Model,
    pub header: CheckpointHeader,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensors<W: Write>(w: &mut W, params: &Parameters) -> std::io::Result<()> {
    for t in &params.tensors {
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, params: &mut Parameters) -> std::io::Result<()> {
    for t in params.tensors.iter_mut() {
        let mut buf = vec![0u8; t.data.len() * 4];
        r.read_exact(&mut buf)?;
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        }
    }
    Ok(())
}

pub fn save(
    path: &Path,
    model: &Model,
    vocab_hash: u64,
    step: u64,
    dev_wer_history: &[f64],
    optimizer: Option<&OptimizerState>,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab_hash: format!("{vocab_hash:016x}"),
        tensors: model
            .params
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.rows, t.cols))
            .collect(),
        step,
        dev_wer_history: dev_wer_history.to_vec(),
        has_optimizer_state: optimizer.is_some(),
    };
    let io_err = |e: std::io::Error| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    // Write to a temp file, then rename: concurrent readers never see a
    // half-written checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io_err)?);
        writeln!(w, "{CKPT_MAGIC}").map_err(io_err)?;
        writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err)?;
        write_tensors(&mut w, &model.params).map_err(io_err)?;
        if let Some(opt) = optimizer {
            write_tensors(&mut w, &opt.m).map_err(io_err)?;
            write_tensors(&mut w, &opt.v).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
    let io_err = |e: std::io::Error| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let bad = |m: &str| ModelError::BadCheckpoint { path: path.to_path_buf(), message: m.into() };
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut magic = String::new();
    read_line(&mut r, &mut magic).map_err(io_err)?;
    if magic.trim_end() != CKPT_MAGIC {
        return Err(bad(&format!("bad magic {magic:?}")));
    }
    let mut header_line = String::new();
    read_line(&mut r, &mut header_line).map_err(io_err)?;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut params = Parameters::zeros(&header.config);
    let expected: Vec<(String, usize, usize)> =
        params.tensors.iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
    if expected != header.tensors {
        return Err(bad("tensor manifest does not match config"));
    }
    read_tensors(&mut r, &mut params).map_err(io_err)?;
    let optimizer = if header.has_optimizer_state {
        let mut m = Parameters::zeros(&header.config);
        let mut v = Parameters::zeros(&header.config);
        read_tensors(&mut r, &mut m).map_err(io_err)?;
        read_tensors(&mut r, &mut v).map_err(io_err)?;
        Some(OptimizerState { m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        model: Model { config: header.config.clone(), params },
        header,
        optimizer,
    })
}

fn read_line<R: Read>(r: &mut R, out: &mut String) -> std::io::Result<()> {
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            return Ok(());
        }
        out.push(byte[0] as char);
    }
}
