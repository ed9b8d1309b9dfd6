//! Binary checkpoint container.
//!
//! Layout (little endian): magic, format version, then length-prefixed
//! model config JSON, vocabulary lines, and parameter tensors stored as
//! `rows, cols, f32 values`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::params::ParamSet;
use super::{ModelConfig, ModelError, Seq2SeqModel};
use crate::vocab::{VocabError, Vocabulary};

const MAGIC: &[u8; 8] = b"G2TCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("checkpoint model: {0}")]
    Model(#[from] ModelError),
    #[error("model has {model} embedding rows but vocabulary has {vocab} entries")]
    VocabMismatch { model: usize, vocab: usize },
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    write_u32(w, bytes.len() as u32)?;
    w.write_all(bytes)
}

fn read_blob(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Writes the model and vocabulary atomically: the data goes to a
/// temporary file in the target directory which is then renamed.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Seq2SeqModel<f32>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    if model.vocab_size() != vocab.len() {
        return Err(CheckpointError::VocabMismatch {
            model: model.vocab_size(),
            vocab: vocab.len(),
        });
    }
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        let config = serde_json::to_vec(model.config()).map_err(io::Error::other)?;
        write_blob(&mut w, &config)?;
        write_blob(&mut w, vocab.to_lines().as_bytes())?;
        let params = model.params();
        write_u32(&mut w, params.len() as u32)?;
        for t in params.tensors() {
            write_u32(&mut w, t.nrows() as u32)?;
            write_u32(&mut w, t.ncols() as u32)?;
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Seq2SeqModel<f32>, Vocabulary), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config: ModelConfig =
        serde_json::from_slice(&read_blob(&mut r)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let lines = String::from_utf8(read_blob(&mut r)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let vocab = Vocabulary::from_lines(&lines)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for i in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.push(format!("p{i}"), t);
    }
    let model = Seq2SeqModel::new(config, vocab.len(), 0)?
        .with_params(params)
        .map_err(|_| CheckpointError::Corrupt("parameter shapes do not match the stored config".into()))?;
    Ok((model, vocab))
}
