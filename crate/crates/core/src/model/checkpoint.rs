//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MITRCKPT"
//! version    u32      1
//! config     7 × u32  d_model n_heads n_layers d_ffn vocab_size d_visual max_len
//! vocab      u32 count, then per word: u32 byte length + UTF-8
//! params     u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 ndim, ndim × u32 extents
//!              product(extents) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, Vocab};
use crate::autodiff::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MITRCKPT";
const VERSION: u32 = 1;

/// Trained parameters plus the vocabulary they were trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub params: ModelParams,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<(), ModelError> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let n = get_u32(r)?;
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(ModelError::Format("truncated string".into()));
    }
    String::from_utf8(b).map_err(|_| ModelError::Format("string is not UTF-8".into()))
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let c = ckpt.params.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ffn,
        c.vocab_size,
        c.d_visual,
        c.max_len,
    ] {
        put_u32(&mut w, v)?;
    }
    put_u32(&mut w, ckpt.vocab.len())?;
    for word in ckpt.vocab.words() {
        put_str(&mut w, word)?;
    }
    let store = ckpt.params.store();
    put_u32(&mut w, store.len())?;
    for (_, name, t) in store.iter() {
        put_str(&mut w, name)?;
        put_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format("not a checkpoint file".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = get_u32(&mut r)?;
    }
    let config = ModelConfig {
        d_model: f[0],
        n_heads: f[1],
        n_layers: f[2],
        d_ffn: f[3],
        vocab_size: f[4],
        d_visual: f[5],
        max_len: f[6],
    };
    let n_words = get_u32(&mut r)?;
    let mut words = Vec::with_capacity(n_words.min(1 << 20));
    for _ in 0..n_words {
        words.push(get_str(&mut r)?);
    }
    let vocab = Vocab::from_words(words.iter().skip(super::FIRST_WORD_ID).cloned());
    if vocab.words() != words.as_slice() {
        return Err(ModelError::Format("vocabulary table is malformed".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(ModelError::Format(format!(
            "{} vocabulary entries for vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let n_params = get_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name = get_str(&mut r)?;
        let ndim = get_u32(&mut r)?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(get_u32(&mut r)?);
        }
        let n: usize = shape.iter().product();
        let mut bytes = Vec::new();
        (&mut r).take(n as u64 * 8).read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(ModelError::Format(format!("tensor {name} is truncated")));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| ModelError::Format(format!("tensor {name}: {e}")))?;
        store.insert(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Format(
            "trailing bytes after the last tensor".into(),
        ));
    }
    let params = ModelParams::from_store(config, store)?;
    Ok(Checkpoint { vocab, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
