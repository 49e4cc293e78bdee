//! Checkpoint file format.
//!
//! Layout: magic `MELM`, format version u32, config block (six u32 fields,
//! then the vocabulary as length-prefixed UTF-8 words in id order), then one
//! record per address: length-prefixed path, rank, dims, and the little-endian
//! f64 payload. Round-trips are bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::factworld::Vocab;
use crate::microlm::{ModelConfig, ModelState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MELM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(state: &ModelState, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let c = &state.config;
    for v in [
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.d_mlp,
        c.vocab_size,
        c.context_len,
    ] {
        put_u32(&mut buf, v as u32);
    }
    put_u32(&mut buf, state.vocab.len() as u32);
    for word in state.vocab.words() {
        put_str(&mut buf, word);
    }
    let weights = state.weights();
    put_u32(&mut buf, weights.len() as u32);
    for (path, t) in weights {
        let t: &crate::tensor::Tensor = t;
        put_str(&mut buf, path);
        put_u32(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelState> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader { buf: &buf, pos: 0 };

    if rd.take(4)? != MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        n_layers: rd.u32()? as usize,
        d_model: rd.u32()? as usize,
        n_heads: rd.u32()? as usize,
        d_mlp: rd.u32()? as usize,
        vocab_size: rd.u32()? as usize,
        context_len: rd.u32()? as usize,
    };
    let n_words = rd.u32()? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(rd.string()?);
    }
    let vocab = Vocab::from_words(words);

    let n_weights = rd.u32()? as usize;
    let mut weights = std::collections::BTreeMap::new();
    for _ in 0..n_weights {
        let path = rd.string()?;
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = rd.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        weights.insert(path, Tensor::new(shape, data)?);
    }
    if rd.pos != buf.len() {
        return Err(Error::Parse("trailing bytes in checkpoint".into()));
    }
    ModelState::from_parts(config, vocab, weights)
}

pub fn save_checkpoint_file(state: &ModelState, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(state, std::io::BufWriter::new(f))
}

pub fn load_checkpoint_file(path: &std::path::Path) -> Result<ModelState> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
