//! Precomputed embeddings in the `BELXEMB1` binary layout (little-endian):
//! magic, u32 dimension, u64 count, then per record a u32 UTF-8 length, the
//! string bytes and `dimension` f32 values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{BelxError, Result};

use super::Encoder;

const MAGIC: &[u8; 8] = b"BELXEMB1";

fn io(source: std::io::Error) -> BelxError {
    BelxError::Io { rows: 0, source }
}

pub fn write_embedding_file<W: Write>(mut w: W, dim: usize, records: &[(String, Vec<f32>)]) -> Result<()> {
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for (text, v) in records {
        if v.len() != dim {
            return Err(BelxError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        w.write_all(&(text.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(text.as_bytes()).map_err(io)?;
        for x in v {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_embedding_file<R: Read>(mut r: R) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(BelxError::Format("not a BELXEMB1 embedding file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8);
    let mut records = Vec::new();
    for i in 0..count {
        r.read_exact(&mut b4)
            .map_err(|source| BelxError::Io { rows: i, source })?;
        let mut text = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut text)
            .map_err(|source| BelxError::Io { rows: i, source })?;
        let text = String::from_utf8(text)
            .map_err(|_| BelxError::Format(format!("embedding record {i}: invalid UTF-8")))?;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b4)
                .map_err(|source| BelxError::Io { rows: i, source })?;
            v.push(f32::from_le_bytes(b4));
        }
        records.push((text, v));
    }
    Ok((dim, records))
}

pub struct FileEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
    max_input_chars: usize,
}

impl FileEncoder {
    pub fn from_records(dim: usize, records: Vec<(String, Vec<f32>)>) -> Self {
        Self {
            dim,
            vectors: records.into_iter().collect(),
            max_input_chars: usize::MAX,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| BelxError::file(path, e))?;
        let (dim, records) = read_embedding_file(std::io::BufReader::new(f))?;
        Ok(Self::from_records(dim, records))
    }

    pub fn with_max_input_chars(mut self, max: usize) -> Self {
        self.max_input_chars = max;
        self
    }
}

impl Encoder for FileEncoder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn max_input_chars(&self) -> usize {
        self.max_input_chars
    }

    fn describe(&self) -> String {
        format!("file(d={},n={})", self.dim, self.vectors.len())
    }

    fn encode_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| BelxError::MissingEmbedding(t.to_string()))
            })
            .collect()
    }
}
