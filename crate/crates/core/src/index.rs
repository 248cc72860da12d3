//! Frozen alias index with exact top-k cosine search and CUI-level
//! candidate sets.
//!
//! File layout (`BELXIDX1`, little-endian): magic, u32 d, u64 M, M×d f32
//! row-major, u64 byte length, then that many bytes of JSONL metadata with one
//! `{"alias","cui","lang"}` object per row.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{BelxError, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot_f64, norm_f64};
use crate::transport::bounded_map;

const MAGIC: &[u8; 8] = b"BELXIDX1";
const EMBED_CHUNK: usize = 256;
pub const DEFAULT_OVERSCAN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedAlias {
    pub alias: String,
    pub cui: String,
    #[serde(rename = "lang")]
    pub language: String,
    #[serde(skip)]
    pub vector_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub record: IndexedAlias,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cui: String,
    pub alias: String,
    pub score: f64,
    pub row: usize,
}

/// Up to `k` distinct CUIs in retrieval order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention: String,
    pub k: usize,
    pub hits: Vec<Candidate>,
}

impl CandidateSet {
    pub fn cuis(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|c| c.cui.as_str())
    }

    pub fn rank_of(&self, cui: &str) -> Option<usize> {
        self.hits.iter().position(|c| c.cui == cui)
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Immutable once built: there is no way to add rows to an existing index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    matrix: Matrix<f32>,
    records: Vec<IndexedAlias>,
}

impl VectorIndex {
    /// Takes already unit-normalized rows.
    pub fn from_parts(matrix: Matrix<f32>, records: Vec<IndexedAlias>) -> Result<Self> {
        if matrix.rows() != records.len() {
            return Err(BelxError::DimensionMismatch {
                expected: records.len(),
                got: matrix.rows(),
            });
        }
        for (i, row) in matrix.iter_rows().enumerate() {
            let n = norm_f64(row);
            if (n - 1.0).abs() > 1e-5 {
                return Err(BelxError::InvalidInput(format!("index row {i} has norm {n}")));
            }
        }
        let records = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                if r.alias.is_empty() || r.cui.is_empty() {
                    return Err(BelxError::InvalidInput(format!(
                        "index row {i} has an empty alias or cui"
                    )));
                }
                r.vector_row = i;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        Ok(Self { matrix, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.matrix.cols()
    }

    pub fn records(&self) -> &[IndexedAlias] {
        &self.records
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn distinct_cuis(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.cui.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Exact scan. Scores descend; equal scores keep ascending row order.
    pub fn search(&self, query: &[f32], k_alias: usize) -> Result<Vec<RetrievalHit>> {
        if query.len() != self.dimension() {
            return Err(BelxError::DimensionMismatch {
                expected: self.dimension(),
                got: query.len(),
            });
        }
        let m = self.len();
        let k = k_alias.min(m);
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .iter_rows()
            .enumerate()
            .map(|(i, row)| (dot_f64(row, query), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < m {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(score, row)| RetrievalHit {
                record: self.records[row].clone(),
                score,
            })
            .collect())
    }

    /// Embeds `mention` alone and returns its top `k_cui` CUIs, scanning
    /// `k_cui × overscan` alias rows and doubling until enough distinct CUIs
    /// appear or the index is exhausted.
    pub fn retrieve(
        &self,
        mention: &str,
        encoder: &dyn Encoder,
        k_cui: usize,
        overscan: usize,
    ) -> Result<CandidateSet> {
        let query = encoder.embed_one(mention)?;
        self.retrieve_vector(mention, query.values(), k_cui, overscan)
    }

    pub fn retrieve_vector(
        &self,
        mention: &str,
        query: &[f32],
        k_cui: usize,
        overscan: usize,
    ) -> Result<CandidateSet> {
        let mut k_alias = k_cui.saturating_mul(overscan.max(1)).max(1);
        loop {
            let hits = self.search(query, k_alias)?;
            let set = dedup_to_cuis(mention, &hits, k_cui);
            if set.len() >= k_cui || k_alias >= self.len() {
                return Ok(set);
            }
            k_alias = k_alias.saturating_mul(2);
        }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let io = |source| BelxError::Io { rows: 0, source };
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.dimension() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(self.matrix.as_slice().len() * 4);
        for v in self.matrix.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        let mut meta = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut meta, r)?;
            meta.push(b'\n');
        }
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let io = |source| BelxError::Io { rows: 0, source };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(BelxError::Format("not a BELXIDX1 index file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        let d = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let m = u64::from_le_bytes(b8) as usize;
        let mut bytes = vec![0u8; m * d * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.read_exact(&mut b8).map_err(io)?;
        let mut meta = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut meta).map_err(io)?;
        let meta =
            String::from_utf8(meta).map_err(|_| BelxError::Format("index metadata is not UTF-8".into()))?;
        let records = meta
            .lines()
            .map(|l| serde_json::from_str::<IndexedAlias>(l).map_err(BelxError::from))
            .collect::<Result<Vec<_>>>()?;
        if records.len() != m {
            return Err(BelxError::Format(format!(
                "index declares {m} rows but carries {} metadata lines",
                records.len()
            )));
        }
        Self::from_parts(Matrix::from_vec(m, d, data)?, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| BelxError::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| BelxError::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| BelxError::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        format!("{:x}", Sha256::digest(&buf))
    }
}

/// Keeps the first hit per CUI until `k_cui` CUIs are collected.
pub fn dedup_to_cuis(mention: &str, hits: &[RetrievalHit], k_cui: usize) -> CandidateSet {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for h in hits {
        if out.len() >= k_cui {
            break;
        }
        if seen.insert(h.record.cui.as_str()) {
            out.push(Candidate {
                cui: h.record.cui.clone(),
                alias: h.record.alias.clone(),
                score: h.score,
                row: h.record.vector_row,
            });
        }
    }
    CandidateSet {
        mention: mention.to_string(),
        k: k_cui,
        hits: out,
    }
}

/// Embeds `(alias, cui, lang)` rows into a frozen index. Repeated
/// `(alias, cui)` pairs collapse to their first occurrence; row order follows
/// input order.
pub fn build_index<I>(rows: I, encoder: &dyn Encoder, parallelism: usize) -> Result<VectorIndex>
where
    I: IntoIterator<Item = (String, String, String)>,
{
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (alias, cui, language) in rows {
        if seen.insert((alias.clone(), cui.clone())) {
            records.push(IndexedAlias {
                alias,
                cui,
                language,
                vector_row: 0,
            });
        }
    }
    if records.is_empty() {
        return Err(BelxError::InvalidInput(
            "cannot build an index from zero aliases".into(),
        ));
    }
    let chunks: Vec<&[IndexedAlias]> = records.chunks(EMBED_CHUNK).collect();
    let embedded = bounded_map(&chunks, parallelism, |chunk| embed_chunk(encoder, chunk));
    let d = encoder.dimension();
    let mut data = Vec::with_capacity(records.len() * d);
    for part in embedded {
        for v in part? {
            data.extend_from_slice(v.values());
        }
    }
    VectorIndex::from_parts(Matrix::from_vec(records.len(), d, data)?, records)
}

fn embed_chunk(
    encoder: &dyn Encoder,
    chunk: &[IndexedAlias],
) -> Result<Vec<crate::encoder::EmbeddingVector<f32>>> {
    let texts: Vec<&str> = chunk.iter().map(|r| r.alias.as_str()).collect();
    encoder.embed(&texts).map_err(|e| {
        if matches!(e, BelxError::Encoder { .. }) {
            return e;
        }
        // find the alias that fails on its own
        match texts
            .iter()
            .find_map(|t| encoder.embed_one(t).err().map(|err| (t, err)))
        {
            Some((alias, err)) => BelxError::Encoder {
                alias: alias.to_string(),
                message: err.to_string(),
            },
            None => e,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alias: &str, cui: &str) -> IndexedAlias {
        IndexedAlias {
            alias: alias.into(),
            cui: cui.into(),
            language: "en".into(),
            vector_row: 0,
        }
    }

    fn hit(alias: &str, cui: &str, score: f64, row: usize) -> RetrievalHit {
        let mut record = rec(alias, cui);
        record.vector_row = row;
        RetrievalHit { record, score }
    }

    #[test]
    fn dedup_first_occurrence() {
        let hits = [
            hit("a1", "X", 0.9, 0),
            hit("a2", "X", 0.8, 1),
            hit("a3", "Y", 0.7, 2),
        ];
        let set = dedup_to_cuis("m", &hits, 2);
        let got: Vec<_> = set
            .hits
            .iter()
            .map(|c| (c.cui.as_str(), c.alias.as_str(), c.score))
            .collect();
        assert_eq!(got, vec![("X", "a1", 0.9), ("Y", "a3", 0.7)]);
        let same = [hit("a", "X", 0.9, 0), hit("b", "X", 0.5, 1)];
        assert_eq!(dedup_to_cuis("m", &same, 64).len(), 1);
    }

    #[test]
    fn ties_break_by_row() {
        let m = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let idx = VectorIndex::from_parts(
            m,
            vec![rec("a", "A"), rec("b", "B"), rec("c", "C"), rec("d", "D")],
        )
        .unwrap();
        let rows: Vec<_> = idx
            .search(&[1.0, 0.0], 4)
            .unwrap()
            .iter()
            .map(|h| h.record.vector_row)
            .collect();
        assert_eq!(rows, vec![0, 2, 1, 3]);
        let rows: Vec<_> = idx
            .search(&[1.0, 0.0], 1)
            .unwrap()
            .iter()
            .map(|h| h.record.vector_row)
            .collect();
        assert_eq!(rows, vec![0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = Matrix::from_rows(&[[2.0f32, 0.0]]).unwrap();
        assert!(VectorIndex::from_parts(m, vec![rec("a", "A")]).is_err());
        let m = Matrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let idx = VectorIndex::from_parts(m, vec![rec("a", "A")]).unwrap();
        assert!(matches!(
            idx.search(&[1.0], 1),
            Err(BelxError::DimensionMismatch { .. })
        ));
    }
}
