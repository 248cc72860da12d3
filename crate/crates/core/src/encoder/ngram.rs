use crate::contrast::ProjectionHead;
use crate::error::{BelxError, Result};

use super::Encoder;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Sparse feature vector: `(bucket, value)` sorted by bucket, no zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures {
    pub entries: Vec<(u32, f32)>,
}

impl SparseFeatures {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        for &(b, x) in &self.entries {
            v[b as usize] += x;
        }
        v
    }

    pub fn dot(&self, other: &SparseFeatures) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0f64);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 as f64 * b.1 as f64;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn cosine(&self, other: &SparseFeatures) -> f64 {
        let n = (self.dot(self) * other.dot(other)).sqrt();
        if n == 0.0 {
            0.0
        } else {
            self.dot(other) / n
        }
    }
}

/// Signed feature hashing of lowercased character n-grams.
///
/// Each n-gram's UTF-8 bytes are hashed with FNV-1a 64; the bucket is the
/// hash modulo the bucket count and the sign is the hash's top bit
/// (set → −1). N-grams do not cross string ends and there is no padding; a
/// string shorter than every n-gram size is hashed whole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramFeaturizer {
    sizes: Vec<usize>,
    buckets: usize,
}

impl NgramFeaturizer {
    pub fn new(sizes: Vec<usize>, buckets: usize) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) || buckets < 2 || buckets > u32::MAX as usize {
            return Err(BelxError::Config(format!(
                "invalid n-gram featurizer: sizes {sizes:?}, buckets {buckets}"
            )));
        }
        Ok(Self { sizes, buckets })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn features(&self, s: &str) -> SparseFeatures {
        let lower = s.to_lowercase();
        let chars: Vec<(usize, char)> = lower.char_indices().collect();
        let mut acc: Vec<(u32, f32)> = Vec::new();
        let mut add = |gram: &str| {
            let h = fnv1a64(gram.as_bytes());
            let bucket = (h % self.buckets as u64) as u32;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            acc.push((bucket, sign));
        };
        let mut any = false;
        for &n in &self.sizes {
            if chars.len() < n {
                continue;
            }
            for w in 0..=chars.len() - n {
                let start = chars[w].0;
                let end = chars.get(w + n).map_or(lower.len(), |c| c.0);
                add(&lower[start..end]);
                any = true;
            }
        }
        if !any && !lower.is_empty() {
            add(&lower);
        }
        acc.sort_by_key(|e| e.0);
        let mut entries: Vec<(u32, f32)> = Vec::with_capacity(acc.len());
        for (b, v) in acc {
            match entries.last_mut() {
                Some(last) if last.0 == b => last.1 += v,
                _ => entries.push((b, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        SparseFeatures { entries }
    }
}

/// Raw hashed features as a dense vector of dimension `buckets`.
pub struct NgramEncoder {
    featurizer: NgramFeaturizer,
    max_input_chars: usize,
}

impl NgramEncoder {
    pub fn new(featurizer: NgramFeaturizer, max_input_chars: usize) -> Self {
        Self {
            featurizer,
            max_input_chars,
        }
    }
}

impl Encoder for NgramEncoder {
    fn dimension(&self) -> usize {
        self.featurizer.buckets()
    }

    fn max_input_chars(&self) -> usize {
        self.max_input_chars
    }

    fn describe(&self) -> String {
        format!(
            "hashed_ngram(n={:?},buckets={})",
            self.featurizer.sizes(),
            self.featurizer.buckets()
        )
    }

    fn encode_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| self.featurizer.features(t).to_dense(self.featurizer.buckets()))
            .collect())
    }
}

/// Hashed features mapped through a trained linear head.
pub struct ProjectedEncoder {
    featurizer: NgramFeaturizer,
    head: ProjectionHead<f32>,
    max_input_chars: usize,
}

impl ProjectedEncoder {
    pub fn new(
        featurizer: NgramFeaturizer,
        head: ProjectionHead<f32>,
        max_input_chars: usize,
    ) -> Result<Self> {
        if head.input_dim() != featurizer.buckets() {
            return Err(BelxError::DimensionMismatch {
                expected: featurizer.buckets(),
                got: head.input_dim(),
            });
        }
        Ok(Self {
            featurizer,
            head,
            max_input_chars,
        })
    }
}

impl Encoder for ProjectedEncoder {
    fn dimension(&self) -> usize {
        self.head.output_dim()
    }

    fn max_input_chars(&self) -> usize {
        self.max_input_chars
    }

    fn describe(&self) -> String {
        format!(
            "hashed_ngram(n={:?},buckets={})+head(d={},sha256={})",
            self.featurizer.sizes(),
            self.featurizer.buckets(),
            self.head.output_dim(),
            &self.head.content_hash()[..16]
        )
    }

    fn encode_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| self.head.project(&self.featurizer.features(t)))
            .collect())
    }
}
