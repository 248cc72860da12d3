//! String encoders `g(·)`: every backend maps a batch of strings to
//! unit-norm vectors of one fixed dimension.
//!
//! Backends:
//! - [`FileEncoder`]: lookup in a precomputed embedding file,
//! - [`NgramEncoder`]: raw hashed character n-grams (dimension = bucket count),
//! - [`ProjectedEncoder`]: hashed n-grams through a trained projection head,
//! - [`RemoteEncoder`]: an HTTP embedding service.

mod file;
mod ngram;
mod remote;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use file::{read_embedding_file, write_embedding_file, FileEncoder};
pub use ngram::{fnv1a64, NgramEncoder, NgramFeaturizer, ProjectedEncoder, SparseFeatures};
pub use remote::RemoteEncoder;

use crate::error::{BelxError, Result};
use crate::scalar::{norm_f64, Scalar};
use crate::transport::RetryPolicy;

/// A fixed-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Rejects non-finite entries.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BelxError::Numeric("embedding entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm_f64(&self.values)
    }

    pub fn l2_normalize(&self) -> Result<Self> {
        l2_normalize(&self.values).map(|values| Self { values })
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let norm = norm_f64(v);
    if !norm.is_finite() {
        return Err(BelxError::Numeric("vector norm".into()));
    }
    if norm == 0.0 {
        return Err(BelxError::DegenerateVector);
    }
    Ok(v.iter().map(|&x| T::of(x.to_f64_lossy() / norm)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum BackendConfig {
    File {
        path: PathBuf,
    },
    HashedNgram {
        #[serde(default = "default_ngram_sizes")]
        ngram_sizes: Vec<usize>,
        #[serde(default = "default_buckets")]
        buckets: usize,
        /// Trained projection head; raw features when absent.
        #[serde(default)]
        head: Option<PathBuf>,
    },
    Remote {
        url: String,
        #[serde(default = "default_remote_batch")]
        batch_size: usize,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

pub(crate) fn default_ngram_sizes() -> Vec<usize> {
    vec![2, 3, 4]
}

pub(crate) fn default_buckets() -> usize {
    4096
}

fn default_remote_batch() -> usize {
    32
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dimension: usize,
    #[serde(default = "default_max_chars")]
    pub max_input_chars: usize,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

fn default_max_chars() -> usize {
    100
}

impl EncoderConfig {
    pub fn hashed_ngram(dimension: usize) -> Self {
        Self {
            dimension,
            max_input_chars: default_max_chars(),
            backend: BackendConfig::HashedNgram {
                ngram_sizes: default_ngram_sizes(),
                buckets: default_buckets(),
                head: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(BelxError::Config("encoder dimension must be at least 2".into()));
        }
        if self.max_input_chars < 1 {
            return Err(BelxError::Config("max_input_chars must be at least 1".into()));
        }
        if let BackendConfig::HashedNgram {
            ngram_sizes, buckets, ..
        } = &self.backend
        {
            if ngram_sizes.is_empty() || ngram_sizes.contains(&0) || *buckets < 2 {
                return Err(BelxError::Config(
                    "hashed n-gram backend needs non-zero n-gram sizes and at least 2 buckets".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Builds the encoder a config describes and checks that it produces the
/// declared dimension.
pub fn build_encoder(config: &EncoderConfig) -> Result<Box<dyn Encoder>> {
    config.validate()?;
    let encoder: Box<dyn Encoder> = match &config.backend {
        BackendConfig::File { path } => {
            Box::new(FileEncoder::open(path)?.with_max_input_chars(config.max_input_chars))
        }
        BackendConfig::HashedNgram {
            ngram_sizes,
            buckets,
            head,
        } => {
            let featurizer = NgramFeaturizer::new(ngram_sizes.clone(), *buckets)?;
            match head {
                None => Box::new(NgramEncoder::new(featurizer, config.max_input_chars)),
                Some(path) => {
                    let head = crate::contrast::ProjectionHead::<f32>::load(path)?;
                    Box::new(ProjectedEncoder::new(featurizer, head, config.max_input_chars)?)
                }
            }
        }
        BackendConfig::Remote {
            url,
            batch_size,
            max_in_flight,
            retry,
        } => Box::new(RemoteEncoder::new(
            url,
            config.dimension,
            config.max_input_chars,
            *batch_size,
            *max_in_flight,
            *retry,
        )),
    };
    if encoder.dimension() != config.dimension {
        return Err(BelxError::Config(format!(
            "encoder produces dimension {} but config declares {}",
            encoder.dimension(),
            config.dimension
        )));
    }
    Ok(encoder)
}

/// Cuts `s` to its first `max_chars` characters and rejects blank results.
pub fn prepare_input(s: &str, max_chars: usize) -> Result<&str> {
    let cut = match s.char_indices().nth(max_chars) {
        Some((i, _)) => &s[..i],
        None => s,
    };
    if cut.trim().is_empty() {
        return Err(BelxError::InvalidInput(format!(
            "empty encoder input (from {s:?})"
        )));
    }
    Ok(cut)
}

/// The encoder contract.
pub trait Encoder: Send + Sync {
    fn dimension(&self) -> usize;

    fn max_input_chars(&self) -> usize;

    /// Short description used in report fingerprints.
    fn describe(&self) -> String;

    /// Unnormalized vectors for already-prepared inputs.
    fn encode_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;

    /// One unit vector per input, inputs truncated first.
    fn embed(&self, batch: &[&str]) -> Result<Vec<EmbeddingVector<f32>>> {
        let prepared = batch
            .iter()
            .map(|s| prepare_input(s, self.max_input_chars()))
            .collect::<Result<Vec<_>>>()?;
        let raw = self.encode_raw(&prepared)?;
        if raw.len() != batch.len() {
            return Err(BelxError::Pipeline(format!(
                "encoder returned {} vectors for {} inputs",
                raw.len(),
                batch.len()
            )));
        }
        raw.into_iter()
            .zip(batch)
            .map(|(v, s)| {
                if v.len() != self.dimension() {
                    return Err(BelxError::DimensionMismatch {
                        expected: self.dimension(),
                        got: v.len(),
                    });
                }
                EmbeddingVector::new(v)?
                    .l2_normalize()
                    .map_err(|e| BelxError::Encoder {
                        alias: s.to_string(),
                        message: e.to_string(),
                    })
            })
            .collect()
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector<f32>> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn three_four_five() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_unchanged() {
        let v = l2_normalize(&[0.0f32, 1.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(
            l2_normalize(&[0.0f64; 4]),
            Err(BelxError::DegenerateVector)
        ));
        assert!(EmbeddingVector::new(vec![f32::NAN]).is_err());
    }

    /// Kahan-compensated norm, separate from the library's lane accumulation.
    fn compensated_norm(v: &[f32]) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for &x in v {
            let y = (x as f64) * (x as f64) - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum.sqrt()
    }

    #[test]
    fn random_vectors_normalize() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = rng.random_range(2..300);
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
            let u = l2_normalize(&v).unwrap();
            assert!((compensated_norm(&u) - 1.0).abs() <= 1e-6);
            // idempotent on outputs
            let uu = l2_normalize(&u).unwrap();
            for (a, b) in u.iter().zip(&uu) {
                assert!((a - b).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn truncation_and_blank_inputs() {
        assert_eq!(prepare_input("dyspnée", 6).unwrap(), "dyspné");
        assert_eq!(prepare_input("ab", 10).unwrap(), "ab");
        assert!(prepare_input("   ", 10).is_err());
        assert!(prepare_input("", 10).is_err());
        // blank only after truncation
        assert!(prepare_input("  x", 2).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::hashed_ngram(4096);
        assert!(c.validate().is_ok());
        c.dimension = 1;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::hashed_ngram(4096);
        c.max_input_chars = 0;
        assert!(c.validate().is_err());
        // raw n-gram backend has dimension = buckets
        assert!(build_encoder(&EncoderConfig::hashed_ngram(64)).is_err());
        assert_eq!(
            build_encoder(&EncoderConfig::hashed_ngram(4096))
                .unwrap()
                .dimension(),
            4096
        );
    }

    #[test]
    fn config_toml_shape() {
        let c: EncoderConfig =
            toml::from_str("dimension = 64\nbackend = \"hashed_ngram\"\nhead = \"head.bin\"\n").unwrap();
        assert_eq!(c.max_input_chars, 100);
        assert!(matches!(
            c.backend,
            BackendConfig::HashedNgram { buckets: 4096, .. }
        ));
    }
}
