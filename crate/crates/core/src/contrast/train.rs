use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::head::{AdamWConfig, ProjectionHead};
use super::loss::{ms_loss_grad, MsLossParams};
use super::mining::mine_hard_triplets;
use super::sampler::sample_batches;
use crate::encoder::{l2_normalize, BackendConfig, EncoderConfig, NgramFeaturizer};
use crate::error::{BelxError, Result};
use crate::ingest::PositiveGroup;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyperparams {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub loss: MsLossParams,
    pub seed: u64,
    /// Off: the loss runs over the full in-batch sets.
    pub mining: bool,
    /// Head written here after every completed epoch.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 2e-5,
            weight_decay: 0.01,
            epochs: 5,
            loss: MsLossParams::default(),
            seed: 0,
            mining: true,
            checkpoint: None,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(BelxError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(BelxError::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub surviving_triplets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub hyperparams: TrainingHyperparams,
    pub input_dim: usize,
    pub output_dim: usize,
    pub epochs: Vec<EpochReport>,
    pub steps: u64,
    pub head_sha256: String,
}

/// Epoch `e` draws its batches with this seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains a linear head on hashed n-gram features of the group aliases.
pub fn train_projection<T: Scalar>(
    groups: &[PositiveGroup],
    encoder: &EncoderConfig,
    hp: &TrainingHyperparams,
) -> Result<(ProjectionHead<T>, TrainingReport)> {
    encoder.validate()?;
    hp.validate()?;
    let BackendConfig::HashedNgram {
        ngram_sizes, buckets, ..
    } = &encoder.backend
    else {
        return Err(BelxError::Config(
            "training requires the hashed_ngram encoder backend".into(),
        ));
    };
    let featurizer = NgramFeaturizer::new(ngram_sizes.clone(), *buckets)?;
    let mut head = ProjectionHead::<T>::init(*buckets, encoder.dimension, hp.seed);
    let adamw = hp.adamw();
    let mut epochs = Vec::with_capacity(hp.epochs);
    let mut last_good = String::from("initial weights (no checkpoint written)");

    for epoch in 0..hp.epochs {
        let batches = sample_batches(groups, hp.batch_size, epoch_seed(hp.seed, epoch))?;
        let mut loss_sum = 0.0;
        let mut surviving = 0u64;
        for (step, batch) in batches.iter().enumerate() {
            let abort = |message: String| BelxError::TrainingAborted {
                epoch,
                step,
                message: format!("{message}; last good checkpoint: {last_good}"),
            };
            let xs = batch.features(&featurizer, encoder.max_input_chars)?;
            let raw = head.project_batch(&xs);
            let mut unit = Matrix::zeros(raw.rows(), raw.cols());
            for i in 0..raw.rows() {
                let u = l2_normalize(raw.row(i)).map_err(|e| abort(e.to_string()))?;
                unit.row_mut(i).copy_from_slice(&u);
            }
            let outcome = mine_hard_triplets(&unit, &batch.labels, hp.loss.margin)?;
            surviving += outcome.triplets.len() as u64;
            let sets = if hp.mining { &outcome.mined } else { &outcome.full };
            let (loss, grad) = ms_loss_grad(&raw, sets, &hp.loss).map_err(|e| abort(e.to_string()))?;
            let g = head.backward(&xs, &grad);
            head.apply(&g, &adamw);
            if !head.is_finite() {
                return Err(abort("non-finite parameters after update".into()));
            }
            loss_sum += loss;
        }
        epochs.push(EpochReport {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            batches: batches.len(),
            surviving_triplets: surviving,
        });
        last_good = match &hp.checkpoint {
            Some(path) => {
                head.save(path)?;
                format!("{} (after epoch {epoch})", path.display())
            }
            None => format!("in-memory weights after epoch {epoch}"),
        };
    }

    let report = TrainingReport {
        hyperparams: hp.clone(),
        input_dim: head.input_dim(),
        output_dim: head.output_dim(),
        epochs,
        steps: head.steps(),
        head_sha256: head.content_hash(),
    };
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{group_positives, AliasTuple};

    fn corpus() -> Vec<PositiveGroup> {
        let bases = [
            "dyspnea", "fever", "cough", "headache", "nausea", "fatigue", "rash", "anemia", "asthma",
            "angina", "edema", "sepsis",
        ];
        let tuples = bases.iter().enumerate().flat_map(|(q, b)| {
            [b.to_string(), format!("{b}e"), format!("{}x", &b[..b.len() - 1])]
                .into_iter()
                .map(move |alias| AliasTuple {
                    qid: q as u64 + 1,
                    alias,
                    language: "en".into(),
                    cui: format!("C{q:07}"),
                })
        });
        group_positives(tuples)
    }

    fn hp(epochs: usize) -> TrainingHyperparams {
        TrainingHyperparams {
            batch_size: 8,
            lr: 1e-2,
            epochs,
            seed: 5,
            ..Default::default()
        }
    }

    fn config() -> EncoderConfig {
        let mut c = EncoderConfig::hashed_ngram(16);
        if let BackendConfig::HashedNgram { buckets, .. } = &mut c.backend {
            *buckets = 256;
        }
        c
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (head, report) = train_projection::<f64>(&corpus(), &config(), &hp(0)).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(head, ProjectionHead::init(256, 16, 5));
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let (a, ra) = train_projection::<f32>(&corpus(), &config(), &hp(8)).unwrap();
        let (b, _) = train_projection::<f32>(&corpus(), &config(), &hp(8)).unwrap();
        assert_eq!(a.weights().as_slice(), b.weights().as_slice());
        assert_eq!(a.bias(), b.bias());
        let first = ra.epochs.first().unwrap().mean_loss;
        let last = ra.epochs.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(ra.steps, 8 * 3);
    }

    #[test]
    fn rejects_non_ngram_backend() {
        let mut c = config();
        c.backend = BackendConfig::File { path: "x.bin".into() };
        assert!(matches!(
            train_projection::<f64>(&corpus(), &c, &hp(1)),
            Err(BelxError::Config(_))
        ));
    }

    #[test]
    fn huge_learning_rate_aborts_or_stays_finite() {
        let mut h = hp(3);
        h.lr = 1e30;
        match train_projection::<f32>(&corpus(), &config(), &h) {
            Ok((head, _)) => assert!(head.is_finite()),
            Err(BelxError::TrainingAborted { message, .. }) => {
                assert!(message.contains("last good checkpoint"))
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
