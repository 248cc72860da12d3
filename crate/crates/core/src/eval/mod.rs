//! Recall@k evaluation of retrieval and reranking, per language and
//! macro-averaged, plus the ablation grid.

mod ablation;
mod dataset;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use ablation::{
    comparison_table, read_candidates_file, run_ablation, write_candidates_file, AblationAxes, AblationCell,
    RetrieverSetting,
};
pub use dataset::{
    load_dataset, read_dataset, write_dataset, DatasetFormat, JsonRecord, LinkRecord, LoadedDataset,
};

use crate::encoder::Encoder;
use crate::error::{BelxError, Result};
use crate::index::{CandidateSet, VectorIndex, DEFAULT_OVERSCAN};
use crate::rerank::Reranker;
use crate::transport::bounded_map;

/// `100 · |{i : gold_i ∈ first k of ranked_i}| / n`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[Vec<S>], golds: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(BelxError::Config("recall@k needs k >= 1".into()));
    }
    if ranked.is_empty() || ranked.len() != golds.len() {
        return Err(BelxError::InvalidInput(format!(
            "recall over {} result lists and {} golds",
            ranked.len(),
            golds.len()
        )));
    }
    let hits = ranked
        .iter()
        .zip(golds)
        .filter(|(list, gold)| {
            list.iter()
                .take(k)
                .any(|c| c.as_ref().trim() == gold.as_ref().trim())
        })
        .count();
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k_set: Vec<usize>,
    /// Candidate set size handed to the reranker.
    pub k_candidates: usize,
    pub overscan: usize,
    pub parallelism: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k_set: vec![1, 5, 64],
            k_candidates: 64,
            overscan: DEFAULT_OVERSCAN,
            parallelism: 4,
        }
    }
}

impl EvalSettings {
    /// The k values reported: the configured set plus the candidate depth.
    pub fn report_ks(&self) -> Vec<usize> {
        let mut ks = self.k_set.clone();
        ks.push(self.k_candidates);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Fingerprint {
    pub retriever: String,
    pub encoder: Option<String>,
    pub index_sha256: Option<String>,
    pub k_candidates: usize,
    pub scorer: Option<String>,
    pub marker: Option<String>,
    pub fields: Option<String>,
    pub doc_alias: Option<String>,
    pub template: Option<String>,
    pub window_chars: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub records: usize,
    /// Retrieval R@k keyed by k.
    pub retrieval: BTreeMap<usize, f64>,
    pub reranked_r1: Option<f64>,
    /// Records where at least one candidate could not be scored.
    pub degraded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_set: Vec<usize>,
    pub overall: RecallRow,
    pub languages: BTreeMap<String, RecallRow>,
    /// Unweighted mean of the per-language rows.
    pub macro_avg: RecallRow,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut headers: Vec<String> = vec!["lang".into(), "n".into()];
        headers.extend(self.k_set.iter().map(|k| format!("R@{k}")));
        let rerank = self.overall.reranked_r1.is_some();
        if rerank {
            headers.push("rerank R@1".into());
        }
        let row = |name: &str, r: &RecallRow| {
            let mut cells = vec![name.to_string(), r.records.to_string()];
            cells.extend(self.k_set.iter().map(|k| format!("{:.1}", r.retrieval[k])));
            if rerank {
                cells.push(r.reranked_r1.map_or("-".into(), |v| format!("{v:.1}")));
            }
            cells
        };
        let mut rows = vec![headers];
        rows.extend(self.languages.iter().map(|(l, r)| row(l, r)));
        rows.push(row("Avg", &self.macro_avg));
        rows.push(row("all", &self.overall));
        render_table(&rows)
    }
}

pub(crate) fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub retrieved: Vec<String>,
    pub reranked: Option<Vec<String>>,
    pub gold: String,
    /// Some candidates could not be scored.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

pub fn read_predictions(reader: impl std::io::BufRead) -> Result<Vec<PredictionLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| BelxError::Format(format!("predictions line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_predictions(mut w: impl Write, preds: &[PredictionLine]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")
            .map_err(|source| BelxError::Io { rows: 0, source })?;
    }
    Ok(())
}

/// Retrieves candidate sets for every record, in record order.
pub fn retrieve_all(
    records: &[LinkRecord],
    index: &VectorIndex,
    encoder: &dyn Encoder,
    settings: &EvalSettings,
) -> Result<Vec<CandidateSet>> {
    bounded_map(records, settings.parallelism, |r| {
        index.retrieve(r.mention(), encoder, settings.k_candidates, settings.overscan)
    })
    .into_iter()
    .collect()
}

fn row_for(
    idx: &[usize],
    retrieved: &[Vec<String>],
    reranked: Option<&[Vec<String>]>,
    golds: &[String],
    degraded: &[bool],
    ks: &[usize],
) -> Result<RecallRow> {
    let pick = |v: &[Vec<String>]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let g: Vec<String> = idx.iter().map(|&i| golds[i].clone()).collect();
    let r = pick(retrieved);
    let mut retrieval = BTreeMap::new();
    for &k in ks {
        retrieval.insert(k, recall_at_k(&r, &g, k)?);
    }
    let reranked_r1 = match reranked {
        Some(rr) => Some(recall_at_k(&pick(rr), &g, 1)?),
        None => None,
    };
    Ok(RecallRow {
        records: idx.len(),
        retrieval,
        reranked_r1,
        degraded: idx.iter().filter(|&&i| degraded[i]).count(),
    })
}

fn check_upper_bound(name: &str, row: &RecallRow, k: usize) -> Result<()> {
    if let Some(r1) = row.reranked_r1 {
        let bound = row.retrieval[&k];
        if r1 > bound + 1e-9 {
            return Err(BelxError::Invariant(format!(
                "reranked R@1 {r1:.4} exceeds retrieval R@{k} {bound:.4} for {name}"
            )));
        }
    }
    Ok(())
}

/// Predictions for precomputed candidate sets: the retrieved CUI lists cut
/// to `k_candidates` and, with a reranker, the reranked lists.
pub fn predict(
    records: &[LinkRecord],
    candidates: &[CandidateSet],
    reranker: Option<&Reranker<'_>>,
    settings: &EvalSettings,
) -> Result<Vec<PredictionLine>> {
    if records.is_empty() || records.len() != candidates.len() {
        return Err(BelxError::InvalidInput(format!(
            "{} records but {} candidate sets",
            records.len(),
            candidates.len()
        )));
    }
    let work: Vec<(&LinkRecord, CandidateSet)> = records
        .iter()
        .zip(candidates)
        .map(|(r, c)| {
            let mut c = c.clone();
            c.hits.truncate(settings.k_candidates);
            (r, c)
        })
        .collect();
    let reranked = match reranker {
        None => work.iter().map(|_| Ok((None, false))).collect::<Vec<_>>(),
        Some(rr) => bounded_map(
            &work,
            settings.parallelism,
            |(r, c)| -> Result<(Option<Vec<String>>, bool)> {
                if c.is_empty() {
                    return Ok((Some(Vec::new()), false));
                }
                let p = rr.rerank(c, &r.doc, &r.span)?;
                Ok((Some(p.ranked.into_iter().map(|c| c.cui).collect()), p.degraded))
            },
        ),
    };
    work.iter()
        .zip(reranked)
        .map(|((r, c), rr)| {
            let (reranked, degraded) = rr?;
            Ok(PredictionLine {
                id: r.id.clone(),
                retrieved: c.cuis().map(String::from).collect(),
                reranked,
                gold: r.gold_cui.clone(),
                degraded,
            })
        })
        .collect()
}

/// Recall table from predictions. When reranked lists are present, reranked
/// R@1 is checked against retrieval R@k_candidates overall and per language.
pub fn report_from_predictions(
    records: &[LinkRecord],
    preds: &[PredictionLine],
    settings: &EvalSettings,
    mut fingerprint: Fingerprint,
) -> Result<EvalReport> {
    if records.is_empty() || records.len() != preds.len() {
        return Err(BelxError::InvalidInput(format!(
            "{} records but {} predictions",
            records.len(),
            preds.len()
        )));
    }
    for (r, p) in records.iter().zip(preds) {
        if r.id != p.id || r.gold_cui != p.gold {
            return Err(BelxError::InvalidInput(format!(
                "prediction {:?} does not match dataset record {:?}",
                p.id, r.id
            )));
        }
    }
    let ks = settings.report_ks();
    fingerprint.k_candidates = settings.k_candidates;
    let retrieved: Vec<Vec<String>> = preds.iter().map(|p| p.retrieved.clone()).collect();
    let reranked: Option<Vec<Vec<String>>> = if preds.iter().all(|p| p.reranked.is_some()) {
        Some(
            preds
                .iter()
                .map(|p| p.reranked.clone().unwrap_or_default())
                .collect(),
        )
    } else {
        None
    };
    let degraded: Vec<bool> = preds.iter().map(|p| p.degraded).collect();
    let golds: Vec<String> = records.iter().map(|r| r.gold_cui.clone()).collect();
    let all: Vec<usize> = (0..records.len()).collect();
    let overall = row_for(&all, &retrieved, reranked.as_deref(), &golds, &degraded, &ks)?;
    check_upper_bound("all records", &overall, settings.k_candidates)?;
    let mut by_lang: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_lang.entry(r.language.clone()).or_default().push(i);
    }
    let mut languages = BTreeMap::new();
    for (lang, idx) in by_lang {
        let row = row_for(&idx, &retrieved, reranked.as_deref(), &golds, &degraded, &ks)?;
        check_upper_bound(&format!("language {lang}"), &row, settings.k_candidates)?;
        languages.insert(lang, row);
    }
    let n = languages.len() as f64;
    let macro_avg = RecallRow {
        records: records.len(),
        retrieval: ks
            .iter()
            .map(|k| (*k, languages.values().map(|r| r.retrieval[k]).sum::<f64>() / n))
            .collect(),
        reranked_r1: overall
            .reranked_r1
            .map(|_| languages.values().filter_map(|r| r.reranked_r1).sum::<f64>() / n),
        degraded: overall.degraded,
    };
    Ok(EvalReport {
        k_set: ks,
        overall,
        languages,
        macro_avg,
        fingerprint,
    })
}

/// Fills the reranking fields of a fingerprint.
pub fn describe_reranker(fingerprint: &mut Fingerprint, rr: &Reranker<'_>) {
    let o = rr.options();
    fingerprint.scorer = Some(rr.scorer_description());
    fingerprint.marker = Some(o.marker.to_string());
    fingerprint.fields = Some(o.fields.to_string());
    fingerprint.doc_alias = Some(o.doc_alias.to_string());
    fingerprint.template = Some(o.template.clone());
    fingerprint.window_chars = Some(o.window_chars);
}

/// [`predict`] followed by [`report_from_predictions`].
pub fn evaluate_candidates(
    records: &[LinkRecord],
    candidates: &[CandidateSet],
    reranker: Option<&Reranker<'_>>,
    settings: &EvalSettings,
    mut fingerprint: Fingerprint,
) -> Result<(EvalReport, Vec<PredictionLine>)> {
    let preds = predict(records, candidates, reranker, settings)?;
    if let Some(rr) = reranker {
        describe_reranker(&mut fingerprint, rr);
    }
    let report = report_from_predictions(records, &preds, settings, fingerprint)?;
    Ok((report, preds))
}

/// Retrieval with `index`/`encoder`, then optional reranking.
pub fn evaluate(
    records: &[LinkRecord],
    index: &VectorIndex,
    encoder: &dyn Encoder,
    reranker: Option<&Reranker<'_>>,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<PredictionLine>)> {
    let candidates = retrieve_all(records, index, encoder, settings)?;
    let fingerprint = Fingerprint {
        retriever: "exact".into(),
        encoder: Some(encoder.describe()),
        index_sha256: Some(index.content_hash()),
        scorer: None,
        ..Default::default()
    };
    evaluate_candidates(records, &candidates, reranker, settings, fingerprint)
}
