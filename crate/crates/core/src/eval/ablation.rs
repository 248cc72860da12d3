use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    evaluate_candidates, render_table, retrieve_all, EvalReport, EvalSettings, Fingerprint, LinkRecord,
};
use crate::encoder::Encoder;
use crate::error::{BelxError, Result};
use crate::index::{Candidate, CandidateSet, VectorIndex};
use crate::rerank::{DocumentFields, MarkerStyle, RerankOptions, Reranker};

/// Where candidate sets come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverSetting {
    Exact,
    /// Precomputed lists, one JSONL line per record:
    /// `{"id": str, "candidates": [{"cui": str, "alias"?: str, "score"?: num}]}`.
    CandidatesFile(PathBuf),
}

impl RetrieverSetting {
    pub fn label(&self) -> String {
        match self {
            Self::Exact => "exact".into(),
            Self::CandidatesFile(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationAxes {
    pub retrievers: Vec<RetrieverSetting>,
    pub markers: Vec<MarkerStyle>,
    pub fields: Vec<DocumentFields>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub retriever: String,
    pub marker: MarkerStyle,
    pub fields: DocumentFields,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct FileCandidate {
    cui: String,
    #[serde(default)]
    alias: Option<String>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CandidateLine {
    id: String,
    candidates: Vec<FileCandidate>,
}

/// Reads candidate lists keyed by record id and aligns them with `records`.
/// Records without a line get an empty candidate set.
pub fn read_candidates_file(
    reader: impl BufRead,
    records: &[LinkRecord],
    k: usize,
) -> Result<Vec<CandidateSet>> {
    let mut by_id: BTreeMap<String, Vec<FileCandidate>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CandidateLine = serde_json::from_str(&line)
            .map_err(|e| BelxError::Format(format!("candidates file line {}: {e}", i + 1)))?;
        by_id.insert(l.id, l.candidates);
    }
    Ok(records
        .iter()
        .map(|r| {
            let mut seen = std::collections::BTreeSet::new();
            let hits = by_id
                .remove(&r.id)
                .unwrap_or_default()
                .into_iter()
                .filter(|c| seen.insert(c.cui.clone()))
                .take(k)
                .enumerate()
                .map(|(row, c)| Candidate {
                    alias: c.alias.unwrap_or_else(|| c.cui.clone()),
                    cui: c.cui,
                    score: c.score.unwrap_or(0.0),
                    row,
                })
                .collect();
            CandidateSet {
                mention: r.mention().to_string(),
                k,
                hits,
            }
        })
        .collect())
}

pub fn write_candidates_file(mut w: impl Write, records: &[LinkRecord], sets: &[CandidateSet]) -> Result<()> {
    for (r, s) in records.iter().zip(sets) {
        let line = CandidateLine {
            id: r.id.clone(),
            candidates: s
                .hits
                .iter()
                .map(|c| FileCandidate {
                    cui: c.cui.clone(),
                    alias: Some(c.alias.clone()),
                    score: Some(c.score),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")
            .map_err(|source| BelxError::Io { rows: 0, source })?;
    }
    Ok(())
}

/// Evaluates every (retriever, marker, fields) cell. Candidate sets are
/// computed once per retriever and shared by its cells; a failing cell is
/// recorded and the rest still run.
pub fn run_ablation(
    records: &[LinkRecord],
    retrieval: Option<(&VectorIndex, &dyn Encoder)>,
    base: &Reranker<'_>,
    axes: &AblationAxes,
    settings: &EvalSettings,
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for retriever in &axes.retrievers {
        let label = retriever.label();
        let prepared: Result<(Vec<CandidateSet>, Fingerprint)> = match retriever {
            RetrieverSetting::Exact => match retrieval {
                None => Err(BelxError::Config(
                    "exact retriever needs an index and an encoder".into(),
                )),
                Some((index, encoder)) => retrieve_all(records, index, encoder, settings).map(|c| {
                    (
                        c,
                        Fingerprint {
                            retriever: label.clone(),
                            encoder: Some(encoder.describe()),
                            index_sha256: Some(index.content_hash()),
                            ..Default::default()
                        },
                    )
                }),
            },
            RetrieverSetting::CandidatesFile(path) => std::fs::File::open(path)
                .map_err(|e| BelxError::file(path, e))
                .and_then(|f| {
                    read_candidates_file(std::io::BufReader::new(f), records, settings.k_candidates)
                })
                .map(|c| {
                    (
                        c,
                        Fingerprint {
                            retriever: label.clone(),
                            ..Default::default()
                        },
                    )
                }),
        };
        for &marker in &axes.markers {
            for &fields in &axes.fields {
                let outcome = prepared
                    .as_ref()
                    .map_err(|e| e.to_string())
                    .and_then(|(sets, fp)| {
                        let options = RerankOptions {
                            marker,
                            fields,
                            ..base.options().clone()
                        };
                        base.with_options(options)
                            .and_then(|rr| {
                                evaluate_candidates(records, sets, Some(&rr), settings, fp.clone())
                            })
                            .map(|(report, _)| report)
                            .map_err(|e| e.to_string())
                    });
                let (report, error) = match outcome {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e)),
                };
                cells.push(AblationCell {
                    retriever: label.clone(),
                    marker,
                    fields,
                    report,
                    error,
                });
            }
        }
    }
    cells
}

/// One row per cell: retriever, marker, fields, R@k_candidates (the bound)
/// and reranked R@1, both macro-averaged over languages.
pub fn comparison_table(cells: &[AblationCell]) -> String {
    let mut rows = vec![vec![
        "retriever".to_string(),
        "marker".into(),
        "fields".into(),
        "R@k".into(),
        "rerank R@1".into(),
    ]];
    for c in cells {
        let (bound, r1) = match &c.report {
            Some(r) => {
                let k = r.fingerprint.k_candidates;
                (
                    format!("{:.1}", r.macro_avg.retrieval[&k]),
                    r.macro_avg.reranked_r1.map_or("-".into(), |v| format!("{v:.1}")),
                )
            }
            None => ("error".into(), c.error.clone().unwrap_or_default()),
        };
        rows.push(vec![
            c.retriever.clone(),
            c.marker.to_string(),
            c.fields.to_string(),
            bound,
            r1,
        ]);
    }
    render_table(&rows)
}
