//! Second stage: score each retrieved candidate against the marked mention
//! context with a yes/no ranker and reorder.

mod prompt;
mod scorer;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use prompt::{
    build_document, build_query, DocumentFields, MarkerStyle, PromptInput, PromptTemplate, TemplateRegistry,
    DEFAULT_INSTRUCTION, DEFAULT_TEMPLATE,
};
pub use scorer::{
    softmax_yes, trigram_jaccard, GoldScorer, HttpScorer, MockScorer, ScoreRequest, Scorer, ScorerResponse,
};

use crate::error::{BelxError, Result};
use crate::index::CandidateSet;
use crate::kb::{DocumentText, KnowledgeBase, MentionSpan};

/// Which name stands in for the candidate in its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DocAlias {
    #[default]
    Retrieved,
    Canonical,
}

impl FromStr for DocAlias {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieved" => Ok(Self::Retrieved),
            "canonical" => Ok(Self::Canonical),
            _ => Err(BelxError::Config(format!(
                "unknown doc alias {s:?} (retrieved, canonical)"
            ))),
        }
    }
}

impl fmt::Display for DocAlias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Retrieved => "retrieved",
            Self::Canonical => "canonical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankOptions {
    pub marker: MarkerStyle,
    pub fields: DocumentFields,
    pub doc_alias: DocAlias,
    pub window_chars: usize,
    pub template: String,
    /// Keep the assembled prompt of each candidate in the output.
    pub audit: bool,
}

impl Default for RerankOptions {
    fn default() -> Self {
        Self {
            marker: MarkerStyle::Tgt,
            fields: DocumentFields::NameOnly,
            doc_alias: DocAlias::Retrieved,
            window_chars: 0,
            template: DEFAULT_TEMPLATE.to_string(),
            audit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub cui: String,
    pub alias: String,
    /// `-inf` when scoring failed.
    #[serde(with = "score_serde")]
    pub s_rank: f64,
    /// Zero-based position in the retrieval order.
    pub retrieval_rank: usize,
    pub retrieval_score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prompt: Option<String>,
    #[serde(skip)]
    margin: f64,
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub ranked: Vec<RankedCandidate>,
    pub top1: String,
    /// Some candidates could not be scored and were sunk to the bottom.
    pub degraded: bool,
}

/// Descending score, then ascending retrieval rank. Scores compare by logit
/// margin, which orders exactly like the softmax but does not saturate.
fn rank_order(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    b.margin
        .total_cmp(&a.margin)
        .then(a.retrieval_rank.cmp(&b.retrieval_rank))
}

pub struct Reranker<'a> {
    kb: Option<&'a KnowledgeBase>,
    templates: &'a TemplateRegistry,
    scorer: &'a dyn Scorer,
    options: RerankOptions,
}

impl<'a> Reranker<'a> {
    /// Without a knowledge base, documents carry the alias alone.
    pub fn new(
        kb: Option<&'a KnowledgeBase>,
        templates: &'a TemplateRegistry,
        scorer: &'a dyn Scorer,
        options: RerankOptions,
    ) -> Result<Self> {
        templates.get(&options.template)?;
        Ok(Self {
            kb,
            templates,
            scorer,
            options,
        })
    }

    pub fn options(&self) -> &RerankOptions {
        &self.options
    }

    pub fn scorer_description(&self) -> String {
        self.scorer.describe()
    }

    /// The same knowledge base, templates and scorer under other options.
    pub fn with_options(&self, options: RerankOptions) -> Result<Self> {
        Self::new(self.kb, self.templates, self.scorer, options)
    }

    /// One prompt per candidate, in retrieval order.
    pub fn prompts(
        &self,
        candidates: &CandidateSet,
        doc: &DocumentText,
        span: &MentionSpan,
    ) -> Result<Vec<PromptInput>> {
        let o = &self.options;
        let query = build_query(doc, span, o.marker, o.window_chars)?;
        let mention = span.surface(doc);
        candidates
            .hits
            .iter()
            .map(|c| {
                let entity = self.kb.and_then(|kb| kb.get(&c.cui));
                let alias = match (o.doc_alias, entity) {
                    (DocAlias::Canonical, Some(e)) => e.canonical_name.as_str(),
                    _ => c.alias.as_str(),
                };
                let document = build_document(entity, alias, o.fields)?;
                self.templates.assemble(&o.template, mention, &query, &document)
            })
            .collect()
    }

    pub fn rerank(
        &self,
        candidates: &CandidateSet,
        doc: &DocumentText,
        span: &MentionSpan,
    ) -> Result<RankedPrediction> {
        if candidates.is_empty() {
            return Err(BelxError::Pipeline(format!(
                "no candidates to rerank for {:?} in {}",
                candidates.mention,
                doc.id()
            )));
        }
        let prompts = self.prompts(candidates, doc, span)?;
        let requests: Vec<ScoreRequest<'_>> = prompts
            .iter()
            .zip(&candidates.hits)
            .map(|(p, c)| ScoreRequest {
                prompt: p,
                cui: &c.cui,
                record_id: doc.id(),
            })
            .collect();
        let responses = self.scorer.score_batch(&requests);
        if responses.len() != requests.len() {
            return Err(BelxError::Pipeline(format!(
                "scorer returned {} responses for {} candidates",
                responses.len(),
                requests.len()
            )));
        }
        let mut ranked: Vec<RankedCandidate> = candidates
            .hits
            .iter()
            .zip(responses)
            .zip(prompts)
            .enumerate()
            .map(|(rank, ((c, resp), prompt))| {
                let (s_rank, margin, failure) = match resp.and_then(ScorerResponse::validate) {
                    Ok(r) => (softmax_yes(r), r.margin(), None),
                    Err(e) => (f64::NEG_INFINITY, f64::NEG_INFINITY, Some(e.to_string())),
                };
                RankedCandidate {
                    cui: c.cui.clone(),
                    alias: c.alias.clone(),
                    s_rank,
                    retrieval_rank: rank,
                    retrieval_score: c.score,
                    failure,
                    prompt: self.options.audit.then_some(prompt.assembled),
                    margin,
                }
            })
            .collect();
        let failed = ranked.iter().filter(|r| r.failure.is_some()).count();
        if failed == ranked.len() {
            return Err(BelxError::Pipeline(format!(
                "scoring failed for all {failed} candidates of {:?} in {}: {}",
                candidates.mention,
                doc.id(),
                ranked[0].failure.as_deref().unwrap_or_default()
            )));
        }
        ranked.sort_by(rank_order);
        Ok(RankedPrediction {
            top1: ranked[0].cui.clone(),
            ranked,
            degraded: failed > 0,
        })
    }
}
