use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::prompt::PromptInput;
use crate::error::{BelxError, Result};
use crate::transport::{bounded_map, with_retries, JsonClient, RetryPolicy};

/// Raw yes/no logits for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub yes_logit: f64,
    pub no_logit: f64,
}

impl ScorerResponse {
    pub fn validate(self) -> Result<Self> {
        if self.yes_logit.is_finite() && self.no_logit.is_finite() {
            Ok(self)
        } else {
            Err(BelxError::Numeric(format!(
                "non-finite scorer logits (yes {}, no {})",
                self.yes_logit, self.no_logit
            )))
        }
    }

    pub fn margin(self) -> f64 {
        self.yes_logit - self.no_logit
    }
}

/// `e^y / (e^y + e^n)` evaluated as `1 / (1 + e^(n − y))`.
pub fn softmax_yes(resp: ScorerResponse) -> f64 {
    1.0 / (1.0 + (resp.no_logit - resp.yes_logit).exp())
}

/// What a scorer sees for one candidate. `cui` and `record_id` identify the
/// pair for scorers that need them; the HTTP scorer sends only the prompt.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub prompt: &'a PromptInput,
    pub cui: &'a str,
    pub record_id: &'a str,
}

pub trait Scorer: Send + Sync {
    fn describe(&self) -> String;

    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScorerResponse>;

    /// One result per request, in request order.
    fn score_batch(&self, reqs: &[ScoreRequest<'_>]) -> Vec<Result<ScorerResponse>> {
        reqs.iter().map(|r| self.score(r)).collect()
    }
}

/// Lowercased character trigrams; strings under three characters form a
/// single gram.
fn trigrams(s: &str) -> HashSet<String> {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    if chars.is_empty() {
        return HashSet::new();
    }
    if chars.len() < 3 {
        return HashSet::from([chars.iter().collect()]);
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn trigram_jaccard(a: &str, b: &str) -> f64 {
    let (x, y) = (trigrams(a), trigrams(b));
    let union = x.union(&y).count();
    if union == 0 {
        return 0.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

/// Deterministic offline scorer: `yes = 4·J(mention, document) − 2`,
/// `no = 0`, with `J` the trigram Jaccard similarity.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl Scorer for MockScorer {
    fn describe(&self) -> String {
        "mock(trigram-jaccard)".into()
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScorerResponse> {
        Ok(ScorerResponse {
            yes_logit: 4.0 * trigram_jaccard(&req.prompt.mention, &req.prompt.document) - 2.0,
            no_logit: 0.0,
        })
    }
}

/// Oracle scorer that knows the gold CUI per record: yes for the gold
/// candidate, no for the rest.
#[derive(Debug, Clone, Default)]
pub struct GoldScorer {
    gold: BTreeMap<String, String>,
}

impl GoldScorer {
    pub fn new(gold: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            gold: gold.into_iter().collect(),
        }
    }
}

impl Scorer for GoldScorer {
    fn describe(&self) -> String {
        "gold-oracle".into()
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScorerResponse> {
        let hit = self.gold.get(req.record_id).is_some_and(|g| g == req.cui);
        Ok(ScorerResponse {
            yes_logit: if hit { 20.0 } else { -20.0 },
            no_logit: 0.0,
        })
    }
}

#[derive(Serialize)]
struct WireItem<'a> {
    instruction: &'a str,
    query: &'a str,
    document: &'a str,
}

#[derive(Serialize)]
struct WireBatch<'a> {
    items: Vec<WireItem<'a>>,
}

#[derive(Deserialize)]
struct WireResults {
    results: Vec<ScorerResponse>,
}

fn wire(p: &PromptInput) -> WireItem<'_> {
    WireItem {
        instruction: &p.instruction,
        query: &p.query,
        document: &p.document,
    }
}

/// Remote ranker behind `POST /score` and, optionally, `POST /score_batch`.
pub struct HttpScorer {
    client: JsonClient,
    url: String,
    retry: RetryPolicy,
    max_in_flight: usize,
    use_batch: bool,
}

impl HttpScorer {
    pub fn new(url: &str, retry: RetryPolicy, max_in_flight: usize, use_batch: bool) -> Self {
        Self {
            client: JsonClient::new(url, retry.timeout_ms),
            url: url.trim_end_matches('/').to_string(),
            retry,
            max_in_flight: max_in_flight.max(1),
            use_batch,
        }
    }
}

impl Scorer for HttpScorer {
    fn describe(&self) -> String {
        format!("http({})", self.url)
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScorerResponse> {
        with_retries(&self.retry, || {
            self.client
                .post::<_, ScorerResponse>("/score", &wire(req.prompt))?
                .validate()
        })
    }

    fn score_batch(&self, reqs: &[ScoreRequest<'_>]) -> Vec<Result<ScorerResponse>> {
        if !self.use_batch {
            return bounded_map(reqs, self.max_in_flight, |r| self.score(r));
        }
        let body = WireBatch {
            items: reqs.iter().map(|r| wire(r.prompt)).collect(),
        };
        let out = with_retries(&self.retry, || {
            let r: WireResults = self.client.post("/score_batch", &body)?;
            if r.results.len() != reqs.len() {
                return Err(BelxError::Pipeline(format!(
                    "score_batch returned {} results for {} items",
                    r.results.len(),
                    reqs.len()
                )));
            }
            Ok(r.results)
        });
        match out {
            Ok(results) => results.into_iter().map(ScorerResponse::validate).collect(),
            Err(e) => {
                let msg = e.to_string();
                reqs.iter()
                    .map(|_| Err(BelxError::Pipeline(msg.clone())))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let r = |y, n| ScorerResponse {
            yes_logit: y,
            no_logit: n,
        };
        assert_eq!(softmax_yes(r(0.7, 0.7)), 0.5);
        assert!((softmax_yes(r(3f64.ln(), 0.0)) - 0.75).abs() < 1e-15);
        let p = softmax_yes(r(1000.0, -1000.0));
        assert!(p.is_finite() && (p - 1.0).abs() < 1e-15);
        let q = softmax_yes(r(-1000.0, 1000.0));
        assert!(q.is_finite() && q >= 0.0 && q < 1e-300);
    }

    #[test]
    fn jaccard_by_hand() {
        // {abc, bcd} vs {bcd, cde}: 1 shared of 3
        assert!((trigram_jaccard("abcd", "BCDE") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(trigram_jaccard("fever", "fever"), 1.0);
        assert_eq!(trigram_jaccard("ab", "ab"), 1.0);
        assert_eq!(trigram_jaccard("", "x"), 0.0);
    }

    #[test]
    fn mock_logits() {
        let p = PromptInput {
            instruction: String::new(),
            mention: "abcd".into(),
            query: "... <tgt>abcd</tgt> ...".into(),
            document: "bcde".into(),
            assembled: String::new(),
        };
        let req = ScoreRequest {
            prompt: &p,
            cui: "C1",
            record_id: "r",
        };
        let r = MockScorer.score(&req).unwrap();
        assert!((r.yes_logit - (4.0 / 3.0 - 2.0)).abs() < 1e-15);
        assert_eq!(r.no_logit, 0.0);
    }

    #[test]
    fn unreachable_http_scorer_fails_every_item() {
        let policy = RetryPolicy {
            retries: 1,
            base_delay_ms: 1,
            timeout_ms: 200,
        };
        let p = PromptInput {
            instruction: "i".into(),
            mention: "m".into(),
            query: "q".into(),
            document: "d".into(),
            assembled: String::new(),
        };
        let req = ScoreRequest {
            prompt: &p,
            cui: "C1",
            record_id: "r",
        };
        for batch in [false, true] {
            let s = HttpScorer::new("http://127.0.0.1:9", policy, 2, batch);
            let out = s.score_batch(&[req, req]);
            assert_eq!(out.len(), 2);
            assert!(out.iter().all(|r| r.is_err()));
        }
    }
}
