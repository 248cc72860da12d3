//! Client for an HTTP embedding service: `POST /embed` with
//! `{"texts": [...]}`, answered by `{"vectors": [[...], ...], "dim": d}`.

use serde::{Deserialize, Serialize};

use crate::error::{BelxError, Result};
use crate::transport::{bounded_map, with_retries, JsonClient, RetryPolicy};

use super::Encoder;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

pub struct RemoteEncoder {
    client: JsonClient,
    url: String,
    dim: usize,
    max_input_chars: usize,
    batch_size: usize,
    max_in_flight: usize,
    retry: RetryPolicy,
}

impl RemoteEncoder {
    pub fn new(
        url: &str,
        dim: usize,
        max_input_chars: usize,
        batch_size: usize,
        max_in_flight: usize,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            client: JsonClient::new(url, retry.timeout_ms),
            url: url.to_string(),
            dim,
            max_input_chars,
            batch_size: batch_size.max(1),
            max_in_flight: max_in_flight.max(1),
            retry,
        }
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        with_retries(&self.retry, || {
            let resp: EmbedResponse = self.client.post("/embed", &EmbedRequest { texts })?;
            if resp.vectors.len() != texts.len() {
                return Err(BelxError::Pipeline(format!(
                    "embedding service returned {} vectors for {} texts",
                    resp.vectors.len(),
                    texts.len()
                )));
            }
            if resp.dim != self.dim || resp.vectors.iter().any(|v| v.len() != self.dim) {
                return Err(BelxError::DimensionMismatch {
                    expected: self.dim,
                    got: resp.dim,
                });
            }
            Ok(resp.vectors)
        })
    }
}

impl Encoder for RemoteEncoder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn max_input_chars(&self) -> usize {
        self.max_input_chars
    }

    fn describe(&self) -> String {
        format!("remote({},d={})", self.url, self.dim)
    }

    fn encode_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<&[&str]> = texts.chunks(self.batch_size).collect();
        let results = bounded_map(&chunks, self.max_in_flight, |c| self.request(c));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
