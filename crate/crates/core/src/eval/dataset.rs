use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BelxError, Result};
use crate::kb::{DocumentText, MentionSpan};

/// One mention to link, with its gold CUI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkRecord {
    pub id: String,
    pub doc: DocumentText,
    pub span: MentionSpan,
    pub gold_cui: String,
    pub language: String,
}

impl LinkRecord {
    pub fn new(
        id: &str,
        text: &str,
        start: usize,
        end: usize,
        gold_cui: &str,
        language: &str,
    ) -> Result<Self> {
        let gold_cui = gold_cui.trim();
        if gold_cui.is_empty() {
            return Err(BelxError::InvalidInput(format!(
                "record {id:?} has an empty gold cui"
            )));
        }
        let doc = DocumentText::new(id, text)?;
        let span = MentionSpan::new(&doc, start, end)?;
        Ok(Self {
            id: id.to_string(),
            doc,
            span,
            gold_cui: gold_cui.to_string(),
            language: language.to_string(),
        })
    }

    pub fn mention(&self) -> &str {
        self.span.surface(&self.doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    /// `cui \t mention \t sentence [\t lang]`; the span is the first
    /// occurrence of the mention in the sentence.
    XlbelTsv,
}

impl FromStr for DatasetFormat {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "xlbel_tsv" | "tsv" => Ok(Self::XlbelTsv),
            _ => Err(BelxError::Config(format!(
                "unknown dataset format {s:?} (jsonl, xlbel_tsv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonRecord {
    pub id: String,
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub lang: String,
}

impl From<&LinkRecord> for JsonRecord {
    fn from(r: &LinkRecord) -> Self {
        Self {
            id: r.id.clone(),
            text: r.doc.text().to_string(),
            start: r.span.start(),
            end: r.span.end(),
            cui: r.gold_cui.clone(),
            lang: r.language.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedDataset {
    pub records: Vec<LinkRecord>,
    /// Lines that failed to parse or validate.
    pub skipped: usize,
}

fn parse_line(line: &str, lineno: usize, format: DatasetFormat) -> Result<LinkRecord> {
    match format {
        DatasetFormat::Jsonl => {
            let r: JsonRecord = serde_json::from_str(line)?;
            LinkRecord::new(&r.id, &r.text, r.start, r.end, &r.cui, &r.lang)
        }
        DatasetFormat::XlbelTsv => {
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(BelxError::Format(format!(
                    "expected 3 or 4 tab-separated columns, got {}",
                    cols.len()
                )));
            }
            let (cui, mention, sentence) = (cols[0], cols[1], cols[2]);
            let lang = cols.get(3).copied().unwrap_or("und");
            let start = sentence
                .find(mention)
                .filter(|_| !mention.is_empty())
                .ok_or_else(|| BelxError::Format(format!("mention {mention:?} not found in its sentence")))?;
            LinkRecord::new(
                &format!("L{lineno}"),
                sentence,
                start,
                start + mention.len(),
                cui,
                lang,
            )
        }
    }
}

/// Reads records, skipping and counting invalid lines. Zero valid records is
/// an error.
pub fn read_dataset(reader: impl BufRead, format: DatasetFormat) -> Result<LoadedDataset> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1, format) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(BelxError::InvalidInput(format!(
            "dataset has no valid records ({skipped} invalid lines)"
        )));
    }
    Ok(LoadedDataset { records, skipped })
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset> {
    let f = std::fs::File::open(path).map_err(|e| BelxError::file(path, e))?;
    read_dataset(BufReader::new(f), format)
}

pub fn write_dataset(mut w: impl std::io::Write, records: &[LinkRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &JsonRecord::from(r))?;
        w.write_all(b"\n")
            .map_err(|source| BelxError::Io { rows: 0, source })?;
    }
    Ok(())
}
