//! Documents, mention spans, entities and the knowledge base they live in,
//! plus the alias normalization shared by ingestion and filtering.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{BelxError, Result};

/// Raw text the mentions are drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentText {
    id: String,
    text: String,
}

impl DocumentText {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(BelxError::InvalidInput("document text is empty".into()));
        }
        Ok(Self { id: id.into(), text })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Byte range `[start, end)` of a mention inside a [`DocumentText`].
///
/// Both offsets sit on UTF-8 character boundaries and the range is non-empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MentionSpan {
    start: usize,
    end: usize,
}

impl MentionSpan {
    pub fn new(doc: &DocumentText, start: usize, end: usize) -> Result<Self> {
        let text = doc.text();
        if start >= end || end > text.len() {
            return Err(BelxError::InvalidInput(format!(
                "span [{start}, {end}) out of range for text of {} bytes",
                text.len()
            )));
        }
        if !text.is_char_boundary(start) || !text.is_char_boundary(end) {
            return Err(BelxError::InvalidInput(format!(
                "span [{start}, {end}) does not fall on character boundaries"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// The mention surface. Panics if `doc` is not the document the span was
    /// validated against and the offsets are out of range.
    pub fn surface<'a>(&self, doc: &'a DocumentText) -> &'a str {
        &doc.text()[self.start..self.end]
    }

    /// Re-checks the span against `doc`.
    pub fn validate(&self, doc: &DocumentText) -> Result<()> {
        Self::new(doc, self.start, self.end).map(|_| ())
    }
}

/// A knowledge-base concept with its names and optional metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub cui: String,
    #[serde(rename = "name")]
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<(String, String)>,
    #[serde(rename = "type", default)]
    pub semantic_type: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
}

impl EntityRecord {
    /// A bare record holding only an identifier and a name.
    pub fn named(cui: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            cui: cui.into(),
            canonical_name: name.into(),
            aliases: Vec::new(),
            semantic_type: None,
            description: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.cui.trim().is_empty() {
            return Err(BelxError::InvalidInput("entity with empty cui".into()));
        }
        if self.canonical_name.trim().is_empty() {
            return Err(BelxError::InvalidInput(format!(
                "entity {} has an empty name",
                self.cui
            )));
        }
        Ok(())
    }
}

/// Entities keyed by CUI.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: BTreeMap<String, EntityRecord>,
}

impl KnowledgeBase {
    pub fn from_entities(entities: impl IntoIterator<Item = EntityRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entities {
            e.check()?;
            if map.contains_key(&e.cui) {
                return Err(BelxError::InvalidInput(format!("duplicate cui {}", e.cui)));
            }
            map.insert(e.cui.clone(), e);
        }
        if map.is_empty() {
            return Err(BelxError::InvalidInput("knowledge base is empty".into()));
        }
        Ok(Self { entities: map })
    }

    /// Reads the JSONL entity file, one entity per line.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entities = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| BelxError::Io {
                rows: lineno as u64,
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: EntityRecord = serde_json::from_str(&line)
                .map_err(|e| BelxError::Format(format!("knowledge base line {}: {e}", lineno + 1)))?;
            entities.push(e);
        }
        Self::from_entities(entities)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| BelxError::file(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in self.entities.values() {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")
                .map_err(|source| BelxError::Io { rows: 0, source })?;
        }
        Ok(())
    }

    pub fn get(&self, cui: &str) -> Option<&EntityRecord> {
        self.entities.get(cui)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.values()
    }

    /// Every (alias, cui, language) name of every entity: canonical name first
    /// (language `und`), then the listed aliases.
    pub fn alias_rows(&self) -> Vec<(String, String, String)> {
        let mut rows = Vec::new();
        for e in self.entities.values() {
            rows.push((e.canonical_name.clone(), e.cui.clone(), "und".to_string()));
            for (alias, lang) in &e.aliases {
                rows.push((alias.clone(), e.cui.clone(), lang.clone()));
            }
        }
        rows
    }
}

/// NFC composition, outer whitespace trimmed, inner whitespace runs collapsed
/// to one space. Case is kept.
pub fn normalize_alias(raw: &str) -> String {
    let composed: String = raw.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    for word in composed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Project suffixes stripped from a sitelink key, longest first.
const SITE_SUFFIXES: [&str; 6] = [
    "wikivoyage",
    "wikisource",
    "wikiquote",
    "wikibooks",
    "wikinews",
    "wiki",
];

/// Language tag derived from a sitelink key such as `frwiki`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteLanguage {
    pub tag: String,
    /// False when no project suffix matched and the key passed through.
    pub recognized: bool,
}

pub fn parse_site_language(site_key: &str) -> SiteLanguage {
    for suffix in SITE_SUFFIXES {
        if let Some(prefix) = site_key.strip_suffix(suffix) {
            if !prefix.is_empty() {
                return SiteLanguage {
                    tag: prefix.replace('_', "-"),
                    recognized: true,
                };
            }
        }
    }
    SiteLanguage {
        tag: site_key.to_string(),
        recognized: false,
    }
}
