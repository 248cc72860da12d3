use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BelxError, Result};
use crate::kb::{DocumentText, EntityRecord, MentionSpan};

/// How the mention is highlighted inside the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarkerStyle {
    #[default]
    Tgt,
    MentionTag,
    Asterisk,
    None,
}

impl MarkerStyle {
    pub const ALL: [MarkerStyle; 4] = [Self::Tgt, Self::MentionTag, Self::Asterisk, Self::None];

    pub fn delimiters(self) -> (&'static str, &'static str) {
        match self {
            Self::Tgt => ("<tgt>", "</tgt>"),
            Self::MentionTag => ("<mention>", "</mention>"),
            Self::Asterisk => ("*", "*"),
            Self::None => ("", ""),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tgt => "tgt",
            Self::MentionTag => "mention_tag",
            Self::Asterisk => "asterisk",
            Self::None => "none",
        }
    }
}

impl fmt::Display for MarkerStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarkerStyle {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "mention" && *m == Self::MentionTag))
            .ok_or_else(|| {
                BelxError::Config(format!(
                    "unknown marker style {s:?} (tgt, mention_tag, asterisk, none)"
                ))
            })
    }
}

/// Which entity metadata goes into the candidate document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFields {
    #[default]
    NameOnly,
    NameType,
    NameTypeDescription,
}

impl DocumentFields {
    pub const ALL: [DocumentFields; 3] = [Self::NameOnly, Self::NameType, Self::NameTypeDescription];

    pub fn name(self) -> &'static str {
        match self {
            Self::NameOnly => "name",
            Self::NameType => "name_type",
            Self::NameTypeDescription => "name_type_description",
        }
    }
}

impl fmt::Display for DocumentFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DocumentFields {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "name" | "name_only" => Ok(Self::NameOnly),
            "name_type" => Ok(Self::NameType),
            "name_type_description" => Ok(Self::NameTypeDescription),
            _ => Err(BelxError::Config(format!(
                "unknown document fields {s:?} (name, name_type, name_type_description)"
            ))),
        }
    }
}

/// The context window around `span` with the mention wrapped in markers.
/// `window_chars = 0` keeps the whole text.
pub fn build_query(
    doc: &DocumentText,
    span: &MentionSpan,
    style: MarkerStyle,
    window_chars: usize,
) -> Result<String> {
    span.validate(doc)?;
    let text = doc.text();
    let (start, end) = (span.start(), span.end());
    let (left, right) = if window_chars == 0 {
        (0, text.len())
    } else {
        let left = text[..start]
            .char_indices()
            .rev()
            .nth(window_chars - 1)
            .map_or(0, |(i, _)| i);
        let right = text[end..]
            .char_indices()
            .nth(window_chars)
            .map_or(text.len(), |(i, _)| end + i);
        (left, right)
    };
    let (open, close) = style.delimiters();
    Ok(format!(
        "{}{open}{}{close}{}",
        &text[left..start],
        &text[start..end],
        &text[end..right]
    ))
}

/// `alias`, then ` | type: …` and ` | description: …` when requested and present.
pub fn build_document(
    entity: Option<&EntityRecord>,
    chosen_alias: &str,
    fields: DocumentFields,
) -> Result<String> {
    if chosen_alias.trim().is_empty() {
        return Err(BelxError::InvalidInput(
            "candidate document needs a non-empty alias".into(),
        ));
    }
    let mut out = chosen_alias.to_string();
    let Some(e) = entity else { return Ok(out) };
    if fields != DocumentFields::NameOnly {
        if let Some(t) = e.semantic_type.as_deref().filter(|t| !t.is_empty()) {
            out.push_str(" | type: ");
            out.push_str(t);
        }
    }
    if fields == DocumentFields::NameTypeDescription {
        if let Some(d) = e.description.as_deref().filter(|d| !d.is_empty()) {
            out.push_str(" | description: ");
            out.push_str(d);
        }
    }
    Ok(out)
}

pub const DEFAULT_TEMPLATE: &str = "qwen3-reranker";

pub const DEFAULT_INSTRUCTION: &str = "Given the query with a highlighted target mention, judge whether the \
document names the concept the mention refers to. Answer yes or no.";

const QWEN3_RERANKER: &str =
    "<|im_start|>system\nJudge whether the Document meets the requirements based on \
the Query and the Instruct provided. Note that the answer can only be \"yes\" or \"no\".<|im_end|>\n\
<|im_start|>user\n<Instruct>: {instruction}\n<Query>: {query}\n<Document>: {document}<|im_end|>\n\
<|im_start|>assistant\n<think>\n\n</think>\n\n";

const PLAIN: &str = "{instruction}\nQuery: {query}\nDocument: {document}\nAnswer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Instruction,
    Query,
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// A template split at its placeholders once, at registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    instruction: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// `body` must contain `{instruction}`, `{query}` and `{document}` exactly once each.
    pub fn parse(body: &str, instruction: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut rest = body;
        let mut counts = [0usize; 3];
        while let Some(pos) = rest.find('{') {
            let tail = &rest[pos..];
            let hit = [
                ("{instruction}", Slot::Instruction),
                ("{query}", Slot::Query),
                ("{document}", Slot::Document),
            ]
            .into_iter()
            .find(|(p, _)| tail.starts_with(p));
            match hit {
                Some((p, slot)) => {
                    pieces.push(Piece::Text(rest[..pos].to_string()));
                    pieces.push(Piece::Slot(slot));
                    counts[slot as usize] += 1;
                    rest = &tail[p.len()..];
                }
                None => {
                    pieces.push(Piece::Text(rest[..=pos].to_string()));
                    rest = &rest[pos + 1..];
                }
            }
        }
        pieces.push(Piece::Text(rest.to_string()));
        for (name, c) in ["{instruction}", "{query}", "{document}"].iter().zip(counts) {
            if c != 1 {
                return Err(BelxError::Config(format!(
                    "prompt template must contain {name} exactly once, found {c}"
                )));
            }
        }
        pieces.retain(|p| !matches!(p, Piece::Text(t) if t.is_empty()));
        Ok(Self {
            instruction: instruction.to_string(),
            pieces,
        })
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    fn render(&self, query: &str, document: &str) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::Instruction) => out.push_str(&self.instruction),
                Piece::Slot(Slot::Query) => out.push_str(query),
                Piece::Slot(Slot::Document) => out.push_str(document),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut r = Self {
            templates: BTreeMap::new(),
        };
        r.register(DEFAULT_TEMPLATE, QWEN3_RERANKER, DEFAULT_INSTRUCTION)
            .expect("built-in template");
        r.register("plain", PLAIN, DEFAULT_INSTRUCTION)
            .expect("built-in template");
        r
    }
}

impl TemplateRegistry {
    pub fn register(&mut self, id: &str, body: &str, instruction: &str) -> Result<()> {
        let t = PromptTemplate::parse(body, instruction)?;
        self.templates.insert(id.to_string(), t);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| BelxError::Config(format!("unknown prompt template {id:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn assemble(&self, id: &str, mention: &str, query: &str, document: &str) -> Result<PromptInput> {
        let t = self.get(id)?;
        Ok(PromptInput {
            instruction: t.instruction.clone(),
            mention: mention.to_string(),
            query: query.to_string(),
            document: document.to_string(),
            assembled: t.render(query, document),
        })
    }
}

/// The scorer input for one (mention, candidate) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInput {
    pub instruction: String,
    /// Unmarked mention surface.
    pub mention: String,
    pub query: String,
    pub document: String,
    pub assembled: String,
}
