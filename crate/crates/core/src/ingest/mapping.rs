//! QID → CUI multimap, read from SPARQL JSON results or a two-column TSV.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde_json::Value;

use crate::error::{BelxError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuiMapping {
    map: BTreeMap<u64, BTreeSet<String>>,
    /// SPARQL bindings without a usable `item` or `cui`.
    pub skipped: u64,
    /// CUIs not shaped like `C` + digits; kept, only counted.
    pub irregular_cuis: u64,
}

impl CuiMapping {
    pub fn get(&self, qid: u64) -> Option<&BTreeSet<String>> {
        self.map.get(&qid)
    }

    pub fn insert(&mut self, qid: u64, cui: impl Into<String>) {
        let cui = cui.into();
        if !is_umls_cui(&cui) {
            self.irregular_cuis += 1;
        }
        self.map.entry(qid).or_default().insert(cui);
    }

    /// Number of QIDs.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &BTreeSet<String>)> {
        self.map.iter().map(|(q, c)| (*q, c))
    }
}

/// `C` followed by one or more ASCII digits.
pub fn is_umls_cui(s: &str) -> bool {
    s.len() > 1 && s.starts_with('C') && s[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Accepts `42`, `Q42`, `wd:Q42`, `<http://www.wikidata.org/entity/Q42>` and
/// the bare entity URI.
pub fn parse_qid(raw: &str) -> Option<u64> {
    let s = raw.trim().trim_start_matches('<').trim_end_matches('>');
    let tail = s.rsplit(['/', ':']).next()?;
    let digits = tail.strip_prefix('Q').unwrap_or(tail);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&q| q > 0)
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(s)
}

/// Loads the mapping; the format is JSON when the first non-blank character
/// is `{`, TSV otherwise.
pub fn load_cui_mapping<R: BufRead>(mut reader: R) -> Result<CuiMapping> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|source| BelxError::Io { rows: 0, source })?;
    if text.trim_start().starts_with('{') {
        from_sparql_json(&text)
    } else {
        from_tsv(&text)
    }
}

fn from_sparql_json(text: &str) -> Result<CuiMapping> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| BelxError::Format(format!("SPARQL results: {e}")))?;
    let bindings = doc
        .pointer("/results/bindings")
        .and_then(Value::as_array)
        .ok_or_else(|| BelxError::Format("SPARQL results lack results.bindings".into()))?;
    let mut mapping = CuiMapping::default();
    for b in bindings {
        let item = b.pointer("/item/value").and_then(Value::as_str);
        let cui = b.pointer("/cui/value").and_then(Value::as_str);
        match (item.and_then(parse_qid), cui.map(str::trim)) {
            (Some(q), Some(c)) if !c.is_empty() => mapping.insert(q, c),
            _ => mapping.skipped += 1,
        }
    }
    Ok(mapping)
}

fn from_tsv(text: &str) -> Result<CuiMapping> {
    let mut mapping = CuiMapping::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line.starts_with('?')) {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(q), Some(c), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(BelxError::Format(format!(
                "mapping line {}: expected two tab-separated columns",
                i + 1
            )));
        };
        let qid = parse_qid(q)
            .ok_or_else(|| BelxError::Format(format!("mapping line {}: bad qid {q:?}", i + 1)))?;
        let cui = unquote(c);
        if cui.is_empty() {
            return Err(BelxError::Format(format!("mapping line {}: empty cui", i + 1)));
        }
        mapping.insert(qid, cui);
    }
    Ok(mapping)
}
