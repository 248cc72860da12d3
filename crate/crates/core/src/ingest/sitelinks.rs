//! Streaming parser for sitelink dumps.
//!
//! Two layouts are understood: the MySQL dump of the `wb_items_per_site`
//! table (`INSERT INTO ... VALUES (row_id,item_id,'site','title'),...;`) and
//! a plain `qid\talias\tsite` TSV mirror. The layout is detected from the
//! first non-empty line unless forced.

use std::collections::VecDeque;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mapping::parse_qid;
use super::SiteTriple;
use crate::error::{BelxError, Result};
use crate::kb::normalize_alias;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    #[default]
    Auto,
    Sql,
    Tsv,
}

impl FromStr for DumpFormat {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "sql" => Ok(Self::Sql),
            "tsv" => Ok(Self::Tsv),
            other => Err(BelxError::Config(format!("unknown dump format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub rows: u64,
    pub malformed: u64,
    pub lines: u64,
    pub detected: Option<DumpFormat>,
}

const SQL_PREFIXES: [&str; 8] = ["--", "/*", "INSERT", "CREATE", "DROP", "SET", "LOCK", "UNLOCK"];

fn detect(line: &str) -> DumpFormat {
    let head = line.trim_start();
    if SQL_PREFIXES.iter().any(|p| head.starts_with(p)) {
        DumpFormat::Sql
    } else {
        DumpFormat::Tsv
    }
}

/// Iterator over the triples of a sitelink dump. Memory use is bounded by the
/// longest line.
///
/// Malformed rows are skipped and counted. When the stream ends with more
/// than half of its rows malformed, one final [`BelxError::FormatMismatch`]
/// is yielded.
pub struct SitelinkReader<R> {
    reader: R,
    format: DumpFormat,
    pending: VecDeque<SiteTriple>,
    stats: ParseStats,
    line: String,
    finished: bool,
}

impl<R: BufRead> SitelinkReader<R> {
    pub fn new(reader: R, format: DumpFormat) -> Self {
        Self {
            reader,
            format,
            pending: VecDeque::new(),
            stats: ParseStats::default(),
            line: String::new(),
            finished: false,
        }
    }

    pub fn stats(&self) -> &ParseStats {
        &self.stats
    }

    fn accept(&mut self, qid: u64, alias: &str, site: &str) {
        let alias = normalize_alias(alias);
        if qid == 0 || alias.is_empty() || site.is_empty() {
            self.stats.malformed += 1;
            return;
        }
        self.stats.rows += 1;
        self.pending.push_back(SiteTriple {
            qid,
            alias,
            site: site.to_string(),
        });
    }

    fn handle_line(&mut self) {
        let line = std::mem::take(&mut self.line);
        let text = line.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            self.line = line;
            return;
        }
        if self.format == DumpFormat::Auto {
            self.format = detect(text);
        }
        self.stats.detected = Some(self.format);
        match self.format {
            DumpFormat::Tsv => self.handle_tsv(text),
            DumpFormat::Sql => self.handle_sql(text),
            DumpFormat::Auto => unreachable!(),
        }
        self.line = line;
    }

    fn handle_tsv(&mut self, text: &str) {
        let fields: Vec<&str> = text.split('\t').collect();
        match fields.as_slice() {
            [qid, alias, site] => match parse_qid(qid) {
                Some(q) => self.accept(q, alias, site.trim()),
                None => self.stats.malformed += 1,
            },
            _ => self.stats.malformed += 1,
        }
    }

    fn handle_sql(&mut self, text: &str) {
        let Some(rest) = text.trim_start().strip_prefix("INSERT INTO") else {
            return;
        };
        let Some(pos) = rest.find("VALUES") else {
            self.stats.malformed += 1;
            return;
        };
        let mut cursor = SqlCursor::new(&rest[pos + "VALUES".len()..]);
        loop {
            cursor.skip_ws();
            match cursor.peek() {
                Some(b'(') => {}
                Some(b';') | None => break,
                Some(_) => {
                    // unparseable remainder of the statement
                    self.stats.malformed += 1;
                    break;
                }
            }
            match cursor.tuple() {
                Some(values) => self.handle_sql_row(values),
                None => {
                    self.stats.malformed += 1;
                    if !cursor.recover() {
                        break;
                    }
                }
            }
            cursor.skip_ws();
            if cursor.peek() == Some(b',') {
                cursor.bump();
            }
        }
    }

    fn handle_sql_row(&mut self, values: Vec<SqlValue>) {
        // (ips_row_id, ips_item_id, ips_site_id, ips_site_page), or the
        // three-column variant without the row id.
        let row = match values.as_slice() {
            [SqlValue::Num(_), SqlValue::Num(q), SqlValue::Str(s), SqlValue::Str(a)]
            | [SqlValue::Num(q), SqlValue::Str(s), SqlValue::Str(a)] => {
                q.parse::<u64>().ok().map(|q| (q, a.clone(), s.clone()))
            }
            _ => None,
        };
        match row {
            Some((q, a, s)) => self.accept(q, &a, &s),
            None => self.stats.malformed += 1,
        }
    }

    fn finish(&mut self) -> Option<BelxError> {
        let total = self.stats.rows + self.stats.malformed;
        if total > 0 && self.stats.malformed * 2 > total {
            return Some(BelxError::FormatMismatch {
                malformed: self.stats.malformed,
                total,
            });
        }
        None
    }
}

impl<R: BufRead> Iterator for SitelinkReader<R> {
    type Item = Result<SiteTriple>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(t) = self.pending.pop_front() {
                return Some(Ok(t));
            }
            if self.finished {
                return None;
            }
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => {
                    self.finished = true;
                    return self.finish().map(Err);
                }
                Ok(_) => {
                    self.stats.lines += 1;
                    self.handle_line();
                }
                Err(source) => {
                    self.finished = true;
                    return Some(Err(BelxError::Io {
                        rows: self.stats.rows,
                        source,
                    }));
                }
            }
        }
    }
}

/// Collects a whole dump. See [`SitelinkReader`] for the streaming form.
pub fn parse_sitelink_dump<R: BufRead>(
    reader: R,
    format: DumpFormat,
) -> Result<(Vec<SiteTriple>, ParseStats)> {
    let mut it = SitelinkReader::new(reader, format);
    let mut out = Vec::new();
    for t in it.by_ref() {
        out.push(t?);
    }
    Ok((out, it.stats().clone()))
}

#[derive(Debug, Clone, PartialEq)]
enum SqlValue {
    Num(String),
    Str(String),
    Null,
}

struct SqlCursor<'a> {
    bytes: &'a [u8],
    src: &'a str,
    pos: usize,
}

impl<'a> SqlCursor<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            bytes: src.as_bytes(),
            src,
            pos: 0,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) {
        self.pos += 1;
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.pos += 1;
        }
    }

    /// Parses `( v, v, ... )`. On failure the cursor is left mid-tuple.
    fn tuple(&mut self) -> Option<Vec<SqlValue>> {
        if self.peek() != Some(b'(') {
            return None;
        }
        self.bump();
        let mut values = Vec::new();
        loop {
            self.skip_ws();
            values.push(self.value()?);
            self.skip_ws();
            match self.peek()? {
                b',' => self.bump(),
                b')' => {
                    self.bump();
                    return Some(values);
                }
                _ => return None,
            }
        }
    }

    fn value(&mut self) -> Option<SqlValue> {
        match self.peek()? {
            b'\'' => self.string().map(SqlValue::Str),
            b'N' if self.src[self.pos..].starts_with("NULL") => {
                self.pos += 4;
                Some(SqlValue::Null)
            }
            b'-' | b'0'..=b'9' => {
                let start = self.pos;
                self.bump();
                while matches!(self.peek(), Some(b'0'..=b'9' | b'.' | b'e' | b'E' | b'+' | b'-')) {
                    self.bump();
                }
                Some(SqlValue::Num(self.src[start..self.pos].to_string()))
            }
            _ => None,
        }
    }

    fn string(&mut self) -> Option<String> {
        self.bump();
        let mut out = Vec::new();
        loop {
            let b = self.peek()?;
            self.bump();
            match b {
                b'\\' => {
                    let e = self.peek()?;
                    self.bump();
                    out.push(match e {
                        b'n' => b'\n',
                        b't' => b'\t',
                        b'r' => b'\r',
                        b'0' => 0,
                        b'Z' => 0x1a,
                        other => other,
                    });
                }
                b'\'' if self.peek() == Some(b'\'') => {
                    self.bump();
                    out.push(b'\'');
                }
                b'\'' => break,
                other => out.push(other),
            }
        }
        String::from_utf8(out).ok()
    }

    /// Skips to the start of the next tuple after a parse failure.
    fn recover(&mut self) -> bool {
        let mut in_str = false;
        while let Some(b) = self.peek() {
            self.bump();
            match b {
                b'\\' if in_str => self.bump(),
                b'\'' => in_str = !in_str,
                b')' if !in_str => return true,
                _ => {}
            }
        }
        false
    }
}
