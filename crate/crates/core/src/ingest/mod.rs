//! Training-corpus construction from sitelink dumps.
//!
//! Sitelink rows become `(qid, alias, site)` triples, are joined against a
//! QID→CUI mapping into [`AliasTuple`]s, stripped of anything that collides
//! with an evaluation mention, and finally grouped by QID into positives.

mod group;
mod mapping;
mod sitelinks;
mod stats;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use group::{group_positives, group_tuples_external, read_groups, write_groups, PositiveGroup};
pub use mapping::{is_umls_cui, load_cui_mapping, parse_qid, CuiMapping};
pub use sitelinks::{parse_sitelink_dump, DumpFormat, ParseStats, SitelinkReader};
pub use stats::{corpus_stats, CorpusStats, CorpusStatsBuilder, LanguageShare, ReferenceStats};

use crate::error::{BelxError, Result};
use crate::kb::{normalize_alias, parse_site_language};

/// One sitelink: a Wikidata item, the page title on one site, and that site's key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteTriple {
    pub qid: u64,
    pub alias: String,
    pub site: String,
}

/// A sitelink with its language resolved and a CUI attached.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AliasTuple {
    pub qid: u64,
    pub alias: String,
    pub language: String,
    pub cui: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinOutcome {
    pub emitted: u64,
    pub dropped_unmapped: u64,
    pub unrecognized_sites: u64,
}

/// Attaches every CUI mapped to a triple's QID. Unmapped triples are dropped;
/// a QID with several CUIs fans out into one tuple per CUI in ascending order.
pub fn join_aliases_with_cuis<I>(triples: I, mapping: &CuiMapping) -> (Vec<AliasTuple>, JoinOutcome)
where
    I: IntoIterator<Item = SiteTriple>,
{
    let mut out = Vec::new();
    let mut outcome = JoinOutcome::default();
    for t in triples {
        let Some(cuis) = mapping.get(t.qid) else {
            outcome.dropped_unmapped += 1;
            continue;
        };
        let lang = parse_site_language(&t.site);
        if !lang.recognized {
            outcome.unrecognized_sites += 1;
        }
        for cui in cuis {
            out.push(AliasTuple {
                qid: t.qid,
                alias: t.alias.clone(),
                language: lang.tag.clone(),
                cui: cui.clone(),
            });
        }
    }
    outcome.emitted = out.len() as u64;
    (out, outcome)
}

/// Removes every tuple whose normalized alias equals a normalized evaluation
/// mention. Returns the survivors in input order and the removal count.
pub fn filter_eval_overlap<'a, I>(tuples: Vec<AliasTuple>, eval_mentions: I) -> (Vec<AliasTuple>, u64)
where
    I: IntoIterator<Item = &'a str>,
{
    let blocked: HashSet<String> = eval_mentions.into_iter().map(normalize_alias).collect();
    if blocked.is_empty() {
        return (tuples, 0);
    }
    let before = tuples.len();
    let kept: Vec<AliasTuple> = tuples
        .into_iter()
        .filter(|t| !blocked.contains(&normalize_alias(&t.alias)))
        .collect();
    let removed = (before - kept.len()) as u64;
    (kept, removed)
}

pub fn write_triples(mut w: impl Write, triples: &[SiteTriple]) -> Result<()> {
    for (i, t) in triples.iter().enumerate() {
        writeln!(w, "{}\t{}\t{}", t.qid, t.alias, t.site).map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
    }
    Ok(())
}

pub fn write_tuples(mut w: impl Write, tuples: &[AliasTuple]) -> Result<()> {
    for (i, t) in tuples.iter().enumerate() {
        write_tuple(&mut w, t).map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
    }
    Ok(())
}

pub(crate) fn write_tuple(w: &mut impl Write, t: &AliasTuple) -> std::io::Result<()> {
    writeln!(w, "{}\t{}\t{}\t{}", t.qid, t.alias, t.language, t.cui)
}

pub(crate) fn parse_tuple_line(line: &str) -> Option<AliasTuple> {
    let mut parts = line.split('\t');
    let qid = parse_qid(parts.next()?)?;
    let alias = parts.next()?.to_string();
    let language = parts.next()?.to_string();
    let cui = parts.next()?.to_string();
    if parts.next().is_some() || alias.is_empty() || language.is_empty() || cui.is_empty() {
        return None;
    }
    Some(AliasTuple {
        qid,
        alias,
        language,
        cui,
    })
}

/// Streams the AliasTuple TSV file. Malformed lines are a format error.
pub fn tuple_reader<R: BufRead>(reader: R) -> impl Iterator<Item = Result<AliasTuple>> {
    reader
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|source| BelxError::Io {
                rows: i as u64,
                source,
            })?;
            parse_tuple_line(line.trim_end_matches('\r'))
                .ok_or_else(|| BelxError::Format(format!("alias tuple line {}: {line:?}", i + 1)))
        })
}

pub fn read_tuples<R: BufRead>(reader: R) -> Result<Vec<AliasTuple>> {
    tuple_reader(reader).collect()
}

/// Reads triples written by [`write_triples`] (the simplified TSV dump format).
pub fn read_triples<R: BufRead>(reader: R) -> Result<Vec<SiteTriple>> {
    let (triples, _) = parse_sitelink_dump(reader, DumpFormat::Tsv)?;
    Ok(triples)
}
