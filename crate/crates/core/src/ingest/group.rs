//! Grouping alias tuples into per-QID positive sets.
//!
//! [`group_positives`] works in memory. [`group_tuples_external`] produces
//! byte-identical output for inputs that do not fit in memory by spilling
//! sorted runs to temporary files and merging them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};

use serde::{Deserialize, Serialize};

use super::{parse_tuple_line, tuple_reader, AliasTuple};
use crate::error::{BelxError, Result};

/// All aliases sharing one QID, alias strings deduplicated (first occurrence
/// wins, input order kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveGroup {
    pub qid: u64,
    pub members: Vec<AliasTuple>,
    /// Tuples seen for this QID before string deduplication.
    pub raw_count: usize,
}

impl PositiveGroup {
    /// A group with one distinct alias contributes no positive pair.
    pub fn is_single_alias(&self) -> bool {
        self.members.len() < 2
    }

    pub fn aliases(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.alias.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct GroupLine {
    qid: u64,
    aliases: Vec<MemberLine>,
}

#[derive(Serialize, Deserialize)]
struct MemberLine {
    text: String,
    lang: String,
    cui: String,
}

struct GroupAccumulator {
    qid: u64,
    seen: HashSet<String>,
    members: Vec<AliasTuple>,
    raw_count: usize,
}

impl GroupAccumulator {
    fn new(qid: u64) -> Self {
        Self {
            qid,
            seen: HashSet::new(),
            members: Vec::new(),
            raw_count: 0,
        }
    }

    fn push(&mut self, t: AliasTuple) {
        self.raw_count += 1;
        if self.seen.insert(t.alias.clone()) {
            self.members.push(t);
        }
    }

    fn finish(self) -> PositiveGroup {
        PositiveGroup {
            qid: self.qid,
            members: self.members,
            raw_count: self.raw_count,
        }
    }
}

/// One group per distinct QID, in ascending QID order.
pub fn group_positives<I>(tuples: I) -> Vec<PositiveGroup>
where
    I: IntoIterator<Item = AliasTuple>,
{
    let mut by_qid: BTreeMap<u64, GroupAccumulator> = BTreeMap::new();
    for t in tuples {
        by_qid
            .entry(t.qid)
            .or_insert_with(|| GroupAccumulator::new(t.qid))
            .push(t);
    }
    by_qid.into_values().map(GroupAccumulator::finish).collect()
}

fn write_group(w: &mut impl Write, g: &PositiveGroup) -> Result<()> {
    let line = GroupLine {
        qid: g.qid,
        aliases: g
            .members
            .iter()
            .map(|m| MemberLine {
                text: m.alias.clone(),
                lang: m.language.clone(),
                cui: m.cui.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut *w, &line)?;
    w.write_all(b"\n")
        .map_err(|source| BelxError::Io { rows: 0, source })
}

pub fn write_groups(mut w: impl Write, groups: &[PositiveGroup]) -> Result<()> {
    for g in groups {
        write_group(&mut w, g)?;
    }
    Ok(())
}

pub fn read_groups<R: BufRead>(reader: R) -> Result<Vec<PositiveGroup>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| BelxError::Io {
            rows: i as u64,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GroupLine = serde_json::from_str(&line)
            .map_err(|e| BelxError::Format(format!("group line {}: {e}", i + 1)))?;
        let members: Vec<AliasTuple> = g
            .aliases
            .into_iter()
            .map(|m| AliasTuple {
                qid: g.qid,
                alias: m.text,
                language: m.lang,
                cui: m.cui,
            })
            .collect();
        if members.is_empty() {
            return Err(BelxError::Format(format!("group line {}: no aliases", i + 1)));
        }
        out.push(PositiveGroup {
            qid: g.qid,
            raw_count: members.len(),
            members,
        });
    }
    Ok(out)
}

/// Streams AliasTuple TSV from `reader` and writes PositiveGroup JSONL to
/// `writer`, holding at most `chunk_rows` tuples (plus one group) in memory.
/// Returns the number of groups written.
pub fn group_tuples_external<R: BufRead, W: Write>(reader: R, writer: W, chunk_rows: usize) -> Result<usize> {
    let chunk_rows = chunk_rows.max(1);
    let mut runs: Vec<tempfile::NamedTempFile> = Vec::new();
    let mut chunk: Vec<(u64, u64, AliasTuple)> = Vec::with_capacity(chunk_rows.min(1 << 16));
    let mut seq = 0u64;
    for t in tuple_reader(reader) {
        let t = t?;
        chunk.push((t.qid, seq, t));
        seq += 1;
        if chunk.len() >= chunk_rows {
            runs.push(spill(&mut chunk)?);
        }
    }
    if !chunk.is_empty() {
        runs.push(spill(&mut chunk)?);
    }

    let mut sources = Vec::with_capacity(runs.len());
    for run in &runs {
        let f = run.reopen().map_err(|e| BelxError::file(run.path(), e))?;
        sources.push(BufReader::new(f).lines());
    }
    let mut heap = BinaryHeap::new();
    for (i, src) in sources.iter_mut().enumerate() {
        if let Some(item) = next_run_item(src)? {
            heap.push(Reverse((item.0, item.1, i, item.2)));
        }
    }

    let mut out = BufWriter::new(writer);
    let mut current: Option<GroupAccumulator> = None;
    let mut written = 0usize;
    while let Some(Reverse((qid, _, src, tuple))) = heap.pop() {
        if current.as_ref().is_some_and(|g| g.qid != qid) {
            write_group(&mut out, &current.take().unwrap().finish())?;
            written += 1;
        }
        current
            .get_or_insert_with(|| GroupAccumulator::new(qid))
            .push(tuple.0);
        if let Some(item) = next_run_item(&mut sources[src])? {
            heap.push(Reverse((item.0, item.1, src, item.2)));
        }
    }
    if let Some(g) = current {
        write_group(&mut out, &g.finish())?;
        written += 1;
    }
    out.flush()
        .map_err(|source| BelxError::Io { rows: seq, source })?;
    Ok(written)
}

type RunItem = (u64, u64, TupleOrd);

/// AliasTuple with an arbitrary total order so it can ride in the heap; the
/// (qid, seq) prefix is unique so this order never decides anything.
#[derive(Debug, PartialEq, Eq)]
struct TupleOrd(AliasTuple);

impl PartialOrd for TupleOrd {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TupleOrd {
    fn cmp(&self, _other: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

fn spill(chunk: &mut Vec<(u64, u64, AliasTuple)>) -> Result<tempfile::NamedTempFile> {
    chunk.sort_by_key(|(q, s, _)| (*q, *s));
    let mut file = tempfile::NamedTempFile::new().map_err(|source| BelxError::Io { rows: 0, source })?;
    {
        let mut w = BufWriter::new(file.as_file_mut());
        for (_, seq, t) in chunk.drain(..) {
            write!(w, "{seq}\t").map_err(|source| BelxError::Io { rows: seq, source })?;
            super::write_tuple(&mut w, &t).map_err(|source| BelxError::Io { rows: seq, source })?;
        }
        w.flush().map_err(|source| BelxError::Io { rows: 0, source })?;
    }
    Ok(file)
}

fn next_run_item(lines: &mut std::io::Lines<BufReader<std::fs::File>>) -> Result<Option<RunItem>> {
    let Some(line) = lines.next() else {
        return Ok(None);
    };
    let line = line.map_err(|source| BelxError::Io { rows: 0, source })?;
    let (seq, rest) = line
        .split_once('\t')
        .ok_or_else(|| BelxError::Format("corrupt spill run".into()))?;
    let seq: u64 = seq
        .parse()
        .map_err(|_| BelxError::Format("corrupt spill run".into()))?;
    let t = parse_tuple_line(rest).ok_or_else(|| BelxError::Format("corrupt spill run".into()))?;
    Ok(Some((t.qid, seq, TupleOrd(t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tuple(qid: u64, alias: &str, lang: &str) -> AliasTuple {
        AliasTuple {
            qid,
            alias: alias.into(),
            language: lang.into(),
            cui: format!("C{qid:07}"),
        }
    }

    #[test]
    fn two_distinct_aliases() {
        let g = group_positives(vec![tuple(7, "a", "en"), tuple(7, "b", "fr")]);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 2);
        assert!(!g[0].is_single_alias());
    }

    #[test]
    fn same_string_collapses_and_is_flagged() {
        let g = group_positives(vec![tuple(7, "X", "en"), tuple(7, "X", "de")]);
        assert_eq!(g[0].members.len(), 1);
        assert_eq!(g[0].raw_count, 2);
        assert!(g[0].is_single_alias());
        assert_eq!(g[0].members[0].language, "en");
    }

    #[test]
    fn sizes_match_counting_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tuples: Vec<AliasTuple> = (0..50)
            .map(|_| {
                let q = rng.random_range(1..=10u64);
                let a = format!("a{}", rng.random_range(0..6));
                tuple(q, &a, "en")
            })
            .collect();
        let groups = group_positives(tuples.clone());

        let mut distinct: std::collections::BTreeMap<u64, std::collections::BTreeSet<String>> =
            Default::default();
        let mut raw: std::collections::BTreeMap<u64, usize> = Default::default();
        for t in &tuples {
            distinct.entry(t.qid).or_default().insert(t.alias.clone());
            *raw.entry(t.qid).or_default() += 1;
        }
        assert_eq!(groups.len(), distinct.len());
        for g in &groups {
            assert_eq!(g.members.len(), distinct[&g.qid].len());
            assert_eq!(g.raw_count, raw[&g.qid]);
        }
        assert_eq!(groups.iter().map(|g| g.raw_count).sum::<usize>(), tuples.len());
    }

    #[test]
    fn jsonl_schema() {
        let g = group_positives(vec![tuple(7, "Dyspnea", "en"), tuple(7, "Atemnot", "de")]);
        let mut buf = Vec::new();
        write_groups(&mut buf, &g).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"qid\":7,\"aliases\":[{\"text\":\"Dyspnea\",\"lang\":\"en\",\"cui\":\"C0000007\"},{\"text\":\"Atemnot\",\"lang\":\"de\",\"cui\":\"C0000007\"}]}\n"
        );
        let back = read_groups(buf.as_slice()).unwrap();
        assert_eq!(back[0].members, g[0].members);
    }

    #[test]
    fn external_matches_in_memory() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tuples: Vec<AliasTuple> = (0..500)
            .map(|_| {
                let q = rng.random_range(1..=40u64);
                let a = format!("alias {}", rng.random_range(0..12));
                tuple(q, &a, ["en", "fr", "de"][rng.random_range(0..3)])
            })
            .collect();
        let mut expected = Vec::new();
        let groups = group_positives(tuples.clone());
        write_groups(&mut expected, &groups).unwrap();

        let mut tsv = Vec::new();
        super::super::write_tuples(&mut tsv, &tuples).unwrap();
        for chunk in [1, 7, 64, 10_000] {
            let mut out = Vec::new();
            let n = group_tuples_external(tsv.as_slice(), &mut out, chunk).unwrap();
            assert_eq!(n, groups.len());
            assert_eq!(out, expected, "chunk {chunk}");
        }
    }

    proptest::proptest! {
        #[test]
        fn grouping_partitions_input(
            rows in proptest::collection::vec((1u64..8, "[ab]{1,2}"), 0..60)
        ) {
            let tuples: Vec<AliasTuple> = rows.iter().map(|(q, a)| tuple(*q, a, "en")).collect();
            let groups = group_positives(tuples.clone());
            proptest::prop_assert_eq!(groups.iter().map(|g| g.raw_count).sum::<usize>(), tuples.len());
            for g in &groups {
                proptest::prop_assert!(g.members.iter().all(|m| m.qid == g.qid));
                let set: HashSet<&str> = g.aliases().collect();
                proptest::prop_assert_eq!(set.len(), g.members.len());
            }
        }
    }
}
