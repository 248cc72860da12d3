#![allow(dead_code)]

use std::path::{Path, PathBuf};

use belx::ingest::{
    filter_eval_overlap, group_tuples_external, join_aliases_with_cuis, load_cui_mapping,
    parse_sitelink_dump, read_tuples, write_triples, write_tuples, DumpFormat,
};
use belx::kb::normalize_alias;
use belx::pipeline::read_eval_mentions;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ingest")
}

pub fn expected(name: &str) -> Vec<u8> {
    std::fs::read(fixture_dir().join("expected").join(name)).unwrap()
}

/// Runs the ingestion chain on the fixture in memory and returns the four
/// serialized outputs: triples, tuples, filtered tuples, groups.
pub struct IngestOutputs {
    pub triples: Vec<u8>,
    pub tuples: Vec<u8>,
    pub filtered: Vec<u8>,
    pub groups: Vec<u8>,
    pub mentions: Vec<String>,
}

pub fn run_ingest_fixture() -> IngestOutputs {
    let dir = fixture_dir();
    let dump = std::fs::read(dir.join("dump.sql")).unwrap();
    let (triples, stats) = parse_sitelink_dump(&dump[..], DumpFormat::Auto).unwrap();
    assert_eq!(stats.malformed, 0);
    let mut t_bytes = Vec::new();
    write_triples(&mut t_bytes, &triples).unwrap();

    let mapping = load_cui_mapping(&std::fs::read(dir.join("mapping.tsv")).unwrap()[..]).unwrap();
    let (tuples, _) = join_aliases_with_cuis(triples, &mapping);
    let mut tu_bytes = Vec::new();
    write_tuples(&mut tu_bytes, &tuples).unwrap();

    let mentions = read_eval_mentions(&dir.join("eval_mentions.txt")).unwrap();
    let (kept, _) = filter_eval_overlap(tuples, mentions.iter().map(String::as_str));
    let mut f_bytes = Vec::new();
    write_tuples(&mut f_bytes, &kept).unwrap();

    let mut g_bytes = Vec::new();
    group_tuples_external(&f_bytes[..], &mut g_bytes, 7).unwrap();
    IngestOutputs {
        triples: t_bytes,
        tuples: tu_bytes,
        filtered: f_bytes,
        groups: g_bytes,
        mentions,
    }
}

/// Normalized aliases of the filtered tuples that equal a normalized mention.
pub fn overlap(filtered: &[u8], mentions: &[String]) -> Vec<String> {
    let blocked: Vec<String> = mentions.iter().map(|m| normalize_alias(m)).collect();
    read_tuples(filtered)
        .unwrap()
        .into_iter()
        .map(|t| normalize_alias(&t.alias))
        .filter(|a| blocked.contains(a))
        .collect()
}
