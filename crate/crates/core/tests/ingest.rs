mod common;

use std::process::Command;

use belx::ingest::{group_positives, read_tuples, write_groups};
use belx::pipeline::{run_pipeline, PipelineConfig, RunOptions, Stage, StageStatus};
use common::{expected, fixture_dir, overlap, run_ingest_fixture};

#[test]
fn library_chain_matches_expectation_files() {
    let out = run_ingest_fixture();
    assert_eq!(out.triples.iter().filter(|&&b| b == b'\n').count(), 100);
    assert_eq!(
        String::from_utf8(out.triples).unwrap(),
        String::from_utf8(expected("triples.tsv")).unwrap()
    );
    assert_eq!(
        String::from_utf8(out.tuples).unwrap(),
        String::from_utf8(expected("tuples.tsv")).unwrap()
    );
    assert_eq!(
        String::from_utf8(out.filtered.clone()).unwrap(),
        String::from_utf8(expected("tuples.filtered.tsv")).unwrap()
    );
    assert_eq!(
        String::from_utf8(out.groups.clone()).unwrap(),
        String::from_utf8(expected("groups.jsonl")).unwrap()
    );
    assert_eq!(out.mentions.len(), 5);
    assert!(overlap(&out.filtered, &out.mentions).is_empty());

    let mut in_memory = Vec::new();
    write_groups(
        &mut in_memory,
        &group_positives(read_tuples(&out.filtered[..]).unwrap()),
    )
    .unwrap();
    assert_eq!(in_memory, out.groups);
}

#[test]
fn every_mention_hits_the_unfiltered_tuples() {
    let out = run_ingest_fixture();
    let hits = overlap(&out.tuples, &out.mentions);
    for m in &out.mentions {
        assert!(hits.contains(&belx::kb::normalize_alias(m)), "{m} never occurs");
    }
}

#[test]
fn pipeline_stages_write_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let text = format!(
        r#"
seed = 3
work_dir = "{work}"
[inputs]
dump = "{fx}/dump.sql"
mapping = "{fx}/mapping.tsv"
eval_mentions = "{fx}/eval_mentions.txt"
[encoder]
backend = "hashed_ngram"
dimension = 8
buckets = 256
[train]
batch_size = 4
epochs = 1
"#,
        work = dir.path().join("work").display(),
        fx = fx.display()
    );
    let cfg = PipelineConfig::from_toml_str(&text, dir.path()).unwrap();
    let summary = run_pipeline(&cfg, &RunOptions::default(), &mut std::io::sink()).unwrap();
    let order: Vec<Stage> = summary.stages.iter().map(|(s, _)| *s).collect();
    assert_eq!(
        order,
        [
            Stage::Ingest,
            Stage::Map,
            Stage::Filter,
            Stage::Group,
            Stage::Train,
            Stage::Index
        ]
    );
    let p = &summary.paths;
    assert_eq!(std::fs::read(&p.triples).unwrap(), expected("triples.tsv"));
    assert_eq!(std::fs::read(&p.tuples).unwrap(), expected("tuples.tsv"));
    assert_eq!(
        std::fs::read(&p.filtered).unwrap(),
        expected("tuples.filtered.tsv")
    );
    assert_eq!(std::fs::read(&p.groups).unwrap(), expected("groups.jsonl"));
    let again = run_pipeline(&cfg, &RunOptions::default(), &mut std::io::sink()).unwrap();
    assert!(again.stages.iter().all(|(_, s)| *s == StageStatus::Skipped));
}

#[test]
fn cli_subcommands_write_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let bin = env!("CARGO_BIN_EXE_belx");
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let s = |p: std::path::PathBuf| p.display().to_string();
    run(&[
        "ingest",
        "--dump",
        &s(fx.join("dump.sql")),
        "--format",
        "auto",
        "--out",
        &s(d.join("t.tsv")),
    ]);
    run(&[
        "map",
        "--mapping",
        &s(fx.join("mapping.tsv")),
        "--triples",
        &s(d.join("t.tsv")),
        "--out",
        &s(d.join("u.tsv")),
    ]);
    run(&[
        "filter",
        "--tuples",
        &s(d.join("u.tsv")),
        "--eval-mentions",
        &s(fx.join("eval_mentions.txt")),
        "--out",
        &s(d.join("f.tsv")),
        "--report",
        &s(d.join("r.json")),
    ]);
    run(&[
        "group",
        "--tuples",
        &s(d.join("f.tsv")),
        "--out",
        &s(d.join("g.jsonl")),
        "--chunk-rows",
        "5",
    ]);
    assert_eq!(std::fs::read(d.join("t.tsv")).unwrap(), expected("triples.tsv"));
    assert_eq!(std::fs::read(d.join("u.tsv")).unwrap(), expected("tuples.tsv"));
    assert_eq!(
        std::fs::read(d.join("f.tsv")).unwrap(),
        expected("tuples.filtered.tsv")
    );
    assert_eq!(
        std::fs::read(d.join("g.jsonl")).unwrap(),
        expected("groups.jsonl")
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&expected("summary.json")).unwrap();
    assert_eq!(report["removed"], summary["removed"]);
}
