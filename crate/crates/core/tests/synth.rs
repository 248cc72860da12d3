use std::collections::HashSet;

use belx::eval::load_dataset;
use belx::ingest::read_groups;
use belx::kb::{normalize_alias, KnowledgeBase};
use belx::synth::{generate_synthetic_corpus, SyntheticPaths, MAX_LANGUAGES};

fn files(dir: &std::path::Path) -> Vec<Vec<u8>> {
    let p = SyntheticPaths::in_dir(dir);
    [p.groups, p.kb, p.dataset, p.manifest]
        .iter()
        .map(|f| std::fs::read(f).unwrap())
        .collect()
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(50, 4, 9)
        .unwrap()
        .write(&SyntheticPaths::in_dir(a.path()))
        .unwrap();
    generate_synthetic_corpus(50, 4, 9)
        .unwrap()
        .write(&SyntheticPaths::in_dir(b.path()))
        .unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(50, 4, 10)
        .unwrap()
        .write(&SyntheticPaths::in_dir(c.path()))
        .unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn two_by_two_counts() {
    let c = generate_synthetic_corpus(2, 2, 0).unwrap();
    assert_eq!(c.records.len(), 2);
    let pairs: usize = c
        .groups
        .iter()
        .map(|g| g.members.len() * (g.members.len() - 1) / 2)
        .sum();
    assert_eq!(pairs, 2);
}

#[test]
fn held_out_mentions_never_reach_training_or_index() {
    for (n, l, seed) in [(200, 5, 42), (64, MAX_LANGUAGES, 1), (30, 2, 5)] {
        let dir = tempfile::tempdir().unwrap();
        let paths = SyntheticPaths::in_dir(dir.path());
        generate_synthetic_corpus(n, l, seed)
            .unwrap()
            .write(&paths)
            .unwrap();
        let kb = KnowledgeBase::load(&paths.kb).unwrap();
        let indexed: HashSet<String> = kb
            .alias_rows()
            .into_iter()
            .map(|(a, _, _)| normalize_alias(&a))
            .collect();
        let trained: HashSet<String> = read_groups(std::io::BufReader::new(
            std::fs::File::open(&paths.groups).unwrap(),
        ))
        .unwrap()
        .iter()
        .flat_map(|g| g.aliases().map(normalize_alias).collect::<Vec<_>>())
        .collect();
        let data = load_dataset(&paths.dataset, Default::default()).unwrap();
        assert_eq!(data.records.len(), n);
        for r in &data.records {
            let m = normalize_alias(r.mention());
            assert!(!indexed.contains(&m), "{m} is indexed");
            assert!(!trained.contains(&m), "{m} is in a training group");
            assert!(kb.get(&r.gold_cui).is_some());
        }
        let langs: HashSet<&str> = data.records.iter().map(|r| r.language.as_str()).collect();
        assert_eq!(langs.len(), l);
    }
}
