//! Seeded synthetic multilingual corpus for desk-scale runs.
//!
//! Each concept has a base string of consonant-vowel syllables plus one
//! variant per language, produced by a fixed transform:
//!
//! | tag | variant |
//! |-----|---------|
//! | en  | `chronic {base}itis` |
//! | fr  | `syndrome de {base}ose`, k→c |
//! | el  | `νόσος {base}ία`, o→ο (Greek omicron) |
//! | ru  | `болезнь {base}ия`, k→к and s→с (Cyrillic) |
//! | de  | `{base}krankheit`, d→t |
//! | es  | `enfermedad de {base}osis`, v→b and z→s |
//! | it  | `malattia di {base}ite`, d→t |
//! | pt  | `doença de {base}ose`, o→ο (Greek omicron) |
//!
//! Concept `i` withholds the variant of language `i mod n_languages`; it
//! appears only as the test mention, inside a per-language template sentence.
//! The base string is the KB name and the other variants are its aliases.

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BelxError, Result};
use crate::eval::{write_dataset, LinkRecord};
use crate::ingest::{group_positives, write_groups, AliasTuple, PositiveGroup};
use crate::kb::{EntityRecord, KnowledgeBase};

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const TYPES: &[&str] = &[
    "Sign or Symptom",
    "Disease or Syndrome",
    "Pharmacologic Substance",
];

struct Language {
    tag: &'static str,
    template: &'static str,
    transform: fn(&[String]) -> String,
}

/// French-like spelling: k→c.
fn fr_spelling(c: char) -> char {
    match c {
        'k' => 'c',
        c => c,
    }
}

/// German-like spelling: d→t.
fn de_spelling(c: char) -> char {
    match c {
        'd' => 't',
        c => c,
    }
}

/// Greek omicron for o.
fn el_spelling(c: char) -> char {
    match c {
        'o' => 'ο',
        c => c,
    }
}

/// Cyrillic letters for k and s.
fn ru_spelling(c: char) -> char {
    match c {
        'k' => 'к',
        's' => 'с',
        c => c,
    }
}

/// Spanish-like spelling: v→b, z→s.
fn es_spelling(c: char) -> char {
    match c {
        'v' => 'b',
        'z' => 's',
        c => c,
    }
}

fn joined(s: &[String]) -> String {
    s.concat()
}

fn map_chars(s: &str, f: impl Fn(char) -> char) -> String {
    s.chars().map(f).collect()
}

const LANGUAGES: &[Language] = &[
    Language {
        tag: "en",
        template: "The patient reported {} during the last visit.",
        transform: |s| format!("chronic {}itis", joined(s)),
    },
    Language {
        tag: "fr",
        template: "Le patient présente {} depuis hier.",
        transform: |s| format!("syndrome de {}ose", map_chars(&joined(s), fr_spelling)),
    },
    Language {
        tag: "el",
        template: "Ο ασθενής εμφανίζει {} από χθες.",
        transform: |s| format!("νόσος {}ία", map_chars(&joined(s), el_spelling)),
    },
    Language {
        tag: "ru",
        template: "У пациента наблюдается {} со вчерашнего дня.",
        transform: |s| format!("болезнь {}ия", map_chars(&joined(s), ru_spelling)),
    },
    Language {
        tag: "de",
        template: "Der Patient klagt seit gestern über {}.",
        transform: |s| format!("{}krankheit", map_chars(&joined(s), de_spelling)),
    },
    Language {
        tag: "es",
        template: "El paciente presenta {} desde ayer.",
        transform: |s| format!("enfermedad de {}osis", map_chars(&joined(s), es_spelling)),
    },
    Language {
        tag: "it",
        template: "Il paziente lamenta {} da ieri.",
        transform: |s| format!("malattia di {}ite", map_chars(&joined(s), de_spelling)),
    },
    Language {
        tag: "pt",
        template: "O paciente apresenta {} desde ontem.",
        transform: |s| format!("doença de {}ose", map_chars(&joined(s), el_spelling)),
    },
];

pub const MAX_LANGUAGES: usize = LANGUAGES.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_concepts: usize,
    pub n_languages: usize,
    pub languages: Vec<String>,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub groups: Vec<PositiveGroup>,
    pub records: Vec<LinkRecord>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPaths {
    pub groups: PathBuf,
    pub kb: PathBuf,
    pub dataset: PathBuf,
    pub manifest: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            groups: dir.join("groups.jsonl"),
            kb: dir.join("kb.jsonl"),
            dataset: dir.join("dataset.jsonl"),
            manifest: dir.join("manifest.json"),
        }
    }
}

fn syllables(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(3..=4);
    (0..n)
        .map(|_| {
            let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
            let v = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{c}{v}")
        })
        .collect()
}

/// Builds the corpus. Bases whose strings would collide with any string
/// already generated are redrawn, so every alias and mention is unique.
pub fn generate_synthetic_corpus(
    n_concepts: usize,
    n_languages: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_concepts < 2 {
        return Err(BelxError::Config(
            "synthetic corpus needs at least 2 concepts".into(),
        ));
    }
    if !(2..=MAX_LANGUAGES).contains(&n_languages) {
        return Err(BelxError::Config(format!(
            "synthetic corpus supports 2 to {MAX_LANGUAGES} languages, got {n_languages}"
        )));
    }
    let langs = &LANGUAGES[..n_languages];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<String> = HashSet::new();
    let mut entities = Vec::with_capacity(n_concepts);
    let mut tuples = Vec::new();
    let mut records = Vec::with_capacity(n_concepts);
    for i in 0..n_concepts {
        let (base, variants) = loop {
            let syl = syllables(&mut rng);
            let base = joined(&syl);
            let variants: Vec<String> = langs.iter().map(|l| (l.transform)(&syl)).collect();
            let mut all: Vec<&String> = variants.iter().collect();
            all.push(&base);
            let distinct: HashSet<&String> = all.iter().copied().collect();
            if distinct.len() == all.len() && all.iter().all(|s| !used.contains(*s)) {
                used.extend(all.into_iter().cloned());
                break (base, variants);
            }
        };
        let held = i % n_languages;
        let cui = format!("C{:07}", i + 1);
        let qid = i as u64 + 1;
        let mut entity = EntityRecord::named(cui.clone(), base.clone());
        entity.semantic_type = Some(TYPES[i % TYPES.len()].to_string());
        entity.description = Some(format!("synthetic concept number {}", i + 1));
        tuples.push(AliasTuple {
            qid,
            alias: base.clone(),
            language: "und".into(),
            cui: cui.clone(),
        });
        for (j, (lang, v)) in langs.iter().zip(&variants).enumerate() {
            if j == held {
                continue;
            }
            entity.aliases.push((v.clone(), lang.tag.to_string()));
            tuples.push(AliasTuple {
                qid,
                alias: v.clone(),
                language: lang.tag.into(),
                cui: cui.clone(),
            });
        }
        entities.push(entity);
        let lang = &langs[held];
        let mention = &variants[held];
        let (before, after) = lang.template.split_once("{}").expect("template has a slot");
        let text = format!("{before}{mention}{after}");
        records.push(LinkRecord::new(
            &format!("syn-{:05}", i + 1),
            &text,
            before.len(),
            before.len() + mention.len(),
            &cui,
            lang.tag,
        )?);
    }
    let manifest = Manifest {
        seed,
        n_concepts,
        n_languages,
        languages: langs.iter().map(|l| l.tag.to_string()).collect(),
        ids: records.iter().map(|r| r.id.clone()).collect(),
    };
    Ok(SyntheticCorpus {
        kb: KnowledgeBase::from_entities(entities)?,
        groups: group_positives(tuples),
        records,
        manifest,
    })
}

impl SyntheticCorpus {
    pub fn write(&self, paths: &SyntheticPaths) -> Result<()> {
        let create = |p: &Path| -> Result<BufWriter<std::fs::File>> {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| BelxError::file(dir, e))?;
            }
            Ok(BufWriter::new(
                std::fs::File::create(p).map_err(|e| BelxError::file(p, e))?,
            ))
        };
        let finish = |mut w: BufWriter<std::fs::File>, p: &Path| w.flush().map_err(|e| BelxError::file(p, e));
        let mut w = create(&paths.groups)?;
        write_groups(&mut w, &self.groups)?;
        finish(w, &paths.groups)?;
        let mut w = create(&paths.kb)?;
        self.kb.write_jsonl(&mut w)?;
        finish(w, &paths.kb)?;
        let mut w = create(&paths.dataset)?;
        write_dataset(&mut w, &self.records)?;
        finish(w, &paths.dataset)?;
        let mut w = create(&paths.manifest)?;
        serde_json::to_writer_pretty(&mut w, &self.manifest)?;
        w.write_all(b"\n")
            .map_err(|e| BelxError::file(&paths.manifest, e))?;
        finish(w, &paths.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_corpus_counts() {
        let c = generate_synthetic_corpus(2, 2, 1).unwrap();
        assert_eq!(c.records.len(), 2);
        // base plus one remaining variant per concept: one pair each
        assert!(c.groups.iter().all(|g| g.members.len() == 2));
        assert_eq!(c.groups.len(), 2);
    }

    #[test]
    fn transforms_by_hand() {
        let s: Vec<String> = ["do", "ke", "vi", "zu", "sa"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        let out: Vec<String> = LANGUAGES.iter().map(|l| (l.transform)(&s)).collect();
        assert_eq!(
            out,
            [
                "chronic dokevizusaitis",
                "syndrome de docevizusaose",
                "νόσος d\u{3bf}kevizusaία",
                "болезнь do\u{43a}evizu\u{441}aия",
                "tokevizusakrankheit",
                "enfermedad de dokebisusaosis",
                "malattia di tokevizusaite",
                "doença de d\u{3bf}kevizusaose",
            ]
        );
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_synthetic_corpus(1, 2, 0).is_err());
        assert!(generate_synthetic_corpus(5, 1, 0).is_err());
        assert!(generate_synthetic_corpus(5, MAX_LANGUAGES + 1, 0).is_err());
    }
}
