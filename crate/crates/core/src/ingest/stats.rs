use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::AliasTuple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub count: u64,
    pub percent: f64,
}

/// Corpus composition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: u64,
    pub language_count: usize,
    pub languages: BTreeMap<String, LanguageShare>,
    pub distinct_qids: usize,
    pub distinct_cuis: usize,
    /// QIDs whose tuples carry more than one CUI. Their group is keyed by QID,
    /// so its positives span several CUIs.
    pub multi_cui_qids: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_version: Option<String>,
}

impl CorpusStats {
    pub fn share(&self, lang: &str) -> f64 {
        self.languages.get(lang).map_or(0.0, |l| l.percent)
    }
}

/// Incremental form of [`corpus_stats`] for streamed tuples.
#[derive(Debug, Default)]
pub struct CorpusStatsBuilder {
    total: u64,
    languages: BTreeMap<String, u64>,
    qid_cuis: HashMap<u64, HashSet<String>>,
    cuis: HashSet<String>,
}

impl CorpusStatsBuilder {
    pub fn add(&mut self, t: &AliasTuple) {
        self.total += 1;
        *self.languages.entry(t.language.clone()).or_default() += 1;
        let cuis = self.qid_cuis.entry(t.qid).or_default();
        if !cuis.contains(&t.cui) {
            cuis.insert(t.cui.clone());
        }
        if !self.cuis.contains(&t.cui) {
            self.cuis.insert(t.cui.clone());
        }
    }

    pub fn finish(self, dump_version: Option<String>) -> CorpusStats {
        let total = self.total;
        let languages = self
            .languages
            .into_iter()
            .map(|(lang, count)| {
                let percent = if total == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / total as f64
                };
                (lang, LanguageShare { count, percent })
            })
            .collect::<BTreeMap<_, _>>();
        CorpusStats {
            total,
            language_count: languages.len(),
            languages,
            distinct_qids: self.qid_cuis.len(),
            distinct_cuis: self.cuis.len(),
            multi_cui_qids: self.qid_cuis.values().filter(|c| c.len() > 1).count(),
            dump_version,
        }
    }
}

pub fn corpus_stats<'a, I>(tuples: I) -> CorpusStats
where
    I: IntoIterator<Item = &'a AliasTuple>,
{
    let mut b = CorpusStatsBuilder::default();
    for t in tuples {
        b.add(t);
    }
    b.finish(None)
}

/// Reference composition of the alias corpus extracted from the 2025-12-01
/// sitelink dump with the P2892 (UMLS CUI) mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub dump_version: &'static str,
    pub total: u64,
    pub language_count: usize,
    pub english_percent: f64,
}

impl ReferenceStats {
    pub const WIKIDATA_2025_12_01: ReferenceStats = ReferenceStats {
        dump_version: "2025-12-01",
        total: 3_834_319,
        language_count: 597,
        english_percent: 6.3,
    };

    /// English share is compared at the one-decimal precision it is quoted at.
    pub fn matches(&self, stats: &CorpusStats) -> bool {
        stats.total == self.total
            && stats.language_count == self.language_count
            && (stats.share("en") - self.english_percent).abs() < 0.05
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(qid: u64, lang: &str, cui: &str) -> AliasTuple {
        AliasTuple {
            qid,
            alias: format!("a{qid}{lang}"),
            language: lang.into(),
            cui: cui.into(),
        }
    }

    #[test]
    fn empty_report() {
        let s = corpus_stats(&[]);
        assert_eq!(s.total, 0);
        assert_eq!(s.language_count, 0);
        assert_eq!(s.distinct_qids, 0);
        assert_eq!(s.distinct_cuis, 0);
    }

    #[test]
    fn english_share() {
        let mut tuples = Vec::new();
        for i in 0..4 {
            tuples.push(t(i, "en", "C1"));
        }
        for i in 0..6 {
            tuples.push(t(i, "fr", "C2"));
        }
        let s = corpus_stats(&tuples);
        assert_eq!(s.total, 10);
        assert_eq!(s.share("en"), 40.0);
        assert_eq!(s.distinct_qids, 6);
        assert_eq!(s.distinct_cuis, 2);
        // qids 0..4 carry C1 and C2
        assert_eq!(s.multi_cui_qids, 4);
        let sum: f64 = s.languages.values().map(|l| l.percent).sum();
        assert!((sum - 100.0).abs() <= 0.1);
    }

    #[test]
    fn reference_comparison() {
        let r = ReferenceStats::WIKIDATA_2025_12_01;
        let mut s = corpus_stats(&[t(1, "en", "C1")]);
        assert!(!r.matches(&s));
        s.total = 3_834_319;
        s.language_count = 597;
        s.languages.get_mut("en").unwrap().percent = 6.31;
        assert!(r.matches(&s));
    }

    proptest::proptest! {
        #[test]
        fn percentages_sum_to_hundred(langs in proptest::collection::vec(0usize..7, 1..200)) {
            let tuples: Vec<AliasTuple> = langs
                .iter()
                .enumerate()
                .map(|(i, l)| t(i as u64, ["en", "fr", "de", "ko", "th", "tr", "zh"][*l], "C1"))
                .collect();
            let s = corpus_stats(&tuples);
            let sum: f64 = s.languages.values().map(|l| l.percent).sum();
            proptest::prop_assert!((sum - 100.0).abs() <= 0.1);
        }
    }
}
