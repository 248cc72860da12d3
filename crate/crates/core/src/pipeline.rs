//! Config-driven end-to-end runs with fingerprinted, resumable stages.
//!
//! Stages run in the order synth, ingest, map, filter, group, train, index,
//! link, eval; those without configured inputs are left out. Every artifact
//! gets a sidecar `<file>.meta.json` recording the producing stage, its
//! fingerprint, the config hash, the seed and the artifact's sha256. A stage
//! is skipped when each of its outputs carries the fingerprint it would get
//! now and still hashes to the recorded value.
//!
//! Artifacts hold no timestamps and no absolute paths, so equal inputs,
//! config and seed give byte-identical files.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::contrast::{train_projection, TrainingHyperparams};
use crate::encoder::{build_encoder, BackendConfig, EncoderConfig};
use crate::error::{BelxError, Result};
use crate::eval::{
    describe_reranker, load_dataset, predict, read_dataset, read_predictions, report_from_predictions,
    retrieve_all, write_candidates_file, write_predictions, DatasetFormat, EvalReport, EvalSettings,
    Fingerprint, LinkRecord,
};
use crate::index::{build_index, VectorIndex, DEFAULT_OVERSCAN};
use crate::ingest::{
    filter_eval_overlap, group_tuples_external, join_aliases_with_cuis, load_cui_mapping, read_groups,
    tuple_reader, write_triples, write_tuples, CorpusStatsBuilder, DumpFormat, JoinOutcome, SitelinkReader,
};
use crate::kb::KnowledgeBase;
use crate::rerank::{GoldScorer, HttpScorer, MockScorer, RerankOptions, Reranker, Scorer, TemplateRegistry};
use crate::synth::{generate_synthetic_corpus, SyntheticPaths};
use crate::transport::RetryPolicy;

const CHUNK_ROWS: usize = 100_000;
const GROUP_SPILL_ROWS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Ingest,
    Map,
    Filter,
    Group,
    Train,
    Index,
    Link,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Self::Synth,
        Self::Ingest,
        Self::Map,
        Self::Filter,
        Self::Group,
        Self::Train,
        Self::Index,
        Self::Link,
        Self::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Ingest => "ingest",
            Self::Map => "map",
            Self::Filter => "filter",
            Self::Group => "group",
            Self::Train => "train",
            Self::Index => "index",
            Self::Link => "link",
            Self::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| BelxError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub concepts: usize,
    pub languages: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// Sitelink dump (SQL or TSV).
    pub dump: Option<PathBuf>,
    pub dump_format: DumpFormat,
    /// QID→CUI mapping (SPARQL JSON or TSV).
    pub mapping: Option<PathBuf>,
    /// Mentions to strip from the training tuples; the dataset when absent.
    pub eval_mentions: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub dataset_format: DatasetFormat,
    /// Knowledge base JSONL; index rows and reranker documents come from it.
    pub kb: Option<PathBuf>,
    /// Ready-made positive groups, used when there is no dump.
    pub groups: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// Candidates per mention.
    pub k: usize,
    pub overscan: usize,
    pub k_set: Vec<usize>,
    pub parallelism: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        Self {
            k: e.k_candidates,
            overscan: DEFAULT_OVERSCAN,
            k_set: e.k_set,
            parallelism: e.parallelism,
        }
    }
}

impl RetrievalSection {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            k_set: self.k_set.clone(),
            k_candidates: self.k,
            overscan: self.overscan,
            parallelism: self.parallelism,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Mock,
    /// Awards the dataset's gold CUI; an oracle for bound checks.
    Gold,
    Http,
}

impl FromStr for ScorerKind {
    type Err = BelxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(Self::Mock),
            "gold" => Ok(Self::Gold),
            "http" => Ok(Self::Http),
            _ => Err(BelxError::Config(format!(
                "unknown scorer {s:?} (mock, gold, http)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankSection {
    pub enabled: bool,
    pub scorer: ScorerKind,
    pub url: Option<String>,
    /// Use the batch endpoint of the HTTP scorer.
    pub batch: bool,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    #[serde(flatten)]
    pub options: RerankOptions,
}

impl Default for RerankSection {
    fn default() -> Self {
        Self {
            enabled: true,
            scorer: ScorerKind::Mock,
            url: None,
            batch: false,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            options: RerankOptions::default(),
        }
    }
}

impl RerankSection {
    /// Builds the configured scorer. The gold scorer reads its answers from
    /// `records`.
    pub fn build_scorer(&self, records: &[LinkRecord]) -> Result<Box<dyn Scorer>> {
        Ok(match self.scorer {
            ScorerKind::Mock => Box::new(MockScorer),
            ScorerKind::Gold => Box::new(GoldScorer::new(
                records.iter().map(|r| (r.id.clone(), r.gold_cui.clone())),
            )),
            ScorerKind::Http => {
                let url = self
                    .url
                    .as_deref()
                    .ok_or_else(|| BelxError::Config("rerank.scorer = \"http\" needs rerank.url".into()))?;
                Box::new(HttpScorer::new(url, self.retry, self.max_in_flight, self.batch))
            }
        })
    }
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::hashed_ngram(64)
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

/// The pipeline config file (TOML). Relative paths resolve against the
/// directory holding the config file.
///
/// ```toml
/// seed = 42
/// work_dir = "work"
///
/// [synth]
/// concepts = 200
/// languages = 5
///
/// [encoder]
/// backend = "hashed_ngram"
/// dimension = 64
///
/// [train]
/// batch_size = 64
/// lr = 0.005
///
/// [retrieval]
/// k = 64
/// k_set = [1, 5, 64]
///
/// [rerank]
/// scorer = "mock"
/// marker = "tgt"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    /// `train.seed` is replaced by the top-level seed.
    #[serde(default)]
    pub train: TrainingHyperparams,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub rerank: RerankSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| BelxError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BelxError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.effective_hyperparams().validate()?;
        let r = &self.retrieval;
        if r.k == 0 || r.overscan == 0 || r.parallelism == 0 || r.k_set.contains(&0) {
            return Err(BelxError::Config(
                "retrieval k, overscan, parallelism and k_set entries must be positive".into(),
            ));
        }
        if let Some(s) = &self.synth {
            let i = &self.inputs;
            if i.dump.is_some() || i.dataset.is_some() || i.kb.is_some() || i.groups.is_some() {
                return Err(BelxError::Config(
                    "[synth] generates the groups, KB and dataset; drop inputs.dump/dataset/kb/groups".into(),
                ));
            }
            if s.concepts < 2 || s.languages < 2 {
                return Err(BelxError::Config(
                    "synth needs at least 2 concepts and 2 languages".into(),
                ));
            }
        }
        if self.inputs.dump.is_some() != self.inputs.mapping.is_some() {
            return Err(BelxError::Config(
                "inputs.dump and inputs.mapping go together".into(),
            ));
        }
        if self.inputs.dump.is_some() && self.inputs.groups.is_some() {
            return Err(BelxError::Config(
                "inputs.groups conflicts with inputs.dump".into(),
            ));
        }
        if self.rerank.enabled && self.rerank.scorer == ScorerKind::Http && self.rerank.url.is_none() {
            return Err(BelxError::Config(
                "rerank.scorer = \"http\" needs rerank.url".into(),
            ));
        }
        TemplateRegistry::default().get(&self.rerank.options.template)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.work_dir)
    }

    /// Hash of the config as written, minus the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.work_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn effective_hyperparams(&self) -> TrainingHyperparams {
        TrainingHyperparams {
            seed: self.seed,
            checkpoint: self.train.checkpoint.as_deref().map(|p| self.resolve(p)),
            ..self.train.clone()
        }
    }

    fn trains_head(&self) -> bool {
        matches!(
            self.encoder.backend,
            BackendConfig::HashedNgram { head: None, .. }
        )
    }

    /// Encoder config with paths resolved and, when the pipeline trains the
    /// head, the trained head attached.
    fn effective_encoder(&self, trained_head: Option<&Path>) -> EncoderConfig {
        let mut e = self.encoder.clone();
        match &mut e.backend {
            BackendConfig::File { path } => *path = self.resolve(path),
            BackendConfig::HashedNgram { head, .. } => {
                if let Some(h) = head.as_mut() {
                    *h = self.resolve(h);
                } else if let Some(t) = trained_head {
                    *head = Some(t.to_path_buf());
                }
            }
            BackendConfig::Remote { .. } => {}
        }
        e
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| BelxError::file(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| BelxError::file(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Contents of `<artifact>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: Stage,
    pub fingerprint: String,
    pub config_sha256: String,
    pub seed: u64,
    pub sha256: String,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn read_meta(artifact: &Path) -> Option<ArtifactMeta> {
    let text = std::fs::read_to_string(meta_path(artifact)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<()> {
    let p = meta_path(artifact);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(&p, text).map_err(|e| BelxError::file(&p, e))
}

/// Reads evaluation mentions: dataset JSONL when the first line is a JSON
/// object, the tab-separated dataset layout when it holds tabs, otherwise
/// one mention per line.
pub fn read_eval_mentions(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| BelxError::file(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let format = if first.trim_start().starts_with('{') {
        Some(DatasetFormat::Jsonl)
    } else if first.contains('\t') {
        Some(DatasetFormat::XlbelTsv)
    } else {
        None
    };
    Ok(match format {
        Some(f) => read_dataset(text.as_bytes(), f)?
            .records
            .iter()
            .map(|r| r.mention().to_string())
            .collect(),
        None => text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| BelxError::file(dir, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| BelxError::file(path, e))?,
    ))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| BelxError::file(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| BelxError::file(path, e))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| BelxError::file(path, e))?;
    finish(w, path)
}

/// File names inside the work directory.
#[derive(Debug, Clone)]
pub struct WorkPaths {
    pub synth: SyntheticPaths,
    pub triples: PathBuf,
    pub tuples: PathBuf,
    pub filtered: PathBuf,
    pub filter_report: PathBuf,
    pub groups: PathBuf,
    pub head: PathBuf,
    pub train_report: PathBuf,
    pub index: PathBuf,
    pub candidates: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub state: PathBuf,
}

impl WorkPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            synth: SyntheticPaths::in_dir(&dir.join("synth")),
            triples: dir.join("triples.tsv"),
            tuples: dir.join("tuples.tsv"),
            filtered: dir.join("tuples.filtered.tsv"),
            filter_report: dir.join("filter_report.json"),
            groups: dir.join("groups.jsonl"),
            head: dir.join("head.bin"),
            train_report: dir.join("train_report.json"),
            index: dir.join("index.bin"),
            candidates: dir.join("candidates.jsonl"),
            predictions: dir.join("predictions.jsonl"),
            report: dir.join("report.json"),
            state: dir.join("run_state.json"),
        }
    }
}

/// A file a stage reads; `producer` is set for artifacts of earlier stages.
#[derive(Debug, Clone)]
struct Input {
    path: PathBuf,
    producer: Option<Stage>,
}

#[derive(Debug, Clone)]
struct StagePlan {
    stage: Stage,
    inputs: Vec<Input>,
    outputs: Vec<PathBuf>,
    params: Value,
}

/// Where a stage finds something it needs.
#[derive(Debug, Clone)]
struct Source {
    path: PathBuf,
    producer: Option<Stage>,
}

impl Source {
    fn input(&self) -> Input {
        Input {
            path: self.path.clone(),
            producer: self.producer,
        }
    }
}

#[derive(Debug, Clone)]
enum RowSource {
    Kb(Source),
    Tuples(Source),
    Groups(Source),
}

impl RowSource {
    fn source(&self) -> &Source {
        match self {
            Self::Kb(s) | Self::Tuples(s) | Self::Groups(s) => s,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Kb(_) => "kb",
            Self::Tuples(_) => "tuples",
            Self::Groups(_) => "groups",
        }
    }
}

/// Resolved data flow for one config.
#[derive(Debug, Clone)]
struct Flow {
    paths: WorkPaths,
    groups: Option<Source>,
    kb: Option<Source>,
    dataset: Option<(Source, DatasetFormat)>,
    mentions: Option<Source>,
    rows: Option<RowSource>,
    head: Option<PathBuf>,
}

impl Flow {
    fn new(cfg: &PipelineConfig) -> Self {
        let paths = WorkPaths::new(&cfg.work_dir());
        let ext = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| Source {
                path: cfg.resolve(p),
                producer: None,
            })
        };
        let made = |path: &Path, stage| Source {
            path: path.to_path_buf(),
            producer: Some(stage),
        };
        let synth = cfg.synth.is_some();
        let dump = cfg.inputs.dump.is_some();
        let groups = if synth {
            Some(made(&paths.synth.groups, Stage::Synth))
        } else if dump {
            Some(made(&paths.groups, Stage::Group))
        } else {
            ext(&cfg.inputs.groups)
        };
        let kb = if synth {
            Some(made(&paths.synth.kb, Stage::Synth))
        } else {
            ext(&cfg.inputs.kb)
        };
        let dataset = if synth {
            Some((made(&paths.synth.dataset, Stage::Synth), DatasetFormat::Jsonl))
        } else {
            ext(&cfg.inputs.dataset).map(|s| (s, cfg.inputs.dataset_format))
        };
        let mentions = ext(&cfg.inputs.eval_mentions).or_else(|| dataset.as_ref().map(|(s, _)| s.clone()));
        let rows = if let Some(k) = &kb {
            Some(RowSource::Kb(k.clone()))
        } else if dump {
            Some(RowSource::Tuples(made(&paths.filtered, Stage::Filter)))
        } else {
            groups.clone().map(RowSource::Groups)
        };
        let head = (cfg.trains_head() && groups.is_some()).then(|| paths.head.clone());
        Self {
            paths,
            groups,
            kb,
            dataset,
            mentions,
            rows,
            head,
        }
    }
}

fn plan(cfg: &PipelineConfig, flow: &Flow) -> Result<Vec<StagePlan>> {
    let p = &flow.paths;
    let mut out = Vec::new();
    let mut push = |stage, inputs: Vec<Input>, outputs: Vec<PathBuf>, params: Value| {
        out.push(StagePlan {
            stage,
            inputs,
            outputs,
            params,
        })
    };
    if let Some(s) = &cfg.synth {
        push(
            Stage::Synth,
            vec![],
            vec![
                p.synth.groups.clone(),
                p.synth.kb.clone(),
                p.synth.dataset.clone(),
                p.synth.manifest.clone(),
            ],
            json!({"concepts": s.concepts, "languages": s.languages, "seed": cfg.seed}),
        );
    }
    if let (Some(dump), Some(mapping)) = (&cfg.inputs.dump, &cfg.inputs.mapping) {
        let ext = |path: &PathBuf| Input {
            path: cfg.resolve(path),
            producer: None,
        };
        let made = |path: &Path, stage| Input {
            path: path.to_path_buf(),
            producer: Some(stage),
        };
        push(
            Stage::Ingest,
            vec![ext(dump)],
            vec![p.triples.clone()],
            json!({"dump_format": cfg.inputs.dump_format}),
        );
        push(
            Stage::Map,
            vec![made(&p.triples, Stage::Ingest), ext(mapping)],
            vec![p.tuples.clone()],
            json!({}),
        );
        let mut inputs = vec![made(&p.tuples, Stage::Map)];
        inputs.extend(flow.mentions.as_ref().map(Source::input));
        push(
            Stage::Filter,
            inputs,
            vec![p.filtered.clone(), p.filter_report.clone()],
            json!({}),
        );
        push(
            Stage::Group,
            vec![made(&p.filtered, Stage::Filter)],
            vec![p.groups.clone()],
            json!({}),
        );
    }
    if let (Some(head), Some(groups)) = (&flow.head, &flow.groups) {
        let mut hp = cfg.effective_hyperparams();
        hp.checkpoint = None;
        push(
            Stage::Train,
            vec![groups.input()],
            vec![head.clone(), p.train_report.clone()],
            json!({"encoder": cfg.encoder, "hyperparams": hp}),
        );
    }
    let rows = flow.rows.as_ref().ok_or_else(|| {
        BelxError::Config(
            "nothing to index: configure [synth], inputs.kb, inputs.dump or inputs.groups".into(),
        )
    })?;
    let mut index_inputs = vec![rows.source().input()];
    index_inputs.extend(encoder_inputs(cfg, flow));
    push(
        Stage::Index,
        index_inputs,
        vec![p.index.clone()],
        json!({"rows": rows.kind(), "encoder": cfg.encoder}),
    );
    if let Some((dataset, format)) = &flow.dataset {
        let mut link_inputs = vec![Input {
            path: p.index.clone(),
            producer: Some(Stage::Index),
        }];
        link_inputs.push(dataset.input());
        link_inputs.extend(encoder_inputs(cfg, flow));
        if cfg.rerank.enabled {
            link_inputs.extend(flow.kb.as_ref().map(Source::input));
        }
        let rerank = cfg.rerank.enabled.then_some(&cfg.rerank);
        push(
            Stage::Link,
            link_inputs,
            vec![p.candidates.clone(), p.predictions.clone()],
            json!({
                "dataset_format": format,
                "k": cfg.retrieval.k,
                "overscan": cfg.retrieval.overscan,
                "encoder": cfg.encoder,
                "rerank": rerank,
            }),
        );
        let mut eval_inputs = vec![
            Input {
                path: p.predictions.clone(),
                producer: Some(Stage::Link),
            },
            dataset.input(),
            Input {
                path: p.index.clone(),
                producer: Some(Stage::Index),
            },
        ];
        eval_inputs.extend(encoder_inputs(cfg, flow));
        push(
            Stage::Eval,
            eval_inputs,
            vec![p.report.clone()],
            json!({
                "dataset_format": format,
                "settings": cfg.retrieval.settings(),
                "encoder": cfg.encoder,
                "rerank": rerank,
            }),
        );
    }
    Ok(out)
}

/// Files the encoder reads: the trained head, or the configured head or
/// embedding file.
fn encoder_inputs(cfg: &PipelineConfig, flow: &Flow) -> Vec<Input> {
    if let Some(h) = &flow.head {
        return vec![Input {
            path: h.clone(),
            producer: Some(Stage::Train),
        }];
    }
    let ext = |p: &Path| {
        vec![Input {
            path: cfg.resolve(p),
            producer: None,
        }]
    };
    match &cfg.encoder.backend {
        BackendConfig::File { path } => ext(path),
        BackendConfig::HashedNgram { head: Some(h), .. } => ext(h),
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Re-run even when fingerprints match, and accept inputs produced under
    /// another config.
    pub force: bool,
    /// Run only this stage.
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageStatus)>,
    pub report: Option<EvalReport>,
    pub paths: WorkPaths,
}

#[derive(Serialize)]
struct RunState<'a> {
    config_sha256: &'a str,
    completed: Vec<&'static str>,
    failed: Option<&'static str>,
    error: Option<String>,
    resume: Option<String>,
}

/// JSONL event sink.
struct Log<'a> {
    out: &'a mut dyn Write,
}

impl Log<'_> {
    fn event(&mut self, mut v: Value) {
        if let Value::Object(m) = &mut v {
            m.insert("level".into(), json!("info"));
        }
        let _ = writeln!(self.out, "{v}");
    }
}

/// Runs the configured stages in order. The first failure aborts the run and
/// leaves `run_state.json` in the work directory naming the stage to resume
/// from.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions, log: &mut dyn Write) -> Result<RunSummary> {
    let mut log = Log { out: log };
    cfg.validate()?;
    let flow = Flow::new(cfg);
    let stages = plan(cfg, &flow)?;
    if let Some(only) = opts.stage {
        if !stages.iter().any(|s| s.stage == only) {
            return Err(BelxError::Config(format!(
                "stage {only} is not part of this config's pipeline"
            )));
        }
    }
    let work = cfg.work_dir();
    std::fs::create_dir_all(&work).map_err(|e| BelxError::file(&work, e))?;
    let config_sha = cfg.config_hash();
    log.event(
        json!({"event": "run_start", "config_sha256": config_sha, "seed": cfg.seed,
        "stages": stages.iter().map(|s| s.stage.name()).collect::<Vec<_>>()}),
    );

    let mut done = Vec::new();
    for sp in stages
        .iter()
        .filter(|s| opts.stage.is_none_or(|only| only == s.stage))
    {
        let started = Instant::now();
        match run_stage(cfg, &flow, sp, opts, &config_sha, &mut log) {
            Ok(status) => {
                log.event(
                    json!({"event": "stage_end", "stage": sp.stage.name(), "status": status,
                    "wall_ms": started.elapsed().as_millis() as u64}),
                );
                done.push((sp.stage, status));
            }
            Err(e) => {
                let state = RunState {
                    config_sha256: &config_sha,
                    completed: done.iter().map(|(s, _)| s.name()).collect(),
                    failed: Some(sp.stage.name()),
                    error: Some(e.to_string()),
                    resume: Some(format!("belx run --config <config> --stage {}", sp.stage)),
                };
                let _ = write_json(&flow.paths.state, &state);
                log.event(
                    json!({"event": "stage_failed", "stage": sp.stage.name(), "error": e.to_string(),
                    "exit_code": e.exit_code(), "wall_ms": started.elapsed().as_millis() as u64}),
                );
                return Err(e);
            }
        }
    }
    let state = RunState {
        config_sha256: &config_sha,
        completed: done.iter().map(|(s, _)| s.name()).collect(),
        failed: None,
        error: None,
        resume: None,
    };
    write_json(&flow.paths.state, &state)?;
    let report = if flow.paths.report.exists() && done.iter().any(|(s, _)| *s == Stage::Eval) {
        Some(serde_json::from_reader(open(&flow.paths.report)?)?)
    } else {
        None
    };
    Ok(RunSummary {
        stages: done,
        report,
        paths: flow.paths,
    })
}

fn run_stage(
    cfg: &PipelineConfig,
    flow: &Flow,
    sp: &StagePlan,
    opts: &RunOptions,
    config_sha: &str,
    log: &mut Log<'_>,
) -> Result<StageStatus> {
    let mut input_hashes = Vec::with_capacity(sp.inputs.len());
    for input in &sp.inputs {
        if !input.path.exists() {
            return Err(match input.producer {
                Some(p) => BelxError::Pipeline(format!(
                    "{} is missing; run stage `{p}` first",
                    input.path.display()
                )),
                None => BelxError::Config(format!("input {} does not exist", input.path.display())),
            });
        }
        let sha = file_sha256(&input.path)?;
        if let Some(producer) = input.producer {
            let meta = read_meta(&input.path).ok_or_else(|| {
                BelxError::Pipeline(format!(
                    "{} has no readable metadata; re-run stage `{producer}`",
                    input.path.display()
                ))
            })?;
            if meta.sha256 != sha {
                return Err(BelxError::Checksum {
                    artifact: input.path.clone(),
                    stage: producer.name().into(),
                });
            }
            if meta.config_sha256 != config_sha && !opts.force {
                return Err(BelxError::Pipeline(format!(
                    "{} was produced under a different config; re-run stage `{producer}` or pass --force",
                    input.path.display()
                )));
            }
        }
        input_hashes.push(sha);
    }
    let fingerprint = sha256_hex(
        &serde_json::to_vec(&json!({"stage": sp.stage, "params": sp.params, "inputs": input_hashes}))
            .expect("fingerprint serializes"),
    );

    if !opts.force {
        let explicit = opts.stage == Some(sp.stage);
        if let Some(metas) = current_outputs(sp, &fingerprint, explicit)? {
            for (out, meta) in sp.outputs.iter().zip(metas) {
                if meta.config_sha256 != config_sha {
                    write_meta(
                        out,
                        &ArtifactMeta {
                            config_sha256: config_sha.into(),
                            ..meta
                        },
                    )?;
                }
            }
            log.event(
                json!({"event": "stage_skipped", "stage": sp.stage.name(), "fingerprint": fingerprint}),
            );
            return Ok(StageStatus::Skipped);
        }
    }

    log.event(json!({"event": "stage_start", "stage": sp.stage.name(), "fingerprint": fingerprint}));
    for out in &sp.outputs {
        let _ = std::fs::remove_file(meta_path(out));
    }
    let counts = execute(cfg, flow, sp.stage)?;
    for out in &sp.outputs {
        let meta = ArtifactMeta {
            stage: sp.stage,
            fingerprint: fingerprint.clone(),
            config_sha256: config_sha.into(),
            seed: cfg.seed,
            sha256: file_sha256(out)?,
        };
        write_meta(out, &meta)?;
    }
    log.event(json!({"event": "stage_counts", "stage": sp.stage.name(), "counts": counts}));
    Ok(StageStatus::Ran)
}

/// Sidecars of the stage outputs when every output is present and carries
/// `fingerprint`. A content mismatch is an error unless the stage was named
/// explicitly, in which case it is simply re-run.
fn current_outputs(sp: &StagePlan, fingerprint: &str, explicit: bool) -> Result<Option<Vec<ArtifactMeta>>> {
    let mut metas = Vec::new();
    for out in &sp.outputs {
        match read_meta(out) {
            Some(m) if out.exists() && m.fingerprint == fingerprint && m.stage == sp.stage => metas.push(m),
            _ => return Ok(None),
        }
    }
    for (out, m) in sp.outputs.iter().zip(&metas) {
        if file_sha256(out)? != m.sha256 {
            if explicit {
                return Ok(None);
            }
            return Err(BelxError::Checksum {
                artifact: out.clone(),
                stage: sp.stage.name().into(),
            });
        }
    }
    Ok(Some(metas))
}

fn load_records(flow: &Flow) -> Result<Vec<LinkRecord>> {
    let (src, format) = flow
        .dataset
        .as_ref()
        .ok_or_else(|| BelxError::Config("no dataset configured".into()))?;
    let loaded = load_dataset(&src.path, *format)?;
    Ok(loaded.records)
}

fn load_kb(flow: &Flow) -> Result<Option<KnowledgeBase>> {
    flow.kb.as_ref().map(|s| KnowledgeBase::load(&s.path)).transpose()
}

/// Does the work of one stage and returns counts for the log.
fn execute(cfg: &PipelineConfig, flow: &Flow, stage: Stage) -> Result<Value> {
    let p = &flow.paths;
    match stage {
        Stage::Synth => {
            let s = cfg.synth.as_ref().expect("synth planned");
            let corpus = generate_synthetic_corpus(s.concepts, s.languages, cfg.seed)?;
            corpus.write(&p.synth)?;
            Ok(
                json!({"concepts": corpus.kb.len(), "groups": corpus.groups.len(), "mentions": corpus.records.len()}),
            )
        }
        Stage::Ingest => {
            let dump = cfg.resolve(cfg.inputs.dump.as_ref().expect("ingest planned"));
            let mut reader = SitelinkReader::new(open(&dump)?, cfg.inputs.dump_format);
            let mut w = create(&p.triples)?;
            let mut n = 0u64;
            for t in reader.by_ref() {
                write_triples(&mut w, std::slice::from_ref(&t?))?;
                n += 1;
            }
            finish(w, &p.triples)?;
            let stats = reader.stats();
            Ok(
                json!({"triples": n, "rows": stats.rows, "malformed": stats.malformed, "format": stats.detected}),
            )
        }
        Stage::Map => {
            let mapping = load_cui_mapping(open(
                &cfg.resolve(cfg.inputs.mapping.as_ref().expect("map planned")),
            )?)?;
            let mut reader = SitelinkReader::new(open(&p.triples)?, DumpFormat::Tsv);
            let mut w = create(&p.tuples)?;
            let mut total = JoinOutcome::default();
            loop {
                let chunk = reader.by_ref().take(CHUNK_ROWS).collect::<Result<Vec<_>>>()?;
                if chunk.is_empty() {
                    break;
                }
                let (tuples, o) = join_aliases_with_cuis(chunk, &mapping);
                write_tuples(&mut w, &tuples)?;
                total.emitted += o.emitted;
                total.dropped_unmapped += o.dropped_unmapped;
                total.unrecognized_sites += o.unrecognized_sites;
            }
            finish(w, &p.tuples)?;
            Ok(json!({"mapped_qids": mapping.len(), "join": total}))
        }
        Stage::Filter => {
            let mentions = match &flow.mentions {
                Some(s) => read_eval_mentions(&s.path)?,
                None => Vec::new(),
            };
            let mut tuples = tuple_reader(open(&p.tuples)?);
            let mut w = create(&p.filtered)?;
            let mut removed = 0u64;
            let mut stats = CorpusStatsBuilder::default();
            loop {
                let chunk = tuples.by_ref().take(CHUNK_ROWS).collect::<Result<Vec<_>>>()?;
                if chunk.is_empty() {
                    break;
                }
                let (kept, r) = filter_eval_overlap(chunk, mentions.iter().map(String::as_str));
                removed += r;
                kept.iter().for_each(|t| stats.add(t));
                write_tuples(&mut w, &kept)?;
            }
            finish(w, &p.filtered)?;
            let report =
                json!({"eval_mentions": mentions.len(), "removed": removed, "stats": stats.finish(None)});
            write_json(&p.filter_report, &report)?;
            Ok(report)
        }
        Stage::Group => {
            let w = create(&p.groups)?;
            let n = group_tuples_external(open(&p.filtered)?, w, GROUP_SPILL_ROWS)?;
            Ok(json!({"groups": n}))
        }
        Stage::Train => {
            let groups = read_groups(open(&flow.groups.as_ref().expect("train planned").path)?)?;
            let hp = cfg.effective_hyperparams();
            let (head, report) = train_projection::<f32>(&groups, &cfg.effective_encoder(None), &hp)?;
            head.save(&p.head)?;
            let mut report = report;
            report.hyperparams.checkpoint = cfg.train.checkpoint.clone();
            write_json(&p.train_report, &report)?;
            Ok(json!({"groups": groups.len(), "steps": report.steps,
                "final_loss": report.epochs.last().map(|e| e.mean_loss)}))
        }
        Stage::Index => {
            let rows: Vec<(String, String, String)> = match flow.rows.as_ref().expect("index planned") {
                RowSource::Kb(s) => KnowledgeBase::load(&s.path)?.alias_rows(),
                RowSource::Tuples(s) => tuple_reader(open(&s.path)?)
                    .map(|t| t.map(|t| (t.alias, t.cui, t.language)))
                    .collect::<Result<_>>()?,
                RowSource::Groups(s) => read_groups(open(&s.path)?)?
                    .into_iter()
                    .flat_map(|g| g.members)
                    .map(|t| (t.alias, t.cui, t.language))
                    .collect(),
            };
            let encoder = build_encoder(&cfg.effective_encoder(flow.head.as_deref()))?;
            let index = build_index(rows, encoder.as_ref(), cfg.retrieval.parallelism)?;
            index.save(&p.index)?;
            Ok(json!({"rows": index.len(), "cuis": index.distinct_cuis(), "dimension": index.dimension()}))
        }
        Stage::Link => {
            let records = load_records(flow)?;
            let index = VectorIndex::load(&p.index)?;
            let encoder = build_encoder(&cfg.effective_encoder(flow.head.as_deref()))?;
            let settings = cfg.retrieval.settings();
            let candidates = retrieve_all(&records, &index, encoder.as_ref(), &settings)?;
            let mut w = create(&p.candidates)?;
            write_candidates_file(&mut w, &records, &candidates)?;
            finish(w, &p.candidates)?;
            let preds = if cfg.rerank.enabled {
                let kb = load_kb(flow)?;
                let registry = TemplateRegistry::default();
                let scorer = cfg.rerank.build_scorer(&records)?;
                let rr = Reranker::new(
                    kb.as_ref(),
                    &registry,
                    scorer.as_ref(),
                    cfg.rerank.options.clone(),
                )?;
                predict(&records, &candidates, Some(&rr), &settings)?
            } else {
                predict(&records, &candidates, None, &settings)?
            };
            let mut w = create(&p.predictions)?;
            write_predictions(&mut w, &preds)?;
            finish(w, &p.predictions)?;
            Ok(json!({"records": records.len(), "degraded": preds.iter().filter(|p| p.degraded).count()}))
        }
        Stage::Eval => {
            let records = load_records(flow)?;
            let preds = read_predictions(open(&p.predictions)?)?;
            let encoder = build_encoder(&cfg.effective_encoder(flow.head.as_deref()))?;
            let mut fingerprint = Fingerprint {
                retriever: "exact".into(),
                encoder: Some(encoder.describe()),
                index_sha256: Some(file_sha256(&p.index)?),
                ..Default::default()
            };
            if cfg.rerank.enabled {
                let registry = TemplateRegistry::default();
                let scorer = cfg.rerank.build_scorer(&records)?;
                let rr = Reranker::new(None, &registry, scorer.as_ref(), cfg.rerank.options.clone())?;
                describe_reranker(&mut fingerprint, &rr);
            }
            let report = report_from_predictions(&records, &preds, &cfg.retrieval.settings(), fingerprint)?;
            write_json(&p.report, &report)?;
            Ok(json!({"records": records.len(), "overall": report.overall, "macro_avg": report.macro_avg}))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
seed = 7
work_dir = "w"
[synth]
concepts = 12
languages = 3
[encoder]
backend = "hashed_ngram"
dimension = 16
buckets = 512
[train]
batch_size = 8
epochs = 2
lr = 0.005
[retrieval]
k = 8
k_set = [1, 5]
parallelism = 2
"#;

    fn config(dir: &Path) -> PipelineConfig {
        PipelineConfig::from_toml_str(SYNTH, dir).unwrap()
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = PipelineConfig::from_toml_str("sed = 1", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = PipelineConfig::from_toml_str("[rerank]\nscorer = \"http\"", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_hash_ignores_work_dir() {
        let a = config(Path::new("/a"));
        let mut b = config(Path::new("/b"));
        b.work_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 8;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn rerun_skips_and_corruption_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let mut sink = Vec::new();
        let first = run_pipeline(&cfg, &RunOptions::default(), &mut sink).unwrap();
        let order: Vec<Stage> = first.stages.iter().map(|(s, _)| *s).collect();
        assert_eq!(
            order,
            [Stage::Synth, Stage::Train, Stage::Index, Stage::Link, Stage::Eval]
        );
        assert!(first.stages.iter().all(|(_, st)| *st == StageStatus::Ran));
        assert!(first.report.is_some());

        let second = run_pipeline(&cfg, &RunOptions::default(), &mut sink).unwrap();
        assert!(second.stages.iter().all(|(_, st)| *st == StageStatus::Skipped));

        let mut bytes = std::fs::read(&first.paths.index).unwrap();
        bytes[20] ^= 0xff;
        std::fs::write(&first.paths.index, &bytes).unwrap();
        match run_pipeline(&cfg, &RunOptions::default(), &mut sink).unwrap_err() {
            BelxError::Checksum { stage, .. } => assert_eq!(stage, "index"),
            e => panic!("{e}"),
        }
        let state: Value = serde_json::from_reader(open(&first.paths.state).unwrap()).unwrap();
        assert_eq!(state["failed"], "index");

        let only = RunOptions {
            stage: Some(Stage::Index),
            force: false,
        };
        let fixed = run_pipeline(&cfg, &only, &mut sink).unwrap();
        assert_eq!(fixed.stages, [(Stage::Index, StageStatus::Ran)]);
        let third = run_pipeline(&cfg, &RunOptions::default(), &mut sink).unwrap();
        assert!(third.stages.iter().all(|(_, st)| *st == StageStatus::Skipped));

        let log = String::from_utf8(sink).unwrap();
        for line in log.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v["event"].is_string());
        }
    }

    #[test]
    fn single_stage_refuses_inputs_from_another_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        run_pipeline(&cfg, &RunOptions::default(), &mut std::io::sink()).unwrap();
        let mut changed = cfg.clone();
        changed.retrieval.k = 4;
        let only = RunOptions {
            stage: Some(Stage::Link),
            force: false,
        };
        let err = run_pipeline(&changed, &only, &mut std::io::sink()).unwrap_err();
        assert!(err.to_string().contains("different config"), "{err}");
        let forced = RunOptions {
            stage: Some(Stage::Link),
            force: true,
        };
        run_pipeline(&changed, &forced, &mut std::io::sink()).unwrap();
    }
}
