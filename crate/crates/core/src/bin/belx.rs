use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use belx::contrast::{train_projection, MsLossParams, ProjectionHead, TrainingHyperparams};
use belx::encoder::{build_encoder, BackendConfig, Encoder, EncoderConfig, FileEncoder};
use belx::eval::{
    comparison_table, evaluate_candidates, load_dataset, read_predictions, report_from_predictions,
    retrieve_all, run_ablation, write_predictions, AblationAxes, DatasetFormat, EvalSettings, Fingerprint,
    LinkRecord, RetrieverSetting,
};
use belx::index::{build_index, VectorIndex, DEFAULT_OVERSCAN};
use belx::ingest::{
    corpus_stats, filter_eval_overlap, group_tuples_external, join_aliases_with_cuis, load_cui_mapping,
    parse_sitelink_dump, read_groups, read_triples, read_tuples, write_triples, write_tuples, DumpFormat,
    ReferenceStats,
};
use belx::kb::KnowledgeBase;
use belx::pipeline::{
    read_eval_mentions, run_pipeline, PipelineConfig, RerankSection, RunOptions, ScorerKind, Stage,
};
use belx::rerank::{
    DocAlias, DocumentFields, MarkerStyle, RerankOptions, Reranker, TemplateRegistry, DEFAULT_TEMPLATE,
};
use belx::synth::{generate_synthetic_corpus, SyntheticPaths};
use belx::transport::RetryPolicy;
use belx::{BelxError, Result};

#[derive(Parser)]
#[command(
    name = "belx",
    version,
    about = "Cross-lingual biomedical entity linking: retrieve, then rerank"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a sitelink dump into (qid, alias, site) triples.
    Ingest {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value = "auto")]
        format: DumpFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join triples with a QID→CUI mapping.
    Map {
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop tuples whose alias equals an evaluation mention.
    Filter {
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        eval_mentions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Group tuples by QID into positive sets.
    Group {
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tuples held in memory before spilling a sorted run.
        #[arg(long, default_value_t = 1_000_000)]
        chunk_rows: usize,
    },
    /// Alias count, language count and per-language shares of a tuple file.
    Stats {
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        dump_version: Option<String>,
        /// Compare against the reference figures for the 2025-12-01 dump.
        #[arg(long)]
        check_reference: bool,
    },
    /// Train the projection head with the multi-similarity loss.
    Train(TrainArgs),
    /// Build or query a vector index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Retrieve candidates and rerank them.
    Link {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_OVERSCAN)]
        overscan: usize,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        rerank: RerankArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall at k for retrieval and reranking; prints a table.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Score an existing predictions file instead of retrieving.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,64")]
        k: Vec<usize>,
        /// Candidates handed to the reranker; the largest k by default.
        #[arg(long)]
        k_candidates: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_OVERSCAN)]
        overscan: usize,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        rerank: RerankArgs,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Evaluate every combination of the chosen reranking axes.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Axes to sweep: marker, fields.
        #[arg(long, value_delimiter = ',', default_value = "marker,fields")]
        axes: Vec<String>,
        /// Precomputed candidate lists to compare against exact retrieval.
        #[arg(long)]
        candidates_file: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        k_candidates: usize,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        k: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_OVERSCAN)]
        overscan: usize,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        rerank: RerankArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured pipeline end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Rerun every stage and accept inputs from another config.
        #[arg(long)]
        force: bool,
        /// Run one stage only: synth, ingest, map, filter, group, train, index, link or eval.
        #[arg(long)]
        stage: Option<Stage>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides work_dir in the config.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus (groups, KB, dataset, manifest).
    Synth {
        #[arg(long, default_value_t = 200)]
        concepts: usize,
        #[arg(long, default_value_t = 5)]
        languages: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed aliases and write the index.
    Build {
        #[arg(long, conflicts_with_all = ["kb", "groups"])]
        tuples: Option<PathBuf>,
        #[arg(long, conflicts_with = "groups")]
        kb: Option<PathBuf>,
        #[arg(long)]
        groups: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k CUIs for one string.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_OVERSCAN)]
        overscan: usize,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    groups: PathBuf,
    #[arg(long, default_value = "hashed_ngram")]
    encoder: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4096)]
    buckets: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    ngram_sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use every in-batch pair instead of the mined hard ones.
    #[arg(long)]
    no_mining: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "jsonl")]
    dataset_format: DatasetFormat,
    /// Entity metadata for reranker documents.
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Args)]
struct EncoderArgs {
    /// hashed_ngram, file or remote.
    #[arg(long = "encoder", default_value = "hashed_ngram")]
    backend: String,
    /// Output dimension; inferred when omitted.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    buckets: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    ngram_sizes: Vec<usize>,
    /// Trained projection head for the hashed n-gram backend.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Embedding file for the file backend.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Service URL for the remote backend.
    #[arg(long)]
    encoder_url: Option<String>,
    #[arg(long, default_value_t = 100)]
    max_input_chars: usize,
}

impl EncoderArgs {
    fn config(&self) -> Result<EncoderConfig> {
        let backend = match self.backend.as_str() {
            "hashed_ngram" => BackendConfig::HashedNgram {
                ngram_sizes: self.ngram_sizes.clone(),
                buckets: self.buckets,
                head: self.head.clone(),
            },
            "file" => BackendConfig::File {
                path: self
                    .embeddings
                    .clone()
                    .ok_or_else(|| BelxError::Config("--encoder file needs --embeddings".into()))?,
            },
            "remote" => BackendConfig::Remote {
                url: self
                    .encoder_url
                    .clone()
                    .ok_or_else(|| BelxError::Config("--encoder remote needs --encoder-url".into()))?,
                batch_size: 32,
                max_in_flight: 4,
                retry: RetryPolicy::default(),
            },
            other => {
                return Err(BelxError::Config(format!(
                    "unknown encoder {other:?} (hashed_ngram, file, remote)"
                )))
            }
        };
        let dimension = match (self.dim, &backend) {
            (Some(d), _) => d,
            (
                None,
                BackendConfig::HashedNgram {
                    head: None, buckets, ..
                },
            ) => *buckets,
            (None, BackendConfig::HashedNgram { head: Some(h), .. }) => {
                ProjectionHead::<f32>::load(h)?.output_dim()
            }
            (None, BackendConfig::File { path }) => FileEncoder::open(path)?.dimension(),
            (None, BackendConfig::Remote { .. }) => {
                return Err(BelxError::Config("--encoder remote needs --dim".into()))
            }
        };
        Ok(EncoderConfig {
            dimension,
            max_input_chars: self.max_input_chars,
            backend,
        })
    }

    fn build(&self) -> Result<Box<dyn Encoder>> {
        build_encoder(&self.config()?)
    }
}

#[derive(Args)]
struct RerankArgs {
    /// mock, gold or http; no reranking when omitted (eval, ablate) or mock (link).
    #[arg(long)]
    scorer: Option<ScorerKind>,
    /// Scorer service; implies --scorer http.
    #[arg(long)]
    scorer_url: Option<String>,
    #[arg(long)]
    scorer_batch: bool,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value = "tgt")]
    marker: MarkerStyle,
    #[arg(long, default_value = "name")]
    doc_fields: DocumentFields,
    #[arg(long, default_value = "retrieved")]
    doc_alias: DocAlias,
    /// Characters of context on each side of the mention; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
}

impl RerankArgs {
    fn section(&self, default: Option<ScorerKind>) -> Option<RerankSection> {
        let scorer = if self.scorer_url.is_some() {
            Some(ScorerKind::Http)
        } else {
            self.scorer.or(default)
        }?;
        Some(RerankSection {
            enabled: true,
            scorer,
            url: self.scorer_url.clone(),
            batch: self.scorer_batch,
            max_in_flight: self.max_in_flight,
            retry: RetryPolicy::default(),
            options: RerankOptions {
                marker: self.marker,
                fields: self.doc_fields,
                doc_alias: self.doc_alias,
                window_chars: self.window,
                template: self.template.clone(),
                audit: false,
            },
        })
    }
}

fn log(v: Value) {
    eprintln!("{v}");
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| BelxError::Pipeline(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| BelxError::Pipeline(format!("{}: {e}", path.display())))
}

fn close(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| BelxError::Pipeline(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| BelxError::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w).map_err(|e| BelxError::Pipeline(e.to_string()))?;
    close(w, path)
}

fn records(data: &DataArgs) -> Result<Vec<LinkRecord>> {
    let loaded = load_dataset(&data.dataset, data.dataset_format)?;
    if loaded.skipped > 0 {
        log(json!({"event": "dataset_skipped_lines", "count": loaded.skipped}));
    }
    Ok(loaded.records)
}

fn load_kb(data: &DataArgs) -> Result<Option<KnowledgeBase>> {
    data.kb.as_deref().map(KnowledgeBase::load).transpose()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match dispatch(cli.command) {
        Ok(()) => {
            log(json!({"event": "done", "wall_ms": started.elapsed().as_millis() as u64}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log(json!({"event": "error", "error": e.to_string(), "exit_code": e.exit_code()}));
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { dump, format, out } => {
            let (triples, stats) = parse_sitelink_dump(open(&dump)?, format)?;
            let mut w = create(&out)?;
            write_triples(&mut w, &triples)?;
            close(w, &out)?;
            log(json!({"event": "ingest", "triples": triples.len(), "stats": stats}));
        }
        Command::Map {
            mapping,
            triples,
            out,
        } => {
            let mapping = load_cui_mapping(open(&mapping)?)?;
            let triples = read_triples(open(&triples)?)?;
            let (tuples, outcome) = join_aliases_with_cuis(triples, &mapping);
            let mut w = create(&out)?;
            write_tuples(&mut w, &tuples)?;
            close(w, &out)?;
            log(
                json!({"event": "map", "mapped_qids": mapping.len(), "skipped_bindings": mapping.skipped,
                "irregular_cuis": mapping.irregular_cuis, "join": outcome}),
            );
        }
        Command::Filter {
            tuples,
            eval_mentions,
            out,
            report,
        } => {
            let mentions = read_eval_mentions(&eval_mentions)?;
            let tuples = read_tuples(open(&tuples)?)?;
            let before = tuples.len();
            let (kept, removed) = filter_eval_overlap(tuples, mentions.iter().map(String::as_str));
            let mut w = create(&out)?;
            write_tuples(&mut w, &kept)?;
            close(w, &out)?;
            let summary = json!({"eval_mentions": mentions.len(), "input": before, "removed": removed,
                "stats": corpus_stats(&kept)});
            if let Some(r) = report {
                write_json(&r, &summary)?;
            }
            log(json!({"event": "filter", "input": before, "removed": removed}));
        }
        Command::Group {
            tuples,
            out,
            chunk_rows,
        } => {
            let w = create(&out)?;
            let n = group_tuples_external(open(&tuples)?, w, chunk_rows)?;
            log(json!({"event": "group", "groups": n}));
        }
        Command::Stats {
            tuples,
            dump_version,
            check_reference,
        } => {
            let tuples = read_tuples(open(&tuples)?)?;
            let mut stats = corpus_stats(&tuples);
            stats.dump_version = dump_version;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            if check_reference {
                let r = ReferenceStats::WIKIDATA_2025_12_01;
                let ok = r.matches(&stats);
                log(json!({"event": "reference_check", "reference": r, "matches": ok}));
                if !ok {
                    return Err(BelxError::Invariant(format!(
                        "corpus stats ({} aliases, {} languages, {:.1}% en) differ from the {} reference ({}, {}, {:.1}%)",
                        stats.total,
                        stats.language_count,
                        stats.share("en"),
                        r.dump_version,
                        r.total,
                        r.language_count,
                        r.english_percent
                    )));
                }
            }
        }
        Command::Train(a) => train(a)?,
        Command::Index(IndexCommand::Build {
            tuples,
            kb,
            groups,
            encoder,
            parallelism,
            out,
        }) => {
            let rows: Vec<(String, String, String)> = if let Some(p) = tuples {
                read_tuples(open(&p)?)?
                    .into_iter()
                    .map(|t| (t.alias, t.cui, t.language))
                    .collect()
            } else if let Some(p) = kb {
                KnowledgeBase::load(&p)?.alias_rows()
            } else if let Some(p) = groups {
                read_groups(open(&p)?)?
                    .into_iter()
                    .flat_map(|g| g.members)
                    .map(|t| (t.alias, t.cui, t.language))
                    .collect()
            } else {
                return Err(BelxError::Config(
                    "index build needs --tuples, --kb or --groups".into(),
                ));
            };
            let enc = encoder.build()?;
            let index = build_index(rows, enc.as_ref(), parallelism)?;
            index.save(&out)?;
            log(
                json!({"event": "index_build", "rows": index.len(), "cuis": index.distinct_cuis(),
                "dimension": index.dimension(), "encoder": enc.describe()}),
            );
        }
        Command::Index(IndexCommand::Search {
            index,
            text,
            k,
            overscan,
            encoder,
        }) => {
            let index = VectorIndex::load(&index)?;
            let enc = encoder.build()?;
            let set = index.retrieve(&text, enc.as_ref(), k, overscan)?;
            for (rank, c) in set.hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}\t{}", rank + 1, c.cui, c.score, c.alias);
            }
        }
        Command::Link {
            data,
            index,
            k,
            overscan,
            parallelism,
            encoder,
            rerank,
            out,
        } => {
            let recs = records(&data)?;
            let index = VectorIndex::load(&index)?;
            let enc = encoder.build()?;
            let settings = EvalSettings {
                k_set: vec![1],
                k_candidates: k,
                overscan,
                parallelism,
            };
            let candidates = retrieve_all(&recs, &index, enc.as_ref(), &settings)?;
            let section = rerank.section(Some(ScorerKind::Mock)).expect("default scorer");
            let kb = load_kb(&data)?;
            let registry = TemplateRegistry::default();
            let scorer = section.build_scorer(&recs)?;
            let rr = Reranker::new(kb.as_ref(), &registry, scorer.as_ref(), section.options.clone())?;
            let preds = belx::eval::predict(&recs, &candidates, Some(&rr), &settings)?;
            let mut w = create(&out)?;
            write_predictions(&mut w, &preds)?;
            close(w, &out)?;
            log(
                json!({"event": "link", "records": recs.len(), "scorer": rr.scorer_description(),
                "degraded": preds.iter().filter(|p| p.degraded).count()}),
            );
        }
        Command::Eval {
            data,
            index,
            predictions,
            k,
            k_candidates,
            overscan,
            parallelism,
            encoder,
            rerank,
            report,
            predictions_out,
        } => {
            let recs = records(&data)?;
            let k_candidates = k_candidates.unwrap_or_else(|| k.iter().copied().max().unwrap_or(64));
            let settings = EvalSettings {
                k_set: k,
                k_candidates,
                overscan,
                parallelism,
            };
            let (rep, preds) = if let Some(p) = predictions {
                let preds = read_predictions(open(&p)?)?;
                let fp = Fingerprint {
                    retriever: format!("predictions:{}", p.display()),
                    ..Default::default()
                };
                (report_from_predictions(&recs, &preds, &settings, fp)?, preds)
            } else {
                let index_path =
                    index.ok_or_else(|| BelxError::Config("eval needs --index or --predictions".into()))?;
                let index = VectorIndex::load(&index_path)?;
                let enc = encoder.build()?;
                let candidates = retrieve_all(&recs, &index, enc.as_ref(), &settings)?;
                let fp = Fingerprint {
                    retriever: "exact".into(),
                    encoder: Some(enc.describe()),
                    index_sha256: Some(index.content_hash()),
                    ..Default::default()
                };
                let kb = load_kb(&data)?;
                let registry = TemplateRegistry::default();
                match rerank.section(None) {
                    Some(section) => {
                        let scorer = section.build_scorer(&recs)?;
                        let rr =
                            Reranker::new(kb.as_ref(), &registry, scorer.as_ref(), section.options.clone())?;
                        evaluate_candidates(&recs, &candidates, Some(&rr), &settings, fp)?
                    }
                    None => evaluate_candidates(&recs, &candidates, None, &settings, fp)?,
                }
            };
            print!("{}", rep.to_table());
            if let Some(r) = report {
                write_json(&r, &rep)?;
            }
            if let Some(p) = predictions_out {
                let mut w = create(&p)?;
                write_predictions(&mut w, &preds)?;
                close(w, &p)?;
            }
        }
        Command::Ablate {
            data,
            index,
            axes,
            candidates_file,
            k_candidates,
            k,
            overscan,
            parallelism,
            encoder,
            rerank,
            out,
        } => {
            let recs = records(&data)?;
            let section = rerank.section(Some(ScorerKind::Mock)).expect("default scorer");
            let mut sweep = AblationAxes {
                retrievers: Vec::new(),
                markers: vec![section.options.marker],
                fields: vec![section.options.fields],
            };
            for axis in &axes {
                match axis.as_str() {
                    "marker" => sweep.markers = MarkerStyle::ALL.to_vec(),
                    "fields" => sweep.fields = DocumentFields::ALL.to_vec(),
                    "retriever" => {}
                    other => {
                        return Err(BelxError::Config(format!(
                            "unknown ablation axis {other:?} (marker, fields, retriever)"
                        )))
                    }
                }
            }
            let loaded = match &index {
                Some(p) => {
                    sweep.retrievers.push(RetrieverSetting::Exact);
                    Some((VectorIndex::load(p)?, encoder.build()?))
                }
                None => None,
            };
            sweep
                .retrievers
                .extend(candidates_file.into_iter().map(RetrieverSetting::CandidatesFile));
            if sweep.retrievers.is_empty() {
                return Err(BelxError::Config(
                    "ablate needs --index or --candidates-file".into(),
                ));
            }
            let settings = EvalSettings {
                k_set: k,
                k_candidates,
                overscan,
                parallelism,
            };
            let kb = load_kb(&data)?;
            let registry = TemplateRegistry::default();
            let scorer = section.build_scorer(&recs)?;
            let base = Reranker::new(kb.as_ref(), &registry, scorer.as_ref(), section.options.clone())?;
            let retrieval = loaded.as_ref().map(|(i, e)| (i, e.as_ref()));
            let cells = run_ablation(&recs, retrieval, &base, &sweep, &settings);
            print!("{}", comparison_table(&cells));
            if let Some(o) = out {
                write_json(&o, &cells)?;
            }
            if let Some(err) = cells.iter().find_map(|c| c.error.as_ref()) {
                if err.contains("invariant violated") {
                    return Err(BelxError::Invariant(err.clone()));
                }
            }
        }
        Command::Run {
            config,
            force,
            stage,
            seed,
            work_dir,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = work_dir {
                cfg.work_dir = std::env::current_dir()
                    .map_err(|e| BelxError::Pipeline(e.to_string()))?
                    .join(w);
            }
            let opts = RunOptions { force, stage };
            let summary = match run_pipeline(&cfg, &opts, &mut std::io::stderr()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("resume with: belx run --config {} --stage <failed stage>; see run_state.json in the work directory", config.display());
                    return Err(e);
                }
            };
            if let Some(r) = summary.report {
                print!("{}", r.to_table());
            }
        }
        Command::Synth {
            concepts,
            languages,
            seed,
            out_dir,
        } => {
            let corpus = generate_synthetic_corpus(concepts, languages, seed)?;
            corpus.write(&SyntheticPaths::in_dir(&out_dir))?;
            log(
                json!({"event": "synth", "concepts": concepts, "languages": corpus.manifest.languages,
                "mentions": corpus.records.len()}),
            );
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    if a.encoder != "hashed_ngram" {
        return Err(BelxError::Config(format!(
            "training needs --encoder hashed_ngram, got {:?}",
            a.encoder
        )));
    }
    let groups = read_groups(open(&a.groups)?)?;
    let encoder = EncoderConfig {
        dimension: a.dim,
        max_input_chars: 100,
        backend: BackendConfig::HashedNgram {
            ngram_sizes: a.ngram_sizes,
            buckets: a.buckets,
            head: None,
        },
    };
    let hp = TrainingHyperparams {
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.wd,
        epochs: a.epochs,
        loss: MsLossParams {
            alpha: a.alpha,
            beta: a.beta,
            epsilon: a.epsilon,
            margin: a.margin,
        },
        seed: a.seed,
        mining: !a.no_mining,
        checkpoint: a.checkpoint,
    };
    let (head, report) = train_projection::<f32>(&groups, &encoder, &hp)?;
    head.save(&a.out)?;
    for e in &report.epochs {
        log(
            json!({"event": "epoch", "epoch": e.epoch, "mean_loss": e.mean_loss, "batches": e.batches,
            "surviving_triplets": e.surviving_triplets}),
        );
    }
    if let Some(r) = a.report {
        write_json(&r, &report)?;
    }
    log(
        json!({"event": "train", "groups": groups.len(), "steps": report.steps, "head_sha256": report.head_sha256}),
    );
    Ok(())
}
