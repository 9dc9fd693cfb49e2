mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tablescout::bm25::evaluate_bm25;
use tablescout::checkpoint::Checkpoint;
use tablescout::corpus::{tokenize, Corpus, Split};
use tablescout::embed_store::{question_signatures, write_embeddings, EmbeddingStore};
use tablescout::index::{NearestNeighbors, VectorIndex};
use tablescout::metrics::{encode_tables, evaluate, EvalReport, DEFAULT_KS};
use tablescout::sampler::{build_training_set, read_tuples, write_tuples, Strategy};
use tablescout::synth::{generate, train_config, SynthConfig};
use tablescout::trainer::{finite_diff_check, train, GradCheckOptions, TrainConfig};
use tablescout::{Error, Result};

use manifest::Run;

#[derive(Parser)]
#[command(
    name = "tablescout",
    version,
    about = "Zero-shot table retrieval with a dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw split files and write a prepared corpus directory.
    Prep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the synthetic corpus, its word vectors and a matching train config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build training tuples (gold positives plus negatives).
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "both")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual encoder; the checkpoint keeps the best dev MRR.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every table of a split into a vector sidecar.
    EncodeTables {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest tables for a free-text question.
    Search {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Full-pool retrieval metrics for a checkpoint.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-pool retrieval metrics for the BM25 baseline.
    Bm25Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences on a micro-corpus.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let (corpus, dropped) = Corpus::load_dir(dir)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} questions whose table is missing");
    }
    Ok(corpus)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &(report.to_json() + "\n"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prep { input, out } => {
            let mut run = Run::start("prep", json!({ "input": input, "out": out }), None);
            run.input(&input)?;
            let corpus = load_corpus(&input)?;
            corpus.write_dir(&out)?;
            for split in Split::ALL {
                let d = corpus.split(split);
                log::info!("{split}: {} tables, {} questions", d.tables.len(), d.questions.len());
            }
            run.finish(&out.join("corpus"))?;
        }
        Command::Synth { out, seed } => {
            let cfg = SynthConfig {
                seed,
                ..Default::default()
            };
            let run = Run::start("synth", serde_json::to_value(&cfg)?, Some(seed));
            let synth = generate(&cfg)?;
            synth.corpus.write_dir(&out)?;
            let emb = out.join("embeddings.txt");
            write_embeddings(
                &emb,
                cfg.word_dim,
                synth.embeddings.iter().map(|(w, v)| (w.as_str(), v.as_slice())),
            )?;
            let train_cfg = out.join("train_config.json");
            write_text(&train_cfg, &(serde_json::to_string_pretty(&train_config(seed))? + "\n"))?;
            run.finish(&out.join("corpus"))?;
        }
        Command::Mine {
            corpus,
            embeddings,
            strategy,
            seed,
            out,
        } => {
            let mut run = Run::start("mine", json!({ "strategy": strategy }), Some(seed));
            run.input(&corpus)?;
            run.input(&embeddings)?;
            let corpus = load_corpus(&corpus)?;
            let questions = &corpus.train.questions;
            let signatures = if strategy.uses_hard() {
                let store = EmbeddingStore::load(&embeddings, None)?;
                Some(question_signatures(&store, questions)?)
            } else {
                None
            };
            let tuples = build_training_set(questions, signatures.as_deref(), strategy, seed)?;
            write_tuples(&out, &tuples)?;
            log::info!("wrote {} tuples", tuples.len());
            run.finish(&out)?;
        }
        Command::Train {
            corpus,
            embeddings,
            tuples,
            config,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let mut run = Run::start("train", serde_json::to_value(&cfg)?, Some(cfg.seed));
            for p in [&corpus, &embeddings, &tuples, &config] {
                run.input(p)?;
            }
            let corpus = load_corpus(&corpus)?;
            let store = EmbeddingStore::load(&embeddings, Some(cfg.word_dim))?;
            let tuples = read_tuples(&tuples)?;
            let outcome = train(&corpus, &tuples, &store, &cfg.model_config(), &cfg.hyper(), Some(&out))?;
            let mut report_path = out.as_os_str().to_owned();
            report_path.push(".train.json");
            let report_path = PathBuf::from(report_path);
            write_text(&report_path, &(serde_json::to_string_pretty(&outcome.report)? + "\n"))?;
            println!(
                "best dev MRR {:.4} at step {}",
                outcome.report.best_dev_mrr, outcome.report.best_step
            );
            run.finish(&out)?;
            run.finish(&report_path)?;
        }
        Command::EncodeTables {
            corpus,
            embeddings,
            checkpoint,
            split,
            out,
        } => {
            let mut run = Run::start("encode-tables", json!({ "split": split }), None);
            for p in [&corpus, &embeddings, &checkpoint] {
                run.input(p)?;
            }
            let corpus = load_corpus(&corpus)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let store = EmbeddingStore::load(&embeddings, Some(ck.model.config.word_dim))?;
            let index = encode_tables(&ck.model, &store, corpus.split(split))?;
            index.write(&out)?;
            run.finish(&out)?;
        }
        Command::Search {
            embeddings,
            checkpoint,
            vectors,
            query,
            k,
        } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let store = EmbeddingStore::load(&embeddings, Some(ck.model.config.word_dim))?;
            let index = VectorIndex::read(&vectors)?;
            let tokens = tokenize(&query);
            if tokens.is_empty() {
                return Err(Error::Invalid("query has no tokens".into()));
            }
            let e = ck.model.encode_question(&store, &tokens)?;
            for hit in index.knn(&e, k)? {
                println!("{}", serde_json::to_string(&hit)?);
            }
        }
        Command::Eval {
            corpus,
            embeddings,
            checkpoint,
            split,
            ks,
            out,
        } => {
            let mut run = Run::start("eval", json!({ "split": split, "ks": ks }), None);
            for p in [&corpus, &embeddings, &checkpoint] {
                run.input(p)?;
            }
            let corpus = load_corpus(&corpus)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let store = EmbeddingStore::load(&embeddings, Some(ck.model.config.word_dim))?;
            let report = evaluate(&ck.model, &store, corpus.split(split), split, &ks)?;
            write_report(&out, &report)?;
            println!("{}", report.to_json());
            run.finish(&out)?;
        }
        Command::Bm25Eval { corpus, split, ks, out } => {
            if ks.contains(&0) {
                return Err(Error::Invalid("K values must be at least 1".into()));
            }
            let mut run = Run::start("bm25-eval", json!({ "split": split, "ks": ks }), None);
            run.input(&corpus)?;
            let corpus = load_corpus(&corpus)?;
            let report = evaluate_bm25(corpus.split(split), split, &ks)?;
            write_report(&out, &report)?;
            println!("{}", report.to_json());
            run.finish(&out)?;
        }
        Command::Gradcheck { config, seed } => {
            let cfg = TrainConfig::load(&config)?;
            let report = finite_diff_check(&cfg.model_config(), seed, &GradCheckOptions::default())?;
            println!(
                "{}",
                json!({
                    "max_relative_error": report.max_relative_error,
                    "passed": report.passed,
                    "n_scalars": report.n_scalars,
                    "kink_skipped": report.kink_skipped,
                    "per_tensor": report.per_tensor,
                })
            );
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("TABLESCOUT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Invalid(format!("TABLESCOUT_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
