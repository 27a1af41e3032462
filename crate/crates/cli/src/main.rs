//! `pwe`: end-to-end driver for probabilistic word embeddings.
//!
//! Subcommands mirror the pipeline stages (`vocab`, `cooc`, `batches`,
//! `train`, `pipeline`), plus `query` over a trained model, `eval` for the
//! benchmark reports, and `grid-modality` for modality-weight search.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Writes a stdout line, exiting quietly when the reader hangs up.
fn emit(line: String) {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let outcome = lock.write_all(line.as_bytes()).and_then(|_| lock.write_all(b"\n"));
    if let Err(e) = outcome {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        std::process::exit(3);
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(format!($($arg)*)) };
}

use pwe_core::corpus::WORD_MODALITY;
use pwe_core::error::{Error, Result};
use pwe_core::model::{Metric, Normalization, TopicRanking};
use pwe_core::pipeline::{
    dump_batches, fold_in_documents, grid_search_modality_weights, run_pipeline_until,
    PipelineConfig, PipelineSummary, Stage,
};
use pwe_core::eval::{evaluate_similarity, model_coherence, triplet_accuracy, SimilarityTestset, TripletSet};
use pwe_core::{Cooc, DefaultScalar, Model};

#[derive(Parser)]
#[command(name = "pwe", version, about = "Probabilistic embeddings for words, documents, and metadata modalities")]
struct Cli {
    /// Worker threads for training (1 = sequential, 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for the co-occurrence stage, applied on top of the config file.
#[derive(Args, Default)]
struct CoocOverrides {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    min_count: Option<u64>,
    /// raw | ppmi | log | row_normalized
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Also derive pseudo-documents for extra-modality tokens.
    #[arg(long)]
    symmetric_modalities: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabularies.
    Vocab {
        #[arg(long)]
        config: PathBuf,
    },
    /// Count co-occurrences and apply weighting.
    Cooc {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: CoocOverrides,
    },
    /// Build pseudo-document batches.
    Batches {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: CoocOverrides,
        /// Write a TSV dump beside every batch file.
        #[arg(long)]
        dump_tsv: bool,
    },
    /// Train the model with online EM.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        num_topics: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every stage: vocab, cooc, batches, train, eval.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: CoocOverrides,
    },
    /// Grid-search extra-modality weights against a validation testset.
    GridModality {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated candidate weights, e.g. 0.25,0.5,1,2.
        #[arg(long)]
        values: String,
        #[arg(long)]
        testset: PathBuf,
    },
    /// Query a trained model.
    Query {
        #[command(subcommand)]
        command: QueryCommand,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Subcommand)]
enum QueryCommand {
    /// Nearest neighbors of a token.
    Nn {
        #[arg(long)]
        model: PathBuf,
        token: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "dot")]
        metric: String,
        /// Modality to search in (defaults to the query token's modality).
        #[arg(long)]
        modality: Option<String>,
        /// Modality of the query token (defaults to words).
        #[arg(long)]
        query_modality: Option<String>,
    },
    /// Top words of a topic.
    Topic {
        #[arg(long)]
        model: PathBuf,
        topic: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// phi | bayes
        #[arg(long, default_value = "phi")]
        ranking: String,
    },
    /// Fold in a document from stdin and print its topic distribution.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        passes: usize,
    },
    /// Export embeddings as TSV: token<TAB>t0<TAB>t1...
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// bayes | phi
        #[arg(long, default_value = "bayes")]
        normalization: String,
        #[arg(long)]
        modality: Option<String>,
    },
    /// Zero fraction of the word embedding matrix.
    Sparsity {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Spearman correlation against a human similarity testset.
    Similarity {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the testsets listed in the config.
        #[arg(long)]
        testset: Option<PathBuf>,
        #[arg(long)]
        metric: Option<String>,
        /// bayes | phi
        #[arg(long)]
        normalization: Option<String>,
    },
    /// Mean pairwise PMI of each topic's top words.
    Coherence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        top_k: Option<Vec<usize>>,
    },
    /// Document triplet accuracy with fold-in embeddings.
    Triplets {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        passes: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, threads: Option<usize>) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::from_file(path)?;
    if let Some(threads) = threads {
        config.train.threads = threads;
    }
    Ok(config)
}

fn apply_cooc_overrides(config: &mut PipelineConfig, overrides: &CoocOverrides) -> Result<()> {
    if let Some(window) = overrides.window {
        config.cooc.window = window;
    }
    if let Some(min_count) = overrides.min_count {
        config.cooc.min_count = min_count;
    }
    if let Some(weighting) = &overrides.weighting {
        config.cooc.weighting = weighting.parse()?;
    }
    if let Some(batch_size) = overrides.batch_size {
        config.cooc.batch_size = batch_size;
    }
    if overrides.symmetric_modalities {
        config.cooc.symmetric_modalities = true;
    }
    Ok(())
}

fn print_summary(summary: &PipelineSummary) {
    out!("config_hash\t{}", summary.config_hash);
    for stage in &summary.stages {
        for artifact in &stage.artifacts {
            out!(
                "{}\t{}\t{}\t{}",
                stage.stage,
                if stage.skipped { "cached" } else { "built" },
                artifact.path,
                artifact.sha256
            );
        }
    }
}

fn modality_id(model: &Model, name: Option<&str>) -> Result<u16> {
    match name {
        None => Ok(WORD_MODALITY),
        Some(name) => model
            .modality_by_name(name)
            .ok_or_else(|| Error::Data(format!("model has no modality `{name}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vocab { config } => {
            let config = load_config(&config, cli.threads)?;
            print_summary(&run_pipeline_until::<DefaultScalar>(&config, Stage::Vocab)?);
        }
        Command::Cooc { config, overrides } => {
            let mut config = load_config(&config, cli.threads)?;
            apply_cooc_overrides(&mut config, &overrides)?;
            print_summary(&run_pipeline_until::<DefaultScalar>(&config, Stage::Cooc)?);
        }
        Command::Batches { config, overrides, dump_tsv } => {
            let mut config = load_config(&config, cli.threads)?;
            apply_cooc_overrides(&mut config, &overrides)?;
            print_summary(&run_pipeline_until::<DefaultScalar>(&config, Stage::Batches)?);
            if dump_tsv {
                for path in dump_batches::<DefaultScalar>(&config)? {
                    out!("dump\t{}", path.display());
                }
            }
        }
        Command::Train { config, epochs, num_topics, tau, seed } => {
            let mut config = load_config(&config, cli.threads)?;
            if let Some(epochs) = epochs {
                config.train.epochs = epochs;
            }
            if let Some(num_topics) = num_topics {
                config.train.num_topics = num_topics;
            }
            if let Some(tau) = tau {
                config.train.tau = tau;
            }
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            print_summary(&run_pipeline_until::<DefaultScalar>(&config, Stage::Train)?);
        }
        Command::Pipeline { config, overrides } => {
            let mut config = load_config(&config, cli.threads)?;
            apply_cooc_overrides(&mut config, &overrides)?;
            print_summary(&run_pipeline_until::<DefaultScalar>(&config, Stage::Eval)?);
        }
        Command::GridModality { config, values, testset } => {
            let config = load_config(&config, cli.threads)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad grid value `{v}`")))
                })
                .collect::<Result<_>>()?;
            let report = grid_search_modality_weights::<DefaultScalar>(&config, &values, &testset)?;
            for (i, point) in report.points.iter().enumerate() {
                let weights: Vec<String> =
                    point.weights.iter().map(|(k, v)| format!("{k}={v}")).collect();
                out!(
                    "{}\t{}\tspearman={:.6}{}",
                    i,
                    weights.join(","),
                    point.spearman,
                    if i == report.best { "\tbest" } else { "" }
                );
            }
        }
        Command::Query { command } => run_query(command)?,
        Command::Eval { command } => run_eval(command, cli.threads)?,
    }
    Ok(())
}

fn run_query(command: QueryCommand) -> Result<()> {
    match command {
        QueryCommand::Nn { model, token, k, metric, modality, query_modality } => {
            let model = Model::load(&model)?;
            let metric: Metric = metric.parse()?;
            let query_mod = modality_id(&model, query_modality.as_deref())?;
            let search_mod = match modality {
                Some(name) => modality_id(&model, Some(&name))?,
                None => query_mod,
            };
            for (neighbor, score) in model.nearest_neighbors(query_mod, &token, k, metric, search_mod)? {
                out!("{neighbor}\t{score:.6}");
            }
        }
        QueryCommand::Topic { model, topic, k, ranking } => {
            let model = Model::load(&model)?;
            let ranking: TopicRanking = ranking.parse()?;
            for (token, score) in model.topic_top_words(WORD_MODALITY, topic, k, ranking)? {
                out!("{token}\t{score:.6}");
            }
        }
        QueryCommand::Infer { model, passes } => {
            let model = Model::load(&model)?;
            let stdin = std::io::stdin();
            let mut tokens: Vec<String> = Vec::new();
            for line in stdin.lock().lines() {
                let line = line?;
                tokens.extend(line.split_whitespace().map(str::to_owned));
            }
            let refs: Vec<(u16, &str)> = tokens.iter().map(|t| (WORD_MODALITY, t.as_str())).collect();
            let (theta, stats) = model.infer_theta(&refs, passes)?;
            if stats.oov > 0 {
                eprintln!("warning: {} of {} tokens out of vocabulary", stats.oov, stats.oov + stats.used);
            }
            let values: Vec<String> = theta.values.iter().map(|v| format!("{v:.6}")).collect();
            out!("{}", values.join("\t"));
        }
        QueryCommand::Export { model, output, normalization, modality } => {
            let model = Model::load(&model)?;
            let normalization: Normalization = normalization.parse()?;
            let modality = modality_id(&model, modality.as_deref())?;
            let file = std::fs::File::create(&output).map_err(|e| Error::io(&output, e))?;
            let mut w = std::io::BufWriter::new(file);
            model.export_tsv(&mut w, modality, normalization)?;
            w.flush()?;
        }
        QueryCommand::Sparsity { model } => {
            let model = Model::load(&model)?;
            out!("{:.6}", model.sparsity());
        }
    }
    Ok(())
}

fn run_eval(command: EvalCommand, threads: Option<usize>) -> Result<()> {
    match command {
        EvalCommand::Similarity { config, testset, metric, normalization } => {
            let config = load_config(&config, threads)?;
            let model = Model::load(&config.paths.workdir.join("model.bin"))?;
            let metric = match metric {
                Some(m) => m.parse()?,
                None => config.eval.metric,
            };
            let normalization = match normalization {
                Some(n) => n.parse()?,
                None => config.eval.normalization,
            };
            let testsets: Vec<PathBuf> = match testset {
                Some(t) => vec![t],
                None => config.eval.similarity_testsets.clone(),
            };
            if testsets.is_empty() {
                return Err(Error::Config("no similarity testset given".into()));
            }
            for path in testsets {
                let testset = SimilarityTestset::read_tsv(&path)?;
                let report = evaluate_similarity(&model, &testset, metric, normalization)?;
                out!(
                    "{}\tspearman={:.6}\tcoverage={:.6}\tscored={}\ttotal={}",
                    path.display(),
                    report.spearman,
                    report.coverage,
                    report.scored,
                    report.total
                );
            }
        }
        EvalCommand::Coherence { config, top_k } => {
            let config = load_config(&config, threads)?;
            let model = Model::load(&config.paths.workdir.join("model.bin"))?;
            let reference = Cooc::read(&config.paths.workdir.join("cooc_word_raw.bin"))?;
            let ks = top_k.unwrap_or_else(|| config.eval.coherence_top_k.clone());
            for k in ks {
                let score = model_coherence(&model, &reference, k)?;
                out!("top_{k}\tcoherence={score:.6}");
            }
        }
        EvalCommand::Triplets { config, docs, triplets, metric, passes } => {
            let config = load_config(&config, threads)?;
            let model = Model::load(&config.paths.workdir.join("model.bin"))?;
            let docs = docs
                .or_else(|| config.eval.docs_file.clone())
                .ok_or_else(|| Error::Config("no held-out documents file given".into()))?;
            let triplets_path = triplets
                .or_else(|| config.eval.triplets_file.clone())
                .ok_or_else(|| Error::Config("no triplets file given".into()))?;
            let metric = match metric {
                Some(m) => m.parse()?,
                None => config.eval.metric,
            };
            let passes = passes.unwrap_or(config.eval.infer_passes);
            let triplets = TripletSet::read_tsv(&triplets_path)?;
            let embeddings = fold_in_documents(&model, &docs, passes)?;
            let report = triplet_accuracy(&embeddings, &triplets, metric)?;
            out!(
                "accuracy={:.6}\tused={}\tties={}\tmissing={}",
                report.accuracy, report.used, report.ties, report.missing
            );
        }
    }
    Ok(())
}
