//! End-to-end pipeline driver: vocabulary → co-occurrence → batches →
//! training → evaluation, under a single reproducible config.
//!
//! Stages are cached by content hash: a stage whose inputs and config subset
//! are unchanged is skipped, and its artifacts are reused. Artifacts are
//! written through a `.partial` marker and renamed on completion, so an
//! aborted stage never leaves a complete-looking file behind.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::{
    dump_batch_tsv, read_batch_file, shard_batches, write_batch, DirectorySource,
};
use crate::cooc::{
    apply_weighting, build_pseudo_documents, count_cooccurrences, count_doc_cooccurrences,
    filter_min_count, CoocStore, ModalityCooc, Weighting,
};
use crate::corpus::{
    count_corpus_tokens, read_modality_file, subsample, tokenize_corpus_file, tokenize_modality,
    vocab_set_hash, ModalityStream, TokenStream, Vocabulary, WORD_MODALITY, WORD_MODALITY_NAME,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_similarity, model_coherence, triplet_accuracy, SimilarityTestset, TripletSet,
};
use crate::model::{Embedding, Metric, Normalization, TrainedModel};
use crate::scalar::Scalar;
use crate::trainer::{OnlineTrainer, TrainConfig};

const FORMAT_EPOCH: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub modality_files: Vec<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { corpus: PathBuf::from("corpus.txt"), modality_files: Vec::new(), workdir: PathBuf::from("work") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Most frequent tokens removed from the word vocabulary.
    pub drop_top: usize,
    /// Word vocabulary cap after dropping.
    pub keep: usize,
    /// Subsampling threshold; 0 disables subsampling.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { drop_top: 25, keep: 100_000, subsample: 1e-5, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoocConfig {
    pub window: usize,
    pub min_count: u64,
    pub weighting: Weighting,
    pub batch_size: usize,
    pub symmetric_modalities: bool,
}

impl Default for CoocConfig {
    fn default() -> Self {
        CoocConfig { window: 5, min_count: 5, weighting: Weighting::Raw, batch_size: 100, symmetric_modalities: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub similarity_testsets: Vec<PathBuf>,
    pub coherence_top_k: Vec<usize>,
    pub metric: Metric,
    pub normalization: Normalization,
    /// Held-out documents (`doc_id<TAB>token token ...`) for fold-in.
    pub docs_file: Option<PathBuf>,
    pub triplets_file: Option<PathBuf>,
    pub infer_passes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            similarity_testsets: Vec::new(),
            coherence_top_k: vec![10, 100],
            metric: Metric::Dot,
            normalization: Normalization::Bayes,
            docs_file: None,
            triplets_file: None,
            infer_passes: 10,
        }
    }
}

/// The single reproducible config driving every stage. Round-trips through
/// TOML losslessly; its hash keys stage caching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub cooc: CoocConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Hash of the canonical serialized config.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(hex32(&h.finalize().into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Vocab,
    Cooc,
    Batches,
    Train,
    Eval,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::Cooc => "cooc",
            Stage::Batches => "batches",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn load(workdir: &Path) -> Result<Self> {
        let path = workdir.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn save(&self, workdir: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        write_atomic(&workdir.join("manifest.json"), |w| {
            w.write_all(body.as_bytes())?;
            Ok(())
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub skipped: bool,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub stages: Vec<StageReport>,
}

pub(crate) fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<[u8; 32]> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().into())
}

/// Writes through `<path>.partial` and renames on success.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let partial = partial_path(path);
    let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut writer = BufWriter::new(file);
    body(&mut writer)?;
    writer.flush()?;
    drop(writer);
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".partial");
    PathBuf::from(os)
}

fn rel(workdir: &Path, path: &Path) -> String {
    path.strip_prefix(workdir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace(std::path::MAIN_SEPARATOR, "/")
}

struct StageKey(Sha256);

impl StageKey {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(FORMAT_EPOCH.to_le_bytes());
        h.update(stage.as_bytes());
        StageKey(h)
    }

    fn text(mut self, label: &str, value: &str) -> Self {
        self.0.update(label.as_bytes());
        self.0.update([0u8]);
        self.0.update(value.as_bytes());
        self.0.update([0u8]);
        self
    }

    fn file(mut self, label: &str, path: &Path) -> Result<Self> {
        self.0.update(label.as_bytes());
        self.0.update([0u8]);
        self.0.update(sha256_file(path)?);
        self
            .0
            .update(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        self.0.update([0u8]);
        Ok(self)
    }

    fn artifacts(mut self, records: &[ArtifactRecord]) -> Self {
        for a in records {
            self.0.update(a.path.as_bytes());
            self.0.update([0u8]);
            self.0.update(a.sha256.as_bytes());
            self.0.update([0u8]);
        }
        self
    }

    fn finish(self) -> String {
        hex32(&self.0.finalize().into())
    }
}

fn artifacts_intact(workdir: &Path, record: &StageRecord) -> bool {
    record.artifacts.iter().all(|a| {
        let path = workdir.join(&a.path);
        matches!(sha256_file(&path), Ok(h) if hex32(&h) == a.sha256)
    })
}

fn run_stage(
    manifest: &mut Manifest,
    workdir: &Path,
    stage: Stage,
    key: String,
    build: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<StageReport> {
    let name = stage.name();
    if let Some(record) = manifest.stages.get(name) {
        if record.key == key && artifacts_intact(workdir, record) {
            return Ok(StageReport { stage: name, skipped: true, artifacts: record.artifacts.clone() });
        }
    }
    let paths = build().map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })?;
    let mut artifacts = Vec::with_capacity(paths.len());
    for path in &paths {
        artifacts.push(ArtifactRecord { path: rel(workdir, path), sha256: hex32(&sha256_file(path)?) });
    }
    manifest.stages.insert(name.to_string(), StageRecord { key, artifacts: artifacts.clone() });
    manifest.save(workdir)?;
    Ok(StageReport { stage: name, skipped: false, artifacts })
}

/// Modality names declared by the input files, sorted for deterministic id
/// assignment (word = 0, extras from 1).
fn modality_names(config: &PipelineConfig) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for path in &config.paths.modality_files {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut name = None;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some((n, _)) = line.split_once('\t') {
                name = Some(n.to_owned());
                break;
            }
        }
        let name = name.ok_or_else(|| Error::Data(format!("{}: no modality rows", path.display())))?;
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
            return Err(Error::Data(format!("modality name `{name}` has unsupported characters")));
        }
        found.push((name, path.clone()));
    }
    found.sort();
    for pair in found.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Data(format!("duplicate modality name `{}`", pair[0].0)));
        }
    }
    Ok(found)
}

fn vocab_path(workdir: &Path, name: &str) -> PathBuf {
    if name == WORD_MODALITY_NAME {
        workdir.join("vocab_word.tsv")
    } else {
        workdir.join(format!("vocab_m_{name}.tsv"))
    }
}

fn load_vocabs(config: &PipelineConfig) -> Result<Vec<Vocabulary>> {
    let workdir = &config.paths.workdir;
    let mut vocabs = vec![Vocabulary::read_tsv(&vocab_path(workdir, WORD_MODALITY_NAME), WORD_MODALITY, WORD_MODALITY_NAME)?];
    for (i, (name, _)) in modality_names(config)?.into_iter().enumerate() {
        vocabs.push(Vocabulary::read_tsv(&vocab_path(workdir, &name), (i + 1) as u16, &name)?);
    }
    Ok(vocabs)
}

/// The subsampled word-token stream and per-modality token streams, rebuilt
/// from the corpus and the persisted vocabularies.
fn load_streams(config: &PipelineConfig, vocabs: &[Vocabulary]) -> Result<(TokenStream, Vec<ModalityStream>)> {
    let stream = tokenize_corpus_file(&config.paths.corpus, &vocabs[0])?;
    let stream = if config.corpus.subsample > 0.0 {
        subsample(&stream, &vocabs[0], config.corpus.subsample, config.corpus.seed)
    } else {
        stream
    };
    let mut modality_streams = Vec::new();
    for vocab in &vocabs[1..] {
        let (_, path) = modality_names(config)?
            .into_iter()
            .find(|(n, _)| *n == vocab.name)
            .ok_or_else(|| Error::Data(format!("modality `{}` input file disappeared", vocab.name)))?;
        let docs = read_modality_file(&path)?;
        if docs.docs.len() != stream.docs.len() {
            return Err(Error::Data(format!(
                "{}: {} lines but the corpus has {} documents",
                path.display(),
                docs.docs.len(),
                stream.docs.len()
            )));
        }
        modality_streams.push(tokenize_modality(&docs, vocab));
    }
    Ok((stream, modality_streams))
}

fn cooc_raw_path(workdir: &Path) -> PathBuf {
    workdir.join("cooc_word_raw.bin")
}

fn cooc_train_path(workdir: &Path) -> PathBuf {
    workdir.join("cooc_word_train.bin")
}

fn cooc_modality_path(workdir: &Path, name: &str, direction: &str) -> PathBuf {
    workdir.join(format!("cooc_m_{name}_{direction}.bin"))
}

fn batches_dir(workdir: &Path) -> PathBuf {
    workdir.join("batches")
}

fn model_path(workdir: &Path) -> PathBuf {
    workdir.join("model.bin")
}

fn train_log_path(workdir: &Path) -> PathBuf {
    workdir.join("train.log")
}

fn stage_vocab(config: &PipelineConfig, manifest: &mut Manifest) -> Result<StageReport> {
    let workdir = config.paths.workdir.clone();
    let mut key = StageKey::new("vocab")
        .text("corpus_cfg", &toml_blob(&config.corpus)?)
        .file("corpus", &config.paths.corpus)?;
    let names = modality_names(config)?;
    for (name, path) in &names {
        key = key.text("modality", name).file("modality_file", path)?;
    }
    run_stage(manifest, &workdir.clone(), Stage::Vocab, key.finish(), move || {
        let (counts, _docs) = count_corpus_tokens(&config.paths.corpus)?;
        let word_vocab = Vocabulary::from_counts(
            WORD_MODALITY,
            WORD_MODALITY_NAME,
            counts,
            config.corpus.drop_top,
            config.corpus.keep,
        )?;
        let mut paths = Vec::new();
        let word_path = vocab_path(&workdir, WORD_MODALITY_NAME);
        write_atomic(&word_path, |w| word_vocab.write_tsv(w))?;
        paths.push(word_path);
        for (i, (name, file)) in names.iter().enumerate() {
            let docs = read_modality_file(file)?;
            let vocab = crate::corpus::build_vocabulary(
                docs.docs.iter().map(|d| d.iter()),
                (i + 1) as u16,
                name,
                0,
                usize::MAX,
            )?;
            let path = vocab_path(&workdir, name);
            write_atomic(&path, |w| vocab.write_tsv(w))?;
            paths.push(path);
        }
        Ok(paths)
    })
}

fn stage_cooc<S: Scalar>(
    config: &PipelineConfig,
    manifest: &mut Manifest,
    vocab_artifacts: &[ArtifactRecord],
) -> Result<StageReport> {
    let workdir = config.paths.workdir.clone();
    let key = StageKey::new("cooc")
        .artifacts(vocab_artifacts)
        .text("corpus_cfg", &toml_blob(&config.corpus)?)
        .text("window", &config.cooc.window.to_string())
        .text("min_count", &config.cooc.min_count.to_string())
        .text("weighting", &config.cooc.weighting.to_string())
        .text("symmetric", &config.cooc.symmetric_modalities.to_string())
        .file("corpus", &config.paths.corpus)?;
    run_stage(manifest, &workdir.clone(), Stage::Cooc, key.finish(), move || {
        let vocabs = load_vocabs(config)?;
        let (stream, modality_streams) = load_streams(config, &vocabs)?;
        let counts = count_cooccurrences::<S>(&stream, vocabs[0].len(), config.cooc.window);
        let raw = filter_min_count(&counts, config.cooc.min_count)?;
        let trained = apply_weighting(&raw, config.cooc.weighting);
        let mut paths = Vec::new();
        let raw_path = cooc_raw_path(&workdir);
        write_store_atomic(&raw_path, &raw)?;
        paths.push(raw_path);
        let train_path = cooc_train_path(&workdir);
        write_store_atomic(&train_path, &trained)?;
        paths.push(train_path);
        for (vocab, stream_m) in vocabs[1..].iter().zip(&modality_streams) {
            let by_word = count_doc_cooccurrences::<S>(
                &stream_m.docs,
                &stream.docs,
                vocab.len(),
                vocabs[0].len(),
            );
            let path = cooc_modality_path(&workdir, &vocab.name, "by_word");
            write_store_atomic(&path, &by_word)?;
            paths.push(path);
            if config.cooc.symmetric_modalities {
                let by_token = count_doc_cooccurrences::<S>(
                    &stream.docs,
                    &stream_m.docs,
                    vocabs[0].len(),
                    vocab.len(),
                );
                let path = cooc_modality_path(&workdir, &vocab.name, "by_token");
                write_store_atomic(&path, &by_token)?;
                paths.push(path);
            }
        }
        Ok(paths)
    })
}

fn write_store_atomic<S: Scalar>(path: &Path, store: &CoocStore<S>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let partial = partial_path(path);
    store.write(&partial)?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn stage_batches<S: Scalar>(
    config: &PipelineConfig,
    manifest: &mut Manifest,
    cooc_artifacts: &[ArtifactRecord],
) -> Result<StageReport> {
    let workdir = config.paths.workdir.clone();
    let key = StageKey::new("batches")
        .artifacts(cooc_artifacts)
        .text("batch_size", &config.cooc.batch_size.to_string())
        .text("symmetric", &config.cooc.symmetric_modalities.to_string())
        .finish();
    run_stage(manifest, &workdir.clone(), Stage::Batches, key, move || {
        let vocabs = load_vocabs(config)?;
        let hash = vocab_set_hash(&vocabs);
        let trained = CoocStore::<S>::read(&cooc_train_path(&workdir))?;
        let mut extras = Vec::new();
        for vocab in &vocabs[1..] {
            let by_word = CoocStore::<S>::read(&cooc_modality_path(&workdir, &vocab.name, "by_word"))?;
            let by_token = if config.cooc.symmetric_modalities {
                Some(CoocStore::<S>::read(&cooc_modality_path(&workdir, &vocab.name, "by_token"))?)
            } else {
                None
            };
            extras.push(ModalityCooc { modality_id: vocab.modality_id, by_word, by_token });
        }
        let docs = build_pseudo_documents(&trained, &extras, config.cooc.symmetric_modalities)?;
        if docs.is_empty() {
            return Err(Error::Data("no pseudo-documents to batch".into()));
        }
        let batches = shard_batches(docs, config.cooc.batch_size);
        let dir = batches_dir(&workdir);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths = Vec::with_capacity(batches.len());
        for (i, batch) in batches.iter().enumerate() {
            let path = dir.join(format!("batch_{i:05}.bin"));
            write_atomic(&path, |w| write_batch(w, batch, &hash))?;
            paths.push(path);
        }
        Ok(paths)
    })
}

fn stage_train<S: Scalar>(
    config: &PipelineConfig,
    manifest: &mut Manifest,
    batch_artifacts: &[ArtifactRecord],
) -> Result<StageReport> {
    let workdir = config.paths.workdir.clone();
    let key = StageKey::new("train")
        .artifacts(batch_artifacts)
        .text("train_cfg", &toml_blob(&config.train)?)
        .finish();
    run_stage(manifest, &workdir.clone(), Stage::Train, key, move || {
        let vocabs = load_vocabs(config)?;
        let hash = vocab_set_hash(&vocabs);
        let source = DirectorySource::<S>::open(&batches_dir(&workdir), Some(hash))?;
        let mut trainer = OnlineTrainer::<S>::new(config.train.clone(), &vocabs)?;
        let trace = trainer.train(&source)?;
        let model = TrainedModel::new(trainer.phi, vocabs, config.train.clone())?;

        let model_file = model_path(&workdir);
        write_atomic(&model_file, |w| model.write(w))?;
        let log_file = train_log_path(&workdir);
        write_atomic(&log_file, |w| {
            for line in &trace.batches {
                writeln!(
                    w,
                    "epoch={} batch={} rho={:.6} log_likelihood={:.6} skipped={} dead_columns={}",
                    line.epoch, line.batch_index, line.rho, line.log_likelihood, line.skipped, line.dead_columns
                )?;
            }
            for epoch in &trace.epochs {
                writeln!(
                    w,
                    "epoch={} total_log_likelihood={:.6} skipped={}",
                    epoch.epoch, epoch.log_likelihood, epoch.skipped
                )?;
            }
            Ok(())
        })?;
        Ok(vec![model_file, log_file])
    })
}

fn stage_eval<S: Scalar>(
    config: &PipelineConfig,
    manifest: &mut Manifest,
    train_artifacts: &[ArtifactRecord],
    config_hash: &str,
) -> Result<StageReport> {
    let workdir = config.paths.workdir.clone();
    let mut key = StageKey::new("eval")
        .artifacts(train_artifacts)
        .text("eval_cfg", &toml_blob(&config.eval)?);
    for testset in &config.eval.similarity_testsets {
        key = key.file("testset", testset)?;
    }
    if let Some(docs) = &config.eval.docs_file {
        key = key.file("docs", docs)?;
    }
    if let Some(triplets) = &config.eval.triplets_file {
        key = key.file("triplets", triplets)?;
    }
    let config_hash = config_hash.to_owned();
    run_stage(manifest, &workdir.clone(), Stage::Eval, key.finish(), move || {
        let model = TrainedModel::<S>::load(&model_path(&workdir))?;
        let reports = workdir.join("reports");
        let mut paths = Vec::new();
        let echo = format!(
            "# config_hash={config_hash} seed={} metric={} normalization={:?}",
            config.train.seed,
            config.eval.metric,
            config.eval.normalization
        );

        for testset_path in &config.eval.similarity_testsets {
            let testset = SimilarityTestset::read_tsv(testset_path)?;
            let report = evaluate_similarity(&model, &testset, config.eval.metric, config.eval.normalization)?;
            let stem = testset_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "testset".into());
            let out = reports.join(format!("similarity_{stem}.tsv"));
            write_atomic(&out, |w| {
                writeln!(w, "{echo}")?;
                writeln!(w, "# testset={}", testset_path.display())?;
                writeln!(
                    w,
                    "SUMMARY\tspearman={:.6}\tcoverage={:.6}\tscored={}\ttotal={}",
                    report.spearman, report.coverage, report.scored, report.total
                )?;
                Ok(())
            })?;
            paths.push(out);
        }

        if !config.eval.coherence_top_k.is_empty() {
            let reference = CoocStore::<S>::read(&cooc_raw_path(&workdir))?;
            let out = reports.join("coherence.tsv");
            let ks = config.eval.coherence_top_k.clone();
            let model_ref = &model;
            let reference_ref = &reference;
            write_atomic(&out, |w| {
                writeln!(w, "{echo}")?;
                writeln!(w, "# smoothing=add_one_pair_count reference=cooc_word_raw.bin")?;
                let mut summary = String::from("SUMMARY");
                for &k in &ks {
                    let score = model_coherence(model_ref, reference_ref, k)?;
                    writeln!(w, "top_{k}\t{score:.6}")?;
                    summary.push_str(&format!("\tcoherence_top{k}={score:.6}"));
                }
                writeln!(w, "{summary}")?;
                Ok(())
            })?;
            paths.push(out);
        }

        if let (Some(docs_file), Some(triplets_file)) = (&config.eval.docs_file, &config.eval.triplets_file) {
            let triplets = TripletSet::read_tsv(triplets_file)?;
            let embeddings = fold_in_documents(&model, docs_file, config.eval.infer_passes)?;
            let report = triplet_accuracy(&embeddings, &triplets, config.eval.metric)?;
            let out = reports.join("triplets.tsv");
            write_atomic(&out, |w| {
                writeln!(w, "{echo}")?;
                writeln!(w, "# docs={} triplets={}", docs_file.display(), triplets_file.display())?;
                writeln!(
                    w,
                    "SUMMARY\taccuracy={:.6}\tused={}\tties={}\tmissing={}",
                    report.accuracy, report.used, report.ties, report.missing
                )?;
                Ok(())
            })?;
            paths.push(out);
        }
        Ok(paths)
    })
}

/// Folds in every document of a `doc_id<TAB>text` file and returns their
/// theta embeddings keyed by id.
pub fn fold_in_documents<S: Scalar>(
    model: &TrainedModel<S>,
    docs_file: &Path,
    passes: usize,
) -> Result<HashMap<String, Embedding<S>>> {
    let file = File::open(docs_file).map_err(|e| Error::io(docs_file, e))?;
    let mut embeddings = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(docs_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected doc_id<TAB>text", docs_file.display(), lineno + 1))
        })?;
        let tokens: Vec<(u16, &str)> = text.split_whitespace().map(|t| (WORD_MODALITY, t)).collect();
        match model.infer_theta(&tokens, passes) {
            Ok((embedding, _)) => {
                embeddings.insert(id.to_owned(), embedding);
            }
            Err(Error::Data(_)) => continue, // fully out-of-vocabulary document
            Err(e) => return Err(e),
        }
    }
    Ok(embeddings)
}

fn toml_blob<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("config serialization: {e}")))
}

/// Runs stages up to and including `last`. Already-fresh stages are skipped.
pub fn run_pipeline_until<S: Scalar>(config: &PipelineConfig, last: Stage) -> Result<PipelineSummary> {
    let workdir = &config.paths.workdir;
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let config_hash = config.hash()?;
    let mut manifest = Manifest::load(workdir)?;
    let mut stages = Vec::new();

    let vocab = stage_vocab(config, &mut manifest)?;
    stages.push(vocab.clone());
    if last >= Stage::Cooc {
        let cooc = stage_cooc::<S>(config, &mut manifest, &vocab.artifacts)?;
        stages.push(cooc.clone());
        if last >= Stage::Batches {
            let batches = stage_batches::<S>(config, &mut manifest, &cooc.artifacts)?;
            stages.push(batches.clone());
            if last >= Stage::Train {
                let train = stage_train::<S>(config, &mut manifest, &batches.artifacts)?;
                stages.push(train.clone());
                if last >= Stage::Eval && wants_eval(config) {
                    let eval = stage_eval::<S>(config, &mut manifest, &train.artifacts, &config_hash)?;
                    stages.push(eval);
                }
            }
        }
    }

    let summary = PipelineSummary { config_hash, stages };
    write_summary(workdir, &summary)?;
    Ok(summary)
}

fn wants_eval(config: &PipelineConfig) -> bool {
    !config.eval.similarity_testsets.is_empty()
        || !config.eval.coherence_top_k.is_empty()
        || (config.eval.docs_file.is_some() && config.eval.triplets_file.is_some())
}

/// Full pipeline: vocabulary through evaluation.
pub fn run_pipeline<S: Scalar>(config: &PipelineConfig) -> Result<PipelineSummary> {
    run_pipeline_until::<S>(config, Stage::Eval)
}

fn write_summary(workdir: &Path, summary: &PipelineSummary) -> Result<()> {
    write_atomic(&workdir.join("summary.tsv"), |w| {
        writeln!(w, "# config_hash={}", summary.config_hash)?;
        for stage in &summary.stages {
            for artifact in &stage.artifacts {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}",
                    stage.stage,
                    if stage.skipped { "cached" } else { "built" },
                    artifact.path,
                    artifact.sha256
                )?;
            }
        }
        Ok(())
    })
}

/// Writes a `batch_XXXXX.tsv` debug dump beside every batch file.
pub fn dump_batches<S: Scalar>(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let vocabs = load_vocabs(config)?;
    let dir = batches_dir(&config.paths.workdir);
    let mut outputs = Vec::new();
    let mut bins: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    bins.sort();
    for bin in bins {
        let batch = read_batch_file::<S>(&bin, None)?;
        let out = bin.with_extension("tsv");
        write_atomic(&out, |w| dump_batch_tsv(w, &batch, &vocabs))?;
        outputs.push(out);
    }
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub weights: BTreeMap<String, f64>,
    pub spearman: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub points: Vec<GridPoint>,
    pub best: usize,
}

/// Trains one model per candidate weight vector (cartesian product of
/// `values` over the extra modalities, word weight fixed), evaluates each on
/// the validation testset, and selects the argmax. Points are visited in
/// ascending lexicographic order and replaced only on strict improvement, so
/// ties resolve to the smallest weight vector.
pub fn grid_search_modality_weights<S: Scalar>(
    config: &PipelineConfig,
    values: &[f64],
    testset_path: &Path,
) -> Result<GridReport> {
    if values.is_empty() {
        return Err(Error::Config("the weight grid must not be empty".into()));
    }
    let mut values: Vec<f64> = values.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));

    run_pipeline_until::<S>(config, Stage::Batches)?;
    let vocabs = load_vocabs(config)?;
    if vocabs.len() < 2 {
        return Err(Error::Config("modality weight search needs at least one extra modality".into()));
    }
    let extra_names: Vec<String> = vocabs[1..].iter().map(|v| v.name.clone()).collect();
    let hash = vocab_set_hash(&vocabs);
    let source = DirectorySource::<S>::open(&batches_dir(&config.paths.workdir), Some(hash))?;
    let testset = SimilarityTestset::read_tsv(testset_path)?;

    let mut points = Vec::new();
    let mut best: Option<usize> = None;
    let mut indices = vec![0usize; extra_names.len()];
    loop {
        let mut weights = config.train.modality_weights.clone();
        for (name, &i) in extra_names.iter().zip(&indices) {
            weights.insert(name.clone(), values[i]);
        }
        let train_config = TrainConfig { modality_weights: weights.clone(), ..config.train.clone() };
        let mut trainer = OnlineTrainer::<S>::new(train_config.clone(), &vocabs)?;
        trainer.train(&source)?;
        let model = TrainedModel::new(trainer.phi, vocabs.clone(), train_config)?;
        let report = evaluate_similarity(&model, &testset, config.eval.metric, config.eval.normalization)?;
        points.push(GridPoint { weights, spearman: report.spearman, coverage: report.coverage });
        if best.is_none_or(|b| report.spearman > points[b].spearman) {
            best = Some(points.len() - 1);
        }

        // advance the cartesian product, least-significant last
        let mut pos = indices.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < values.len() {
                break;
            }
            indices[pos] = 0;
        }
        if indices.iter().all(|&i| i == 0) {
            break;
        }
    }

    let best = best.expect("grid has at least one point");
    let report_path = config.paths.workdir.join("reports").join("grid_modality.tsv");
    write_atomic(&report_path, |w| {
        writeln!(w, "# validation_testset={}", testset_path.display())?;
        for (i, point) in points.iter().enumerate() {
            let weights: Vec<String> = point.weights.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(
                w,
                "{}\t{}\tspearman={:.6}\tcoverage={:.6}{}",
                i,
                weights.join(","),
                point.spearman,
                point.coverage,
                if i == best { "\tbest" } else { "" }
            )?;
        }
        Ok(())
    })?;
    Ok(GridReport { points, best })
}
