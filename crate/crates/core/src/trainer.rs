//! Regularized multimodal online EM over batches of pseudo-documents.
//!
//! The model factorizes p(u|v) = sum_t phi_ut theta_tv. Phi columns are kept
//! column-stochastic per modality; theta vectors are transient and rebuilt
//! for every pseudo-document. Online training accumulates unnormalized
//! counts per batch and folds them into running counts with an exponential
//! moving average, so Phi is never overwritten outright.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, BatchSource, PseudoDocument};
use crate::corpus::{Vocabulary, WORD_MODALITY};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, NS_PHI_INIT, NS_THETA};
use crate::scalar::Scalar;

/// How theta is initialized for each pseudo-document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInitKind {
    Uniform,
    #[default]
    Random,
}

/// Resolved theta initializer for one document.
#[derive(Debug, Clone, Copy)]
pub enum ThetaInit {
    Uniform,
    Seeded { seed: u64, stream: u64 },
}

/// Training hyperparameters. Serialized into model files as the config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_topics: usize,
    /// Full passes over the batches.
    pub epochs: usize,
    /// Theta update iterations per pseudo-document.
    pub inner_iterations: usize,
    /// Modality weights lambda_m by modality name; absent names weigh 1.
    pub modality_weights: BTreeMap<String, f64>,
    /// Sparsing strength. The regularizer subtracts tau * beta_u * column
    /// mass from the word-modality counts, so tau is scale-free: tau = 1
    /// removes one column's worth of mass spread as beta.
    pub tau: f64,
    /// EMA decay exponent: rho_i = (tau0 + i)^(-kappa) for 1-based step i.
    pub kappa: f64,
    pub tau0: f64,
    /// First epoch with sparsing active; defaults to the last epoch.
    pub sparsing_from_epoch: Option<usize>,
    pub theta_init: ThetaInitKind,
    pub seed: u64,
    /// Worker threads for batch processing; 1 = sequential, 0 = all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_topics: 100,
            epochs: 3,
            inner_iterations: 10,
            modality_weights: BTreeMap::new(),
            tau: 0.0,
            kappa: 0.7,
            tau0: 64.0,
            sparsing_from_epoch: None,
            theta_init: ThetaInitKind::Random,
            seed: 42,
            threads: 1,
        }
    }
}

/// One modality's dense block of phi_ut, shape vocab x topics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBlock<S: Scalar> {
    pub modality_id: u16,
    pub name: String,
    pub matrix: Array2<S>,
}

/// Column-stochastic embedding matrices per modality, plus the accumulated
/// topic masses n_t used as the p(t) estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix<S: Scalar> {
    blocks: Vec<ModalityBlock<S>>,
    topic_counts: Vec<S>,
    num_topics: usize,
}

impl<S: Scalar> PhiMatrix<S> {
    pub fn from_blocks(blocks: Vec<ModalityBlock<S>>, topic_counts: Vec<S>) -> Result<Self> {
        let num_topics = topic_counts.len();
        if num_topics == 0 {
            return Err(Error::Config("the number of topics must be at least 1".into()));
        }
        for b in &blocks {
            if b.matrix.ncols() != num_topics {
                return Err(Error::Data(format!(
                    "modality `{}` has {} topic columns, expected {num_topics}",
                    b.name,
                    b.matrix.ncols()
                )));
            }
        }
        Ok(PhiMatrix { blocks, topic_counts, num_topics })
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn blocks(&self) -> &[ModalityBlock<S>] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &ModalityBlock<S> {
        &self.blocks[index]
    }

    pub fn block_index(&self, modality_id: u16) -> Option<usize> {
        self.blocks.iter().position(|b| b.modality_id == modality_id)
    }

    /// The base word-modality block.
    pub fn word_block(&self) -> &ModalityBlock<S> {
        self.blocks
            .iter()
            .find(|b| b.modality_id == WORD_MODALITY)
            .expect("model has a word modality")
    }

    pub fn topic_counts(&self) -> &[S] {
        &self.topic_counts
    }

    pub(crate) fn set_topic_counts(&mut self, counts: Vec<S>) {
        debug_assert_eq!(counts.len(), self.num_topics);
        self.topic_counts = counts;
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ModalityBlock<S>] {
        &mut self.blocks
    }

    /// p(t) = n_t / sum_s n_s; uniform if all masses are zero.
    pub fn topic_prior(&self) -> Vec<S> {
        let total: S = self.topic_counts.iter().copied().sum();
        if total > S::zero() {
            self.topic_counts.iter().map(|&x| x / total).collect()
        } else {
            vec![S::of(1.0 / self.num_topics as f64); self.num_topics]
        }
    }

    /// Fraction of exactly-zero entries in the word-modality block.
    pub fn word_zero_fraction(&self) -> f64 {
        let m = &self.word_block().matrix;
        let zeros = m.iter().filter(|&&x| x == S::zero()).count();
        zeros as f64 / m.len() as f64
    }
}

/// Random column-stochastic initialization; strictly positive entries,
/// deterministic given the seed.
pub fn init_model<S: Scalar>(config: &TrainConfig, vocabs: &[Vocabulary]) -> Result<PhiMatrix<S>> {
    if config.num_topics == 0 {
        return Err(Error::Config("the number of topics must be at least 1".into()));
    }
    if vocabs.is_empty() {
        return Err(Error::Config("at least one modality vocabulary is required".into()));
    }
    let t = config.num_topics;
    let mut blocks = Vec::with_capacity(vocabs.len());
    for vocab in vocabs {
        let mut rng = stream_rng(config.seed, NS_PHI_INIT, vocab.modality_id as u64);
        let rows = vocab.len();
        let mut matrix = Array2::<S>::zeros((rows, t));
        for u in 0..rows {
            for tt in 0..t {
                matrix[[u, tt]] = S::of(1e-6 + rng.gen::<f64>());
            }
        }
        normalize_columns(&mut matrix);
        blocks.push(ModalityBlock { modality_id: vocab.modality_id, name: vocab.name.clone(), matrix });
    }
    PhiMatrix::from_blocks(blocks, vec![S::one(); t])
}

fn normalize_columns<S: Scalar>(matrix: &mut Array2<S>) {
    let sums = column_sums(matrix);
    let t = matrix.ncols();
    let inv: Vec<S> = sums.iter().map(|&s| if s > S::zero() { S::one() / s } else { S::zero() }).collect();
    for mut row in matrix.rows_mut() {
        let r = row.as_slice_mut().expect("row-major layout");
        for tt in 0..t {
            r[tt] *= inv[tt];
        }
    }
}

fn column_sums<S: Scalar>(matrix: &Array2<S>) -> Vec<S> {
    let t = matrix.ncols();
    let mut sums = vec![S::zero(); t];
    for row in matrix.rows() {
        let r = row.as_slice().expect("row-major layout");
        for tt in 0..t {
            sums[tt] += r[tt];
        }
    }
    sums
}

/// Topic distribution of one pseudo-document; non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector<S: Scalar>(Vec<S>);

impl<S: Scalar> ThetaVector<S> {
    pub fn values(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }
}

/// Unnormalized count updates accumulated over one batch, kept sparse by
/// token row.
#[derive(Debug)]
pub struct UpdateAccumulator<S: Scalar> {
    blocks: Vec<HashMap<u32, Vec<S>>>,
    num_topics: usize,
    pub docs: usize,
    pub log_likelihood: f64,
    pub skipped: u64,
    pub weight: f64,
}

impl<S: Scalar> UpdateAccumulator<S> {
    pub fn new(num_blocks: usize, num_topics: usize) -> Self {
        UpdateAccumulator {
            blocks: (0..num_blocks).map(|_| HashMap::new()).collect(),
            num_topics,
            docs: 0,
            log_likelihood: 0.0,
            skipped: 0,
            weight: 0.0,
        }
    }

    pub fn for_model(phi: &PhiMatrix<S>) -> Self {
        Self::new(phi.blocks().len(), phi.num_topics())
    }

    pub fn block(&self, index: usize) -> &HashMap<u32, Vec<S>> {
        &self.blocks[index]
    }

    fn row_mut(&mut self, block: usize, token: u32) -> &mut [S] {
        let t = self.num_topics;
        self.blocks[block].entry(token).or_insert_with(|| vec![S::zero(); t])
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (mine, theirs) in self.blocks.iter_mut().zip(other.blocks) {
            for (token, vals) in theirs {
                match mine.entry(token) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, b) in e.get_mut().iter_mut().zip(vals) {
                            *a += b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(vals);
                    }
                }
            }
        }
        self.docs += other.docs;
        self.log_likelihood += other.log_likelihood;
        self.skipped += other.skipped;
        self.weight += other.weight;
        self
    }
}

/// Posterior p(t|u,v) for one entry given the current theta, or `None` when
/// sum_t phi_ut theta_t = 0 (the entry is skipped).
pub fn entry_posterior<S: Scalar>(
    phi: &PhiMatrix<S>,
    block: usize,
    token: u32,
    theta: &[S],
) -> Option<Vec<S>> {
    let matrix = &phi.blocks()[block].matrix;
    if token as usize >= matrix.nrows() {
        return None;
    }
    let row = matrix.row(token as usize);
    let row = row.as_slice().expect("row-major layout");
    let mut post: Vec<S> = row.iter().zip(theta).map(|(&p, &t)| p * t).collect();
    let z: S = post.iter().copied().sum();
    if z > S::zero() {
        for p in &mut post {
            *p /= z;
        }
        Some(post)
    } else {
        None
    }
}

pub struct EStepOptions<'a> {
    pub inner_iterations: usize,
    pub theta_init: ThetaInit,
    /// Per-block modality weights, aligned with the phi blocks.
    pub lambdas: &'a [f64],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DocStats {
    pub log_likelihood: f64,
    pub skipped: u64,
    pub weight: f64,
}

/// Entries of a document resolved to phi block indices; tokens outside a
/// block's vocabulary stay and are counted as skipped during the passes.
fn resolve_blocks<'a, S: Scalar>(
    doc: &'a PseudoDocument<S>,
    phi: &PhiMatrix<S>,
) -> Vec<(usize, &'a [(u32, S)])> {
    doc.modalities
        .iter()
        .filter_map(|m| phi.block_index(m.modality_id).map(|b| (b, m.items.as_slice())))
        .collect()
}

fn init_theta<S: Scalar>(t: usize, init: ThetaInit) -> Vec<S> {
    match init {
        ThetaInit::Uniform => vec![S::of(1.0 / t as f64); t],
        ThetaInit::Seeded { seed, stream } => {
            let mut rng = stream_rng(seed, NS_THETA, stream);
            let mut theta: Vec<S> = (0..t).map(|_| S::of(1e-6 + rng.gen::<f64>())).collect();
            let z: S = theta.iter().copied().sum();
            for x in &mut theta {
                *x /= z;
            }
            theta
        }
    }
}

/// One theta update: theta_t <- normalized sum_m lambda_m sum_u n_uv p(t|u,v).
/// Returns the largest absolute change, or `None` if every entry was skipped
/// (theta is then left unchanged).
fn theta_update<S: Scalar>(
    resolved: &[(usize, &[(u32, S)])],
    phi: &PhiMatrix<S>,
    lambdas: &[f64],
    theta: &mut [S],
    agg: &mut [S],
) -> Option<S> {
    let t = theta.len();
    for a in agg.iter_mut() {
        *a = S::zero();
    }
    let mut any = false;
    for &(block, items) in resolved {
        let matrix = &phi.blocks()[block].matrix;
        let rows = matrix.nrows();
        let lambda = S::of(lambdas[block]);
        if lambda == S::zero() {
            continue;
        }
        for &(token, n) in items {
            if token as usize >= rows {
                continue;
            }
            let row = matrix.row(token as usize);
            let row = row.as_slice().expect("row-major layout");
            let mut z = S::zero();
            for tt in 0..t {
                z += row[tt] * theta[tt];
            }
            if z > S::zero() {
                any = true;
                let c = lambda * n / z;
                for tt in 0..t {
                    agg[tt] += row[tt] * theta[tt] * c;
                }
            }
        }
    }
    if !any {
        return None;
    }
    let z: S = agg.iter().copied().sum();
    let mut max_change = S::zero();
    for tt in 0..t {
        let next = agg[tt] / z;
        let change = (next - theta[tt]).abs();
        if change > max_change {
            max_change = change;
        }
        theta[tt] = next;
    }
    Some(max_change)
}

/// Final pass with the converged theta: emits lambda_m * n_uv * p(t|u,v)
/// into the accumulator and the modality-weighted log-likelihood.
fn emit_contributions<S: Scalar>(
    resolved: &[(usize, &[(u32, S)])],
    phi: &PhiMatrix<S>,
    lambdas: &[f64],
    theta: &[S],
    acc: &mut UpdateAccumulator<S>,
) -> DocStats {
    let t = theta.len();
    let mut stats = DocStats::default();
    for &(block, items) in resolved {
        let matrix = &phi.blocks()[block].matrix;
        let rows = matrix.nrows();
        let lambda = lambdas[block];
        let lambda_s = S::of(lambda);
        for &(token, n) in items {
            if token as usize >= rows {
                stats.skipped += 1;
                continue;
            }
            let row = matrix.row(token as usize);
            let row = row.as_slice().expect("row-major layout");
            let mut z = S::zero();
            for tt in 0..t {
                z += row[tt] * theta[tt];
            }
            if z <= S::zero() {
                stats.skipped += 1;
                continue;
            }
            let n_f = n.to_f64_lossy();
            stats.log_likelihood += lambda * n_f * z.to_f64_lossy().ln();
            stats.weight += n_f;
            let c = lambda_s * n / z;
            let out = acc.row_mut(block, token);
            for tt in 0..t {
                out[tt] += row[tt] * theta[tt] * c;
            }
        }
    }
    stats
}

/// E-step for one pseudo-document: alternates posterior and theta updates
/// for a fixed number of iterations, then emits posterior-weighted count
/// contributions into the accumulator.
pub fn estep_document<S: Scalar>(
    doc: &PseudoDocument<S>,
    phi: &PhiMatrix<S>,
    opts: &EStepOptions<'_>,
    acc: &mut UpdateAccumulator<S>,
) -> (ThetaVector<S>, DocStats) {
    assert!(opts.inner_iterations >= 1, "at least one inner iteration is required");
    let t = phi.num_topics();
    let resolved = resolve_blocks(doc, phi);
    let mut theta = init_theta::<S>(t, opts.theta_init);
    let mut agg = vec![S::zero(); t];
    for _ in 0..opts.inner_iterations {
        theta_update(&resolved, phi, opts.lambdas, &mut theta, &mut agg);
    }
    let stats = emit_contributions(&resolved, phi, opts.lambdas, &theta, acc);
    acc.docs += 1;
    acc.log_likelihood += stats.log_likelihood;
    acc.skipped += stats.skipped;
    acc.weight += stats.weight;
    (ThetaVector(theta), stats)
}

fn theta_stream(epoch: usize, batch_index: usize, doc_index: usize) -> u64 {
    ((epoch as u64) << 48) ^ ((batch_index as u64) << 24) ^ doc_index as u64
}

fn doc_theta_init(config: &TrainConfig, epoch: usize, batch_index: usize, doc_index: usize) -> ThetaInit {
    match config.theta_init {
        ThetaInitKind::Uniform => ThetaInit::Uniform,
        ThetaInitKind::Random => ThetaInit::Seeded {
            seed: config.seed,
            stream: theta_stream(epoch, batch_index, doc_index),
        },
    }
}

/// Runs the E-step over a whole batch against an immutable phi snapshot.
/// Documents are independent; with `parallel` they are folded by worker and
/// merged, which only perturbs floating-point summation order.
pub fn process_batch<S: Scalar>(
    batch: &Batch<S>,
    phi: &PhiMatrix<S>,
    config: &TrainConfig,
    lambdas: &[f64],
    epoch: usize,
    batch_index: usize,
    parallel: bool,
) -> UpdateAccumulator<S> {
    assert!(!batch.docs.is_empty(), "batches must be non-empty");
    let run_doc = |acc: &mut UpdateAccumulator<S>, doc_index: usize, doc: &PseudoDocument<S>| {
        let opts = EStepOptions {
            inner_iterations: config.inner_iterations,
            theta_init: doc_theta_init(config, epoch, batch_index, doc_index),
            lambdas,
        };
        estep_document(doc, phi, &opts, acc);
    };
    if parallel {
        batch
            .docs
            .par_iter()
            .enumerate()
            .fold(
                || UpdateAccumulator::for_model(phi),
                |mut acc, (i, doc)| {
                    run_doc(&mut acc, i, doc);
                    acc
                },
            )
            .reduce(|| UpdateAccumulator::for_model(phi), UpdateAccumulator::merge)
    } else {
        let mut acc = UpdateAccumulator::for_model(phi);
        for (i, doc) in batch.docs.iter().enumerate() {
            run_doc(&mut acc, i, doc);
        }
        acc
    }
}

/// Sparsing M-step transform: N'_ut = max(0, N_ut - tau * beta_u * mass_t)
/// with mass_t the column total, so the subtraction scales with the data.
/// Columns left all-zero are reset to beta. tau = 0 is a bit-exact no-op.
/// Returns the transformed counts and the number of reset columns.
pub fn apply_regularizer<S: Scalar>(counts: &Array2<S>, tau: f64, beta: &[S]) -> (Array2<S>, usize) {
    assert!(tau >= 0.0, "tau must be non-negative");
    assert_eq!(beta.len(), counts.nrows(), "beta must cover the vocabulary");
    if tau == 0.0 {
        return (counts.clone(), 0);
    }
    let (rows, t) = counts.dim();
    let masses = column_sums(counts);
    let tau_s = S::of(tau);
    let mut out = counts.clone();
    let mut new_masses = vec![S::zero(); t];
    for (u, mut row) in out.rows_mut().into_iter().enumerate() {
        let r = row.as_slice_mut().expect("row-major layout");
        for tt in 0..t {
            let clipped = (r[tt] - tau_s * beta[u] * masses[tt]).max(S::zero());
            r[tt] = clipped;
            new_masses[tt] += clipped;
        }
    }
    let mut dead = 0usize;
    for tt in 0..t {
        if new_masses[tt] == S::zero() {
            dead += 1;
            for u in 0..rows {
                out[[u, tt]] = beta[u];
            }
        }
    }
    (out, dead)
}

fn uniform_beta<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::of(1.0 / n as f64); n]
}

#[derive(Debug, Clone, Copy)]
pub struct MergeStats {
    pub rho: f64,
    pub dead_columns: usize,
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct BatchLine {
    pub epoch: usize,
    pub batch_index: usize,
    pub rho: f64,
    pub log_likelihood: f64,
    pub skipped: u64,
    pub dead_columns: usize,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub log_likelihood: f64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub batches: Vec<BatchLine>,
    pub epochs: Vec<EpochStats>,
    pub dead_column_events: usize,
}

/// Online EM state: the phi matrix plus running unnormalized counts.
pub struct OnlineTrainer<S: Scalar> {
    pub phi: PhiMatrix<S>,
    counts: Vec<Array2<S>>,
    step: u64,
    lambdas: Vec<f64>,
    betas: Vec<Vec<S>>,
    pub config: TrainConfig,
}

impl<S: Scalar> OnlineTrainer<S> {
    pub fn new(config: TrainConfig, vocabs: &[Vocabulary]) -> Result<Self> {
        let phi = init_model::<S>(&config, vocabs)?;
        Self::with_phi(config, phi)
    }

    /// Starts from an existing phi; running counts are seeded with the phi
    /// columns (unit mass each), which the first merges quickly dominate.
    pub fn with_phi(config: TrainConfig, phi: PhiMatrix<S>) -> Result<Self> {
        let lambdas = resolve_lambdas(&config, &phi)?;
        let counts: Vec<Array2<S>> = phi.blocks().iter().map(|b| b.matrix.clone()).collect();
        let betas = phi.blocks().iter().map(|b| uniform_beta::<S>(b.matrix.nrows())).collect();
        Ok(OnlineTrainer { phi, counts, step: 0, lambdas, betas, config })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn running_counts(&self) -> &[Array2<S>] {
        &self.counts
    }

    /// Folds a batch accumulator into the running counts with the scheduled
    /// step weight rho_i = (tau0 + i)^(-kappa), then rebuilds phi.
    pub fn merge_updates(&mut self, acc: &UpdateAccumulator<S>, scale: f64, sparsing: bool) -> MergeStats {
        self.step += 1;
        let rho = (self.config.tau0 + self.step as f64).powf(-self.config.kappa);
        self.merge_with_rho(acc, rho, scale, sparsing)
    }

    /// Same as [`merge_updates`](Self::merge_updates) with an explicit rho;
    /// rho = 1 replaces the counts with the batch, rho = 0 is a no-op.
    pub fn merge_with_rho(
        &mut self,
        acc: &UpdateAccumulator<S>,
        rho: f64,
        scale: f64,
        sparsing: bool,
    ) -> MergeStats {
        let keep = S::of(1.0 - rho);
        let boost = S::of(rho * scale);
        for (bi, counts) in self.counts.iter_mut().enumerate() {
            counts.mapv_inplace(|x| x * keep);
            for (&token, vals) in acc.block(bi) {
                let mut row = counts.row_mut(token as usize);
                let r = row.as_slice_mut().expect("row-major layout");
                for (out, &add) in r.iter_mut().zip(vals) {
                    *out += boost * add;
                }
            }
        }
        let dead_columns = self.rebuild_phi(sparsing);
        MergeStats { rho, dead_columns }
    }

    fn rebuild_phi(&mut self, sparsing: bool) -> usize {
        let t = self.phi.num_topics();
        let mut dead = 0usize;
        for bi in 0..self.counts.len() {
            let is_word = self.phi.blocks()[bi].modality_id == WORD_MODALITY;
            let tau = if sparsing && is_word { self.config.tau } else { 0.0 };
            let regularized: Option<(Array2<S>, usize)> = if tau > 0.0 {
                Some(apply_regularizer(&self.counts[bi], tau, &self.betas[bi]))
            } else {
                None
            };
            let (source, reset) = match &regularized {
                Some((m, d)) => (m, *d),
                None => (&self.counts[bi], 0),
            };
            dead += reset;
            let mut sums = column_sums(source);
            // a column with no mass at all falls back to beta
            let beta = &self.betas[bi];
            let mut target = source.clone();
            for tt in 0..t {
                if sums[tt] <= S::zero() {
                    dead += 1;
                    for u in 0..target.nrows() {
                        target[[u, tt]] = beta[u];
                    }
                    sums[tt] = S::one();
                }
            }
            if is_word {
                self.phi.set_topic_counts(sums.clone());
            }
            let inv: Vec<S> = sums.iter().map(|&s| S::one() / s).collect();
            for mut row in target.rows_mut() {
                let r = row.as_slice_mut().expect("row-major layout");
                for tt in 0..t {
                    r[tt] *= inv[tt];
                }
            }
            self.phi.blocks_mut()[bi].matrix = target;
        }
        dead
    }

    /// Runs `epochs` passes over the batch source. Theta is re-initialized
    /// per pseudo-document each epoch; the sparsing regularizer becomes
    /// active at `sparsing_from_epoch` (default: the last epoch).
    pub fn train(&mut self, source: &dyn BatchSource<S>) -> Result<TrainTrace> {
        if source.num_batches() == 0 {
            return Err(Error::Data("batch source is empty".into()));
        }
        let total_docs = source.total_docs();
        if total_docs == 0 {
            return Err(Error::Data("batch source holds no pseudo-documents".into()));
        }
        let sparsing_start = self.config.sparsing_from_epoch.unwrap_or(self.config.epochs).max(1);
        let parallel = self.config.threads != 1;
        let pool = if parallel {
            let threads = if self.config.threads == 0 { num_cpus_fallback() } else { self.config.threads };
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        let mut trace = TrainTrace::default();
        for epoch in 1..=self.config.epochs {
            let mut epoch_ll = 0.0;
            let mut epoch_skipped = 0u64;
            for batch_index in 0..source.num_batches() {
                let batch = source.load(batch_index)?;
                if batch.docs.is_empty() {
                    continue;
                }
                let acc = match &pool {
                    Some(pool) => pool.install(|| {
                        process_batch(&batch, &self.phi, &self.config, &self.lambdas, epoch, batch_index, true)
                    }),
                    None => process_batch(&batch, &self.phi, &self.config, &self.lambdas, epoch, batch_index, false),
                };
                let scale = total_docs as f64 / batch.docs.len() as f64;
                let sparsing = self.config.tau > 0.0 && epoch >= sparsing_start;
                let ll = acc.log_likelihood;
                let skipped = acc.skipped;
                let stats = self.merge_updates(&acc, scale, sparsing);
                epoch_ll += ll;
                epoch_skipped += skipped;
                trace.dead_column_events += stats.dead_columns;
                trace.batches.push(BatchLine {
                    epoch,
                    batch_index,
                    rho: stats.rho,
                    log_likelihood: ll,
                    skipped,
                    dead_columns: stats.dead_columns,
                });
            }
            trace.epochs.push(EpochStats { epoch, log_likelihood: epoch_ll, skipped: epoch_skipped });
        }
        Ok(trace)
    }
}

fn num_cpus_fallback() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn resolve_lambdas<S: Scalar>(config: &TrainConfig, phi: &PhiMatrix<S>) -> Result<Vec<f64>> {
    let mut lambdas = Vec::with_capacity(phi.blocks().len());
    for block in phi.blocks() {
        let lambda = config.modality_weights.get(&block.name).copied().unwrap_or(1.0);
        if lambda < 0.0 {
            return Err(Error::Config(format!("modality weight for `{}` must be >= 0", block.name)));
        }
        if block.modality_id == WORD_MODALITY && lambda <= 0.0 {
            return Err(Error::Config("the word modality weight must be positive".into()));
        }
        lambdas.push(lambda);
    }
    Ok(lambdas)
}

/// One offline EM step: a full E-pass with per-document theta convergence,
/// then phi is overwritten by the column-normalized aggregate counts (no
/// moving average, no regularizer). Returns the new phi and the total
/// log-likelihood of the *input* phi under the converged thetas.
pub fn offline_em_step<S: Scalar>(
    docs: &[PseudoDocument<S>],
    phi: &PhiMatrix<S>,
    lambdas: &[f64],
) -> (PhiMatrix<S>, f64) {
    const MAX_THETA_ITERS: usize = 500;
    let theta_tol = S::of(1e-12);
    let t = phi.num_topics();
    let mut acc = UpdateAccumulator::for_model(phi);
    let mut agg = vec![S::zero(); t];
    for doc in docs {
        let resolved = resolve_blocks(doc, phi);
        let mut theta = init_theta::<S>(t, ThetaInit::Uniform);
        for _ in 0..MAX_THETA_ITERS {
            match theta_update(&resolved, phi, lambdas, &mut theta, &mut agg) {
                Some(change) if change > theta_tol => {}
                _ => break,
            }
        }
        let stats = emit_contributions(&resolved, phi, lambdas, &theta, &mut acc);
        acc.log_likelihood += stats.log_likelihood;
    }

    let mut blocks = Vec::with_capacity(phi.blocks().len());
    let mut topic_counts = vec![S::one(); t];
    for (bi, block) in phi.blocks().iter().enumerate() {
        let rows = block.matrix.nrows();
        let mut matrix = Array2::<S>::zeros((rows, t));
        for (&token, vals) in acc.block(bi) {
            let mut row = matrix.row_mut(token as usize);
            let r = row.as_slice_mut().expect("row-major layout");
            r.copy_from_slice(vals);
        }
        let mut sums = column_sums(&matrix);
        let beta = uniform_beta::<S>(rows);
        for tt in 0..t {
            if sums[tt] <= S::zero() {
                for u in 0..rows {
                    matrix[[u, tt]] = beta[u];
                }
                sums[tt] = S::one();
            }
        }
        if block.modality_id == WORD_MODALITY {
            topic_counts = sums.clone();
        }
        let inv: Vec<S> = sums.iter().map(|&s| S::one() / s).collect();
        for mut row in matrix.rows_mut() {
            let r = row.as_slice_mut().expect("row-major layout");
            for tt in 0..t {
                r[tt] *= inv[tt];
            }
        }
        blocks.push(ModalityBlock { modality_id: block.modality_id, name: block.name.clone(), matrix });
    }
    let new_phi = PhiMatrix::from_blocks(blocks, topic_counts).expect("dimensions preserved");
    (new_phi, acc.log_likelihood)
}

/// Fold-in: theta for a fixed phi after `passes` update iterations.
/// Used for held-out document inference.
pub fn infer_theta_fixed_phi<S: Scalar>(
    doc: &PseudoDocument<S>,
    phi: &PhiMatrix<S>,
    lambdas: &[f64],
    passes: usize,
    init: ThetaInit,
) -> ThetaVector<S> {
    assert!(passes >= 1, "at least one pass is required");
    let t = phi.num_topics();
    let resolved = resolve_blocks(doc, phi);
    let mut theta = init_theta::<S>(t, init);
    let mut agg = vec![S::zero(); t];
    for _ in 0..passes {
        theta_update(&resolved, phi, lambdas, &mut theta, &mut agg);
    }
    ThetaVector(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{MemorySource, ModalityEntries};
    use crate::corpus::build_vocabulary;

    fn shard_for_test(docs: Vec<PseudoDocument<f64>>, size: usize) -> Vec<Batch<f64>> {
        crate::batch::shard_batches(docs, size)
    }

    fn word_vocab(n: usize) -> Vocabulary {
        let doc: Vec<String> = (0..n).map(|i| format!("w{i:03}")).collect();
        // repeat tokens with distinct frequencies so ordering is stable
        let docs: Vec<Vec<String>> = (0..n)
            .map(|i| vec![doc[i].clone(); n - i])
            .collect();
        build_vocabulary(docs, WORD_MODALITY, "word", 0, usize::MAX).unwrap()
    }

    fn doc(entries: &[(u32, f64)]) -> PseudoDocument<f64> {
        PseudoDocument {
            pivot_modality: WORD_MODALITY,
            pivot_token: entries[0].0,
            modalities: vec![ModalityEntries { modality_id: WORD_MODALITY, items: entries.to_vec() }],
        }
    }

    /// phi with two topics over {a, b}: t0 = (0.8, 0.2), t1 = (0.2, 0.8).
    fn toy_phi() -> PhiMatrix<f64> {
        let matrix = ndarray::arr2(&[[0.8, 0.2], [0.2, 0.8]]);
        PhiMatrix::from_blocks(
            vec![ModalityBlock { modality_id: WORD_MODALITY, name: "word".into(), matrix }],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn init_is_column_stochastic_and_deterministic() {
        let vocabs = vec![word_vocab(17)];
        let config = TrainConfig { num_topics: 5, ..TrainConfig::default() };
        let phi = init_model::<f64>(&config, &vocabs).unwrap();
        for block in phi.blocks() {
            for tt in 0..phi.num_topics() {
                let sum: f64 = block.matrix.column(tt).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(block.matrix.column(tt).iter().all(|&x| x > 0.0));
            }
        }
        let again = init_model::<f64>(&config, &vocabs).unwrap();
        assert_eq!(phi, again);
        let other = init_model::<f64>(
            &TrainConfig { seed: config.seed + 1, ..config.clone() },
            &vocabs,
        )
        .unwrap();
        assert_ne!(phi, other, "different seeds must differ");
    }

    #[test]
    fn zero_topics_rejected() {
        let vocabs = vec![word_vocab(3)];
        let config = TrainConfig { num_topics: 0, ..TrainConfig::default() };
        assert!(matches!(init_model::<f64>(&config, &vocabs), Err(Error::Config(_))));
    }

    #[test]
    fn posterior_matches_bayes_formula() {
        let phi = toy_phi();
        let post = entry_posterior(&phi, 0, 0, &[0.5, 0.5]).unwrap();
        assert!((post[0] - 0.8).abs() < 1e-12);
        assert!((post[1] - 0.2).abs() < 1e-12);
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_topic_posterior_is_one() {
        let matrix = ndarray::arr2(&[[0.3], [0.7]]);
        let phi = PhiMatrix::from_blocks(
            vec![ModalityBlock { modality_id: WORD_MODALITY, name: "word".into(), matrix }],
            vec![1.0],
        )
        .unwrap();
        let mut acc = UpdateAccumulator::for_model(&phi);
        let opts = EStepOptions { inner_iterations: 3, theta_init: ThetaInit::Uniform, lambdas: &[1.0] };
        let (theta, stats) = estep_document(&doc(&[(0, 2.0), (1, 1.0)]), &phi, &opts, &mut acc);
        assert_eq!(theta.values(), &[1.0]);
        assert_eq!(stats.skipped, 0);
        let post = entry_posterior(&phi, 0, 1, theta.values()).unwrap();
        assert_eq!(post, vec![1.0]);
    }

    #[test]
    fn symmetric_doc_keeps_uniform_theta() {
        let phi = toy_phi();
        let mut acc = UpdateAccumulator::for_model(&phi);
        let opts = EStepOptions { inner_iterations: 1, theta_init: ThetaInit::Uniform, lambdas: &[1.0] };
        let (theta, _) = estep_document(&doc(&[(0, 1.0), (1, 1.0)]), &phi, &opts, &mut acc);
        assert!((theta.values()[0] - 0.5).abs() < 1e-12);
        assert!((theta.values()[1] - 0.5).abs() < 1e-12);
        // contributions: for u=a, p(t|a) = (0.8, 0.2)
        let row = &acc.block(0)[&0];
        assert!((row[0] - 0.8).abs() < 1e-12);
        assert!((row[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_accumulator_is_linear() {
        let phi = toy_phi();
        let config = TrainConfig {
            num_topics: 2,
            theta_init: ThetaInitKind::Uniform,
            inner_iterations: 4,
            ..TrainConfig::default()
        };
        let d = doc(&[(0, 3.0), (1, 1.0)]);
        let one = process_batch(&Batch { docs: vec![d.clone()] }, &phi, &config, &[1.0], 1, 0, false);
        let two = process_batch(&Batch { docs: vec![d.clone(), d] }, &phi, &config, &[1.0], 1, 0, false);
        for (token, vals) in one.block(0) {
            let doubled = &two.block(0)[token];
            for (a, b) in vals.iter().zip(doubled) {
                assert_eq!(*b, 2.0 * *a, "two identical docs double the accumulator exactly");
            }
        }
        assert!((two.log_likelihood - 2.0 * one.log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn rho_one_replaces_counts_rho_zero_is_noop() {
        let vocabs = vec![word_vocab(4)];
        let config = TrainConfig {
            num_topics: 2,
            theta_init: ThetaInitKind::Uniform,
            ..TrainConfig::default()
        };
        let mut trainer = OnlineTrainer::<f64>::new(config.clone(), &vocabs).unwrap();
        let batch = Batch { docs: vec![doc(&[(0, 4.0), (1, 2.0)]), doc(&[(2, 3.0)])] };
        let acc = process_batch(&batch, &trainer.phi, &config, &[1.0], 1, 0, false);

        let before = trainer.phi.clone();
        trainer.merge_with_rho(&acc, 0.0, 1.0, false);
        assert_eq!(trainer.phi, before, "rho = 0 leaves phi unchanged");

        trainer.merge_with_rho(&acc, 1.0, 1.0, false);
        // counts are now exactly the batch statistics: phi is the M-step
        // normalization of this batch's accumulator
        let mut expected = Array2::<f64>::zeros((4, 2));
        for (&token, vals) in acc.block(0) {
            for (tt, &x) in vals.iter().enumerate() {
                expected[[token as usize, tt]] = x;
            }
        }
        let sums: Vec<f64> = (0..2).map(|tt| expected.column(tt).sum()).collect();
        for u in 0..4 {
            for tt in 0..2 {
                let want = expected[[u, tt]] / sums[tt];
                let got = trainer.phi.blocks()[0].matrix[[u, tt]];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_matches_hand_recurrence() {
        let vocabs = vec![word_vocab(3)];
        let config = TrainConfig {
            num_topics: 2,
            kappa: 0.7,
            tau0: 64.0,
            theta_init: ThetaInitKind::Uniform,
            inner_iterations: 2,
            ..TrainConfig::default()
        };
        let mut trainer = OnlineTrainer::<f64>::new(config.clone(), &vocabs).unwrap();
        let n0 = trainer.running_counts()[0].clone();
        let b1 = Batch { docs: vec![doc(&[(0, 2.0), (1, 1.0)])] };
        let b2 = Batch { docs: vec![doc(&[(1, 5.0), (2, 1.0)])] };
        let a1 = process_batch(&b1, &trainer.phi, &config, &[1.0], 1, 0, false);
        let phi_after_1 = {
            trainer.merge_updates(&a1, 2.0, false);
            trainer.phi.clone()
        };
        let a2 = process_batch(&b2, &phi_after_1, &config, &[1.0], 1, 1, false);
        trainer.merge_updates(&a2, 2.0, false);

        // hand recurrence: N_k = (1 - rho_k) N_{k-1} + rho_k * scale * acc_k
        let rho1 = (64.0f64 + 1.0).powf(-0.7);
        let rho2 = (64.0f64 + 2.0).powf(-0.7);
        let dense = |acc: &UpdateAccumulator<f64>| {
            let mut m = Array2::<f64>::zeros((3, 2));
            for (&token, vals) in acc.block(0) {
                for (tt, &x) in vals.iter().enumerate() {
                    m[[token as usize, tt]] = x;
                }
            }
            m
        };
        let n1 = n0.mapv(|x| x * (1.0 - rho1)) + dense(&a1).mapv(|x| x * (rho1 * 2.0));
        let n2 = n1.mapv(|x| x * (1.0 - rho2)) + dense(&a2).mapv(|x| x * (rho2 * 2.0));
        let got = &trainer.running_counts()[0];
        for (a, b) in got.iter().zip(n2.iter()) {
            assert!((a - b).abs() < 1e-12, "EMA recurrence mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn regularizer_zero_tau_is_bit_exact_noop() {
        let counts = ndarray::arr2(&[[3.0, 1.5], [1.0, 2.5]]);
        let beta = uniform_beta::<f64>(2);
        let (out, dead) = apply_regularizer(&counts, 0.0, &beta);
        assert_eq!(out, counts);
        assert_eq!(dead, 0);
    }

    #[test]
    fn regularizer_hand_subtraction() {
        // column counts (3, 1) with tau * beta * mass = (2, 2): -> (1, 0)
        let counts = ndarray::arr2(&[[3.0], [1.0]]);
        let beta = vec![0.5, 0.5];
        // mass = 4, tau * beta_u * mass = tau * 2; tau = 1 gives (1, 0)
        let (out, dead) = apply_regularizer(&counts, 1.0, &beta);
        assert_eq!(dead, 0);
        assert_eq!(out, ndarray::arr2(&[[1.0], [0.0]]));
    }

    #[test]
    fn regularizer_resets_dead_columns() {
        let counts = ndarray::arr2(&[[1.0], [1.0]]);
        let beta = vec![0.25, 0.75];
        let (out, dead) = apply_regularizer(&counts, 10.0, &beta);
        assert_eq!(dead, 1);
        assert_eq!(out, ndarray::arr2(&[[0.25], [0.75]]));
    }

    #[test]
    fn single_topic_training_recovers_pooled_unigram() {
        let vocabs = vec![word_vocab(3)];
        // one batch holding every pseudo-document, tau0 = 0 so rho_1 = 1
        let config = TrainConfig {
            num_topics: 1,
            epochs: 1,
            tau0: 0.0,
            theta_init: ThetaInitKind::Uniform,
            ..TrainConfig::default()
        };
        let docs = vec![doc(&[(0, 6.0), (1, 2.0)]), doc(&[(1, 1.0), (2, 3.0)])];
        let source = MemorySource(vec![Batch { docs }]);
        let mut trainer = OnlineTrainer::<f64>::new(config, &vocabs).unwrap();
        trainer.train(&source).unwrap();
        let m = &trainer.phi.blocks()[0].matrix;
        let n = 12.0;
        for (u, want) in [(0usize, 6.0 / n), (1, 3.0 / n), (2, 3.0 / n)] {
            assert!((m[[u, 0]] - want).abs() < 1e-12, "phi_u1 = n_u / n");
        }
    }

    #[test]
    fn offline_step_is_monotone_and_fixed_at_optimum() {
        // |T| = 1: the MLE is phi_u = n_u / n and one step reaches it exactly
        let matrix = ndarray::arr2(&[[0.5], [0.5]]);
        let phi0 = PhiMatrix::from_blocks(
            vec![ModalityBlock { modality_id: WORD_MODALITY, name: "word".into(), matrix }],
            vec![1.0],
        )
        .unwrap();
        let docs = vec![doc(&[(0, 3.0), (1, 1.0)]), doc(&[(0, 1.0), (1, 3.0)])];
        let (phi1, ll0) = offline_em_step(&docs, &phi0, &[1.0]);
        let (phi2, ll1) = offline_em_step(&docs, &phi1, &[1.0]);
        assert!(ll1 >= ll0 - 1e-12, "EM step must not decrease the likelihood");
        let m1 = &phi1.blocks()[0].matrix;
        let m2 = &phi2.blocks()[0].matrix;
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-9, "a maximizer is a fixed point");
        }
        assert!((m1[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_single_threaded() {
        let vocabs = vec![word_vocab(6)];
        let config = TrainConfig { num_topics: 3, epochs: 2, ..TrainConfig::default() };
        let docs: Vec<PseudoDocument<f64>> = (0..6u32)
            .map(|v| doc(&[(v, 2.0), ((v + 1) % 6, 1.0)]))
            .collect();
        let source = MemorySource(shard_for_test(docs, 2));
        let mut t1 = OnlineTrainer::<f64>::new(config.clone(), &vocabs).unwrap();
        let tr1 = t1.train(&source).unwrap();
        let mut t2 = OnlineTrainer::<f64>::new(config, &vocabs).unwrap();
        let tr2 = t2.train(&source).unwrap();
        assert_eq!(t1.phi, t2.phi, "bit-identical phi");
        assert_eq!(
            tr1.epochs.iter().map(|e| e.log_likelihood.to_bits()).collect::<Vec<_>>(),
            tr2.epochs.iter().map(|e| e.log_likelihood.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn parallel_likelihood_close_to_sequential() {
        let vocabs = vec![word_vocab(8)];
        let base = TrainConfig { num_topics: 3, epochs: 2, ..TrainConfig::default() };
        let docs: Vec<PseudoDocument<f64>> = (0..8u32)
            .map(|v| doc(&[(v, 2.0), ((v + 3) % 8, 1.5), ((v + 5) % 8, 0.5)]))
            .collect();
        let source = MemorySource(shard_for_test(docs, 3));
        let mut seq = OnlineTrainer::<f64>::new(base.clone(), &vocabs).unwrap();
        let tr_seq = seq.train(&source).unwrap();
        let mut par = OnlineTrainer::<f64>::new(TrainConfig { threads: 2, ..base }, &vocabs).unwrap();
        let tr_par = par.train(&source).unwrap();
        for (a, b) in tr_seq.epochs.iter().zip(&tr_par.epochs) {
            let rel = (a.log_likelihood - b.log_likelihood).abs() / a.log_likelihood.abs().max(1.0);
            assert!(rel < 1e-6, "parallel epoch likelihood differs by {rel}");
        }
    }

    #[test]
    fn estep_works_in_f32() {
        let matrix = ndarray::arr2(&[[0.8f32, 0.2], [0.2, 0.8]]);
        let phi = PhiMatrix::from_blocks(
            vec![ModalityBlock { modality_id: WORD_MODALITY, name: "word".into(), matrix }],
            vec![1.0f32, 1.0],
        )
        .unwrap();
        let d = PseudoDocument::<f32> {
            pivot_modality: WORD_MODALITY,
            pivot_token: 0,
            modalities: vec![ModalityEntries { modality_id: WORD_MODALITY, items: vec![(0, 1.0), (1, 1.0)] }],
        };
        let mut acc = UpdateAccumulator::for_model(&phi);
        let opts = EStepOptions { inner_iterations: 1, theta_init: ThetaInit::Uniform, lambdas: &[1.0] };
        let (theta, _) = estep_document(&d, &phi, &opts, &mut acc);
        assert!((theta.values()[0] - 0.5).abs() < 1e-6);
    }
}
