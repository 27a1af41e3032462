//! Query layer over a trained model: embedding extraction, similarity
//! metrics, neighbor and topic inspection, sparsity measurement, and
//! held-out document fold-in.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::{ModalityEntries, PseudoDocument};
use crate::corpus::{vocab_set_hash, Vocabulary, WORD_MODALITY};
use crate::error::{Error, Result};
use crate::rng::{mix_words, NS_INFER};
use crate::scalar::Scalar;
use crate::trainer::{infer_theta_fixed_phi, PhiMatrix, ThetaInit, ThetaInitKind, TrainConfig};

/// What an embedding vector represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// A raw phi row: p(u|t) sliced across topics; not a distribution.
    PhiRow,
    /// Bayes-normalized p(t|u).
    Bayes,
    /// Topic distribution p(t|d) of a folded-in document.
    Theta,
}

/// A |T|-dimensional embedding. `degenerate` marks vectors built from an
/// all-zero phi row (fully sparsed tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S: Scalar> {
    pub values: Vec<S>,
    pub kind: EmbeddingKind,
    pub degenerate: bool,
}

impl<S: Scalar> Embedding<S> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Whether the values form a probability distribution.
    pub fn is_distribution(&self) -> bool {
        matches!(self.kind, EmbeddingKind::Bayes | EmbeddingKind::Theta) && !self.degenerate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dot,
    Cosine,
    Hellinger,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Metric::Dot),
            "cosine" => Ok(Metric::Cosine),
            "hellinger" => Ok(Metric::Hellinger),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected dot|cosine|hellinger)"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
            Metric::Hellinger => "hellinger",
        })
    }
}

/// Similarity between two embeddings of equal dimension. Hellinger is
/// exposed as a similarity (1 - distance) so that higher always means more
/// similar; it is defined for distributions only.
pub fn similarity<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>, metric: Metric) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::Config(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    match metric {
        Metric::Dot => Ok(dot(&a.values, &b.values)),
        Metric::Cosine => {
            let na = dot(&a.values, &a.values).sqrt();
            let nb = dot(&b.values, &b.values).sqrt();
            if na == S::zero() || nb == S::zero() {
                Ok(S::zero())
            } else {
                Ok(dot(&a.values, &b.values) / (na * nb))
            }
        }
        Metric::Hellinger => {
            if !a.is_distribution() || !b.is_distribution() {
                return Err(Error::Data(
                    "hellinger similarity is defined for distribution embeddings only".into(),
                ));
            }
            let mut sq = S::zero();
            for (&x, &y) in a.values.iter().zip(&b.values) {
                let d = x.sqrt() - y.sqrt();
                sq += d * d;
            }
            Ok(S::one() - (sq.sqrt() / S::of(std::f64::consts::SQRT_2)))
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Ranking used by `topic_top_words`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicRanking {
    /// Rank by phi_ut directly.
    Phi,
    /// Rank by p(t|u) * p(u), i.e. p(u|t) recovered through Bayes' rule;
    /// matches the transform used to rank rows of non-probabilistic
    /// matrices.
    Bayes,
}

impl FromStr for TopicRanking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(TopicRanking::Phi),
            "bayes" => Ok(TopicRanking::Bayes),
            other => Err(Error::Config(format!("unknown ranking `{other}` (expected phi|bayes)"))),
        }
    }
}

/// Which embedding a word-similarity evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Bayes,
    Phi,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Normalization::Bayes),
            "phi" => Ok(Normalization::Phi),
            other => Err(Error::Config(format!("unknown normalization `{other}` (expected bayes|phi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InferStats {
    pub used: usize,
    pub oov: usize,
}

/// A trained model: phi plus the vocabularies it was trained against and the
/// config echo. Self-contained for querying.
#[derive(Debug, Clone)]
pub struct TrainedModel<S: Scalar> {
    pub phi: PhiMatrix<S>,
    pub vocabs: Vec<Vocabulary>,
    pub config: TrainConfig,
    pub vocab_hash: [u8; 32],
}

impl<S: Scalar> TrainedModel<S> {
    pub fn new(phi: PhiMatrix<S>, vocabs: Vec<Vocabulary>, config: TrainConfig) -> Result<Self> {
        if phi.blocks().len() != vocabs.len() {
            return Err(Error::Data("model blocks and vocabularies do not align".into()));
        }
        for (block, vocab) in phi.blocks().iter().zip(&vocabs) {
            if block.modality_id != vocab.modality_id || block.matrix.nrows() != vocab.len() {
                return Err(Error::Data(format!(
                    "modality `{}` matrix does not match its vocabulary",
                    vocab.name
                )));
            }
        }
        let vocab_hash = vocab_set_hash(&vocabs);
        Ok(TrainedModel { phi, vocabs, config, vocab_hash })
    }

    pub fn num_topics(&self) -> usize {
        self.phi.num_topics()
    }

    pub fn modality_by_name(&self, name: &str) -> Option<u16> {
        self.vocabs.iter().find(|v| v.name == name).map(|v| v.modality_id)
    }

    fn block_and_vocab(&self, modality_id: u16) -> Result<(usize, &Vocabulary)> {
        let idx = self
            .phi
            .block_index(modality_id)
            .ok_or_else(|| Error::Data(format!("model has no modality {modality_id}")))?;
        Ok((idx, &self.vocabs[idx]))
    }

    fn token_id(&self, modality_id: u16, token: &str) -> Result<(usize, u32)> {
        let (idx, vocab) = self.block_and_vocab(modality_id)?;
        let id = vocab.id(token).ok_or_else(|| Error::UnknownToken(token.to_owned()))?;
        Ok((idx, id))
    }

    /// p(t|u) = phi_ut p(t) / sum_t phi_ut p(t), with p(t) taken from the
    /// model's accumulated topic masses. All-zero rows yield a flagged
    /// degenerate zero vector.
    pub fn bayes_embedding(&self, modality_id: u16, token: &str) -> Result<Embedding<S>> {
        let (block, id) = self.token_id(modality_id, token)?;
        Ok(self.bayes_embedding_by_id(block, id))
    }

    pub fn bayes_embedding_by_id(&self, block: usize, token: u32) -> Embedding<S> {
        let prior = self.phi.topic_prior();
        self.bayes_with_prior(block, token, &prior)
    }

    fn bayes_with_prior(&self, block: usize, token: u32, prior: &[S]) -> Embedding<S> {
        let row = self.phi.blocks()[block].matrix.row(token as usize);
        let row = row.as_slice().expect("row-major layout");
        let mut values: Vec<S> = row.iter().zip(prior).map(|(&p, &q)| p * q).collect();
        let z: S = values.iter().copied().sum();
        if z > S::zero() {
            for x in &mut values {
                *x /= z;
            }
            Embedding { values, kind: EmbeddingKind::Bayes, degenerate: false }
        } else {
            for x in &mut values {
                *x = S::zero();
            }
            Embedding { values, kind: EmbeddingKind::Bayes, degenerate: true }
        }
    }

    /// The raw phi row of a token: p(u|t) across topics.
    pub fn phi_row_embedding(&self, modality_id: u16, token: &str) -> Result<Embedding<S>> {
        let (block, id) = self.token_id(modality_id, token)?;
        let row = self.phi.blocks()[block].matrix.row(id as usize);
        let values: Vec<S> = row.iter().copied().collect();
        let degenerate = values.iter().all(|&x| x == S::zero());
        Ok(Embedding { values, kind: EmbeddingKind::PhiRow, degenerate })
    }

    pub fn embedding(&self, modality_id: u16, token: &str, normalization: Normalization) -> Result<Embedding<S>> {
        match normalization {
            Normalization::Bayes => self.bayes_embedding(modality_id, token),
            Normalization::Phi => self.phi_row_embedding(modality_id, token),
        }
    }

    /// Top-k tokens of `search_modality` most similar to the query token
    /// under Bayes embeddings. The query itself is excluded; ties break by
    /// token id for determinism.
    pub fn nearest_neighbors(
        &self,
        query_modality: u16,
        token: &str,
        k: usize,
        metric: Metric,
        search_modality: u16,
    ) -> Result<Vec<(String, S)>> {
        assert!(k >= 1, "k must be at least 1");
        let (query_block, query_id) = self.token_id(query_modality, token)?;
        let query = self.bayes_embedding_by_id(query_block, query_id);
        let (block, vocab) = self.block_and_vocab(search_modality)?;
        let prior = self.phi.topic_prior();
        let mut scored: Vec<(u32, S)> = Vec::with_capacity(vocab.len());
        for id in 0..vocab.len() as u32 {
            if block == query_block && id == query_id {
                continue;
            }
            let candidate = self.bayes_with_prior(block, id, &prior);
            let score = similarity(&query, &candidate, metric)?;
            scored.push((id, score));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(id, s)| (vocab.token(id).to_owned(), s)).collect())
    }

    /// Top-k tokens of topic `t` in the given modality.
    pub fn topic_top_words(
        &self,
        modality_id: u16,
        topic: usize,
        k: usize,
        ranking: TopicRanking,
    ) -> Result<Vec<(String, S)>> {
        if topic >= self.num_topics() {
            return Err(Error::Config(format!(
                "topic {topic} out of range (model has {} topics)",
                self.num_topics()
            )));
        }
        let (block, vocab) = self.block_and_vocab(modality_id)?;
        let matrix = &self.phi.blocks()[block].matrix;
        let scores: Vec<S> = match ranking {
            TopicRanking::Phi => matrix.column(topic).iter().copied().collect(),
            TopicRanking::Bayes => {
                // score = p(t|u) p(u) with p(u) proportional to corpus frequency
                let prior = self.phi.topic_prior();
                (0..vocab.len() as u32)
                    .map(|id| {
                        let e = self.bayes_with_prior(block, id, &prior);
                        e.values[topic] * S::of(vocab.freq(id) as f64)
                    })
                    .collect()
            }
        };
        let mut order: Vec<u32> = (0..vocab.len() as u32).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        Ok(order.into_iter().map(|id| (vocab.token(id).to_owned(), scores[id as usize])).collect())
    }

    /// Same as `topic_top_words` but returning token ids.
    pub fn topic_top_ids(&self, modality_id: u16, topic: usize, k: usize) -> Result<Vec<u32>> {
        let (block, vocab) = self.block_and_vocab(modality_id)?;
        let matrix = &self.phi.blocks()[block].matrix;
        let mut order: Vec<u32> = (0..vocab.len() as u32).collect();
        order.sort_by(|&a, &b| {
            matrix[[b as usize, topic]]
                .partial_cmp(&matrix[[a as usize, topic]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        Ok(order)
    }

    /// Fraction of exactly-zero entries in the word-modality block.
    pub fn sparsity(&self) -> f64 {
        self.phi.word_zero_fraction()
    }

    /// Infers p(t|d) for a held-out bag of tokens with phi frozen. Unknown
    /// tokens are skipped and counted; it is an error only when every token
    /// is out of vocabulary. The result does not depend on token order.
    pub fn infer_theta(&self, tokens: &[(u16, &str)], passes: usize) -> Result<(Embedding<S>, InferStats)> {
        if passes == 0 {
            return Err(Error::Config("at least one inference pass is required".into()));
        }
        let mut counts: BTreeMap<(usize, u32), u64> = BTreeMap::new();
        let mut stats = InferStats::default();
        for &(modality_id, token) in tokens {
            let known = self
                .phi
                .block_index(modality_id)
                .and_then(|b| self.vocabs[b].id(token).map(|id| (b, id)));
            match known {
                Some(key) => {
                    *counts.entry(key).or_insert(0) += 1;
                    stats.used += 1;
                }
                None => stats.oov += 1,
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("every token of the document is out of vocabulary".into()));
        }

        let mut per_modality: BTreeMap<u16, Vec<(u32, S)>> = BTreeMap::new();
        for (&(block, token), &count) in &counts {
            let modality_id = self.phi.blocks()[block].modality_id;
            per_modality.entry(modality_id).or_default().push((token, S::of(count as f64)));
        }
        let doc = PseudoDocument {
            pivot_modality: WORD_MODALITY,
            pivot_token: 0,
            modalities: per_modality
                .into_iter()
                .map(|(modality_id, items)| ModalityEntries { modality_id, items })
                .collect(),
        };
        let lambdas: Vec<f64> = self
            .phi
            .blocks()
            .iter()
            .map(|b| self.config.modality_weights.get(&b.name).copied().unwrap_or(1.0))
            .collect();
        let init = match self.config.theta_init {
            ThetaInitKind::Uniform => ThetaInit::Uniform,
            ThetaInitKind::Random => ThetaInit::Seeded {
                seed: self.config.seed,
                stream: NS_INFER ^ mix_words(counts.iter().flat_map(|(&(b, u), &c)| {
                    [b as u64, u as u64, c]
                })),
            },
        };
        let theta = infer_theta_fixed_phi(&doc, &self.phi, &lambdas, passes, init);
        Ok((
            Embedding { values: theta.into_inner(), kind: EmbeddingKind::Theta, degenerate: false },
            stats,
        ))
    }

    /// TSV export: `token<TAB>t0<TAB>t1...`, one token per line.
    pub fn export_tsv<W: Write>(&self, w: &mut W, modality_id: u16, normalization: Normalization) -> Result<()> {
        let (_, vocab) = self.block_and_vocab(modality_id)?;
        for id in 0..vocab.len() as u32 {
            let token = vocab.token(id);
            let emb = self.embedding(modality_id, token, normalization)?;
            write!(w, "{token}")?;
            for x in &emb.values {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Binary model file: `PWEM` magic, version, vocab hash, config echo,
    /// vocabularies, topic masses, then one dense f64 matrix per modality.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&self.vocab_hash)?;
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Data(format!("config serialization: {e}")))?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.num_topics() as u32).to_le_bytes())?;
        w.write_all(&(self.vocabs.len() as u16).to_le_bytes())?;
        for vocab in &self.vocabs {
            w.write_all(&vocab.modality_id.to_le_bytes())?;
            write_string(w, &vocab.name)?;
            w.write_all(&(vocab.len() as u32).to_le_bytes())?;
            for (token, freq) in vocab.iter() {
                write_string(w, token)?;
                w.write_all(&freq.to_le_bytes())?;
            }
        }
        for &x in self.phi.topic_counts() {
            w.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        for block in self.phi.blocks() {
            for row in block.matrix.rows() {
                for &x in row.as_slice().expect("row-major layout") {
                    w.write_all(&x.to_f64_lossy().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read(&mut r, &path.display().to_string())
    }

    pub fn read<R: Read>(r: &mut R, what: &str) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Data(format!("{what}: not a model file")));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Data(format!("{what}: unsupported model version {version}")));
        }
        let mut vocab_hash = [0u8; 32];
        r.read_exact(&mut vocab_hash)?;
        let config_len = read_u32(r)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)?;
        let config: TrainConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::Data(format!("{what}: config echo: {e}")))?;
        let num_topics = read_u32(r)? as usize;
        let num_modalities = read_u16(r)? as usize;
        let mut vocabs = Vec::with_capacity(num_modalities);
        for _ in 0..num_modalities {
            let modality_id = read_u16(r)?;
            let name = read_string(r)?;
            let len = read_u32(r)? as usize;
            let mut rows = Vec::with_capacity(len);
            for _ in 0..len {
                let token = read_string(r)?;
                let freq = read_u64(r)?;
                rows.push((token, freq));
            }
            vocabs.push(Vocabulary::from_rows(modality_id, &name, rows)?);
        }
        let mut topic_counts = Vec::with_capacity(num_topics);
        for _ in 0..num_topics {
            topic_counts.push(S::of(read_f64(r)?));
        }
        let mut blocks = Vec::with_capacity(num_modalities);
        for vocab in &vocabs {
            let mut matrix = ndarray::Array2::<S>::zeros((vocab.len(), num_topics));
            for mut row in matrix.rows_mut() {
                for x in row.as_slice_mut().expect("row-major layout") {
                    *x = S::of(read_f64(r)?);
                }
            }
            blocks.push(crate::trainer::ModalityBlock {
                modality_id: vocab.modality_id,
                name: vocab.name.clone(),
                matrix,
            });
        }
        let phi = PhiMatrix::from_blocks(blocks, topic_counts)?;
        let model = TrainedModel::new(phi, vocabs, config)?;
        if model.vocab_hash != vocab_hash {
            return Err(Error::VocabHashMismatch {
                expected: crate::pipeline::hex32(&vocab_hash),
                found: crate::pipeline::hex32(&model.vocab_hash),
            });
        }
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"PWEM";
const MODEL_VERSION: u32 = 1;

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(format!("invalid UTF-8 in model file: {e}")))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
