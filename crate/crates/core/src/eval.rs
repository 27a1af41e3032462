//! Quantitative evaluation: Spearman rank correlation against human word
//! similarities, PMI coherence of topic components, and document-triplet
//! accuracy.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::cooc::CoocStore;
use crate::corpus::WORD_MODALITY;
use crate::error::{Error, Result};
use crate::model::{similarity, Embedding, Metric, Normalization, TrainedModel};
use crate::scalar::Scalar;

/// Word pairs with human similarity judgments.
#[derive(Debug, Clone, Default)]
pub struct SimilarityTestset {
    pub pairs: Vec<(String, String, f64)>,
}

impl SimilarityTestset {
    /// TSV `word1<TAB>word2<TAB>score`; `#` comment lines allowed.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (w1, w2, score) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(s)) => (a, b, s),
                _ => {
                    return Err(Error::Data(format!(
                        "{}:{}: expected word1<TAB>word2<TAB>score",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            let score: f64 = score.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad score `{score}`", path.display(), lineno + 1))
            })?;
            if !score.is_finite() {
                return Err(Error::Data(format!("{}:{}: score must be finite", path.display(), lineno + 1)));
            }
            if !seen.insert((w1.to_owned(), w2.to_owned())) {
                return Err(Error::Data(format!(
                    "{}:{}: duplicate pair ({w1}, {w2})",
                    path.display(),
                    lineno + 1
                )));
            }
            pairs.push((w1.to_owned(), w2.to_owned(), score));
        }
        Ok(SimilarityTestset { pairs })
    }
}

/// Triplets of document ids: (query, similar, dissimilar).
#[derive(Debug, Clone, Default)]
pub struct TripletSet {
    pub triplets: Vec<(String, String, String)>,
}

impl TripletSet {
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut triplets = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "{}:{}: expected three tab-separated document ids",
                    path.display(),
                    lineno + 1
                )));
            }
            if fields[0] == fields[1] || fields[0] == fields[2] || fields[1] == fields[2] {
                return Err(Error::Data(format!(
                    "{}:{}: triplet ids must be distinct",
                    path.display(),
                    lineno + 1
                )));
            }
            triplets.push((fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()));
        }
        Ok(TripletSet { triplets })
    }
}

/// Average ranks (1-based); tied values share the mean of their rank span.
fn average_ranks<S: Scalar>(values: &[S]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0; // mean of ranks i+1 ..= j
        for k in i..j {
            ranks[idx[k]] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("rank correlation undefined for constant scores".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation: Pearson correlation of average-ranked values.
pub fn spearman<S: Scalar>(x: &[S], y: &[S]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Data(format!("score lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Data("at least two score pairs are required".into()));
    }
    if x.iter().chain(y).any(|v| !v.to_f64_lossy().is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub spearman: f64,
    pub coverage: f64,
    pub scored: usize,
    pub total: usize,
}

/// Scores every in-vocabulary pair with the chosen embedding and metric and
/// correlates against the human judgments. OOV pairs (and pairs involving a
/// degenerate embedding) are skipped and reported through coverage.
pub fn evaluate_similarity<S: Scalar>(
    model: &TrainedModel<S>,
    testset: &SimilarityTestset,
    metric: Metric,
    normalization: Normalization,
) -> Result<SimilarityReport> {
    let mut model_scores: Vec<f64> = Vec::new();
    let mut human_scores: Vec<f64> = Vec::new();
    for (w1, w2, human) in &testset.pairs {
        let a = match model.embedding(WORD_MODALITY, w1, normalization) {
            Ok(e) => e,
            Err(Error::UnknownToken(_)) => continue,
            Err(e) => return Err(e),
        };
        let b = match model.embedding(WORD_MODALITY, w2, normalization) {
            Ok(e) => e,
            Err(Error::UnknownToken(_)) => continue,
            Err(e) => return Err(e),
        };
        if metric == Metric::Hellinger && (!a.is_distribution() || !b.is_distribution()) {
            continue;
        }
        model_scores.push(similarity(&a, &b, metric)?.to_f64_lossy());
        human_scores.push(*human);
    }
    if model_scores.len() < 2 {
        return Err(Error::Data(format!(
            "only {} of {} testset pairs could be scored",
            model_scores.len(),
            testset.pairs.len()
        )));
    }
    Ok(SimilarityReport {
        spearman: spearman(&model_scores, &human_scores)?,
        coverage: model_scores.len() as f64 / testset.pairs.len().max(1) as f64,
        scored: model_scores.len(),
        total: testset.pairs.len(),
    })
}

/// Mean pairwise PMI of a token set over a reference co-occurrence store.
/// Pairs that never co-occur contribute with an add-one pair count; tokens
/// with zero marginal are excluded up front.
pub fn coherence<S: Scalar>(top_tokens: &[u32], reference: &CoocStore<S>) -> Result<f64> {
    let in_reference: Vec<u32> = top_tokens
        .iter()
        .copied()
        .filter(|&u| (u as usize) < reference.rows && reference.n_u(u) > S::zero())
        .collect();
    if in_reference.len() < 2 {
        return Err(Error::Data(format!(
            "coherence needs at least two tokens with reference counts, got {}",
            in_reference.len()
        )));
    }
    let n = reference.total().to_f64_lossy();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..in_reference.len() {
        for j in i + 1..in_reference.len() {
            let (u, w) = (in_reference[i], in_reference[j]);
            let n_uw = reference.get(u, w).map(|x| x.to_f64_lossy()).unwrap_or(1.0);
            let pmi = (n_uw * n / (reference.n_u(u).to_f64_lossy() * reference.n_u(w).to_f64_lossy())).ln();
            sum += pmi;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean coherence of the top-k words of every topic. Topics without enough
/// in-reference words are skipped; it is an error only if no topic scores.
pub fn model_coherence<S: Scalar>(
    model: &TrainedModel<S>,
    reference: &CoocStore<S>,
    k: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut scored = 0usize;
    for t in 0..model.num_topics() {
        let top = model.topic_top_ids(WORD_MODALITY, t, k)?;
        match coherence(&top, reference) {
            Ok(c) => {
                sum += c;
                scored += 1;
            }
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if scored == 0 {
        return Err(Error::Data("no topic had enough in-reference words for coherence".into()));
    }
    Ok(sum / scored as f64)
}

#[derive(Debug, Clone)]
pub struct TripletReport {
    pub accuracy: f64,
    pub used: usize,
    pub ties: usize,
    pub missing: usize,
}

/// Fraction of triplets where sim(query, similar) > sim(query, dissimilar).
/// Ties count as failures and are reported; triplets referencing unknown
/// document ids are skipped and counted.
pub fn triplet_accuracy<S: Scalar>(
    embeddings: &HashMap<String, Embedding<S>>,
    triplets: &TripletSet,
    metric: Metric,
) -> Result<TripletReport> {
    let mut correct = 0usize;
    let mut ties = 0usize;
    let mut used = 0usize;
    let mut missing = 0usize;
    for (q, s, d) in &triplets.triplets {
        let (Some(eq), Some(es), Some(ed)) = (embeddings.get(q), embeddings.get(s), embeddings.get(d))
        else {
            missing += 1;
            continue;
        };
        used += 1;
        let sim_s = similarity(eq, es, metric)?;
        let sim_d = similarity(eq, ed, metric)?;
        if sim_s > sim_d {
            correct += 1;
        } else if sim_s == sim_d {
            ties += 1;
        }
    }
    if used == 0 {
        return Err(Error::Data("no usable triplets: every id is missing an embedding".into()));
    }
    Ok(TripletReport { accuracy: correct as f64 / used as f64, used, ties, missing })
}
