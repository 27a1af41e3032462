//! Synthetic corpora with planted topic structure, used for testing and
//! sanity experiments.

use ndarray::Array2;
use rand::Rng;

use crate::eval::SimilarityTestset;
use crate::rng::{stream_rng, NS_SYNTH};
use crate::scalar::Scalar;

/// Planted phi with disjoint topic supports: topic `t` owns rows
/// `t*words_per_topic .. (t+1)*words_per_topic` with mass `floor + U(0,1)`
/// before normalization. A small floor gives spiky, easily separable
/// columns; a floor near one keeps every supported word's share well above
/// uniform-over-vocabulary, which matters when sparsing is applied on top.
pub fn planted_phi<S: Scalar>(
    num_topics: usize,
    words_per_topic: usize,
    floor: f64,
    seed: u64,
) -> Array2<S> {
    assert!(floor >= 0.0);
    let vocab = num_topics * words_per_topic;
    let mut matrix = Array2::<S>::zeros((vocab, num_topics));
    let mut rng = stream_rng(seed, NS_SYNTH, 0);
    for t in 0..num_topics {
        let raw: Vec<f64> = (0..words_per_topic).map(|_| floor + rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        for (i, x) in raw.into_iter().enumerate() {
            matrix[[t * words_per_topic + i, t]] = S::of(x / total);
        }
    }
    matrix
}

/// Stable token name for a planted vocabulary index.
pub fn token_name(index: usize) -> String {
    format!("w{index:04}")
}

/// Samples documents from a planted model. Document `d` is drawn from topic
/// `d % num_topics`; returns the raw documents and their topic labels.
pub fn sample_corpus<S: Scalar>(
    phi: &Array2<S>,
    num_docs: usize,
    doc_len: usize,
    seed: u64,
) -> (Vec<Vec<String>>, Vec<usize>) {
    sample_mixed_corpus(phi, num_docs, doc_len, 1.0, seed)
}

/// Samples documents whose topic distribution puts `dominance` on topic
/// `d % num_topics` and spreads the rest over two other rotating topics.
/// `dominance = 1` yields pure single-topic documents; values below one
/// couple the topics through every document, which keeps the factorization
/// identifiable for recovery experiments.
pub fn sample_mixed_corpus<S: Scalar>(
    phi: &Array2<S>,
    num_docs: usize,
    doc_len: usize,
    dominance: f64,
    seed: u64,
) -> (Vec<Vec<String>>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&dominance));
    let num_topics = phi.ncols();
    let cumulative: Vec<Vec<f64>> = (0..num_topics)
        .map(|t| {
            let mut acc = 0.0;
            phi.column(t)
                .iter()
                .map(|&x| {
                    acc += x.to_f64_lossy();
                    acc
                })
                .collect()
        })
        .collect();
    let mut docs = Vec::with_capacity(num_docs);
    let mut labels = Vec::with_capacity(num_docs);
    for d in 0..num_docs {
        let main = d % num_topics;
        let mut rng = stream_rng(seed, NS_SYNTH, 1 + d as u64);
        let minor_a = (main + 1 + rng.gen_range(0..num_topics.max(2) - 1)) % num_topics;
        let minor_b = (main + 1 + rng.gen_range(0..num_topics.max(2) - 1)) % num_topics;
        let doc: Vec<String> = (0..doc_len)
            .map(|_| {
                let r = rng.gen::<f64>();
                let topic = if r < dominance || num_topics == 1 {
                    main
                } else if r < dominance + (1.0 - dominance) / 2.0 {
                    minor_a
                } else {
                    minor_b
                };
                let cdf = &cumulative[topic];
                let x = rng.gen::<f64>() * cdf.last().copied().unwrap_or(1.0);
                let idx = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
                token_name(idx)
            })
            .collect();
        docs.push(doc);
        labels.push(main);
    }
    (docs, labels)
}

/// Word pairs labeled by planted topic co-membership: same-topic pairs get
/// human score 1, cross-topic pairs 0.
pub fn planted_similarity_testset(
    num_topics: usize,
    words_per_topic: usize,
    pairs_per_kind: usize,
    seed: u64,
) -> SimilarityTestset {
    let mut rng = stream_rng(seed, NS_SYNTH, u64::MAX);
    let mut pairs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let vocab = num_topics * words_per_topic;
    let push = |a: usize, b: usize, score: f64, seen: &mut std::collections::HashSet<(usize, usize)>,
                    pairs: &mut Vec<(String, String, f64)>| {
        if a != b && seen.insert((a.min(b), a.max(b))) {
            pairs.push((token_name(a), token_name(b), score));
            true
        } else {
            false
        }
    };
    let mut same = 0;
    while same < pairs_per_kind {
        let t = rng.gen_range(0..num_topics);
        let a = t * words_per_topic + rng.gen_range(0..words_per_topic);
        let b = t * words_per_topic + rng.gen_range(0..words_per_topic);
        if push(a, b, 1.0, &mut seen, &mut pairs) {
            same += 1;
        }
    }
    let mut diff = 0;
    while diff < pairs_per_kind {
        let a = rng.gen_range(0..vocab);
        let b = rng.gen_range(0..vocab);
        if a / words_per_topic != b / words_per_topic && push(a, b, 0.0, &mut seen, &mut pairs) {
            diff += 1;
        }
    }
    SimilarityTestset { pairs }
}

/// Triplets (query, similar, dissimilar) drawn from labeled documents;
/// ids are the document indices rendered as strings.
pub fn triplets_from_labels(labels: &[usize], count: usize, seed: u64) -> Vec<(String, String, String)> {
    let mut rng = stream_rng(seed, NS_SYNTH, u64::MAX - 1);
    let mut out = Vec::with_capacity(count);
    let n = labels.len();
    while out.len() < count {
        let q = rng.gen_range(0..n);
        let s = rng.gen_range(0..n);
        let d = rng.gen_range(0..n);
        if q != s && labels[q] == labels[s] && labels[d] != labels[q] {
            out.push((q.to_string(), s.to_string(), d.to_string()));
        }
    }
    out
}
