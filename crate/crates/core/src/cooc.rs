//! Sliding-window co-occurrence counting, weighting schemes, and
//! construction of multimodal pseudo-documents.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::{ModalityEntries, PseudoDocument};
use crate::corpus::{TokenStream, WORD_MODALITY};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparse pair weights n_uv with marginals n_u (row), n_v (column) and the
/// grand total n. `u` indexes the context side, `v` the pivot side.
///
/// Pairs are kept sorted by `(v, u)` so that every derived artifact and every
/// floating-point reduction is order-deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocStore<S: Scalar> {
    pairs: Vec<(u32, u32, S)>,
    row_marginals: Vec<S>,
    col_marginals: Vec<S>,
    total: S,
    pub rows: usize,
    pub cols: usize,
    pub window: u32,
    pub symmetric: bool,
}

impl<S: Scalar> CoocStore<S> {
    /// Builds a store from arbitrary `(u, v, weight)` triples, dropping
    /// non-positive weights and recomputing marginals.
    pub fn from_triples(
        mut pairs: Vec<(u32, u32, S)>,
        rows: usize,
        cols: usize,
        window: u32,
        symmetric: bool,
    ) -> Self {
        pairs.retain(|p| p.2 > S::zero());
        pairs.sort_unstable_by_key(|&(u, v, _)| (v, u));
        let mut row_marginals = vec![S::zero(); rows];
        let mut col_marginals = vec![S::zero(); cols];
        let mut total = S::zero();
        for &(u, v, w) in &pairs {
            row_marginals[u as usize] += w;
            col_marginals[v as usize] += w;
            total += w;
        }
        CoocStore { pairs, row_marginals, col_marginals, total, rows, cols, window, symmetric }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, u: u32, v: u32) -> Option<S> {
        self.pairs
            .binary_search_by(|p| (p.1, p.0).cmp(&(v, u)))
            .ok()
            .map(|i| self.pairs[i].2)
    }

    /// Row marginal n_u.
    pub fn n_u(&self, u: u32) -> S {
        self.row_marginals[u as usize]
    }

    /// Column marginal n_v.
    pub fn n_v(&self, v: u32) -> S {
        self.col_marginals[v as usize]
    }

    /// Grand total n.
    pub fn total(&self) -> S {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u32, u32, S)> {
        self.pairs.iter()
    }

    /// Visits stored pairs grouped by pivot column `v`, ascending.
    pub fn for_each_column<F: FnMut(u32, &[(u32, u32, S)])>(&self, mut f: F) {
        let mut start = 0;
        while start < self.pairs.len() {
            let v = self.pairs[start].1;
            let mut end = start + 1;
            while end < self.pairs.len() && self.pairs[end].1 == v {
                end += 1;
            }
            f(v, &self.pairs[start..end]);
            start = end;
        }
    }

    /// Binary serialization: little-endian, `PWEC` magic. Weights are stored
    /// as `f64` regardless of the scalar parameter.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&[self.symmetric as u8])?;
        w.write_all(&self.window.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&(self.pairs.len() as u64).to_le_bytes())?;
        for &(u, v, x) in &self.pairs {
            w.write_all(&u.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
            w.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Data(format!("{}: not a co-occurrence store", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(Error::Data(format!("{}: unsupported store version {version}", path.display())));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let window = read_u32(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let n_pairs = read_u64(&mut r)? as usize;
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let u = read_u32(&mut r)?;
            let v = read_u32(&mut r)?;
            let x = read_f64(&mut r)?;
            pairs.push((u, v, S::of(x)));
        }
        Ok(Self::from_triples(pairs, rows, cols, window, flag[0] != 0))
    }
}

const STORE_MAGIC: &[u8; 4] = b"PWEC";
const STORE_VERSION: u32 = 1;

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

/// Counts pairs of tokens co-occurring within `window` positions of each
/// other. Windows never cross document boundaries; the result is symmetric.
pub fn count_cooccurrences<S: Scalar>(
    stream: &TokenStream,
    vocab_size: usize,
    window: usize,
) -> CoocStore<S> {
    assert!(window >= 1, "window must be at least 1");
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for doc in &stream.docs {
        for i in 0..doc.len() {
            let hi = (i + window).min(doc.len().saturating_sub(1));
            for j in i + 1..=hi {
                let (a, b) = (doc[i], doc[j]);
                *counts.entry((a, b)).or_insert(0) += 1;
                *counts.entry((b, a)).or_insert(0) += 1;
            }
        }
    }
    let pairs = counts
        .into_iter()
        .map(|((u, v), c)| (u, v, S::of(c as f64)))
        .collect();
    CoocStore::from_triples(pairs, vocab_size, vocab_size, window as u32, true)
}

/// Drops pairs with count below `min_count` and recomputes marginals.
pub fn filter_min_count<S: Scalar>(store: &CoocStore<S>, min_count: u64) -> Result<CoocStore<S>> {
    assert!(min_count >= 1, "min_count must be at least 1");
    let threshold = S::of(min_count as f64);
    let pairs: Vec<(u32, u32, S)> =
        store.pairs.iter().copied().filter(|p| p.2 >= threshold).collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCoocStore(min_count));
    }
    Ok(CoocStore::from_triples(pairs, store.rows, store.cols, store.window, store.symmetric))
}

/// Co-occurrence weighting applied to the word-word store before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Raw,
    Ppmi,
    Log,
    RowNormalized,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Weighting::Raw),
            "ppmi" => Ok(Weighting::Ppmi),
            "log" => Ok(Weighting::Log),
            "row_normalized" => Ok(Weighting::RowNormalized),
            other => Err(Error::Config(format!(
                "unknown weighting `{other}` (expected raw|ppmi|log|row_normalized)"
            ))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Weighting::Raw => "raw",
            Weighting::Ppmi => "ppmi",
            Weighting::Log => "log",
            Weighting::RowNormalized => "row_normalized",
        };
        f.write_str(s)
    }
}

/// Reweights pair counts. `ppmi` keeps max(0, ln(n_uv n / (n_u n_v))) and
/// drops zero-weight entries; `log` maps to ln(1 + n_uv); `row_normalized`
/// divides by the pivot marginal n_v. Marginals are recomputed over the new
/// weights.
pub fn apply_weighting<S: Scalar>(store: &CoocStore<S>, scheme: Weighting) -> CoocStore<S> {
    match scheme {
        Weighting::Raw => store.clone(),
        Weighting::Ppmi => {
            let n = store.total();
            let pairs = store
                .pairs
                .iter()
                .filter_map(|&(u, v, w)| {
                    let value = (w * n / (store.n_u(u) * store.n_v(v))).ln();
                    (value > S::zero()).then_some((u, v, value))
                })
                .collect();
            CoocStore::from_triples(pairs, store.rows, store.cols, store.window, store.symmetric)
        }
        Weighting::Log => {
            let pairs = store.pairs.iter().map(|&(u, v, w)| (u, v, (S::one() + w).ln())).collect();
            CoocStore::from_triples(pairs, store.rows, store.cols, store.window, store.symmetric)
        }
        Weighting::RowNormalized => {
            let pairs = store
                .pairs
                .iter()
                .map(|&(u, v, w)| (u, v, w / store.n_v(v)))
                .collect();
            CoocStore::from_triples(pairs, store.rows, store.cols, store.window, false)
        }
    }
}

/// Document-level co-occurrence for extra modalities:
/// weight(u, v) = sum over documents of count(u, doc) * [v present in doc],
/// where `u` ranges over the counting side and `v` over the indicator side.
pub fn count_doc_cooccurrences<S: Scalar>(
    counting: &[Vec<u32>],
    indicator: &[Vec<u32>],
    counting_vocab: usize,
    indicator_vocab: usize,
) -> CoocStore<S> {
    assert_eq!(counting.len(), indicator.len(), "document counts must align");
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for (cnt_doc, ind_doc) in counting.iter().zip(indicator) {
        if cnt_doc.is_empty() || ind_doc.is_empty() {
            continue;
        }
        let mut local: HashMap<u32, u64> = HashMap::new();
        for &u in cnt_doc {
            *local.entry(u).or_insert(0) += 1;
        }
        let mut present: Vec<u32> = ind_doc.clone();
        present.sort_unstable();
        present.dedup();
        for (&u, &c) in &local {
            for &v in &present {
                *counts.entry((u, v)).or_insert(0) += c;
            }
        }
    }
    let pairs = counts
        .into_iter()
        .map(|((u, v), c)| (u, v, S::of(c as f64)))
        .collect();
    CoocStore::from_triples(pairs, counting_vocab, indicator_vocab, 0, false)
}

/// Document-level co-occurrence stores for one extra modality.
#[derive(Debug, Clone)]
pub struct ModalityCooc<S: Scalar> {
    pub modality_id: u16,
    /// (u = modality token, v = word); enriches word pseudo-documents.
    pub by_word: CoocStore<S>,
    /// (u = word, v = modality token); pseudo-documents for modality tokens
    /// in the symmetric mode.
    pub by_token: Option<CoocStore<S>>,
}

/// Assembles pseudo-documents: one per word pivot with nonzero entries, with
/// word entries taken from the (weighted) word-word store and extra-modality
/// entries from document-level co-occurrences. With `symmetric`, each
/// extra-modality token additionally derives its own pseudo-document whose
/// entries are words.
pub fn build_pseudo_documents<S: Scalar>(
    word_store: &CoocStore<S>,
    extras: &[ModalityCooc<S>],
    symmetric: bool,
) -> Result<Vec<PseudoDocument<S>>> {
    for extra in extras {
        if extra.by_word.cols != word_store.cols {
            return Err(Error::Data(format!(
                "modality {} document co-occurrences cover {} words, expected {}",
                extra.modality_id, extra.by_word.cols, word_store.cols
            )));
        }
        if symmetric && extra.by_token.is_none() {
            return Err(Error::Data(format!(
                "symmetric mode requires word-by-token co-occurrences for modality {}",
                extra.modality_id
            )));
        }
    }

    let mut by_pivot: HashMap<u32, PseudoDocument<S>> = HashMap::new();
    word_store.for_each_column(|v, slice| {
        let items: Vec<(u32, S)> = slice.iter().map(|&(u, _, w)| (u, w)).collect();
        by_pivot.insert(
            v,
            PseudoDocument {
                pivot_modality: WORD_MODALITY,
                pivot_token: v,
                modalities: vec![ModalityEntries { modality_id: WORD_MODALITY, items }],
            },
        );
    });
    for extra in extras {
        extra.by_word.for_each_column(|v, slice| {
            let items: Vec<(u32, S)> = slice.iter().map(|&(u, _, w)| (u, w)).collect();
            let doc = by_pivot.entry(v).or_insert_with(|| PseudoDocument {
                pivot_modality: WORD_MODALITY,
                pivot_token: v,
                modalities: Vec::new(),
            });
            doc.modalities.push(ModalityEntries { modality_id: extra.modality_id, items });
        });
    }

    let mut pivots: Vec<u32> = by_pivot.keys().copied().collect();
    pivots.sort_unstable();
    let mut docs: Vec<PseudoDocument<S>> = pivots
        .into_iter()
        .map(|v| {
            let mut doc = by_pivot.remove(&v).unwrap();
            doc.modalities.sort_by_key(|m| m.modality_id);
            doc
        })
        .collect();

    if symmetric {
        for extra in extras {
            let by_token = extra.by_token.as_ref().unwrap();
            by_token.for_each_column(|tau, slice| {
                let items: Vec<(u32, S)> = slice.iter().map(|&(u, _, w)| (u, w)).collect();
                docs.push(PseudoDocument {
                    pivot_modality: extra.modality_id,
                    pivot_token: tau,
                    modalities: vec![ModalityEntries { modality_id: WORD_MODALITY, items }],
                });
            });
        }
    }
    Ok(docs)
}
