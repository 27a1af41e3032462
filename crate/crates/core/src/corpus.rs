//! Corpus ingestion: vocabulary construction, frequency filtering, and
//! subsampling of frequent tokens.
//!
//! Input corpora are pre-tokenized UTF-8 text, one document per line,
//! whitespace-separated tokens. Extra modality files carry one line per
//! document, aligned with the corpus by line index:
//! `modality_name<TAB>token [token ...]` (an empty line means the document
//! has no tokens in that modality).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, NS_SUBSAMPLE};

/// Modality id of the base word modality.
pub const WORD_MODALITY: u16 = 0;
/// Name of the base word modality.
pub const WORD_MODALITY_NAME: &str = "word";

/// Token ↔ id maps with corpus frequencies for one modality.
///
/// Ids are assigned by descending frequency with lexicographic tie-breaks,
/// so a vocabulary serializes deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub modality_id: u16,
    pub name: String,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    freq: Vec<u64>,
    total_count: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from raw token counts, dropping the `drop_top`
    /// most frequent tokens and keeping at most `keep` of the rest.
    /// Retained frequencies still reflect the full corpus.
    pub fn from_counts(
        modality_id: u16,
        name: &str,
        counts: HashMap<String, u64>,
        drop_top: usize,
        keep: usize,
    ) -> Result<Self> {
        if keep == 0 {
            return Err(Error::Config("keep must be at least 1".into()));
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let retained: Vec<(String, u64)> = ranked.into_iter().skip(drop_top).take(keep).collect();
        if retained.is_empty() {
            return Err(Error::Data(format!(
                "no tokens left in modality `{name}` after dropping the top {drop_top}"
            )));
        }
        Ok(Self::from_ranked(modality_id, name, retained))
    }

    /// Rebuilds a vocabulary from already-ranked `(token, frequency)` rows,
    /// validating the ordering invariant.
    pub fn from_rows(modality_id: u16, name: &str, rows: Vec<(String, u64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data(format!("empty vocabulary for modality `{name}`")));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.1 == 0 {
                return Err(Error::Data(format!(
                    "vocabulary `{name}`: token `{}` has zero frequency",
                    row.0
                )));
            }
            if i > 0 {
                let prev = &rows[i - 1];
                let ordered = prev.1 > row.1 || (prev.1 == row.1 && prev.0 < row.0);
                if !ordered {
                    return Err(Error::Data(format!(
                        "vocabulary `{name}`: rows out of order near `{}`",
                        row.0
                    )));
                }
            }
        }
        Ok(Self::from_ranked(modality_id, name, rows))
    }

    fn from_ranked(modality_id: u16, name: &str, ranked: Vec<(String, u64)>) -> Self {
        let mut ids = HashMap::with_capacity(ranked.len());
        let mut tokens = Vec::with_capacity(ranked.len());
        let mut freq = Vec::with_capacity(ranked.len());
        let mut total = 0u64;
        for (i, (tok, f)) in ranked.into_iter().enumerate() {
            ids.insert(tok.clone(), i as u32);
            tokens.push(tok);
            freq.push(f);
            total += f;
        }
        Vocabulary { modality_id, name: name.to_owned(), tokens, ids, freq, total_count: total }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freq[id as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Corpus frequency ratio f(w) = freq(w) / total_count.
    pub fn freq_ratio(&self, id: u32) -> f64 {
        self.freq[id as usize] as f64 / self.total_count as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens.iter().map(|t| t.as_str()).zip(self.freq.iter().copied())
    }

    /// Writes the `token<TAB>frequency` TSV, line order = id order.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (tok, f) in self.iter() {
            writeln!(w, "{tok}\t{f}")?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path, modality_id: u16, name: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (tok, f) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected token<TAB>frequency", path.display(), lineno + 1))
            })?;
            let f: u64 = f.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad frequency `{f}`", path.display(), lineno + 1))
            })?;
            rows.push((tok.to_owned(), f));
        }
        Self::from_rows(modality_id, name, rows)
    }

    /// Feeds the vocabulary's canonical representation into a hash.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update(self.name.as_bytes());
        hasher.update([0u8]);
        hasher.update((self.tokens.len() as u64).to_le_bytes());
        for (tok, f) in self.iter() {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
            hasher.update(f.to_le_bytes());
        }
    }
}

/// Hash identifying a set of modality vocabularies; embedded in batch and
/// model files so stale artifacts are rejected at load time.
pub fn vocab_set_hash(vocabs: &[Vocabulary]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((vocabs.len() as u64).to_le_bytes());
    for v in vocabs {
        h.update(v.modality_id.to_le_bytes());
        v.hash_into(&mut h);
    }
    h.finalize().into()
}

/// Builds a vocabulary by counting a tokenized corpus.
pub fn build_vocabulary<I, D, T>(
    corpus: I,
    modality_id: u16,
    name: &str,
    drop_top: usize,
    keep: usize,
) -> Result<Vocabulary>
where
    I: IntoIterator<Item = D>,
    D: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut saw_document = false;
    for doc in corpus {
        saw_document = true;
        for tok in doc {
            *counts.entry(tok.as_ref().to_owned()).or_insert(0) += 1;
        }
    }
    if !saw_document {
        return Err(Error::EmptyCorpus);
    }
    Vocabulary::from_counts(modality_id, name, counts, drop_top, keep)
}

/// Word-modality token ids per document, in corpus order. Document
/// boundaries are preserved; out-of-vocabulary tokens are absent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub docs: Vec<Vec<u32>>,
}

impl TokenStream {
    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// Token ids of one extra modality, aligned with the corpus by document index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityStream {
    pub modality_id: u16,
    pub name: String,
    pub docs: Vec<Vec<u32>>,
}

/// Maps raw documents onto vocabulary ids, dropping OOV tokens.
pub fn tokenize<I, D, T>(corpus: I, vocab: &Vocabulary) -> TokenStream
where
    I: IntoIterator<Item = D>,
    D: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let docs = corpus
        .into_iter()
        .map(|doc| doc.into_iter().filter_map(|t| vocab.id(t.as_ref())).collect())
        .collect();
    TokenStream { docs }
}

/// Probability that a token with corpus frequency ratio `f` is discarded
/// under subsampling threshold `t`: max(0, 1 - sqrt(t / f)).
pub fn discard_probability(f: f64, threshold: f64) -> f64 {
    if f <= threshold {
        0.0
    } else {
        1.0 - (threshold / f).sqrt()
    }
}

/// Randomly thins frequent tokens. Each occurrence of token `w` is discarded
/// with probability `discard_probability(f(w), threshold)`. Deterministic
/// given the seed: each document draws from its own (seed, doc index) stream,
/// so the result does not depend on processing order.
pub fn subsample(stream: &TokenStream, vocab: &Vocabulary, threshold: f64, seed: u64) -> TokenStream {
    assert!(threshold > 0.0, "subsampling threshold must be positive");
    let docs = stream
        .docs
        .iter()
        .enumerate()
        .map(|(d, doc)| {
            let mut rng = stream_rng(seed, NS_SUBSAMPLE, d as u64);
            doc.iter()
                .copied()
                .filter(|&id| {
                    let p = discard_probability(vocab.freq_ratio(id), threshold);
                    p == 0.0 || rng.gen::<f64>() >= p
                })
                .collect()
        })
        .collect();
    TokenStream { docs }
}

/// First pass over a corpus file: per-token counts and the document count.
pub fn count_corpus_tokens(path: &Path) -> Result<(HashMap<String, u64>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut docs = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        docs += 1;
        for tok in line.split_whitespace() {
            *counts.entry(tok.to_owned()).or_insert(0) += 1;
        }
    }
    if docs == 0 || counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((counts, docs))
}

/// Second pass: maps a corpus file onto vocabulary ids.
pub fn tokenize_corpus_file(path: &Path, vocab: &Vocabulary) -> Result<TokenStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        docs.push(line.split_whitespace().filter_map(|t| vocab.id(t)).collect());
    }
    Ok(TokenStream { docs })
}

/// Raw tokens of one modality file, one document per line.
#[derive(Debug, Clone)]
pub struct ModalityDocs {
    pub name: String,
    pub docs: Vec<Vec<String>>,
}

/// Reads a modality file. Every non-empty line must start with the same
/// modality name.
pub fn read_modality_file(path: &Path) -> Result<ModalityDocs> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut name: Option<String> = None;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            docs.push(Vec::new());
            continue;
        }
        let (n, rest) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected modality_name<TAB>token",
                path.display(),
                lineno + 1
            ))
        })?;
        match &name {
            None => name = Some(n.to_owned()),
            Some(prev) if prev != n => {
                return Err(Error::Data(format!(
                    "{}:{}: modality name changed from `{prev}` to `{n}`",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        docs.push(rest.split_whitespace().map(str::to_owned).collect());
    }
    let name = name.ok_or_else(|| {
        Error::Data(format!("{}: modality file has no tokens", path.display()))
    })?;
    if name == WORD_MODALITY_NAME {
        return Err(Error::Data(format!(
            "{}: modality name `{WORD_MODALITY_NAME}` is reserved for the base modality",
            path.display()
        )));
    }
    Ok(ModalityDocs { name, docs })
}

/// Maps modality documents onto vocabulary ids.
pub fn tokenize_modality(docs: &ModalityDocs, vocab: &Vocabulary) -> ModalityStream {
    let ids = docs
        .docs
        .iter()
        .map(|doc| doc.iter().filter_map(|t| vocab.id(t)).collect())
        .collect();
    ModalityStream { modality_id: vocab.modality_id, name: vocab.name.clone(), docs: ids }
}
