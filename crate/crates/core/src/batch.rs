//! Pseudo-documents and their on-disk batch format.
//!
//! Batch files are little-endian binary with a `PWEB` magic, a format
//! version, and the hash of the vocabularies they were built against;
//! loading verifies the hash so stale batches are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weighted entries of one modality inside a pseudo-document. Token ids are
/// unique within a modality and weights are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEntries<S: Scalar> {
    pub modality_id: u16,
    pub items: Vec<(u32, S)>,
}

/// The training unit: a pivot token plus the weighted bag of tokens
/// co-occurring with it, per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDocument<S: Scalar> {
    pub pivot_modality: u16,
    pub pivot_token: u32,
    pub modalities: Vec<ModalityEntries<S>>,
}

impl<S: Scalar> PseudoDocument<S> {
    /// Total entry weight across all modalities.
    pub fn weight(&self) -> f64 {
        self.modalities
            .iter()
            .flat_map(|m| m.items.iter())
            .map(|e| e.1.to_f64_lossy())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch<S: Scalar> {
    pub docs: Vec<PseudoDocument<S>>,
}

pub const BATCH_MAGIC: &[u8; 4] = b"PWEB";
pub const BATCH_VERSION: u32 = 1;

/// Splits pseudo-documents into batches of at most `batch_size`.
pub fn shard_batches<S: Scalar>(docs: Vec<PseudoDocument<S>>, batch_size: usize) -> Vec<Batch<S>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut batches = Vec::with_capacity(docs.len().div_ceil(batch_size));
    let mut current = Vec::with_capacity(batch_size);
    for doc in docs {
        current.push(doc);
        if current.len() == batch_size {
            batches.push(Batch { docs: std::mem::take(&mut current) });
            current = Vec::with_capacity(batch_size);
        }
    }
    if !current.is_empty() {
        batches.push(Batch { docs: current });
    }
    batches
}

pub fn write_batch<S: Scalar, W: Write>(w: &mut W, batch: &Batch<S>, vocab_hash: &[u8; 32]) -> Result<()> {
    w.write_all(BATCH_MAGIC)?;
    w.write_all(&BATCH_VERSION.to_le_bytes())?;
    w.write_all(vocab_hash)?;
    w.write_all(&(batch.docs.len() as u32).to_le_bytes())?;
    for doc in &batch.docs {
        w.write_all(&doc.pivot_modality.to_le_bytes())?;
        w.write_all(&doc.pivot_token.to_le_bytes())?;
        w.write_all(&(doc.modalities.len() as u16).to_le_bytes())?;
        for m in &doc.modalities {
            w.write_all(&m.modality_id.to_le_bytes())?;
            w.write_all(&(m.items.len() as u32).to_le_bytes())?;
            for &(tok, weight) in &m.items {
                w.write_all(&tok.to_le_bytes())?;
                w.write_all(&weight.to_f64_lossy().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_batch_file<S: Scalar>(path: &Path, batch: &Batch<S>, vocab_hash: &[u8; 32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_batch(&mut w, batch, vocab_hash)?;
    w.flush()?;
    Ok(())
}

struct BatchHeader {
    vocab_hash: [u8; 32],
    num_docs: u32,
}

fn read_header<R: Read>(r: &mut R, what: &str) -> Result<BatchHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        return Err(Error::Data(format!("{what}: not a pseudo-document batch")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != BATCH_VERSION {
        return Err(Error::Data(format!("{what}: unsupported batch version {version}")));
    }
    let mut vocab_hash = [0u8; 32];
    r.read_exact(&mut vocab_hash)?;
    r.read_exact(&mut b4)?;
    Ok(BatchHeader { vocab_hash, num_docs: u32::from_le_bytes(b4) })
}

fn check_hash(found: &[u8; 32], expected: Option<&[u8; 32]>) -> Result<()> {
    if let Some(expected) = expected {
        if found != expected {
            return Err(Error::VocabHashMismatch {
                expected: crate::pipeline::hex32(expected),
                found: crate::pipeline::hex32(found),
            });
        }
    }
    Ok(())
}

pub fn read_batch<S: Scalar, R: Read>(
    r: &mut R,
    what: &str,
    expected_hash: Option<&[u8; 32]>,
) -> Result<Batch<S>> {
    let header = read_header(r, what)?;
    check_hash(&header.vocab_hash, expected_hash)?;
    let mut docs = Vec::with_capacity(header.num_docs as usize);
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    for _ in 0..header.num_docs {
        r.read_exact(&mut b2)?;
        let pivot_modality = u16::from_le_bytes(b2);
        r.read_exact(&mut b4)?;
        let pivot_token = u32::from_le_bytes(b4);
        r.read_exact(&mut b2)?;
        let n_modalities = u16::from_le_bytes(b2);
        let mut modalities = Vec::with_capacity(n_modalities as usize);
        for _ in 0..n_modalities {
            r.read_exact(&mut b2)?;
            let modality_id = u16::from_le_bytes(b2);
            r.read_exact(&mut b4)?;
            let n_items = u32::from_le_bytes(b4);
            let mut items = Vec::with_capacity(n_items as usize);
            for _ in 0..n_items {
                r.read_exact(&mut b4)?;
                let tok = u32::from_le_bytes(b4);
                r.read_exact(&mut b8)?;
                items.push((tok, S::of(f64::from_le_bytes(b8))));
            }
            modalities.push(ModalityEntries { modality_id, items });
        }
        docs.push(PseudoDocument { pivot_modality, pivot_token, modalities });
    }
    Ok(Batch { docs })
}

pub fn read_batch_file<S: Scalar>(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<Batch<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_batch(&mut r, &path.display().to_string(), expected_hash)
}

/// Debug dump: `pivot<TAB>modality<TAB>token<TAB>weight` per entry, with the
/// pivot rendered as `modality_name:token`.
pub fn dump_batch_tsv<S: Scalar, W: Write>(
    w: &mut W,
    batch: &Batch<S>,
    vocabs: &[Vocabulary],
) -> Result<()> {
    let vocab_of = |id: u16| -> Result<&Vocabulary> {
        vocabs
            .iter()
            .find(|v| v.modality_id == id)
            .ok_or_else(|| Error::Data(format!("batch references unknown modality {id}")))
    };
    for doc in &batch.docs {
        let pivot_vocab = vocab_of(doc.pivot_modality)?;
        let pivot = format!("{}:{}", pivot_vocab.name, pivot_vocab.token(doc.pivot_token));
        for m in &doc.modalities {
            let entry_vocab = vocab_of(m.modality_id)?;
            for &(tok, weight) in &m.items {
                writeln!(w, "{pivot}\t{}\t{}\t{}", entry_vocab.name, entry_vocab.token(tok), weight)?;
            }
        }
    }
    Ok(())
}

/// Source of training batches; one epoch is a pass over all of them.
pub trait BatchSource<S: Scalar>: Sync {
    fn num_batches(&self) -> usize;
    fn total_docs(&self) -> usize;
    fn load(&self, index: usize) -> Result<Batch<S>>;
}

/// In-memory batches, mostly for tests and small runs.
pub struct MemorySource<S: Scalar>(pub Vec<Batch<S>>);

impl<S: Scalar> BatchSource<S> for MemorySource<S> {
    fn num_batches(&self) -> usize {
        self.0.len()
    }

    fn total_docs(&self) -> usize {
        self.0.iter().map(|b| b.docs.len()).sum()
    }

    fn load(&self, index: usize) -> Result<Batch<S>> {
        Ok(self.0[index].clone())
    }
}

/// Batches stored as `*.bin` files in a directory, visited in filename order.
pub struct DirectorySource<S: Scalar> {
    paths: Vec<PathBuf>,
    doc_counts: Vec<usize>,
    expected_hash: Option<[u8; 32]>,
    _scalar: PhantomData<S>,
}

impl<S: Scalar> DirectorySource<S> {
    pub fn open(dir: &Path, expected_hash: Option<[u8; 32]>) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("{}: no batch files", dir.display())));
        }
        let mut doc_counts = Vec::with_capacity(paths.len());
        for path in &paths {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut r = BufReader::new(file);
            let header = read_header(&mut r, &path.display().to_string())?;
            check_hash(&header.vocab_hash, expected_hash.as_ref())?;
            doc_counts.push(header.num_docs as usize);
        }
        Ok(DirectorySource { paths, doc_counts, expected_hash, _scalar: PhantomData })
    }
}

impl<S: Scalar> BatchSource<S> for DirectorySource<S> {
    fn num_batches(&self) -> usize {
        self.paths.len()
    }

    fn total_docs(&self) -> usize {
        self.doc_counts.iter().sum()
    }

    fn load(&self, index: usize) -> Result<Batch<S>> {
        read_batch_file(&self.paths[index], self.expected_hash.as_ref())
    }
}
