//! Plain-text corpora: one sentence per line, tokens separated by spaces.

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::{Corpus, Vocab};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    Vocab::parse(&read_text(path)?)
}

/// Encodes every line of `path`; unknown tokens map to `<unk>`.
pub fn read_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    Ok(read_text(path)?.lines().map(|l| vocab.encode(l)).collect())
}

pub fn read_parallel(src: &Path, tgt: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Corpus> {
    let s = read_sentences(src, src_vocab)?;
    let t = read_sentences(tgt, tgt_vocab)?;
    if s.len() != t.len() {
        return Err(Error::Invalid(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    if let Some(i) = s.iter().position(|x| x.is_empty()) {
        return Err(Error::Invalid(format!("{} line {} is empty", src.display(), i + 1)));
    }
    Corpus::new(s, t)
}

pub fn sentences_to_text(vocab: &Vocab, sentences: &[Vec<usize>]) -> String {
    sentences.iter().map(|s| vocab.decode(s) + "\n").collect()
}

/// Vocabulary for a model side: read from `path` when given, otherwise the
/// synthetic `t{id}` vocabulary. The size must match what the model expects.
pub fn model_vocab(path: Option<&Path>, side: &str, expected: usize) -> Result<Vocab> {
    let vocab = match path {
        Some(p) => read_vocab(p)?,
        None => Vocab::synthetic(expected)?,
    };
    if vocab.len() != expected {
        return Err(Error::Invalid(format!(
            "{side} vocabulary has {} entries but the model expects {expected}",
            vocab.len()
        )));
    }
    Ok(vocab)
}
