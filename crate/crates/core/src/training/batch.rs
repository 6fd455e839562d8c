use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Model-side source sequence: content tokens followed by EOS.
pub fn source_ids(content: &[usize]) -> Vec<usize> {
    let mut ids = content.to_vec();
    ids.push(EOS);
    ids
}

/// Teacher-forcing pair for a target sentence: `(BOS + y, y + EOS)`.
pub fn target_io(content: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(content.len() + 1);
    input.push(BOS);
    input.extend_from_slice(content);
    let mut output = content.to_vec();
    output.push(EOS);
    (input, output)
}

/// Padded source/target id matrices. Sources carry EOS; targets are the
/// EOS-terminated outputs (the BOS-prefixed inputs follow from them).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelBatch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl ParallelBatch {
    pub fn from_pairs(pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let srcs: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| source_ids(s)).collect();
        let tgts: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| target_io(t).1).collect();
        let s_max = srcs.iter().map(Vec::len).max().unwrap_or(0);
        let t_max = tgts.iter().map(Vec::len).max().unwrap_or(0);
        let pad = |rows: &[Vec<usize>], width: usize| -> Vec<Vec<usize>> {
            rows.iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.resize(width, PAD);
                    r
                })
                .collect()
        };
        Ok(Self {
            src: pad(&srcs, s_max),
            tgt: pad(&tgts, t_max),
            src_lens: srcs.iter().map(Vec::len).collect(),
            tgt_lens: tgts.iter().map(Vec::len).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Unpadded `(source, target input, target output)` of row `i`.
    pub fn row(&self, i: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let src = self.src[i][..self.src_lens[i]].to_vec();
        let out = self.tgt[i][..self.tgt_lens[i]].to_vec();
        let content = &out[..out.len() - 1];
        let (input, output) = target_io(content);
        (src, input, output)
    }

    /// Number of target tokens (including EOS) in the batch.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

/// Groups the corpus into batches of similar length so that
/// `sentences × longest side` stays within `max_tokens`. Sentence order
/// within equal lengths and the batch order are shuffled by `rng`.
pub fn make_batches(corpus: &Corpus, max_tokens: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ParallelBatch>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot batch an empty corpus".into()));
    }
    let size = |i: usize| corpus.src[i].len().max(corpus.tgt[i].len()) + 1;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| size(i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let longest = current.iter().map(|&j| size(j)).max().unwrap_or(0).max(size(i));
        if !current.is_empty() && (current.len() + 1) * longest > max_tokens {
            groups.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(rng);
    groups
        .into_iter()
        .map(|g| {
            let pairs: Vec<(&[usize], &[usize])> =
                g.iter().map(|&i| (corpus.src[i].as_slice(), corpus.tgt[i].as_slice())).collect();
            ParallelBatch::from_pairs(&pairs)
        })
        .collect()
}
