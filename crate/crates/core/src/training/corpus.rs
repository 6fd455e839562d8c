use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::NUM_SPECIAL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    /// Fixed random token bijection, then adjacent pairs swapped.
    LexmapReorder,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::Reverse, Task::LexmapReorder];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::LexmapReorder => "lexmap-reorder",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown task `{s}` (allowed: copy, reverse, lexmap-reorder)"))
        })
    }
}

/// Parallel sentences as content token ids (no BOS/EOS).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Invalid(format!(
                "parallel corpus sides differ: {} source vs {} target sentences",
                src.len(),
                tgt.len()
            )));
        }
        Ok(Self { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// First `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.len());
        (
            Corpus {
                src: self.src[..n].to_vec(),
                tgt: self.tgt[..n].to_vec(),
            },
            Corpus {
                src: self.src[n..].to_vec(),
                tgt: self.tgt[n..].to_vec(),
            },
        )
    }

    /// Occurrence count of every target id.
    pub fn target_frequencies(&self, vocab: usize) -> Vec<usize> {
        let mut freq = vec![0; vocab];
        for id in self.tgt.iter().flatten() {
            if *id < vocab {
                freq[*id] += 1;
            }
        }
        freq
    }
}

/// The lexical map used by lexmap-reorder for a given seed and vocabulary.
pub fn lexical_map(vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_786d_6170);
    let mut content: Vec<usize> = (NUM_SPECIAL..vocab).collect();
    content.shuffle(&mut rng);
    let mut map: Vec<usize> = (0..vocab).collect();
    for (from, to) in (NUM_SPECIAL..vocab).zip(content) {
        map[from] = to;
    }
    map
}

/// Applies a task's transformation to one source sentence.
pub fn apply_task(task: Task, src: &[usize], map: &[usize]) -> Vec<usize> {
    match task {
        Task::Copy => src.to_vec(),
        Task::Reverse => src.iter().rev().copied().collect(),
        Task::LexmapReorder => {
            let mut out: Vec<usize> = src.iter().map(|&t| map[t]).collect();
            for pair in out.chunks_mut(2) {
                pair.reverse();
            }
            out
        }
    }
}

/// Random source sentences with lengths in `len_range` (inclusive) and their
/// task targets. Deterministic for a fixed seed.
pub fn make_toy_corpus(
    task: Task,
    vocab: usize,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    if vocab < 8 {
        return Err(Error::Config(format!("toy vocabulary must have at least 8 ids, got {vocab}")));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("empty length range {lo}..={hi}")));
    }
    let map = lexical_map(vocab, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::default();
    for _ in 0..n_pairs {
        let len = rng.random_range(lo..=hi);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_SPECIAL..vocab)).collect();
        corpus.tgt.push(apply_task(task, &src, &map));
        corpus.src.push(src);
    }
    Ok(corpus)
}
