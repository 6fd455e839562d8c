//! Toy corpora, loss, optimizer, training loop, decoding and evaluation
//! metrics.

pub mod batch;
pub mod corpus;
pub mod decode;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod train;
pub mod vocab;

pub use batch::{make_batches, source_ids, target_io, ParallelBatch};
pub use corpus::{make_toy_corpus, Corpus, Task};
pub use decode::{beam_decode, greedy_decode, greedy_trace, greedy_trace_uncached, Hypothesis};
pub use loss::cross_entropy_loss;
pub use metrics::{corpus_bleu, eval_metrics, EvalReport};
pub use optim::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use train::{teacher_forced, train, MetricsRecord, RunSpec, TrainOutcome};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
