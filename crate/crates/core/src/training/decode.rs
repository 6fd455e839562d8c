use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Scalar, Tensor};

/// Highest-scoring token that may be emitted (never PAD or BOS); ties go to
/// the lowest id.
pub fn argmax_token<F: Scalar>(logits: &[F]) -> usize {
    let mut best = EOS;
    for (id, &v) in logits.iter().enumerate() {
        if id == PAD || id == BOS {
            continue;
        }
        if v > logits[best] {
            best = id;
        }
    }
    best
}

/// Log-softmax of a logit row in 64-bit.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v.as_f64() - lse).collect()
}

/// Output of a traced greedy decode.
#[derive(Debug, Clone)]
pub struct GreedyTrace<F: Scalar> {
    pub tokens: Vec<usize>,
    /// Next-token logits seen at every step.
    pub step_logits: Vec<Tensor<F>>,
}

/// Greedy decoding with the incremental cache. `src` excludes EOS; the
/// result excludes EOS and has at most `max_len` tokens.
pub fn greedy_decode<F: Scalar>(model: &Model<F>, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_trace(model, src, max_len)?.tokens)
}

pub fn greedy_trace<F: Scalar>(model: &Model<F>, src: &[usize], max_len: usize) -> Result<GreedyTrace<F>> {
    check_max_len(max_len)?;
    let mut state = model.start_decode(&super::batch::source_ids(src))?;
    let mut trace = GreedyTrace {
        tokens: Vec::new(),
        step_logits: Vec::new(),
    };
    let mut token = BOS;
    while trace.tokens.len() < max_len {
        let logits = model.decode_step(&mut state, token)?;
        token = argmax_token(logits.data());
        trace.step_logits.push(logits);
        if token == EOS {
            break;
        }
        trace.tokens.push(token);
    }
    Ok(trace)
}

/// Greedy decoding that re-runs the full parallel forward at every step
/// instead of using the cache.
pub fn greedy_trace_uncached<F: Scalar>(model: &Model<F>, src: &[usize], max_len: usize) -> Result<GreedyTrace<F>> {
    check_max_len(max_len)?;
    let src = super::batch::source_ids(src);
    let vocab = model.config.tgt_vocab;
    let mut trace = GreedyTrace {
        tokens: Vec::new(),
        step_logits: Vec::new(),
    };
    let mut prefix = vec![BOS];
    while trace.tokens.len() < max_len {
        let all = model.logits(&src, &prefix)?;
        let last = all.narrow(0, prefix.len() - 1, 1)?.reshape([vocab])?;
        let token = argmax_token(last.data());
        trace.step_logits.push(last);
        if token == EOS {
            break;
        }
        trace.tokens.push(token);
        prefix.push(token);
    }
    Ok(trace)
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    Ok(())
}

/// A finished hypothesis. `score` is the summed log-probability of its
/// tokens plus EOS (EOS is not scored when the length cap was reached).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Score of `tokens` under the decoding rules: every token's
/// log-probability, plus EOS unless `tokens` is already `max_len` long.
/// PAD and BOS are excluded from the distribution the same way decoding
/// excludes them.
pub fn sequence_score<F: Scalar>(model: &Model<F>, src: &[usize], tokens: &[usize], max_len: usize) -> Result<f64> {
    let mut state = model.start_decode(&super::batch::source_ids(src))?;
    let mut score = 0.0;
    let mut prev = BOS;
    for (i, &tok) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
        if i == max_len {
            break;
        }
        let lp = emit_log_probs(model.decode_step(&mut state, prev)?.data());
        score += lp[tok];
        prev = tok;
    }
    Ok(score)
}

/// Log-probabilities over emittable tokens; PAD and BOS get −∞.
fn emit_log_probs<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let mut lp = log_softmax(logits);
    lp[PAD] = f64::NEG_INFINITY;
    lp[BOS] = f64::NEG_INFINITY;
    lp
}

fn normalized(score: f64, len: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        score
    } else {
        score / ((len.max(1)) as f64).powf(length_penalty)
    }
}

/// Beam search over incremental decoding steps. Candidates are ranked by
/// log-probability (descending) and then by token id; the returned
/// hypothesis maximizes `score / len^length_penalty`.
pub fn beam_decode<F: Scalar>(
    model: &Model<F>,
    src: &[usize],
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be at least 1".into()));
    }
    check_max_len(max_len)?;
    let start = model.start_decode(&super::batch::source_ids(src))?;
    let mut live = vec![(Vec::<usize>::new(), 0.0f64, start)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (b, (tokens, score, state)) in live.iter().enumerate() {
            let mut state = state.clone();
            let prev = tokens.last().copied().unwrap_or(BOS);
            let lp = emit_log_probs(model.decode_step(&mut state, prev)?.data());
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    candidates.push((score + l, b, tok));
                }
            }
            states.push(state);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (score, b, tok) in candidates.into_iter().take(beam) {
            let tokens = &live[b].0;
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: tokens.clone(),
                    score,
                });
            } else {
                let mut t = tokens.clone();
                t.push(tok);
                next.push((t, score, states[b].clone()));
            }
        }
        live = next;
        if step + 1 == max_len {
            finished.extend(live.drain(..).map(|(tokens, score, _)| Hypothesis { tokens, score }));
        }
        if live.is_empty() {
            break;
        }
        // Scores only fall as hypotheses grow, so without a length penalty
        // no live beam can overtake the best finished one.
        if length_penalty == 0.0 {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|(_, s, _)| *s < best_done) {
                break;
            }
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            normalized(b.score, b.tokens.len(), length_penalty)
                .total_cmp(&normalized(a.score, a.tokens.len(), length_penalty))
                .then(a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}
