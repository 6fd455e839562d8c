mod common;

use common::{max_abs_diff, rng, softmax};
use rand::Rng;
use reformer_core::models::{Model, ModelConfig, Variant};
use reformer_core::params::ParamSet;
use reformer_core::tensor::{Tape, Tensor};
use reformer_core::training::decode::sequence_score;
use reformer_core::training::loss::{pad_mask, weighted_cross_entropy};
use reformer_core::training::{
    adam_step, beam_decode, corpus_bleu, cross_entropy_loss, eval_metrics, greedy_decode, make_toy_corpus,
    teacher_forced, train, AdamConfig, AdamState, LrSchedule, RunSpec, Task, EOS, PAD,
};

fn tiny(variant: Variant, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::defaults(variant);
    (c.layers, c.embed_dim, c.ffn_mult, c.heads) = (1, 16, 2, 2);
    (c.src_vocab, c.tgt_vocab) = (vocab, vocab);
    c.prenet_layers = (variant == Variant::ReformerFast) as usize;
    c.encoder_layers = (variant == Variant::Transformer) as usize;
    c
}

#[test]
fn cross_entropy_matches_log_softmax_loop() {
    let mut r = rng(41);
    let (n, v) = (5, 7);
    let logits = common::random_tensor(&mut r, &[n, v], 3.0);
    let gold = [3, 0, 6, 2, 0];
    let ids = [3, PAD, 6, 2, PAD];
    let mask = pad_mask(&ids);
    let tape = Tape::new();
    let loss = cross_entropy_loss(tape.constant(logits.clone()), &gold, &mask).unwrap().value().item().unwrap();
    let rows = common::to_mat(&logits);
    let kept: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let want = kept.iter().map(|&i| -softmax(&rows[i])[gold[i]].ln()).sum::<f64>() / kept.len() as f64;
    assert!((loss - want).abs() < 1e-12);

    let all_pad = [true; 5];
    assert!(cross_entropy_loss(tape.constant(logits.clone()), &gold, &all_pad).is_err());

    // Label smoothing: (1-ε)·nll + ε·mean over the vocabulary of -log p.
    let eps = 0.1;
    let w = [1.0, 0.0, 0.5, 1.0, 0.0];
    let got = weighted_cross_entropy(tape.constant(logits), &gold, &w, eps).unwrap().value().item().unwrap();
    let want: f64 = (0..n)
        .map(|i| {
            let p = softmax(&rows[i]);
            let nll = -p[gold[i]].ln();
            let uniform = p.iter().map(|x| -x.ln()).sum::<f64>() / v as f64;
            w[i] * ((1.0 - eps) * nll + eps * uniform)
        })
        .sum();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn adam_matches_hand_simulation() {
    let cfg = AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
    let mut params = ParamSet::from_entries(vec![("p".into(), Tensor::from_f64([2], &[1.0, -2.0]).unwrap())]);
    let mut state = AdamState::new(&params);
    let grads = [[0.5, -1.0], [0.25, 0.0], [-1.0, 2.0]];
    let lrs = [0.1, 0.05, 0.01];
    let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, (g, lr)) in grads.iter().zip(lrs).enumerate() {
        adam_step(&mut params, &[Tensor::from_f64([2], g).unwrap()], &mut state, lr, cfg).unwrap();
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.98 * v[j] + 0.02 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.98f64.powi(t));
            p[j] -= lr * mh / (vh.sqrt() + 1e-9);
        }
        assert!(max_abs_diff(params.get("p").unwrap().data(), &p) < 1e-12);
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = LrSchedule { peak: 1e-3, warmup: 100 };
    assert!((s.at(1) - 1e-5).abs() < 1e-18);
    assert!((s.at(50) - 5e-4).abs() < 1e-15);
    assert!((s.at(100) - 1e-3).abs() < 1e-15);
    assert!((s.at(400) - 5e-4).abs() < 1e-15);
}

#[test]
fn beam_of_one_is_greedy() {
    let mut r = rng(42);
    for i in 0..6 {
        let variant = Variant::ALL[i % 3];
        let model = Model::<f64>::init(tiny(variant, 9), r.random()).unwrap();
        let src: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(4..9)).collect();
        let greedy = greedy_decode(&model, &src, 8).unwrap();
        let beam = beam_decode(&model, &src, 1, 8, 0.0).unwrap();
        assert_eq!(beam.tokens, greedy, "{variant}");
        let score = sequence_score(&model, &src, &beam.tokens, 8).unwrap();
        assert!((beam.score - score).abs() < 1e-9);
    }
}

/// Every emittable sequence (content ids only) up to `max_len` tokens.
fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for tok in (EOS + 1)..vocab {
                let mut x: Vec<usize> = s.clone();
                x.push(tok);
                next.push(x);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn wide_beam_finds_the_exhaustive_optimum() {
    let mut r = rng(43);
    let max_len = 4;
    let candidates = all_sequences(6, max_len);
    for _ in 0..4 {
        let model = Model::<f64>::init(tiny(Variant::ReformerBase, 6), r.random()).unwrap();
        let src = vec![4, 5, 4];
        let best = candidates
            .iter()
            .map(|c| sequence_score(&model, &src, c, max_len).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let hyp = beam_decode(&model, &src, candidates.len(), max_len, 0.0).unwrap();
        assert!((hyp.score - best).abs() < 1e-9, "{} vs {best}", hyp.score);
        for beam in [2, 3] {
            let narrow = beam_decode(&model, &src, beam, max_len, 0.0).unwrap();
            assert!(narrow.score <= best + 1e-9);
            let rescored = sequence_score(&model, &src, &narrow.tokens, max_len).unwrap();
            assert!((narrow.score - rescored).abs() < 1e-9);
        }
    }
}

#[test]
fn bleu_matches_hand_computation() {
    let tok = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let hyp = tok("he read the book because he was interested in world history");
    let reference = tok("he was interested in world history because he read the book");
    // Clipped n-gram precisions 11/11, 9/10, 6/9, 4/8 and no brevity penalty.
    let want = 100.0 * (1.0f64 * (9.0 / 10.0) * (6.0 / 9.0) * (4.0 / 8.0)).powf(0.25);
    let got = corpus_bleu(&[hyp.clone()], &[reference]).unwrap();
    assert!((got - want).abs() < 1e-9);
    assert!((got - 74.0082).abs() < 1e-4);
    assert!((corpus_bleu(&[hyp.clone()], &[hyp]).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn eval_buckets_count_every_reference_token() {
    let refs = vec![vec![4, 5, 6], vec![7; 12]];
    let hyps = vec![vec![4, 9, 6], vec![7; 10]];
    let mut freq = vec![0; 10];
    freq[4] = 500;
    freq[7] = 5;
    let rep = eval_metrics(&hyps, &refs, &freq).unwrap();
    assert!((rep.length_ratio - 13.0 / 15.0).abs() < 1e-12);
    assert!((rep.accuracy - 12.0 / 15.0).abs() < 1e-12);
    assert_eq!(rep.by_position.iter().map(|b| b.total).sum::<usize>(), 15);
    assert_eq!(rep.by_position[0].total, 13);
    assert_eq!(rep.by_position[1].total, 2);
    assert_eq!(rep.by_position[1].correct, 0);
    assert_eq!(rep.by_frequency.iter().map(|b| b.total).sum::<usize>(), 15);
}

fn copy_spec(steps: usize, seed: u64) -> RunSpec {
    RunSpec {
        steps,
        batch_tokens: 600,
        lr: 3e-3,
        warmup: 50,
        log_every: 25,
        seed,
        decode_samples: 4,
        ..RunSpec::default()
    }
}

#[test]
fn fifty_pair_copy_task_is_learned() {
    let corpus = make_toy_corpus(Task::Copy, 12, 50, (1, 6), 3).unwrap();
    let mut cfg = tiny(Variant::ReformerBase, 12);
    cfg.dropout = 0.0;
    let mut spec = copy_spec(2000, 4);
    spec.target_accuracy = Some(1.0);
    let out = train(&cfg, &corpus, &corpus, &spec, |_| {}).unwrap();
    let tf = teacher_forced(&out.best, &corpus).unwrap();
    assert!(tf.loss < 0.1, "loss {} after {} steps", tf.loss, out.steps_run);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let corpus = make_toy_corpus(Task::Reverse, 10, 40, (1, 5), 5).unwrap();
    let (train_set, valid_set) = corpus.split_at(32);
    let cfg = tiny(Variant::ReformerFast, 10);
    let run = || {
        let mut lines = Vec::new();
        let out = train(&cfg, &train_set, &valid_set, &copy_spec(60, 9), |r| lines.push(r.to_line(false))).unwrap();
        (lines, out.best.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}
