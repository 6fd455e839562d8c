mod common;

use common::rng;
use rand::Rng;
use reformer_core::gradcheck::check_gradients;
use reformer_core::models::{count_parameters, param_layout, Model, ModelConfig, Variant};
use reformer_core::nn::ForwardCtx;
use reformer_core::tensor::{Tape, Tensor};
use reformer_core::training::{greedy_trace, greedy_trace_uncached, source_ids, BOS};

fn config(variant: Variant, e: usize, layers: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::defaults(variant);
    c.embed_dim = e;
    c.layers = layers;
    c.ffn_mult = 2;
    c.heads = 2;
    c.src_vocab = vocab;
    c.tgt_vocab = vocab;
    c.prenet_layers = if variant == Variant::ReformerFast { 1 } else { 0 };
    c.encoder_layers = if variant == Variant::Transformer { 1 } else { 0 };
    c
}

#[test]
fn trunk_matrix_counts_follow_closed_form() {
    for e in [8, 16, 64] {
        let mut base = ModelConfig::defaults(Variant::ReformerBase);
        (base.embed_dim, base.src_vocab, base.tgt_vocab) = (e, 10, 10);
        let c = count_parameters(&base).unwrap();
        assert_eq!(c.trunk_matrices, 168 * e * e);
        assert_eq!(c.simplified, 168.0);

        let mut fast = ModelConfig::defaults(Variant::ReformerFast);
        (fast.embed_dim, fast.src_vocab, fast.tgt_vocab) = (e, 10, 10);
        let c = count_parameters(&fast).unwrap();
        assert_eq!(c.trunk_matrices, 120 * e * e);
        assert_eq!(c.simplified, 120.0);

        let mut tr = ModelConfig::defaults(Variant::Transformer);
        (tr.embed_dim, tr.src_vocab, tr.tgt_vocab, tr.ffn_mult) = (e, 10, 10, 3);
        let c = count_parameters(&tr).unwrap();
        // 6 encoder layers of 4+2w, 6 decoder layers of 8+2w.
        assert_eq!(c.trunk_matrices, (6 * (4 + 6) + 6 * (8 + 6)) * e * e);
        assert_eq!(c.simplified, 144.0);
    }
}

#[test]
fn layout_is_canonical_and_complete() {
    let cfg = config(Variant::ReformerFast, 8, 2, 9);
    let names: Vec<String> = param_layout(&cfg).unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names[0], "src_embed");
    assert_eq!(names[1], "tgt_embed");
    assert!(names[2].starts_with("prenet.layers.0."));
    let first_trunk = names.iter().position(|n| n.starts_with("trunk.")).unwrap();
    assert!(names[first_trunk..].iter().take_while(|n| n.starts_with("trunk.0.")).any(|n| n.contains("target_attn")));
    assert_eq!(names[names.len() - 2..], ["output.w".to_string(), "output.b".to_string()]);
    let model = Model::<f32>::init(cfg.clone(), 1).unwrap();
    assert_eq!(model.params.len(), names.len());
    assert!(Model::new(cfg, model.params.clone()).is_ok());
}

#[test]
fn mismatched_parameters_are_rejected() {
    let cfg = config(Variant::ReformerBase, 8, 1, 9);
    let other = config(Variant::ReformerBase, 8, 2, 9);
    let params = Model::<f32>::init(other, 1).unwrap().params;
    assert!(Model::new(cfg, params).is_err());
}

fn gradcheck(variant: Variant) -> f64 {
    let cfg = config(variant, 8, 1, 7);
    let model = Model::<f64>::init(cfg, 5).unwrap();
    let params: Vec<(String, Tensor<f64>)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let src = [4, 5, 2];
    let tgt_in = [BOS, 6, 4];
    let gold = [6, 4, 2];
    let report = check_gradients(&params, 1e-4, |tape, leaves| {
        let arch = model.arch_from_vars(leaves).map_err(|e| match e {
            reformer_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let logits = model.forward(&arch, &src, &tgt_in, &mut ForwardCtx::eval()).unwrap();
        tape.cross_entropy(logits, &gold, &[1.0; 3], 0.0)
    })
    .unwrap();
    assert!(report.checked > 500);
    report.max_rel_error
}

#[test]
fn gradients_match_finite_differences_reformer_base() {
    let err = gradcheck(Variant::ReformerBase);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradients_match_finite_differences_reformer_fast() {
    let err = gradcheck(Variant::ReformerFast);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradients_match_finite_differences_transformer() {
    let err = gradcheck(Variant::Transformer);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn prenet_runs_once_per_decoded_sentence() {
    let model = Model::<f32>::init(config(Variant::ReformerFast, 8, 2, 11), 3).unwrap();
    let trace = greedy_trace(&model, &[4, 5, 6, 7], 9).unwrap();
    assert!(!trace.step_logits.is_empty());
    assert_eq!(model.prenet_calls(), 1);
    greedy_trace(&model, &[4, 5], 9).unwrap();
    assert_eq!(model.prenet_calls(), 2);
}

#[test]
fn prenet_with_zero_layers_is_valid() {
    let mut cfg = config(Variant::ReformerFast, 8, 1, 11);
    cfg.prenet_layers = 0;
    let model = Model::<f64>::init(cfg, 3).unwrap();
    let logits = model.logits(&[4, 5, 2], &[BOS, 4]).unwrap();
    assert_eq!(logits.shape(), &[2, 11]);
}

#[test]
fn out_of_range_ids_are_rejected() {
    let model = Model::<f64>::init(config(Variant::ReformerBase, 8, 1, 11), 3).unwrap();
    assert!(model.logits(&[4, 11], &[BOS]).is_err());
    assert!(model.logits(&[], &[BOS]).is_err());
    assert!(model.logits(&[4], &[BOS, 12]).is_err());
}

fn random_model(r: &mut rand_chacha::ChaCha8Rng, variants: &[Variant]) -> Model<f64> {
    let variant = variants[r.random_range(0..variants.len())];
    let e = [8, 16][r.random_range(0..2)];
    let mut cfg = config(variant, e, r.random_range(1..3), 13);
    cfg.heads = [1, 2, 4][r.random_range(0..3)];
    Model::init(cfg, r.random()).unwrap()
}

fn random_ids(r: &mut rand_chacha::ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(4..vocab)).collect()
}

#[test]
fn future_target_tokens_do_not_affect_earlier_logits() {
    let mut r = rng(31);
    for _ in 0..20 {
        let model = random_model(&mut r, &Variant::ALL);
        let n = r.random_range(1..7);
        let src = source_ids(&random_ids(&mut r, n, 13));
        let t_len = r.random_range(2..8);
        let mut tgt = vec![BOS];
        tgt.extend(random_ids(&mut r, t_len - 1, 13));
        let t = r.random_range(0..t_len - 1);
        let mut changed = tgt.clone();
        for tok in &mut changed[t + 1..] {
            *tok = 4 + (*tok - 4 + 1 + r.random_range(0..8)) % 9;
        }
        let a = model.logits(&src, &tgt).unwrap();
        let b = model.logits(&src, &changed).unwrap();
        let v = 13;
        let diff = common::max_abs_diff(&a.to_f64_vec()[..(t + 1) * v], &b.to_f64_vec()[..(t + 1) * v]);
        assert!(diff < 1e-6, "{:?}: {diff}", model.config.variant);
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }
}

#[test]
fn cached_decoding_matches_full_reforward() {
    let mut r = rng(32);
    for _ in 0..12 {
        let model64 = random_model(&mut r, &Variant::ALL);
        let n = r.random_range(1..9);
        let src = random_ids(&mut r, n, 13);
        let a = greedy_trace(&model64, &src, 10).unwrap();
        let b = greedy_trace_uncached(&model64, &src, 10).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-10);
        }

        let model32: Model<f32> = model64.cast();
        let a = greedy_trace(&model32, &src, 10).unwrap();
        let b = greedy_trace_uncached(&model32, &src, 10).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-5);
        }
    }
}

/// Gradient norms of `logits[t]·probe` with respect to each embedding row
/// used by the source and by the target input.
fn connectivity(model: &Model<f64>, src: &[usize], tgt_in: &[usize], t: usize, probe: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let (arch, _) = model.bind(&tape).unwrap();
    let logits = model.forward(&arch, src, tgt_in, &mut ForwardCtx::eval()).unwrap();
    let v = probe.len();
    let row = logits.narrow(0, t, 1).unwrap().reshape(&[v]).unwrap();
    let loss = row.mul(tape.constant(Tensor::from_f64([v], probe).unwrap())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let e = model.config.embed_dim;
    let norms = |table: Tensor<f64>, ids: &[usize]| -> Vec<f64> {
        ids.iter()
            .map(|&id| table.data()[id * e..(id + 1) * e].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    };
    (norms(grads.wrt(arch.src_embed), src), norms(grads.wrt(arch.tgt_embed), tgt_in))
}

#[test]
fn one_reformer_layer_connects_every_source_and_past_target_position() {
    let mut r = rng(33);
    for variant in [Variant::ReformerBase, Variant::ReformerFast] {
        for _ in 0..5 {
            let mut cfg = config(variant, 8, 1, 16);
            cfg.prenet_layers = 0;
            let model = Model::<f64>::init(cfg, r.random()).unwrap();
            // Distinct ids so each embedding row belongs to one position.
            let src = vec![4, 5, 6, 7, 2];
            let tgt_in = vec![BOS, 8, 9, 10, 11];
            let probe = common::random_vec(&mut r, 16, 1.0);
            for t in 0..tgt_in.len() {
                let (gs, gt) = connectivity(&model, &src, &tgt_in, t, &probe);
                assert!(gs.iter().all(|&g| g > 1e-12), "{variant} t={t} src {gs:?}");
                for (j, &g) in gt.iter().enumerate() {
                    if j <= t {
                        assert!(g > 1e-12, "{variant} t={t} tgt {j}");
                    } else {
                        assert!(g < 1e-12, "{variant} t={t} future {j}");
                    }
                }
            }
        }
    }
}

#[test]
fn transformer_source_connectivity_runs_through_cross_attention() {
    let mut cfg = config(Variant::Transformer, 8, 1, 16);
    cfg.encoder_layers = 0;
    let mut model = Model::<f64>::init(cfg, 4).unwrap();
    let src = vec![4, 5, 6, 2];
    let tgt_in = vec![BOS, 8, 9];
    let probe = common::random_vec(&mut rng(34), 16, 1.0);
    let (gs, _) = connectivity(&model, &src, &tgt_in, 2, &probe);
    assert!(gs.iter().all(|&g| g > 1e-12));

    let w_o = model.params.get("decoder.0.cross_attn.w_o").unwrap().shape().to_vec();
    model.params.set_named("decoder.0.cross_attn.w_o", Tensor::zeros(w_o)).unwrap();
    let (gs, gt) = connectivity(&model, &src, &tgt_in, 2, &probe);
    assert!(gs.iter().all(|&g| g == 0.0), "{gs:?}");
    assert!(gt.iter().all(|&g| g > 1e-12));
}
