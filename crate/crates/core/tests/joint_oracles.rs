mod common;

use common::*;
use rand::Rng;
use reformer_core::joint::{
    build_joint_input, future_mask, reduce_heads, reduction, reduction_weights, separable_attention, Axis,
    ReductionParams,
};
use reformer_core::nn::{ForwardCtx, LayerNormParams};
use reformer_core::tensor::{Tape, Tensor};

fn cube_flat(c: &[Mat]) -> Vec<f64> {
    c.iter().flatten().flatten().copied().collect()
}

fn run_separable(x: &Tensor<f64>, axis: Axis, w: &AttnWeights) -> Vec<f64> {
    let tape = Tape::new();
    let p = w.bind(&tape);
    let t = x.shape()[1];
    let mask = future_mask::<f64>(t);
    let mask = (axis == Axis::Target).then_some(&mask);
    separable_attention(tape.constant(x.clone()), None, axis, &p, mask, &mut ForwardCtx::eval())
        .unwrap()
        .value()
        .to_f64_vec()
}

#[test]
fn separable_attention_equals_per_slice_attention() {
    let mut r = rng(21);
    for case in 0..50 {
        let (s, t) = (r.random_range(1..6), r.random_range(1..6));
        let (e, h) = [(4, 1), (4, 2), (6, 3), (8, 2)][case % 4];
        let axis = if case % 2 == 0 { Axis::Target } else { Axis::Source };
        let w = AttnWeights::random(&mut r, e, h);
        let x = random_tensor(&mut r, &[s, t, e], 1.0);
        let got = run_separable(&x, axis, &w);
        let want = cube_flat(&separable_by_slices(&to_cube(&x), axis == Axis::Target, &w));
        let err = max_abs_diff(&got, &want);
        assert!(err < 1e-10, "case {case} ({axis}, S={s}, T={t}): {err}");
    }
}

#[test]
fn separable_attention_equals_masked_collapsed_attention() {
    let mut r = rng(22);
    for s in 1..=4 {
        for t in 1..=4 {
            for axis in [Axis::Target, Axis::Source] {
                let w = AttnWeights::random(&mut r, 4, 2);
                let x = random_tensor(&mut r, &[s, t, 4], 1.0);
                let got = run_separable(&x, axis, &w);
                let want = cube_flat(&separable_collapsed(&to_cube(&x), axis == Axis::Target, &w));
                assert!(max_abs_diff(&got, &want) < 1e-10, "S={s} T={t} {axis}");
            }
        }
    }
}

#[test]
fn target_attention_requires_mask_and_source_attention_refuses_one() {
    let tape = Tape::new();
    let w = AttnWeights::random(&mut rng(1), 4, 2);
    let p = w.bind(&tape);
    let x = tape.constant(Tensor::<f64>::ones([2, 3, 4]));
    let mut ctx = ForwardCtx::eval();
    assert!(separable_attention(x, None, Axis::Target, &p, None, &mut ctx).is_err());
    let m = future_mask::<f64>(3);
    assert!(separable_attention(x, None, Axis::Source, &p, Some(&m), &mut ctx).is_err());
}

#[test]
fn joint_input_is_sum_of_positioned_embeddings() {
    let mut r = rng(23);
    let (s, t, e) = (3, 4, 6);
    let src = random_tensor(&mut r, &[s, e], 1.0);
    let tgt = random_tensor(&mut r, &[t, e], 1.0);
    let tape = Tape::new();
    let j = build_joint_input(tape.constant(src.clone()), tape.constant(tgt.clone()), 2, 0.5, &mut ForwardCtx::eval())
        .unwrap()
        .value
        .value();
    let (sm, tm) = (to_mat(&src), to_mat(&tgt));
    let mut want = Vec::new();
    for i in 0..s {
        for jj in 0..t {
            let (pi, pj) = (position(i, e), position(jj + 2, e));
            for k in 0..e {
                want.push((sm[i][k] + pi[k] + tm[jj][k] + pj[k]) * (e as f64).sqrt());
            }
        }
    }
    assert_eq!(j.shape(), &[s, t, e]);
    assert!(max_abs_diff(&j.to_f64_vec(), &want) < 1e-12);
}

fn ln_params<'t>(tape: &'t Tape<f64>, gain: &[f64], bias: &[f64]) -> LayerNormParams<reformer_core::tensor::Var<'t, f64>> {
    LayerNormParams {
        gain: tape.leaf(Tensor::from_f64([gain.len()], gain).unwrap()),
        bias: tape.leaf(Tensor::from_f64([bias.len()], bias).unwrap()),
    }
}

#[test]
fn reduction_weights_sum_to_one_per_head() {
    let mut r = rng(24);
    for _ in 0..10 {
        let (s, t, e) = (r.random_range(1..7), r.random_range(1..5), 6);
        let x = random_tensor(&mut r, &[t, s, e], 2.0);
        let w = random_tensor(&mut r, &[e, e], 1.0);
        let tape = Tape::new();
        let a = reduction_weights(tape.constant(x), tape.constant(w)).unwrap().value();
        for ti in 0..t {
            for i in 0..e {
                let total: f64 = (0..s).map(|si| a.at(&[ti, si, i])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_reduction_matrix_gives_column_mean() {
    let mut r = rng(25);
    let (t, e) = (3, 4);
    for s in [1, 2, 3, 4, 8] {
        let x = random_tensor(&mut r, &[t, s, e], 2.0);
        let tape = Tape::new();
        let got = reduce_heads(tape.constant(x.clone()), tape.constant(Tensor::zeros([e, e]))).unwrap().value();
        for ti in 0..t {
            for i in 0..e {
                let mean = (0..s).map(|si| x.at(&[ti, si, i])).sum::<f64>() / s as f64;
                let v = got.at(&[ti, i]);
                if s.is_power_of_two() {
                    assert_eq!(v, mean, "S={s}");
                } else {
                    assert!((v - mean).abs() < 1e-14, "S={s}");
                }
            }
        }
    }
}

#[test]
fn full_reduction_matches_loop_oracle() {
    let mut r = rng(26);
    for _ in 0..20 {
        let (s, t, e) = (r.random_range(1..6), r.random_range(1..6), 6);
        let x = random_tensor(&mut r, &[s, t, e], 2.0);
        let w = to_mat(&random_tensor(&mut r, &[e, e], 1.0));
        let (g1, b1) = (random_vec(&mut r, e, 1.5), random_vec(&mut r, e, 0.5));
        let (g2, b2) = (random_vec(&mut r, e, 1.5), random_vec(&mut r, e, 0.5));
        let tape = Tape::new();
        let p = ReductionParams {
            w: tape.leaf(Tensor::from_f64([e, e], &w.concat()).unwrap()),
            pre_norm: ln_params(&tape, &g1, &b1),
            post_norm: ln_params(&tape, &g2, &b2),
        };
        let got = reduction(tape.constant(x.clone()), &p).unwrap().value();
        assert_eq!(got.shape(), &[t, e]);

        let normed: Vec<Mat> = to_cube(&x)
            .iter()
            .map(|slab| slab.iter().map(|row| layer_norm(row, &g1, &b1)).collect())
            .collect();
        let (raw, weights) = reduce(&normed, &w);
        let want: Vec<f64> = raw.iter().flat_map(|row| layer_norm(row, &g2, &b2)).collect();
        assert!(max_abs_diff(&got.to_f64_vec(), &want) < 1e-10);
        for a_t in &weights {
            for i in 0..e {
                assert!(((0..s).map(|si| a_t[si][i]).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
