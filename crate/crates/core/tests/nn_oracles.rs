mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use reformer_core::nn::{
    dropout_mask, ffn, multi_head_attention, scaled_dot_attention, sinusoidal_positions, DropoutSpec, FfnParams,
    MASK_BLOCKED,
};
use reformer_core::tensor::{Tape, Tensor};

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn mat_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_f64(vec![m.len(), m[0].len()], &flat(m)).unwrap()
}

#[test]
fn scaled_dot_attention_matches_loops() {
    let mut r = rng(11);
    for case in 0..30 {
        let (nq, nk, d) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..7));
        let q = to_mat(&random_tensor(&mut r, &[nq, d], 1.5));
        let k = to_mat(&random_tensor(&mut r, &[nk, d], 1.5));
        let v = to_mat(&random_tensor(&mut r, &[nk, d], 1.5));
        // Random mask that always leaves key 0 visible.
        let allowed: Vec<Vec<bool>> = (0..nq)
            .map(|_| (0..nk).map(|j| j == 0 || r.random_bool(0.6)).collect())
            .collect();
        let mask = Tensor::from_fn(vec![nq, nk], |ix| if allowed[ix[0]][ix[1]] { 0.0 } else { MASK_BLOCKED }).unwrap();

        let tape = Tape::new();
        let out = scaled_dot_attention(
            tape.constant(mat_tensor(&q)),
            tape.constant(mat_tensor(&k)),
            tape.constant(mat_tensor(&v)),
            Some(&mask),
        )
        .unwrap();
        let (want, want_w) = attention(&q, &k, &v, &|i, j| allowed[i][j]);
        let err = max_abs_diff(&out.output.value().to_f64_vec(), &flat(&want));
        let err_w = max_abs_diff(&out.weights.value().to_f64_vec(), &flat(&want_w));
        assert!(err < 1e-12 && err_w < 1e-12, "case {case}: {err} {err_w}");
    }
}

#[test]
fn fully_blocked_row_is_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones([2, 2]));
    let mask = Tensor::from_f64([2, 2], &[0.0, 0.0, MASK_BLOCKED, MASK_BLOCKED]).unwrap();
    assert!(scaled_dot_attention(x, x, x, Some(&mask)).is_err());
}

#[test]
fn multi_head_matches_per_head_loops() {
    let mut r = rng(12);
    for (e, h) in [(4, 1), (4, 2), (6, 3), (8, 4), (8, 2)] {
        let w = AttnWeights::random(&mut r, e, h);
        let (nq, nk) = (r.random_range(1..6), r.random_range(1..6));
        let xq = to_mat(&random_tensor(&mut r, &[nq, e], 1.0));
        let xkv = to_mat(&random_tensor(&mut r, &[nk, e], 1.0));
        let tape = Tape::new();
        let p = w.bind(&tape);
        let out = multi_head_attention(tape.constant(mat_tensor(&xq)), tape.constant(mat_tensor(&xkv)), &p, None).unwrap();
        let (want, heads) = multi_head(&xq, &xkv, &w, &|_, _| true);
        assert!(max_abs_diff(&out.output.value().to_f64_vec(), &flat(&want)) < 1e-12);
        let got_w = out.weights.value();
        assert_eq!(got_w.shape(), &[h, nq, nk]);
        let want_w: Vec<f64> = heads.iter().flat_map(flat).collect();
        assert!(max_abs_diff(&got_w.to_f64_vec(), &want_w) < 1e-12);
    }
}

#[test]
fn multi_head_rejects_indivisible_width() {
    let tape = Tape::new();
    let w = AttnWeights::random(&mut rng(1), 6, 4);
    let p = w.bind(&tape);
    let x = tape.constant(Tensor::<f64>::ones([2, 6]));
    assert!(multi_head_attention(x, x, &p, None).is_err());
}

#[test]
fn ffn_matches_row_loop() {
    let mut r = rng(13);
    let (e, mult, n) = (6, 3, 4);
    let w1 = to_mat(&random_tensor(&mut r, &[e, e * mult], 0.8));
    let b1 = random_vec(&mut r, e * mult, 0.5);
    let w2 = to_mat(&random_tensor(&mut r, &[e * mult, e], 0.8));
    let b2 = random_vec(&mut r, e, 0.5);
    let x = random_tensor(&mut r, &[2, n, e], 1.0);
    let tape = Tape::new();
    let p = FfnParams {
        w1: tape.leaf(mat_tensor(&w1)),
        b1: tape.leaf(Tensor::from_f64([e * mult], &b1).unwrap()),
        w2: tape.leaf(mat_tensor(&w2)),
        b2: tape.leaf(Tensor::from_f64([e], &b2).unwrap()),
    };
    let got = ffn(tape.constant(x.clone()), &p).unwrap().value();
    let want: Vec<f64> = to_mat(&x).iter().flat_map(|row| ffn_row(row, &w1, &b1, &w2, &b2)).collect();
    assert!(max_abs_diff(&got.to_f64_vec(), &want) < 1e-12);
}

#[test]
fn layer_norm_matches_loop() {
    let mut r = rng(14);
    let x = random_tensor(&mut r, &[3, 5], 2.0);
    let gain = random_vec(&mut r, 5, 1.0);
    let bias = random_vec(&mut r, 5, 1.0);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .layer_norm(
            tape.constant(Tensor::from_f64([5], &gain).unwrap()),
            tape.constant(Tensor::from_f64([5], &bias).unwrap()),
        )
        .unwrap()
        .value();
    let want: Vec<f64> = to_mat(&x).iter().flat_map(|row| layer_norm(row, &gain, &bias)).collect();
    assert!(max_abs_diff(&y.to_f64_vec(), &want) < 1e-12);
}

#[test]
fn positions_match_closed_form() {
    let (n, e) = (13, 10);
    let got = sinusoidal_positions::<f64>(n, e).unwrap();
    let want: Vec<f64> = (0..n).flat_map(|p| position(p, e)).collect();
    assert!(max_abs_diff(&got.to_f64_vec(), &want) < 1e-12);
    assert!(sinusoidal_positions::<f64>(3, 5).is_err());
}

#[test]
fn dropout_masks_are_constant_along_shared_axes() {
    let mut r = rng(15);
    let shape = [5, 6, 7];
    for shared in [vec![0], vec![1], vec![0, 1], vec![]] {
        let m = dropout_mask::<f64>(&shape, &DropoutSpec::new(0.4, &shared), &mut r).unwrap();
        let mut varies = [false; 3];
        for s in 0..5 {
            for t in 0..6 {
                for c in 0..7 {
                    let v = m.at(&[s, t, c]);
                    assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
                    varies[0] |= v != m.at(&[0, t, c]);
                    varies[1] |= v != m.at(&[s, 0, c]);
                    varies[2] |= v != m.at(&[s, t, 0]);
                }
            }
        }
        for axis in 0..3 {
            assert_eq!(varies[axis], !shared.contains(&axis), "axis {axis} shared {shared:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn self_attention_is_permutation_equivariant(seed in 0u64..1000, n in 1usize..7) {
        let mut r = rng(seed);
        let e = 4;
        let w = AttnWeights::random(&mut r, e, 2);
        let x = to_mat(&random_tensor(&mut r, &[n, e], 1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let px: Mat = perm.iter().map(|&i| x[i].clone()).collect();

        let tape = Tape::new();
        let p = w.bind(&tape);
        let run = |m: &Mat| {
            let v = tape.constant(mat_tensor(m));
            to_mat(&multi_head_attention(v, v, &p, None).unwrap().output.value())
        };
        let y = run(&x);
        let py = run(&px);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!(max_abs_diff(&py[k], &y[i]) < 1e-12);
        }
    }
}
