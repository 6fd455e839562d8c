//! Loop-based reference implementations shared by the integration tests
//! and the acceptance suite. Everything here works on plain nested vectors
//! so it shares no code with the tensor engine.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reformer_core::nn::AttentionParams;
use reformer_core::tensor::{Tape, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &random_vec(rng, n, scale)).unwrap()
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let s = t.shape();
    let cols = *s.last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

/// `[S, T, e]` tensor as `x[s][t]`.
pub fn to_cube(t: &Tensor<f64>) -> Vec<Mat> {
    let s = t.shape();
    let (nt, e) = (s[1], s[2]);
    t.data().chunks(nt * e).map(|slab| slab.chunks(e).map(|r| r.to_vec()).collect()).collect()
}

pub fn matvec_rows(x: &Mat, w: &Mat) -> Mat {
    // x · w with w stored [in, out]
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum())
                .collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|x| x / z).collect()
}

/// Single-head attention; `allowed(i, j)` says whether query `i` may see key `j`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let p = softmax(&scores);
        let mut row = vec![0.0; v[0].len()];
        let mut full = vec![0.0; k.len()];
        for (&j, &pj) in keys.iter().zip(&p) {
            full[j] = pj;
            for (r, vv) in row.iter_mut().zip(&v[j]) {
                *r += pj * vv;
            }
        }
        out.push(row);
        weights.push(full);
    }
    (out, weights)
}

/// Plain-data attention projections.
#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub heads: usize,
}

impl AttnWeights {
    pub fn random(rng: &mut ChaCha8Rng, e: usize, heads: usize) -> Self {
        let scale = (3.0 / e as f64).sqrt();
        let mut m = || (0..e).map(|_| random_vec(rng, e, scale)).collect::<Mat>();
        Self { w_q: m(), w_k: m(), w_v: m(), w_o: m(), heads }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<f64>) -> AttentionParams<Var<'t, f64>> {
        let t = |m: &Mat| {
            let flat: Vec<f64> = m.iter().flatten().copied().collect();
            tape.leaf(Tensor::from_f64(vec![m.len(), m[0].len()], &flat).unwrap())
        };
        AttentionParams {
            w_q: t(&self.w_q),
            w_k: t(&self.w_k),
            w_v: t(&self.w_v),
            w_o: t(&self.w_o),
            heads: self.heads,
        }
    }
}

fn columns(x: &Mat, lo: usize, hi: usize) -> Mat {
    x.iter().map(|r| r[lo..hi].to_vec()).collect()
}

/// Multi-head attention with per-head weights `[h][n_q][n_k]`.
pub fn multi_head(xq: &Mat, xkv: &Mat, w: &AttnWeights, allowed: &dyn Fn(usize, usize) -> bool) -> (Mat, Vec<Mat>) {
    let e = xq[0].len();
    let d = e / w.heads;
    let (q, k, v) = (matvec_rows(xq, &w.w_q), matvec_rows(xkv, &w.w_k), matvec_rows(xkv, &w.w_v));
    let mut concat = vec![Vec::with_capacity(e); xq.len()];
    let mut all = Vec::new();
    for h in 0..w.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let (o, wts) = attention(&columns(&q, lo, hi), &columns(&k, lo, hi), &columns(&v, lo, hi), allowed);
        for (c, r) in concat.iter_mut().zip(o) {
            c.extend(r);
        }
        all.push(wts);
    }
    (matvec_rows(&concat, &w.w_o), all)
}

/// Separable attention computed slice by slice: along the target axis each
/// source row attends causally over its own target positions; along the
/// source axis each target column attends over all source positions.
pub fn separable_by_slices(x: &[Mat], target_axis: bool, w: &AttnWeights) -> Vec<Mat> {
    let (ns, nt) = (x.len(), x[0].len());
    let mut out = vec![vec![Vec::new(); nt]; ns];
    if target_axis {
        for s in 0..ns {
            let (o, _) = multi_head(&x[s], &x[s], w, &|i, j| j <= i);
            for t in 0..nt {
                out[s][t] = o[t].clone();
            }
        }
    } else {
        for t in 0..nt {
            let col: Mat = (0..ns).map(|s| x[s][t].clone()).collect();
            let (o, _) = multi_head(&col, &col, w, &|_, _| true);
            for s in 0..ns {
                out[s][t] = o[s].clone();
            }
        }
    }
    out
}

/// The same operation as one attention over all `S·T` positions with a
/// mask that only connects positions in the same slice.
pub fn separable_collapsed(x: &[Mat], target_axis: bool, w: &AttnWeights) -> Vec<Mat> {
    let (ns, nt) = (x.len(), x[0].len());
    let flat: Mat = x.iter().flatten().cloned().collect();
    let allowed = |i: usize, j: usize| {
        let (si, ti) = (i / nt, i % nt);
        let (sj, tj) = (j / nt, j % nt);
        if target_axis {
            si == sj && tj <= ti
        } else {
            ti == tj
        }
    };
    let (o, _) = multi_head(&flat, &flat, w, &allowed);
    o.chunks(nt).map(|c| c.to_vec()).collect::<Vec<_>>().into_iter().take(ns).collect()
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

/// `relu(x·W1 + b1)·W2 + b2` for one row.
pub fn ffn_row(x: &[f64], w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = (0..b1.len())
        .map(|j| (x.iter().zip(w1).map(|(a, r)| a * r[j]).sum::<f64>() + b1[j]).max(0.0))
        .collect();
    (0..b2.len()).map(|j| h.iter().zip(w2).map(|(a, r)| a * r[j]).sum::<f64>() + b2[j]).collect()
}

/// Reduction of `x[s][t]` (already pre-normed) into one vector per target
/// position: feature `i` is `Σ_s softmax_s(W_i·x_s)·x_s[i]`. Also returns
/// the weights `a[t][s][i]`.
pub fn reduce(x: &[Mat], w: &Mat) -> (Mat, Vec<Mat>) {
    let (ns, nt, e) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for t in 0..nt {
        let mut a_t = vec![vec![0.0; e]; ns];
        let mut row = vec![0.0; e];
        for i in 0..e {
            let logits: Vec<f64> = (0..ns)
                .map(|s| (0..e).map(|k| w[i][k] * x[s][t][k]).sum())
                .collect();
            let p = softmax(&logits);
            for s in 0..ns {
                a_t[s][i] = p[s];
                row[i] += p[s] * x[s][t][i];
            }
        }
        out.push(row);
        weights.push(a_t);
    }
    (out, weights)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sinusoidal encoding of position `p`.
pub fn position(p: usize, e: usize) -> Vec<f64> {
    (0..e)
        .map(|k| {
            let i = (k / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / e as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
