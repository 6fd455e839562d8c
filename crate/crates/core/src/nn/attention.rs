use crate::error::{Error, Result};
use crate::params::{xavier, ParamSource};
use crate::tensor::{Scalar, Tensor, Var};

/// Additive mask value for a blocked attention position.
pub const MASK_BLOCKED: f64 = -1e9;

/// Projections of one multi-head attention block (no biases).
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub heads: usize,
}

impl<T> AttentionParams<T> {
    pub fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding width {width} is not divisible by {heads} heads"
            )));
        }
        let shape = [width, width];
        let init = xavier(width, width);
        Ok(Self {
            w_q: src.param(&format!("{prefix}.w_q"), &shape, init)?,
            w_k: src.param(&format!("{prefix}.w_k"), &shape, init)?,
            w_v: src.param(&format!("{prefix}.w_v"), &shape, init)?,
            w_o: src.param(&format!("{prefix}.w_o"), &shape, init)?,
            heads,
        })
    }
}

pub struct AttentionOutput<'t, F: Scalar> {
    pub output: Var<'t, F>,
    /// Post-softmax weights `[..., n_q, n_k]` (with a head axis before
    /// `n_q` for multi-head attention).
    pub weights: Var<'t, F>,
}

fn check_mask<F: Scalar>(mask: &Tensor<F>, n_q: usize, n_k: usize) -> Result<()> {
    let shape = mask.shape();
    if shape.len() < 2 || shape[shape.len() - 2..] != [n_q, n_k] {
        return Err(Error::Invalid(format!(
            "attention mask {shape:?} does not end in [{n_q}, {n_k}]"
        )));
    }
    let blocked = F::from_f64_lossy(MASK_BLOCKED / 2.0);
    if n_k > 0 {
        for row in mask.data().chunks(n_k) {
            if row.iter().all(|&m| m <= blocked) {
                return Err(Error::Invalid(
                    "attention mask blocks every key of some query".into(),
                ));
            }
        }
    }
    Ok(())
}

/// `softmax(q·kᵀ/√d + mask)·v` where `d` is the last extent of `q`.
pub fn scaled_dot_attention<'t, F: Scalar>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    mask: Option<&Tensor<F>>,
) -> Result<AttentionOutput<'t, F>> {
    let qs = q.shape();
    let ks = k.shape();
    let d = *qs.last().ok_or_else(|| Error::Invalid("attention on a scalar".into()))?;
    let n_q = qs[qs.len() - 2];
    let n_k = ks[ks.len() - 2];
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut scores = q.matmul_t(k)?.scale(scale)?;
    if let Some(mask) = mask {
        check_mask(mask, n_q, n_k)?;
        scores = scores.add(q.tape().constant(mask.clone()))?;
    }
    let weights = scores.softmax(qs.len() - 1)?;
    let output = weights.matmul(v)?;
    Ok(AttentionOutput { output, weights })
}

/// Splits `[..., n, e]` into `[..., h, n, e/h]`.
fn split_heads<'t, F: Scalar>(x: Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let r = shape.len();
    let (n, e) = (shape[r - 2], shape[r - 1]);
    let mut split = shape[..r - 2].to_vec();
    split.extend([n, heads, e / heads]);
    Ok(x.reshape(&split)?.transpose(r - 2, r - 1)?)
}

fn merge_heads<'t, F: Scalar>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let r = shape.len();
    let (h, n, d) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let mut merged = shape[..r - 3].to_vec();
    merged.extend([n, h * d]);
    Ok(x.transpose(r - 3, r - 2)?.reshape(&merged)?)
}

/// Multi-head attention of queries from `x_q` over keys/values from `x_kv`.
///
/// Each head attends with width `e/h` and scaling `1/√(e/h)`; the mask
/// (`[n_q, n_k]` or any batch-suffix-compatible shape) is shared by all heads.
pub fn multi_head_attention<'t, F: Scalar>(
    x_q: Var<'t, F>,
    x_kv: Var<'t, F>,
    p: &AttentionParams<Var<'t, F>>,
    mask: Option<&Tensor<F>>,
) -> Result<AttentionOutput<'t, F>> {
    let e = *x_q.shape().last().unwrap_or(&0);
    if p.heads == 0 || !e.is_multiple_of(p.heads) {
        return Err(Error::Config(format!(
            "embedding width {e} is not divisible by {} heads",
            p.heads
        )));
    }
    let q = split_heads(x_q.matmul(p.w_q)?, p.heads)?;
    let k = split_heads(x_kv.matmul(p.w_k)?, p.heads)?;
    let v = split_heads(x_kv.matmul(p.w_v)?, p.heads)?;
    let attn = scaled_dot_attention(q, k, v, mask)?;
    let output = merge_heads(attn.output)?.matmul(p.w_o)?;
    Ok(AttentionOutput {
        output,
        weights: attn.weights,
    })
}
