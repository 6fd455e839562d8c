//! The joint `[S, T, e]` representation: input construction, separable
//! attention along one temporal axis, the reformer layer, the reduction head
//! and the incremental decoding cache.

mod dump;

pub use dump::{AttentionDump, AttentionRecord};

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{
    ffn, multi_head_attention, sinusoidal_positions, sinusoidal_positions_from, structured_dropout, sublayer,
    AttentionParams, DropoutSpec, FfnParams, ForwardCtx, LayerNormParams, MASK_BLOCKED,
};
use crate::params::{xavier, ParamSource};
use crate::tensor::{Scalar, Tensor, Var};

/// Temporal axis of the joint representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    /// Source axis (index 0); attention along it is source attention.
    Source,
    /// Target axis (index 1); attention along it is causally masked.
    Target,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Source => 0,
            Axis::Target => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Source => "source",
            Axis::Target => "target",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "S" | "s" => Ok(Axis::Source),
            "target" | "T" | "t" => Ok(Axis::Target),
            other => Err(Error::Invalid(format!(
                "unknown axis `{other}` (expected source or target)"
            ))),
        }
    }
}

/// A `[S, T, e]` value on the tape.
#[derive(Clone, Copy)]
pub struct JointTensor<'t, F: Scalar> {
    pub value: Var<'t, F>,
}

impl<'t, F: Scalar> JointTensor<'t, F> {
    pub fn new(value: Var<'t, F>) -> Result<Self> {
        let shape = value.shape();
        if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Invalid(format!(
                "joint representation must be [S>=1, T>=1, e], got {shape:?}"
            )));
        }
        Ok(Self { value })
    }

    pub fn src_len(&self) -> usize {
        self.value.shape()[0]
    }

    pub fn tgt_len(&self) -> usize {
        self.value.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.value.shape()[2]
    }
}

/// `(src[i] + tgt[j] + pos_i + pos_(j+tgt_offset))·√e` for every `(i, j)`,
/// followed by unshared dropout in training mode.
///
/// `tgt_offset` is the absolute position of the first target row, so that
/// incremental decoding can build one column at a time.
pub fn build_joint_input<'t, F: Scalar>(
    src_repr: Var<'t, F>,
    tgt_embed: Var<'t, F>,
    tgt_offset: usize,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<JointTensor<'t, F>> {
    let (ss, ts) = (src_repr.shape(), tgt_embed.shape());
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::Invalid(format!(
            "joint input needs [S, e] and [T, e] with matching e, got {ss:?} and {ts:?}"
        )));
    }
    let (s, t, e) = (ss[0], ts[0], ss[1]);
    let tape = src_repr.tape();
    let src = src_repr.add(tape.constant(sinusoidal_positions(s, e)?))?;
    let tgt = tgt_embed.add(tape.constant(sinusoidal_positions_from(tgt_offset, t, e)?))?;
    let cube = src.reshape(&[s, 1, e])?.repeat_axis(1, t)?.add(tgt)?;
    let cube = cube.scale(F::from_usize(e).unwrap().sqrt())?;
    let cube = structured_dropout(cube, &DropoutSpec::new(dropout, &[]), ctx)?;
    JointTensor::new(cube)
}

/// Additive `[T, T]` mask letting position `j` see positions `0..=j`.
pub fn future_mask<F: Scalar>(t: usize) -> Tensor<F> {
    future_mask_offset(t, 0)
}

/// Mask for `n` new queries at positions `t0..t0+n` over keys `0..t0+n`.
pub fn future_mask_offset<F: Scalar>(n: usize, t0: usize) -> Tensor<F> {
    let keys = t0 + n;
    let blocked = F::from_f64_lossy(MASK_BLOCKED);
    let data = (0..n)
        .flat_map(|q| (0..keys).map(move |k| if k <= t0 + q { F::zero() } else { blocked }))
        .collect();
    Tensor::from_parts(vec![n, keys], data)
}

fn record_heads<F: Scalar>(ctx: &mut ForwardCtx<'_>, axis: Axis, weights: &Tensor<F>) {
    let layer = ctx.layer();
    if let Some(dump) = ctx.recorder() {
        // weights: [batch, h, n_q, n_k]
        let s = weights.shape();
        let (b, h, nq, nk) = (s[0], s[1], s[2], s[3]);
        for head in 0..h {
            let mut data = Vec::with_capacity(b * nq * nk);
            for bi in 0..b {
                let start = (bi * h + head) * nq * nk;
                data.extend(weights.data()[start..start + nq * nk].iter().map(|v| v.as_f64()));
            }
            dump.push(AttentionRecord {
                layer,
                axis,
                head,
                shape: [b, nq, nk],
                data,
            });
        }
    }
}

/// Multi-head attention along one axis of the joint tensor, treating the
/// other axis as a batch.
///
/// `x_q` holds the query positions. `x_kv` (defaulting to `x_q`) supplies
/// keys and values; it may extend `x_q` along the target axis with earlier
/// cached columns. Target attention requires a mask; source attention takes
/// none.
pub fn separable_attention<'t, F: Scalar>(
    x_q: Var<'t, F>,
    x_kv: Option<Var<'t, F>>,
    axis: Axis,
    p: &AttentionParams<Var<'t, F>>,
    mask: Option<&Tensor<F>>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    let x_kv = x_kv.unwrap_or(x_q);
    if x_q.shape().len() != 3 || x_kv.shape().len() != 3 {
        return Err(Error::Invalid(format!(
            "separable attention expects [S, T, e], got {:?}",
            x_q.shape()
        )));
    }
    match axis {
        Axis::Target => {
            let mask = mask.ok_or_else(|| Error::Invalid("target attention requires the future mask".into()))?;
            let attn = multi_head_attention(x_q, x_kv, p, Some(mask))?;
            record_heads(ctx, axis, &attn.weights.value_ref());
            Ok(attn.output)
        }
        Axis::Source => {
            if mask.is_some() {
                return Err(Error::Invalid("source attention takes no mask".into()));
            }
            if x_kv.shape() != x_q.shape() {
                return Err(Error::Invalid("source attention keys must match the queries".into()));
            }
            let xt = x_q.permute(&[1, 0, 2])?;
            let attn = multi_head_attention(xt, xt, p, None)?;
            record_heads(ctx, axis, &attn.weights.value_ref());
            Ok(attn.output.permute(&[1, 0, 2])?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReformerLayerParams<T> {
    pub target_norm: LayerNormParams<T>,
    pub target_attn: AttentionParams<T>,
    pub ffn1_norm: LayerNormParams<T>,
    pub ffn1: FfnParams<T>,
    pub source_norm: LayerNormParams<T>,
    pub source_attn: AttentionParams<T>,
    pub ffn2_norm: LayerNormParams<T>,
    pub ffn2: FfnParams<T>,
}

impl<T> ReformerLayerParams<T> {
    pub fn build<S: ParamSource<Out = T>>(
        src: &mut S,
        prefix: &str,
        width: usize,
        ffn_mult: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            target_norm: LayerNormParams::build(src, &format!("{prefix}.target_norm"), width)?,
            target_attn: AttentionParams::build(src, &format!("{prefix}.target_attn"), width, heads)?,
            ffn1_norm: LayerNormParams::build(src, &format!("{prefix}.ffn1_norm"), width)?,
            ffn1: FfnParams::build(src, &format!("{prefix}.ffn1"), width, ffn_mult)?,
            source_norm: LayerNormParams::build(src, &format!("{prefix}.source_norm"), width)?,
            source_attn: AttentionParams::build(src, &format!("{prefix}.source_attn"), width, heads)?,
            ffn2_norm: LayerNormParams::build(src, &format!("{prefix}.ffn2_norm"), width)?,
            ffn2: FfnParams::build(src, &format!("{prefix}.ffn2"), width, ffn_mult)?,
        })
    }
}

/// Dropout applied to the four sublayer outputs of a reformer layer, in
/// execution order: target attention shares its mask along S, source
/// attention along T, and both FFNs along S and T.
pub fn layer_dropout_plan(rate: f64) -> [DropoutSpec; 4] {
    [
        DropoutSpec::new(rate, &[Axis::Source.index()]),
        DropoutSpec::new(rate, &[0, 1]),
        DropoutSpec::new(rate, &[Axis::Target.index()]),
        DropoutSpec::new(rate, &[0, 1]),
    ]
}

/// One reformer layer: target attention, FFN, source attention, FFN, each
/// wrapped as a pre-norm residual sublayer.
///
/// `past` holds this layer's inputs for target positions already processed
/// (`[S, t0, e]`); `x` then covers positions `t0..t0+n` only.
pub fn reformer_layer<'t, F: Scalar>(
    x: Var<'t, F>,
    past: Option<Var<'t, F>>,
    p: &ReformerLayerParams<Var<'t, F>>,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    let n = x.shape()[1];
    let t0 = past.map_or(0, |v| v.shape()[1]);
    let plan = layer_dropout_plan(dropout);
    let mask = future_mask_offset::<F>(n, t0);
    let past_normed = past.map(|v| p.target_norm.apply(v)).transpose()?;
    let tape = x.tape();

    let x = sublayer(x, &p.target_norm, &plan[0], ctx, |h, ctx| {
        let kv = match past_normed {
            Some(pn) => tape.concat(&[pn, h], 1)?,
            None => h,
        };
        separable_attention(h, Some(kv), Axis::Target, &p.target_attn, Some(&mask), ctx)
    })?;
    let x = sublayer(x, &p.ffn1_norm, &plan[1], ctx, |h, _| ffn(h, &p.ffn1))?;
    let x = sublayer(x, &p.source_norm, &plan[2], ctx, |h, ctx| {
        separable_attention(h, None, Axis::Source, &p.source_attn, None, ctx)
    })?;
    sublayer(x, &p.ffn2_norm, &plan[3], ctx, |h, _| ffn(h, &p.ffn2))
}

/// Per-layer inputs of every target column decoded so far.
#[derive(Debug, Clone)]
pub struct DecodeCache<F: Scalar> {
    layers: Vec<Option<Tensor<F>>>,
    t_done: usize,
}

impl<F: Scalar> DecodeCache<F> {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![None; num_layers],
            t_done: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn t_done(&self) -> usize {
        self.t_done
    }

    /// Stored `[S, t_done, e]` inputs of layer `i`, if any column is done.
    pub fn layer(&self, i: usize) -> Option<&Tensor<F>> {
        self.layers[i].as_ref()
    }

    /// Appends `n` new columns (`[S, n, e]`) to every layer.
    pub(crate) fn extend(&mut self, columns: Vec<Tensor<F>>) -> Result<()> {
        if columns.len() != self.layers.len() {
            return Err(Error::Invalid(format!(
                "decode cache has {} layers, got {} new columns",
                self.layers.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, |c| c.shape()[1]);
        for (slot, col) in self.layers.iter_mut().zip(columns) {
            *slot = Some(match slot.take() {
                Some(prev) => Tensor::concat(&[&prev, &col], 1)?,
                None => col,
            });
        }
        self.t_done += n;
        Ok(())
    }
}

/// Runs the trunk over `x` (`[S, n, e]`). With a cache, `x` holds target
/// positions `t_done..t_done+n`, earlier columns come from the cache, and the
/// cache is extended by the `n` new columns of every layer's input.
pub fn run_trunk<'t, F: Scalar>(
    x: Var<'t, F>,
    layers: &[ReformerLayerParams<Var<'t, F>>],
    cache: Option<&mut DecodeCache<F>>,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    if let Some(c) = cache.as_deref() {
        if c.num_layers() != layers.len() {
            return Err(Error::Invalid(format!(
                "decode cache has {} layers, model has {}",
                c.num_layers(),
                layers.len()
            )));
        }
    }
    let tape = x.tape();
    let mut x = x;
    let mut inputs = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        ctx.set_layer(i);
        let past = match cache.as_deref() {
            Some(c) => c.layers[i].as_ref().map(|t| tape.constant(t.clone())),
            None => None,
        };
        if cache.is_some() {
            inputs.push(x.value());
        }
        x = reformer_layer(x, past, layer, dropout, ctx)?;
    }
    if let Some(c) = cache {
        c.extend(inputs)?;
    }
    Ok(x)
}

/// Advances decoding by one target column (`[S, 1, e]`) and returns the
/// trunk output for that column.
pub fn step_decode<'t, F: Scalar>(
    cache: &mut DecodeCache<F>,
    new_column: Var<'t, F>,
    layers: &[ReformerLayerParams<Var<'t, F>>],
) -> Result<Var<'t, F>> {
    if new_column.shape().len() != 3 || new_column.shape()[1] != 1 {
        return Err(Error::Invalid(format!(
            "step_decode expects one [S, 1, e] column, got {:?}",
            new_column.shape()
        )));
    }
    run_trunk(new_column, layers, Some(cache), 0.0, &mut ForwardCtx::eval())
}

/// Reduction head. The pre-norm is the trunk's final layer norm.
#[derive(Debug, Clone)]
pub struct ReductionParams<T> {
    pub w: T,
    pub pre_norm: LayerNormParams<T>,
    pub post_norm: LayerNormParams<T>,
}

impl<T> ReductionParams<T> {
    pub fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            w: src.param(&format!("{prefix}.w"), &[width, width], xavier(width, width))?,
            pre_norm: LayerNormParams::build(src, &format!("{prefix}.pre_norm"), width)?,
            post_norm: LayerNormParams::build(src, &format!("{prefix}.post_norm"), width)?,
        })
    }
}

/// Softmax weights of every feature head over the source axis:
/// `[..., S, e]` where column `i` is `softmax_s(W_i · x_s)`.
pub fn reduction_weights<'t, F: Scalar>(x: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let r = x.shape().len();
    if r < 2 {
        return Err(Error::Invalid("reduction expects [..., S, e]".into()));
    }
    Ok(x.matmul_t(w)?.softmax(r - 2)?)
}

/// Raw reduction (before post-norm): feature `i` of the result is the
/// `softmax_s(W_i·x_s)`-weighted average of `x[:, i]`. `[..., S, e] → [..., e]`.
pub fn reduce_heads<'t, F: Scalar>(x: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let a = reduction_weights(x, w)?;
    let r = x.shape().len();
    Ok(a.mul(x)?.sum_axis(r - 2)?)
}

/// Full reduction of a `[S, T, e]` trunk output into `[T, e]`.
pub fn reduction<'t, F: Scalar>(x: Var<'t, F>, p: &ReductionParams<Var<'t, F>>) -> Result<Var<'t, F>> {
    let normed = p.pre_norm.apply(x)?.permute(&[1, 0, 2])?;
    let raw = reduce_heads(normed, p.w)?;
    p.post_norm.apply(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn future_mask_counts() {
        let m = future_mask::<f64>(4);
        for j in 0..4 {
            let allowed = (0..4).filter(|&k| m.at(&[j, k]) == 0.0).count();
            assert_eq!(allowed, j + 1);
        }
        assert_eq!(future_mask::<f64>(1).data(), &[0.0]);
    }

    #[test]
    fn offset_mask_matches_tail_rows() {
        let full = future_mask::<f64>(5);
        let tail = future_mask_offset::<f64>(2, 3);
        assert_eq!(tail.data(), &full.data()[15..]);
    }

    #[test]
    fn joint_input_of_zero_embeddings_is_scaled_positions() {
        let tape = Tape::new();
        let src = tape.leaf(Tensor::<f64>::zeros([3, 4]));
        let tgt = tape.leaf(Tensor::<f64>::zeros([2, 4]));
        let j = build_joint_input(src, tgt, 0, 0.1, &mut ForwardCtx::eval()).unwrap();
        let pos = sinusoidal_positions::<f64>(3, 4).unwrap();
        let v = j.value.value();
        for i in 0..3 {
            for t in 0..2 {
                for c in 0..4 {
                    let want = (pos.at(&[i, c]) + pos.at(&[t, c])) * 2.0;
                    assert!((v.at(&[i, t, c]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("source".parse::<Axis>().unwrap(), Axis::Source);
        assert_eq!("T".parse::<Axis>().unwrap(), Axis::Target);
        assert!("diagonal".parse::<Axis>().is_err());
    }
}
