//! Reformer-base, Reformer-fast (PreNet + trunk) and the Transformer
//! baseline, built from one generic parameter layout.
//!
//! Canonical parameter order (also the checkpoint order):
//! `src_embed`, `tgt_embed`, then for reformer variants `prenet.*` (fast
//! only), `trunk.{i}.*` in execution order, `reduction.*`, `output.*`; for
//! the Transformer `encoder.{i}.*`, `encoder.norm`, `decoder.{i}.*`,
//! `decoder.norm`, `output.*`.

mod config;

pub use config::{ModelConfig, Variant};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::joint::{build_joint_input, reduction, run_trunk, AttentionDump, DecodeCache, ReductionParams, ReformerLayerParams};
use crate::nn::{
    ffn, multi_head_attention, sinusoidal_positions_from, structured_dropout, sublayer,
    AttentionParams, DropoutSpec, FfnParams, ForwardCtx, LayerNormParams,
};
use crate::params::{Binder, Init, Initializer, ParamSet, ParamSource, ShapeCollector, VarSource};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Self-attention + FFN layer used by the PreNet and the Transformer encoder.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T> {
    pub attn_norm: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> EncoderLayerParams<T> {
    fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(Self {
            attn_norm: LayerNormParams::build(src, &format!("{prefix}.attn_norm"), e)?,
            attn: AttentionParams::build(src, &format!("{prefix}.attn"), e, cfg.heads)?,
            ffn_norm: LayerNormParams::build(src, &format!("{prefix}.ffn_norm"), e)?,
            ffn: FfnParams::build(src, &format!("{prefix}.ffn"), e, cfg.ffn_mult)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams<T> {
    pub self_norm: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub cross_norm: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ffn_norm: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> DecoderLayerParams<T> {
    fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(Self {
            self_norm: LayerNormParams::build(src, &format!("{prefix}.self_norm"), e)?,
            self_attn: AttentionParams::build(src, &format!("{prefix}.self_attn"), e, cfg.heads)?,
            cross_norm: LayerNormParams::build(src, &format!("{prefix}.cross_norm"), e)?,
            cross_attn: AttentionParams::build(src, &format!("{prefix}.cross_attn"), e, cfg.heads)?,
            ffn_norm: LayerNormParams::build(src, &format!("{prefix}.ffn_norm"), e)?,
            ffn: FfnParams::build(src, &format!("{prefix}.ffn"), e, cfg.ffn_mult)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PrenetParams<T> {
    pub layers: Vec<EncoderLayerParams<T>>,
    pub final_norm: LayerNormParams<T>,
}

#[derive(Debug, Clone)]
pub struct ReformerParams<T> {
    pub prenet: Option<PrenetParams<T>>,
    pub trunk: Vec<ReformerLayerParams<T>>,
    pub reduction: ReductionParams<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerParams<T> {
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub encoder_norm: LayerNormParams<T>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub decoder_norm: LayerNormParams<T>,
}

#[derive(Debug, Clone)]
pub enum Body<T> {
    Reformer(ReformerParams<T>),
    Transformer(TransformerParams<T>),
}

/// Every parameter of a model, with `T` a tape variable, `()` or similar
/// depending on the [`ParamSource`] that built it.
#[derive(Debug, Clone)]
pub struct Architecture<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub body: Body<T>,
    pub out_w: T,
    pub out_b: T,
}

impl<T> Architecture<T> {
    pub fn build<S: ParamSource<Out = T>>(src: &mut S, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let embed_init = Init::Normal {
            std: (e as f64).powf(-0.5),
        };
        let src_embed = src.param("src_embed", &[cfg.src_vocab, e], embed_init)?;
        let tgt_embed = src.param("tgt_embed", &[cfg.tgt_vocab, e], embed_init)?;
        let body = match cfg.variant {
            Variant::ReformerBase | Variant::ReformerFast => {
                let prenet = if cfg.variant == Variant::ReformerFast {
                    let layers = (0..cfg.prenet_layers)
                        .map(|i| EncoderLayerParams::build(src, &format!("prenet.layers.{i}"), cfg))
                        .collect::<Result<_>>()?;
                    let final_norm = LayerNormParams::build(src, "prenet.final_norm", e)?;
                    Some(PrenetParams { layers, final_norm })
                } else {
                    None
                };
                let trunk = (0..cfg.layers)
                    .map(|i| ReformerLayerParams::build(src, &format!("trunk.{i}"), e, cfg.ffn_mult, cfg.heads))
                    .collect::<Result<_>>()?;
                let reduction = ReductionParams::build(src, "reduction", e)?;
                Body::Reformer(ReformerParams {
                    prenet,
                    trunk,
                    reduction,
                })
            }
            Variant::Transformer => {
                let encoder = (0..cfg.encoder_layers)
                    .map(|i| EncoderLayerParams::build(src, &format!("encoder.{i}"), cfg))
                    .collect::<Result<_>>()?;
                let encoder_norm = LayerNormParams::build(src, "encoder.norm", e)?;
                let decoder = (0..cfg.layers)
                    .map(|i| DecoderLayerParams::build(src, &format!("decoder.{i}"), cfg))
                    .collect::<Result<_>>()?;
                let decoder_norm = LayerNormParams::build(src, "decoder.norm", e)?;
                Body::Transformer(TransformerParams {
                    encoder,
                    encoder_norm,
                    decoder,
                    decoder_norm,
                })
            }
        };
        let out_w = src.param("output.w", &[e, cfg.tgt_vocab], crate::params::xavier(e, cfg.tgt_vocab))?;
        let out_b = src.param("output.b", &[cfg.tgt_vocab], Init::Zeros)?;
        Ok(Self {
            src_embed,
            tgt_embed,
            body,
            out_w,
            out_b,
        })
    }
}

/// Parameter names and shapes in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut collector = ShapeCollector::default();
    Architecture::build(&mut collector, cfg)?;
    Ok(collector.entries)
}

/// Parameter counts of a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    /// Trunk matrix parameters in units of `e²` by the closed formula.
    pub simplified: f64,
    /// Trunk matrix parameters counted from the constructed layout.
    pub trunk_matrices: usize,
    /// Every scalar of every parameter tensor.
    pub full: usize,
}

fn is_trunk_matrix(variant: Variant, name: &str, shape: &[usize]) -> bool {
    let prefixed = match variant {
        Variant::ReformerBase | Variant::ReformerFast => name.starts_with("trunk."),
        Variant::Transformer => name.starts_with("encoder.") || name.starts_with("decoder."),
    };
    prefixed && shape.len() == 2
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    let layout = param_layout(cfg)?;
    let size = |s: &Vec<usize>| s.iter().product::<usize>();
    Ok(ParamCount {
        simplified: cfg.simplified_params(),
        trunk_matrices: layout
            .iter()
            .filter(|(n, s)| is_trunk_matrix(cfg.variant, n, s))
            .map(|(_, s)| size(s))
            .sum(),
        full: layout.iter().map(|(_, s)| size(s)).sum(),
    })
}

/// Incremental decoding state of one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<F: Scalar> {
    /// Source representation: raw embeddings (reformer-base), PreNet output
    /// (reformer-fast) or encoder memory (Transformer); `[S, e]`.
    pub source: Tensor<F>,
    /// Per-layer inputs of decoded target positions.
    pub cache: DecodeCache<F>,
}

impl<F: Scalar> DecodeState<F> {
    pub fn position(&self) -> usize {
        self.cache.t_done()
    }
}

/// A configuration with its parameters.
#[derive(Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    prenet_calls: AtomicUsize,
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            prenet_calls: AtomicUsize::new(0),
        }
    }
}

fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid(format!("{side} sequence is empty")));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Invalid(format!(
            "{side} token id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// `(embed + pos)·√e` for rows starting at absolute position `offset`.
fn embed_scaled_positions<'t, F: Scalar>(emb: Var<'t, F>, offset: usize) -> Result<Var<'t, F>> {
    let s = emb.shape();
    let pos = sinusoidal_positions_from(offset, s[0], s[1])?;
    let x = emb.add(emb.tape().constant(pos))?;
    Ok(x.scale(F::from_usize(s[1]).unwrap().sqrt())?)
}

/// `embed·√e + pos` (Transformer convention).
fn embed_then_positions<'t, F: Scalar>(emb: Var<'t, F>, offset: usize) -> Result<Var<'t, F>> {
    let s = emb.shape();
    let pos = sinusoidal_positions_from(offset, s[0], s[1])?;
    let x = emb.scale(F::from_usize(s[1]).unwrap().sqrt())?;
    Ok(x.add(emb.tape().constant(pos))?)
}

fn encoder_stack<'t, F: Scalar>(
    mut x: Var<'t, F>,
    layers: &[EncoderLayerParams<Var<'t, F>>],
    final_norm: &LayerNormParams<Var<'t, F>>,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    let spec = DropoutSpec::new(dropout, &[]);
    for layer in layers {
        x = sublayer(x, &layer.attn_norm, &spec, ctx, |h, _| {
            Ok(multi_head_attention(h, h, &layer.attn, None)?.output)
        })?;
        x = sublayer(x, &layer.ffn_norm, &spec, ctx, |h, _| ffn(h, &layer.ffn))?;
    }
    final_norm.apply(x)
}

impl<F: Scalar> Model<F> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        Architecture::build(&mut init, &config)?;
        let params = init.finish();
        Ok(Self::from_parts_unchecked(config, params))
    }

    /// Wraps existing parameters, checking them against the layout.
    pub fn new(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let layout = param_layout(&config)?;
        if layout.len() != params.len() {
            return Err(Error::Params(format!(
                "layout has {} parameters, set has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (have_name, have)) in layout.iter().zip(params.iter()) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::Params(format!(
                    "expected `{name}` {shape:?}, found `{have_name}` {:?}",
                    have.shape()
                )));
            }
        }
        Ok(Self::from_parts_unchecked(config, params))
    }

    fn from_parts_unchecked(config: ModelConfig, params: ParamSet<F>) -> Self {
        Self {
            config,
            params,
            prenet_calls: AtomicUsize::new(0),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model::from_parts_unchecked(self.config.clone(), self.params.cast())
    }

    /// Number of PreNet evaluations since construction.
    pub fn prenet_calls(&self) -> usize {
        self.prenet_calls.load(Ordering::Relaxed)
    }

    /// Places the parameters on `tape`; returns the structured view and the
    /// leaves in canonical order.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Result<(Architecture<Var<'t, F>>, Vec<Var<'t, F>>)> {
        let mut binder = Binder::new(tape, &self.params);
        let arch = Architecture::build(&mut binder, &self.config)?;
        Ok((arch, binder.finish()?))
    }

    /// Structured view over caller-provided variables in canonical order,
    /// e.g. perturbed copies of the parameters.
    pub fn arch_from_vars<'t>(&self, vars: &[Var<'t, F>]) -> Result<Architecture<Var<'t, F>>> {
        let mut src = VarSource::new(vars);
        let arch = Architecture::build(&mut src, &self.config)?;
        src.finish()?;
        Ok(arch)
    }

    fn dropout(&self, ctx: &ForwardCtx<'_>) -> f64 {
        if ctx.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Source representation `[S, e]` fed to the target side.
    pub fn encode_source<'t>(
        &self,
        arch: &Architecture<Var<'t, F>>,
        src: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, F>> {
        check_ids(src, self.config.src_vocab, "source")?;
        let tape = arch.src_embed.tape();
        let emb = tape.gather(arch.src_embed, src)?;
        let dropout = self.dropout(ctx);
        match &arch.body {
            Body::Reformer(r) => match &r.prenet {
                None => Ok(emb),
                Some(prenet) => {
                    self.prenet_calls.fetch_add(1, Ordering::Relaxed);
                    let x = embed_scaled_positions(emb, 0)?;
                    let x = structured_dropout(x, &DropoutSpec::new(dropout, &[]), ctx)?;
                    encoder_stack(x, &prenet.layers, &prenet.final_norm, dropout, ctx)
                }
            },
            Body::Transformer(t) => {
                let x = embed_then_positions(emb, 0)?;
                let x = structured_dropout(x, &DropoutSpec::new(dropout, &[]), ctx)?;
                encoder_stack(x, &t.encoder, &t.encoder_norm, dropout, ctx)
            }
        }
    }

    /// Logits `[n, V]` for target inputs `tgt` at positions
    /// `offset..offset+n`, given the encoded source. With a cache, earlier
    /// positions come from it and it is extended.
    fn target_logits<'t>(
        &self,
        arch: &Architecture<Var<'t, F>>,
        source: Var<'t, F>,
        tgt: &[usize],
        cache: Option<&mut DecodeCache<F>>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, F>> {
        check_ids(tgt, self.config.tgt_vocab, "target")?;
        let tape = source.tape();
        let offset = cache.as_deref().map_or(0, |c| c.t_done());
        let emb = tape.gather(arch.tgt_embed, tgt)?;
        let dropout = self.dropout(ctx);
        let hidden = match &arch.body {
            Body::Reformer(r) => {
                let x = build_joint_input(source, emb, offset, dropout, ctx)?;
                let y = run_trunk(x.value, &r.trunk, cache, dropout, ctx)?;
                reduction(y, &r.reduction)?
            }
            Body::Transformer(t) => {
                let x = embed_then_positions(emb, offset)?;
                let x = structured_dropout(x, &DropoutSpec::new(dropout, &[]), ctx)?;
                let y = decoder_stack(x, source, &t.decoder, cache, dropout, ctx)?;
                t.decoder_norm.apply(y)?
            }
        };
        Ok(hidden.matmul(arch.out_w)?.add(arch.out_b)?)
    }

    /// Logits `[T, V]` for a BOS-prefixed target input.
    pub fn forward<'t>(
        &self,
        arch: &Architecture<Var<'t, F>>,
        src: &[usize],
        tgt_in: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, F>> {
        let source = self.encode_source(arch, src, ctx)?;
        self.target_logits(arch, source, tgt_in, None, ctx)
    }

    /// Evaluation-mode logits `[T, V]` on a private tape.
    pub fn logits(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let (arch, _) = self.bind(&tape)?;
        Ok(self.forward(&arch, src, tgt_in, &mut ForwardCtx::eval())?.value())
    }

    /// Evaluation-mode forward pass that records every trunk attention
    /// distribution. Only the reformer variants have joint attention.
    pub fn attention_dump(&self, src: &[usize], tgt_in: &[usize]) -> Result<AttentionDump> {
        if !self.config.variant.is_reformer() {
            return Err(Error::Invalid(format!(
                "attention dumps need a reformer variant, not {}",
                self.config.variant
            )));
        }
        let mut dump = AttentionDump::new();
        let tape = Tape::new();
        let (arch, _) = self.bind(&tape)?;
        self.forward(&arch, src, tgt_in, &mut ForwardCtx::eval().with_recorder(&mut dump))?;
        Ok(dump)
    }

    fn num_cached_layers(&self) -> usize {
        self.config.layers
    }

    /// Encodes the source once and returns an empty decoding state.
    pub fn start_decode(&self, src: &[usize]) -> Result<DecodeState<F>> {
        let tape = Tape::new();
        let (arch, _) = self.bind(&tape)?;
        let source = self.encode_source(&arch, src, &mut ForwardCtx::eval())?.value();
        Ok(DecodeState {
            source,
            cache: DecodeCache::new(self.num_cached_layers()),
        })
    }

    /// Feeds one target token and returns next-token logits `[V]`.
    pub fn decode_step(&self, state: &mut DecodeState<F>, token: usize) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let (arch, _) = self.bind(&tape)?;
        let source = tape.constant(state.source.clone());
        let logits = self.target_logits(&arch, source, &[token], Some(&mut state.cache), &mut ForwardCtx::eval())?;
        Ok(logits.value().reshape([self.config.tgt_vocab])?)
    }
}

fn decoder_stack<'t, F: Scalar>(
    mut x: Var<'t, F>,
    memory: Var<'t, F>,
    layers: &[DecoderLayerParams<Var<'t, F>>],
    cache: Option<&mut DecodeCache<F>>,
    dropout: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    let n = x.shape()[0];
    let tape = x.tape();
    let spec = DropoutSpec::new(dropout, &[]);
    // The shared cache type stores [S, t, e] columns; the decoder keeps its
    // inputs as a single [1, t, e] slab per layer.
    let mut past_inputs = Vec::with_capacity(layers.len());
    if let Some(c) = cache.as_deref() {
        if c.num_layers() != layers.len() {
            return Err(Error::Invalid(format!(
                "decode cache has {} layers, model has {}",
                c.num_layers(),
                layers.len()
            )));
        }
        for i in 0..layers.len() {
            past_inputs.push(c.layer(i).map(|t| t.reshape([t.shape()[1], t.shape()[2]])).transpose()?);
        }
    } else {
        past_inputs.resize(layers.len(), None);
    }
    let t0 = past_inputs.first().and_then(|p| p.as_ref()).map_or(0, |p| p.shape()[0]);
    let mask = crate::joint::future_mask_offset::<F>(n, t0);
    let mut new_inputs = Vec::with_capacity(layers.len());
    for (layer, past) in layers.iter().zip(&past_inputs) {
        new_inputs.push(x.value());
        let past_normed = past
            .as_ref()
            .map(|p| layer.self_norm.apply(tape.constant(p.clone())))
            .transpose()?;
        x = sublayer(x, &layer.self_norm, &spec, ctx, |h, _| {
            let kv = match past_normed {
                Some(pn) => tape.concat(&[pn, h], 0)?,
                None => h,
            };
            Ok(multi_head_attention(h, kv, &layer.self_attn, Some(&mask))?.output)
        })?;
        x = sublayer(x, &layer.cross_norm, &spec, ctx, |h, _| {
            Ok(multi_head_attention(h, memory, &layer.cross_attn, None)?.output)
        })?;
        x = sublayer(x, &layer.ffn_norm, &spec, ctx, |h, _| ffn(h, &layer.ffn))?;
    }
    if let Some(c) = cache {
        let columns = new_inputs
            .into_iter()
            .map(|t| {
                let (r, e) = (t.shape()[0], t.shape()[1]);
                t.reshape([1, r, e])
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        c.extend(columns)?;
    }
    Ok(x)
}
