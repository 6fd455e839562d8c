//! Building blocks shared by the Transformer baseline, the PreNet and the
//! joint-representation trunk.

mod attention;
mod dropout;
mod ffn;
mod position;

use rand_chacha::ChaCha8Rng;

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionOutput, AttentionParams, MASK_BLOCKED};
pub use dropout::{dropout_mask, structured_dropout, DropoutSpec};
pub use ffn::{ffn, FfnParams};
pub use position::{sinusoidal_positions, sinusoidal_positions_from};

use crate::error::{Error, Result};
use crate::joint::AttentionDump;
use crate::params::{Init, ParamSource};
use crate::tensor::{Scalar, Var};

/// Per-forward state: dropout randomness (present only in training mode)
/// and an optional attention recorder.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    recorder: Option<&'a mut AttentionDump>,
    layer: usize,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            rng: None,
            recorder: None,
            layer: 0,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            recorder: None,
            layer: 0,
        }
    }

    pub fn with_recorder(mut self, recorder: &'a mut AttentionDump) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    pub(crate) fn recorder(&mut self) -> Option<&mut AttentionDump> {
        self.recorder.as_deref_mut()
    }

    pub(crate) fn layer(&self) -> usize {
        self.layer
    }

    pub(crate) fn set_layer(&mut self, layer: usize) {
        self.layer = layer;
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    pub fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: src.param(&format!("{prefix}.gain"), &[width], Init::Ones)?,
            bias: src.param(&format!("{prefix}.bias"), &[width], Init::Zeros)?,
        })
    }
}

impl<'t, F: Scalar> LayerNormParams<Var<'t, F>> {
    pub fn apply(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(x.layer_norm(self.gain, self.bias)?)
    }
}

/// Pre-norm residual wrapper: `x + dropout(block(layer_norm(x)))`.
pub fn sublayer<'t, F, B>(
    x: Var<'t, F>,
    norm: &LayerNormParams<Var<'t, F>>,
    dropout: &DropoutSpec,
    ctx: &mut ForwardCtx<'_>,
    block: B,
) -> Result<Var<'t, F>>
where
    F: Scalar,
    B: FnOnce(Var<'t, F>, &mut ForwardCtx<'_>) -> Result<Var<'t, F>>,
{
    let normed = norm.apply(x)?;
    let out = block(normed, ctx)?;
    if out.shape() != x.shape() {
        return Err(Error::Invalid(format!(
            "sublayer block changed shape {:?} into {:?}",
            x.shape(),
            out.shape()
        )));
    }
    let out = structured_dropout(out, dropout, ctx)?;
    Ok(out.add(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn norm<'t>(tape: &'t Tape<f64>, e: usize) -> LayerNormParams<Var<'t, f64>> {
        LayerNormParams {
            gain: tape.leaf(Tensor::ones([e])),
            bias: tape.leaf(Tensor::zeros([e])),
        }
    }

    fn input(tape: &Tape<f64>) -> Var<'_, f64> {
        tape.leaf(Tensor::from_fn([3, 4], |ix| ((ix[0] * 4 + ix[1]) as f64 * 0.77).sin()).unwrap())
    }

    #[test]
    fn zero_block_is_identity_residual() {
        let tape = Tape::new();
        let x = input(&tape);
        let n = norm(&tape, 4);
        let y = sublayer(x, &n, &DropoutSpec::none(), &mut ForwardCtx::eval(), |h, _| Ok(h.scale(0.0)?)).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn identity_block_adds_normalized_input() {
        let tape = Tape::new();
        let x = input(&tape);
        let n = norm(&tape, 4);
        let y = sublayer(x, &n, &DropoutSpec::none(), &mut ForwardCtx::eval(), |h, _| Ok(h)).unwrap();
        let ln = n.apply(x).unwrap().value();
        for ((a, b), c) in y.value().data().iter().zip(x.value().data()).zip(ln.data()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn rate_zero_dropout_matches_bypass_bit_exactly() {
        let tape = Tape::new();
        let x = input(&tape);
        let n = norm(&tape, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DropoutSpec::new(0.0, &[0]);
        let with = sublayer(x, &n, &spec, &mut ForwardCtx::train(&mut rng), |h, _| Ok(h.scale(2.5)?)).unwrap();
        let without = sublayer(x, &n, &DropoutSpec::none(), &mut ForwardCtx::eval(), |h, _| Ok(h.scale(2.5)?)).unwrap();
        assert_eq!(with.value(), without.value());
    }

    #[test]
    fn shape_changing_block_is_rejected() {
        let tape = Tape::new();
        let x = input(&tape);
        let n = norm(&tape, 4);
        let err = sublayer(x, &n, &DropoutSpec::none(), &mut ForwardCtx::eval(), |h, _| Ok(h.sum_axis(0)?));
        assert!(err.is_err());
    }
}
