use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Per-row weights giving the mean over non-padding positions.
fn mean_weights<F: Scalar>(pad_mask: &[bool], denominator: usize) -> Vec<F> {
    let w = F::one() / F::from_usize(denominator).unwrap();
    pad_mask.iter().map(|&pad| if pad { F::zero() } else { w }).collect()
}

/// Mean cross-entropy (nats/token) of `logits [T, V]` against `gold` over
/// positions where `pad_mask` is false.
pub fn cross_entropy_loss<'t, F: Scalar>(logits: Var<'t, F>, gold: &[usize], pad_mask: &[bool]) -> Result<Var<'t, F>> {
    let count = pad_mask.iter().filter(|&&p| !p).count();
    if count == 0 {
        return Err(Error::Invalid("every target position is padding".into()));
    }
    weighted_cross_entropy(logits, gold, &mean_weights(pad_mask, count), F::zero())
}

/// Summed cross-entropy with explicit per-row weights and label smoothing.
pub fn weighted_cross_entropy<'t, F: Scalar>(
    logits: Var<'t, F>,
    gold: &[usize],
    weights: &[F],
    smoothing: F,
) -> Result<Var<'t, F>> {
    Ok(logits.tape().cross_entropy(logits, gold, weights, smoothing)?)
}

/// Padding mask of a padded target row.
pub fn pad_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&t| t == PAD).collect()
}
