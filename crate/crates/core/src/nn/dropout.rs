use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Dropout rate plus the axes along which the keep-mask is shared.
///
/// Sharing along an axis means one Bernoulli draw covers every index of that
/// axis. On a `[S, T, e]` joint tensor, `shared_axes = [0]` is Dropout1d
/// along S and `[0, 1]` is Dropout2d (one draw per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub shared_axes: Vec<usize>,
}

impl DropoutSpec {
    pub fn new(rate: f64, shared_axes: &[usize]) -> Self {
        Self {
            rate,
            shared_axes: shared_axes.to_vec(),
        }
    }

    pub fn none() -> Self {
        Self::new(0.0, &[])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Samples a full-shape mask holding 0 or `1/(1−rate)`, constant along the
/// shared axes. Draws are taken in row-major order over the unshared axes.
pub fn dropout_mask<F: Scalar>(
    shape: &[usize],
    spec: &DropoutSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    spec.validate()?;
    if let Some(&bad) = spec.shared_axes.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::Config(format!(
            "dropout shared axis {bad} out of range for shape {shape:?}"
        )));
    }
    let draw_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(a, &n)| if spec.shared_axes.contains(&a) { 1 } else { n })
        .collect();
    let keep = 1.0 - spec.rate;
    let kept = F::from_f64_lossy(1.0 / keep);
    let draws: Vec<F> = (0..draw_shape.iter().product::<usize>())
        .map(|_| if rng.random::<f64>() < keep { kept } else { F::zero() })
        .collect();

    if shape.is_empty() {
        return Ok(Tensor::new(Vec::new(), draws)?);
    }
    // expand the draws with zero strides along the shared axes
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for a in (0..shape.len()).rev() {
        if draw_shape[a] != 1 {
            strides[a] = acc;
        }
        acc *= draw_shape[a];
    }
    let total: usize = shape.iter().product();
    let mut data = Vec::with_capacity(total);
    if total > 0 {
        let last = shape.len() - 1;
        let mut index = vec![0usize; shape.len()];
        let mut offset = 0;
        loop {
            data.extend((0..shape[last]).map(|j| draws[offset + j * strides[last]]));
            let mut a = last;
            loop {
                if a == 0 {
                    return Ok(Tensor::new(shape.to_vec(), data)?);
                }
                a -= 1;
                index[a] += 1;
                offset += strides[a];
                if index[a] < shape[a] {
                    break;
                }
                offset -= strides[a] * index[a];
                index[a] = 0;
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Applies structured dropout in training mode; the identity otherwise or
/// at rate 0.
pub fn structured_dropout<'t, F: Scalar>(
    x: Var<'t, F>,
    spec: &DropoutSpec,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var<'t, F>> {
    spec.validate()?;
    if spec.rate == 0.0 {
        return Ok(x);
    }
    let Some(rng) = ctx.rng() else {
        return Ok(x);
    };
    let mask = dropout_mask::<F>(&x.shape(), spec, rng)?;
    Ok(x.mul(x.tape().constant(mask))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn sample(shape: &[usize], axes: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_mask(shape, &DropoutSpec::new(0.3, axes), &mut rng).unwrap()
    }

    #[test]
    fn fully_shared_mask_is_constant_per_channel() {
        let m = sample(&[3, 4, 5], &[0, 1], 1);
        for s in 0..3 {
            for t in 0..4 {
                for c in 0..5 {
                    assert_eq!(m.at(&[s, t, c]), m.at(&[0, 0, c]));
                }
            }
        }
    }

    #[test]
    fn single_shared_axis_varies_elsewhere() {
        let m = sample(&[6, 7, 8], &[0], 2);
        for s in 0..6 {
            for t in 0..7 {
                for c in 0..8 {
                    assert_eq!(m.at(&[s, t, c]), m.at(&[0, t, c]));
                }
            }
        }
        let varies = (0..7).any(|t| (0..8).any(|c| m.at(&[0, t, c]) != m.at(&[0, 0, c])));
        assert!(varies);
    }

    #[test]
    fn rejects_bad_rates_and_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask::<f64>(&[2], &DropoutSpec::new(1.0, &[]), &mut rng).is_err());
        assert!(dropout_mask::<f64>(&[2], &DropoutSpec::new(-0.1, &[]), &mut rng).is_err());
        assert!(dropout_mask::<f64>(&[2], &DropoutSpec::new(0.1, &[1]), &mut rng).is_err());
    }

    #[test]
    fn eval_mode_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |ix| ix[1] as f64 + 0.5).unwrap());
        let y = structured_dropout(x, &DropoutSpec::new(0.5, &[]), &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn drop_rate_within_three_sigma() {
        let n = 100_000;
        let rate = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = dropout_mask::<f32>(&[4, 5, n], &DropoutSpec::new(rate, &[0, 1]), &mut rng).unwrap();
        let zeros = m.data()[..n].iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((zeros - n as f64 * rate).abs() < 3.0 * sigma, "{zeros}");
    }
}
