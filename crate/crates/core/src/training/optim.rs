use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = || params.tensors().map(|t| vec![F::zero(); t.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (F::from_f64_lossy(cfg.beta1), F::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    let (c1, c2) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
    let (lr, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensors().nth(i).expect("index checked above");
        if g.shape() != p.shape() {
            return Err(Error::Invalid(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.to_vec();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        params.set(i, Tensor::new(shape, data)?)?;
    }
    Ok(())
}

/// Linear warmup to `peak` over `warmup` steps, then `peak·√(warmup/step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    /// Learning rate of 1-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak;
        }
        let w = self.warmup as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            let data = g.data().iter().map(|&x| x * s).collect();
            *g = Tensor::new(g.shape().to_vec(), data)?;
        }
    }
    Ok(norm)
}
