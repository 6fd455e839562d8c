use crate::error::Result;
use crate::params::{xavier, Init, ParamSource};
use crate::tensor::{Scalar, Var};

/// Two-layer ReLU feed-forward block with hidden width `w·e`.
#[derive(Debug, Clone)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> FfnParams<T> {
    pub fn build<S: ParamSource<Out = T>>(src: &mut S, prefix: &str, width: usize, mult: usize) -> Result<Self> {
        let hidden = width * mult;
        Ok(Self {
            w1: src.param(&format!("{prefix}.w1"), &[width, hidden], xavier(width, hidden))?,
            b1: src.param(&format!("{prefix}.b1"), &[hidden], Init::Zeros)?,
            w2: src.param(&format!("{prefix}.w2"), &[hidden, width], xavier(hidden, width))?,
            b2: src.param(&format!("{prefix}.b2"), &[width], Init::Zeros)?,
        })
    }
}

/// `max(0, x·W₁ + b₁)·W₂ + b₂` over every leading position.
pub fn ffn<'t, F: Scalar>(x: Var<'t, F>, p: &FfnParams<Var<'t, F>>) -> Result<Var<'t, F>> {
    let hidden = x.matmul(p.w1)?.add(p.b1)?.relu()?;
    Ok(hidden.matmul(p.w2)?.add(p.b2)?)
}
