use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal position table `[n, e]`: `sin(p/10000^(2i/e))` at column `2i`
/// and `cos` of the same angle at `2i+1`.
pub fn sinusoidal_positions<F: Scalar>(n: usize, e: usize) -> Result<Tensor<F>> {
    sinusoidal_positions_from(0, n, e)
}

/// Rows `start..start+n` of the sinusoidal table.
pub fn sinusoidal_positions_from<F: Scalar>(start: usize, n: usize, e: usize) -> Result<Tensor<F>> {
    if !e.is_multiple_of(2) {
        return Err(Error::Config(format!("position width must be even, got {e}")));
    }
    let mut data = Vec::with_capacity(n * e);
    for p in start..start + n {
        for i in 0..e / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / e as f64);
            data.push(F::from_f64_lossy(angle.sin()));
            data.push(F::from_f64_lossy(angle.cos()));
        }
    }
    Ok(Tensor::new(vec![n, e], data)?)
}
