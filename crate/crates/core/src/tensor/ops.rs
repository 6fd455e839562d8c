//! Value-level helpers shared by the tape primitives and by plain tensors.

use super::{Result, Scalar, TensorError};

pub(crate) fn concat_values<'a, F: Scalar + 'a>(
    parts: impl IntoIterator<Item = (&'a [usize], &'a [F])>,
    axis: usize,
) -> Result<(Vec<usize>, Vec<F>)> {
    let parts: Vec<_> = parts.into_iter().collect();
    let Some(&(first, _)) = parts.first() else {
        return Err(TensorError::Invalid("concat of zero tensors".into()));
    };
    if axis >= first.len() {
        return Err(TensorError::BadAxis {
            op: "concat",
            axis,
            rank: first.len(),
        });
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = 0;
    for &(shape, _) in &parts {
        let compatible = shape.len() == first.len()
            && shape
                .iter()
                .zip(first)
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        out_shape[axis] += shape[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for &(shape, values) in &parts {
            let run = shape[axis] * inner;
            data.extend_from_slice(&values[o * run..(o + 1) * run]);
        }
    }
    Ok((out_shape, data))
}

pub(crate) fn narrow_values<F: Scalar>(
    shape: &[usize],
    data: &[F],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<(Vec<usize>, Vec<F>)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            op: "narrow",
            axis,
            rank: shape.len(),
        });
    }
    if start + len > shape[axis] {
        return Err(TensorError::Invalid(format!(
            "narrow: range {start}..{} exceeds extent {} on axis {axis}",
            start + len,
            shape[axis]
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    Ok((out_shape, out))
}

/// Broadcast batch shape for a batched matmul: operands are right-aligned and
/// every leading extent must be equal or 1.
pub(crate) fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offsets (in units of whole matrices) of each output batch element
/// into an operand with batch shape `operand`, broadcast to `out`.
pub(crate) fn batch_offsets(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let padded: Vec<usize> = (0..rank)
        .map(|i| {
            if i + operand.len() >= rank {
                operand[i + operand.len() - rank]
            } else {
                1
            }
        })
        .collect();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}
