use super::Scalar;

/// Dense matrix product on row-major slices.
///
/// Computes `C = op(A)·op(B)` (or `C += ...` when `accumulate`), where
/// `op(A)` is `m×k` and `op(B)` is `k×n`. With `a_trans` the slice `a` holds
/// the `k×m` matrix `Aᵀ`; likewise `b_trans` means `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_trans: bool,
    b: &[F],
    b_trans: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_trans, b, b_trans, c, accumulate);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths were checked above against the strides chosen here.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Products up to this many multiply-adds skip the packing kernel.
const SMALL_GEMM: usize = 8192;

#[allow(clippy::too_many_arguments)]
fn small_gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_trans: bool,
    b: &[F],
    b_trans: bool,
    c: &mut [F],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = F::zero());
    }
    let a_at = |i: usize, p: usize| if a_trans { a[p * m + i] } else { a[i * k + p] };
    if b_trans {
        for i in 0..m {
            for j in 0..n {
                let row = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for (p, &bv) in row.iter().enumerate() {
                    acc += a_at(i, p) * bv;
                }
                c[i * n + j] += acc;
            }
        }
    } else {
        for i in 0..m {
            let out = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_at(i, p);
                for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..len {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<F: Scalar>(
    y: &[F],
    dy: &[F],
    shape: &[usize],
    axis: usize,
    dx: &mut [F],
) {
    let (outer, len, inner) = split_at_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for j in 0..len {
                let ix = base + j * inner;
                dot += dy[ix] * y[ix];
            }
            for j in 0..len {
                let ix = base + j * inner;
                dx[ix] += y[ix] * (dy[ix] - dot);
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * shape[ax + 1];
    }
    s
}

/// Gathers `x` (of shape `shape`) into the axis order `perm`.
pub(crate) fn permute_forward<F: Scalar>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, x.to_vec());
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        // innermost axis as a strided run
        let stride = src_strides[last];
        for j in 0..out_shape[last] {
            out.push(x[offset + j * stride]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
