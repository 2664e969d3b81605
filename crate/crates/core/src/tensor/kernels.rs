//! Dense kernels shared by forward and backward rules.

use super::Real;

/// C += A * B with A: m x k, B: k x n, C: m x n, all row-major.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out = transpose(a) with a: m x n row-major.
pub fn transpose_into<T: Real>(a: &[T], m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) without overflow on either tail.
pub fn stable_softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_COEF: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let coef = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + coef * x * x * x)).tanh())
}

pub fn gelu_deriv<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let coef = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + coef * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = c * (T::one() + three * coef * x * x);
    half * (T::one() + t) + half * x * sech2 * d_inner
}

/// Softmax along one axis of an n-d tensor, max-shifted for stability.
/// The axis is addressed through (outer, axis_len, inner) strides.
pub fn softmax_fibers<T: Real>(data: &[T], outer: usize, axis_len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..axis_len {
                max = max.max(data[at(a)]);
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                let e = (data[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= sum;
            }
        }
    }
    out
}
