use super::Real;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output element accumulates its `k` products in ascending order, so
/// results are bitwise reproducible.
pub(crate) fn matmul_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) const GELU_COEF: f64 = 0.044715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let u = S::lit(SQRT_2_OVER_PI) * (x + S::lit(GELU_COEF) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(SQRT_2_OVER_PI);
    let a = S::lit(GELU_COEF);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0];
        let mut c = [0.0f32; 2];
        matmul_acc(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn transpose_rect() {
        let a = [1, 2, 3, 4, 5, 6].map(|v| v as f32);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
