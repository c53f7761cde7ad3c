//! Dense linear-algebra helpers on top of `faer`.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Mat, MatRef};

/// Column `j` as a contiguous slice (owned matrices are column-major).
fn column(a: MatRef<'_, f64>, j: usize) -> std::borrow::Cow<'_, [f64]> {
    match a.col(j).try_as_col_major() {
        Some(c) => std::borrow::Cow::Borrowed(c.as_slice()),
        None => std::borrow::Cow::Owned(a.col(j).iter().copied().collect()),
    }
}

/// `y = A x` for a column slice.
pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut y = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = column(a, j);
        y.iter_mut().zip(col.iter()).for_each(|(yi, c)| *yi += c * xj);
    }
    y
}

/// `y = Aᵀ x` for a column slice.
pub fn matvec_t(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.nrows(), x.len());
    (0..a.ncols()).map(|j| column(a, j).iter().zip(x).map(|(c, xi)| c * xi).sum()).collect()
}

/// Veltkamp split `a = hi + lo` with 26-bit halves.
#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = 134_217_729.0 * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// `b − A x` with compensated dot products (twice-working-precision accumulation).
pub fn residual_compensated(a: MatRef<'_, f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    assert_eq!(a.nrows(), b.len());
    let n = a.nrows();
    let mut hi: Vec<f64> = b.to_vec();
    let mut lo = vec![0.0; n];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = column(a, j);
        let y = -xj;
        let (yh, yl) = split(y);
        for ((h, l), &c) in hi.iter_mut().zip(lo.iter_mut()).zip(col.iter()) {
            // Dekker product and Knuth sum.
            let p = c * y;
            let (ch, cl) = split(c);
            let ep = cl * yl - (((p - ch * yh) - cl * yh) - ch * yl);
            let s = *h + p;
            let z = s - *h;
            let es = (*h - (s - z)) + (p - z);
            *h = s;
            *l += ep + es;
        }
    }
    hi.iter().zip(&lo).map(|(h, l)| h + l).collect()
}

pub fn solve(lu: &PartialPivLu<f64>, b: &[f64]) -> Vec<f64> {
    let mut m = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    lu.solve_in_place(m.as_mut());
    m.col_as_slice(0).to_vec()
}

pub fn solve_transpose(lu: &PartialPivLu<f64>, b: &[f64]) -> Vec<f64> {
    let mut m = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    lu.solve_transpose_in_place(m.as_mut());
    m.col_as_slice(0).to_vec()
}

pub fn norm1(a: MatRef<'_, f64>) -> f64 {
    (0..a.ncols())
        .map(|j| column(a, j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Hager–Higham estimate of the 1-norm condition number from an LU factorization.
pub fn cond1_estimate(a: MatRef<'_, f64>, lu: &PartialPivLu<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let mut x = vec![1.0 / n as f64; n];
    let mut est = 0.0;
    let mut last = usize::MAX;
    for _ in 0..5 {
        let y = solve(lu, &x);
        if y.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        est = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi: Vec<f64> = y.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
        let z = solve_transpose(lu, &xi);
        let (j, zmax) = z
            .iter()
            .enumerate()
            .fold((0, 0.0), |(jm, m), (j, v)| if v.abs() > m { (j, v.abs()) } else { (jm, m) });
        let zx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        if zmax <= zx || j == last {
            break;
        }
        last = j;
        x.iter_mut().for_each(|v| *v = 0.0);
        x[j] = 1.0;
    }
    // Alternating test vector guards against the estimator's blind spots.
    let alt: Vec<f64> = (0..n)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (1.0 + i as f64 / (n.max(2) - 1) as f64)
        })
        .collect();
    let y = solve(lu, &alt);
    let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
    norm1(a) * est.max(alt_est)
}

/// Spectral condition number `σ_max / σ_min`.
pub fn cond2(a: MatRef<'_, f64>) -> f64 {
    match a.singular_values() {
        Ok(s) if !s.is_empty() => {
            let max = s.iter().cloned().fold(0.0, f64::max);
            let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
            if min == 0.0 {
                f64::INFINITY
            } else {
                max / min
            }
        }
        _ => f64::INFINITY,
    }
}

/// Orthonormal basis of the null space of a full-row-rank `m × n` matrix (`n − m` columns).
pub fn null_space(a: MatRef<'_, f64>) -> Option<Mat<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    let svd = a.svd().ok()?;
    let v = svd.V();
    Some(Mat::from_fn(n, n - m, |i, j| v[(i, m + j)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cond_estimates_agree_on_diagonal() {
        let a = Mat::from_fn(5, 5, |i, j| if i == j { 10f64.powi(i as i32) } else { 0.0 });
        let lu = a.partial_piv_lu();
        assert!((cond1_estimate(a.as_ref(), &lu) - 1e4).abs() < 1e-8);
        assert!((cond2(a.as_ref()) - 1e4).abs() < 1e-8);
    }

    #[test]
    fn null_space_is_annihilated() {
        let a = Mat::from_fn(2, 5, |i, j| ((i + 1) * (j + 2)) as f64 + if i == j { 1.0 } else { 0.0 });
        let z = null_space(a.as_ref()).unwrap();
        assert_eq!(z.ncols(), 3);
        let az = &a * &z;
        for i in 0..2 {
            for j in 0..3 {
                assert!(az[(i, j)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compensated_residual_survives_cancellation() {
        let a = Mat::from_fn(1, 3, |_, j| [1e16, 1.0, -1e16][j]);
        let r = residual_compensated(a.as_ref(), &[1.0, 1.0, 1.0], &[0.0]);
        assert_eq!(r, vec![-1.0]);
    }

    #[test]
    fn matvec_transpose_duality() {
        let a = Mat::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.5 - j as f64);
        let x = [1.0, -2.0, 0.5, 3.0];
        let y = [0.3, 0.1, -1.0];
        let l: f64 = matvec(a.as_ref(), &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let r: f64 = matvec_t(a.as_ref(), &y).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((l - r).abs() < 1e-13);
    }
}
