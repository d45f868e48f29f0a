//! Dense real linear-algebra kernel.
//!
//! Moore-Penrose and extended damped pseudoinverses (both through the SVD),
//! the determinant-based damping schedule and the singular-value norm bounds
//! of the damped pseudoinverse. Every function is pure.

use nalgebra::{DMatrix, DVector};

use crate::error::{PikError, Result};
use crate::svd::svd;

/// Damping schedule parameters: one `mu` per task and a shared exponent `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingSpec {
    pub mu: Vec<f64>,
    pub nu: u32,
}

impl DampingSpec {
    pub fn new(mu: Vec<f64>, nu: u32) -> Result<Self> {
        if let Some(bad) = mu.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(PikError::domain(format!("damping mu must be finite and >= 0, got {bad}")));
        }
        Ok(Self { mu, nu })
    }

    /// No damping for `l` tasks.
    pub fn undamped(l: usize) -> Self {
        Self { mu: vec![0.0; l], nu: 0 }
    }

    /// Same `mu` for `l` tasks.
    pub fn uniform(l: usize, mu: f64, nu: u32) -> Result<Self> {
        Self::new(vec![mu; l], nu)
    }
}

/// A squared damping constant, or the tagged "infinite damping" state.
///
/// `Infinite` never reaches matrix arithmetic: the damped pseudoinverse is
/// defined to be the zero matrix in that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DampingValue {
    Finite(f64),
    Infinite,
}

impl DampingValue {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    /// `f64::INFINITY` for the tagged state; only for reporting.
    pub fn as_extended(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::Infinite => f64::INFINITY,
        }
    }
}

/// Standard numerical-rank threshold `max(rows, cols) * eps * sigma_max`.
pub fn default_rank_tol(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

pub(crate) fn check_matrix(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(PikError::domain(format!(
            "{what}: dimension-zero matrix ({}x{})",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(PikError::data(format!("{what}: matrix has non-finite entries")));
    }
    Ok(())
}

/// Singular values sorted in decreasing order. Empty matrices have none.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    svd(a).s
}

/// Spectral norm (largest singular value); 0 for empty matrices.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Number of singular values above `tol` (`tol = 0` selects [`default_rank_tol`]).
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    let s = singular_values(a);
    let Some(&smax) = s.first() else { return 0 };
    let tol = if tol > 0.0 {
        tol
    } else {
        default_rank_tol(a.nrows(), a.ncols(), smax)
    };
    s.iter().filter(|&&v| v > tol).count()
}

/// Builds `V diag(g(sigma)) U^T` from a thin SVD of `a`.
fn svd_filter(a: &DMatrix<f64>, gain: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let f = svd(a);
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    for (i, &s) in f.s.iter().enumerate() {
        let g = gain(s);
        if g != 0.0 {
            // out += g * v_i u_i^T
            out.ger(g, &f.v_t.row(i).transpose(), &f.u.column(i), 1.0);
        }
    }
    out
}

/// Moore-Penrose pseudoinverse via the SVD.
///
/// Singular values at or below `rank_tol` are treated as zero; `rank_tol = 0`
/// selects [`default_rank_tol`].
pub fn moore_penrose(a: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>> {
    check_matrix(a, "moore_penrose")?;
    if !(rank_tol >= 0.0 && rank_tol.is_finite()) {
        return Err(PikError::domain(format!("rank_tol must be finite and >= 0, got {rank_tol}")));
    }
    let tol = if rank_tol > 0.0 {
        rank_tol
    } else {
        default_rank_tol(a.nrows(), a.ncols(), spectral_norm(a))
    };
    Ok(svd_filter(a, |s| if s > tol { 1.0 / s } else { 0.0 }))
}

/// Extended damped pseudoinverse `A^T (A A^T + lambda^2 I)^+`.
///
/// `lambda^2 = 0` gives the Moore-Penrose pseudoinverse and the infinite
/// state gives the zero matrix. The output is `cols(A) x rows(A)`.
pub fn extended_damped_pinv(a: &DMatrix<f64>, lambda_sq: DampingValue) -> Result<DMatrix<f64>> {
    check_matrix(a, "extended_damped_pinv")?;
    match lambda_sq {
        DampingValue::Infinite => Ok(DMatrix::zeros(a.ncols(), a.nrows())),
        DampingValue::Finite(l2) if !(l2 >= 0.0) || !l2.is_finite() => Err(PikError::domain(
            format!("damping lambda^2 must be finite and >= 0, got {l2}"),
        )),
        DampingValue::Finite(l2) if l2 == 0.0 => moore_penrose(a, 0.0),
        // sigma / (sigma^2 + lambda^2) is the spectrum of A^T (A A^T + lambda^2 I)^{-1}
        DampingValue::Finite(l2) => Ok(svd_filter(a, |s| s / (s * s + l2))),
    }
}

/// Damping schedule `mu^2 / |M|^nu` with the zero-determinant case mapped to
/// [`DampingValue::Infinite`]. `M` is the Gram matrix `C C^T` of a task block.
///
/// Uses the default determinant threshold, see [`damping_value_with_tol`].
pub fn damping_value(m: &DMatrix<f64>, mu: f64, nu: u32) -> Result<DampingValue> {
    damping_value_with_tol(m, mu, nu, 0.0)
}

/// As [`damping_value`], with an explicit rank tolerance for the factor `C`.
///
/// `|M|` counts as zero when it is at most `rank_tol^(2 dim)`; `rank_tol = 0`
/// selects `dim * eps * sqrt(sigma_max(M))`, the default rank rule applied
/// to `C`.
pub fn damping_value_with_tol(
    m: &DMatrix<f64>,
    mu: f64,
    nu: u32,
    rank_tol: f64,
) -> Result<DampingValue> {
    if m.nrows() != m.ncols() {
        return Err(PikError::domain(format!(
            "damping_value: M must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_matrix(m, "damping_value")?;
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(PikError::domain(format!("damping mu must be finite and >= 0, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(DampingValue::Finite(0.0));
    }
    // 0^0 = 1
    if nu == 0 {
        return Ok(DampingValue::Finite(mu * mu));
    }
    let sv = singular_values(m);
    let dim = m.nrows();
    let factor_tol = if rank_tol > 0.0 {
        rank_tol
    } else {
        dim as f64 * f64::EPSILON * sv[0].sqrt()
    };
    let det_tol = factor_tol.powi(2 * dim as i32);
    let det: f64 = sv.iter().product();
    if det <= det_tol {
        return Ok(DampingValue::Infinite);
    }
    let lambda_sq = mu * mu / det.powi(nu as i32);
    if lambda_sq.is_finite() {
        Ok(DampingValue::Finite(lambda_sq))
    } else {
        Ok(DampingValue::Infinite)
    }
}

/// The two norm bounds of the damped pseudoinverse; `f64::INFINITY` stands
/// for the extended-real infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBound {
    /// 0 for the zero matrix, otherwise `1 / sigma_r`.
    pub m1: f64,
    /// Infinite when `mu = 0`, otherwise `prod_i sigma_i^nu / (2 mu)`.
    pub m2: f64,
}

impl NormBound {
    pub fn min(&self) -> f64 {
        self.m1.min(self.m2)
    }
}

/// Norm bounds `(M1, M2)` for `||A^{*(lambda)}||` where `lambda` follows the
/// damping schedule with parameters `(mu, nu)` applied to `A A^T`.
///
/// `sigma_r` is the smallest singular value above the default rank threshold.
pub fn pinv_norm_bound(a: &DMatrix<f64>, mu: f64, nu: f64) -> NormBound {
    let s = singular_values(a);
    let smax = s.first().copied().unwrap_or(0.0);
    let m1 = if smax == 0.0 {
        0.0
    } else {
        let tol = default_rank_tol(a.nrows(), a.ncols(), smax);
        let sigma_r = s.iter().copied().filter(|&v| v > tol).fold(f64::INFINITY, f64::min);
        1.0 / sigma_r
    };
    let m2 = if mu == 0.0 {
        f64::INFINITY
    } else {
        s.iter().map(|v| v.powf(nu)).product::<f64>() / (2.0 * mu)
    };
    NormBound { m1, m2 }
}

pub(crate) fn is_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_matrix_pinv_is_zero_transpose() {
        let a = DMatrix::<f64>::zeros(2, 3);
        let p = moore_penrose(&a, 0.0).unwrap();
        assert_eq!(p.shape(), (3, 2));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_pinv() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = moore_penrose(&a, 0.0).unwrap();
        assert_abs_diff_eq!(p, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn empty_matrix_is_domain_error() {
        let a = DMatrix::<f64>::zeros(0, 3);
        assert!(matches!(moore_penrose(&a, 0.0), Err(PikError::Domain(_))));
    }

    #[test]
    fn damped_one_by_one() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let p = extended_damped_pinv(&a, DampingValue::Finite(1.0)).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn infinite_damping_gives_zero() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let p = extended_damped_pinv(&a, DampingValue::Infinite).unwrap();
        assert_eq!(p.shape(), (3, 2));
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_damping_matches_moore_penrose() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let p = extended_damped_pinv(&a, DampingValue::Finite(0.0)).unwrap();
        let q = moore_penrose(&a, 0.0).unwrap();
        assert_abs_diff_eq!(p, q, epsilon = 1e-15);
    }

    #[test]
    fn negative_damping_rejected() {
        let a = DMatrix::from_element(1, 1, 1.0);
        assert!(extended_damped_pinv(&a, DampingValue::Finite(-1.0)).is_err());
    }

    #[test]
    fn damped_matches_normal_equation_form() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.3, 0.7, 0.1, 2.0]);
        let l2 = 0.3;
        let direct = a.transpose() * (&a * a.transpose() + DMatrix::identity(2, 2) * l2).try_inverse().unwrap();
        let p = extended_damped_pinv(&a, DampingValue::Finite(l2)).unwrap();
        assert_abs_diff_eq!(p, direct, epsilon = 1e-13);
    }

    #[test]
    fn damping_schedule_cases() {
        let zero = DMatrix::from_element(1, 1, 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(damping_value(&zero, 1.0, 1).unwrap(), DampingValue::Infinite);
        assert_eq!(damping_value(&one, 1.0, 1).unwrap(), DampingValue::Finite(1.0));
        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(damping_value(&psd, 0.0, 3).unwrap(), DampingValue::Finite(0.0));
        // 0^0 = 1
        assert_eq!(damping_value(&zero, 0.5, 0).unwrap(), DampingValue::Finite(0.25));
        let det = 5.0_f64;
        match damping_value(&psd, 0.5, 2).unwrap() {
            DampingValue::Finite(v) => assert_abs_diff_eq!(v, 0.25 / (det * det), epsilon = 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn damping_rejects_non_square() {
        let m = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(damping_value(&m, 1.0, 1), Err(PikError::Domain(_))));
    }

    #[test]
    fn norm_bound_simple_cases() {
        let z = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(pinv_norm_bound(&z, 0.7, 2.0).m1, 0.0);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let b = pinv_norm_bound(&i2, 1.0, 0.0);
        assert_abs_diff_eq!(b.m1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.m2, 0.5, epsilon = 1e-15);
        assert_eq!(pinv_norm_bound(&i2, 0.0, 1.0).m2, f64::INFINITY);
    }

    #[test]
    fn norm_bound_from_constructed_svd() {
        // A = U diag(3, 0.5, 0.2) V^T with orthogonal U (3x3) and V (5x5) built
        // from Householder reflections, so the singular values are known exactly.
        let house = |v: &DVector<f64>| {
            let n = v.len();
            DMatrix::identity(n, n) - v * v.transpose() * (2.0 / v.norm_squared())
        };
        let u = house(&DVector::from_vec(vec![1.0, -2.0, 0.5]));
        let v = house(&DVector::from_vec(vec![0.3, 1.0, -1.0, 2.0, 0.1]));
        let mut s = DMatrix::zeros(3, 5);
        s[(0, 0)] = 3.0;
        s[(1, 1)] = 0.5;
        s[(2, 2)] = 0.2;
        let a = &u * s * v.transpose();
        let b = pinv_norm_bound(&a, 0.5, 1.0);
        assert_abs_diff_eq!(b.m1, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.m2, 3.0 * 0.5 * 0.2 / (2.0 * 0.5), epsilon = 1e-12);
    }

    fn arb_matrix() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..=8, 1usize..=8, 0usize..=8, any::<u64>()).prop_map(|(r, c, k, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = k.min(r.min(c));
            let left = DMatrix::from_fn(r, k, |_, _| rng.gen_range(-1.0..1.0));
            let right = DMatrix::from_fn(k, c, |_, _| rng.gen_range(-1.0..1.0));
            left * right
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn penrose_conditions(a in arb_matrix()) {
            let p = moore_penrose(&a, 0.0).unwrap();
            let a_norm = spectral_norm(&a).max(1.0);
            let p_norm = spectral_norm(&p).max(1.0);
            let ap = &a * &p;
            let pa = &p * &a;
            // backward-error scale: residuals grow with cond(A) = ||A|| ||A^+||
            let cond = a_norm * p_norm;
            let r1 = spectral_norm(&(&ap * &a - &a));
            let r2 = spectral_norm(&(&pa * &p - &p));
            prop_assert!(r1 <= 1e-9 * a_norm * cond, "r1 {r1} cond {cond}");
            prop_assert!(r2 <= 1e-9 * p_norm * cond, "r2 {r2} cond {cond}");
            prop_assert!((&ap - ap.transpose()).amax() <= 1e-9);
            prop_assert!((&pa - pa.transpose()).amax() <= 1e-9);
        }

        #[test]
        fn damped_norm_within_bounds(a in arb_matrix(), mu in 0.0f64..2.0, nu in 0u32..4) {
            let gram = &a * a.transpose();
            let l2 = damping_value(&gram, mu, nu).unwrap();
            let p = extended_damped_pinv(&a, l2).unwrap();
            let norm = spectral_norm(&p);
            let b = pinv_norm_bound(&a, mu, nu as f64);
            prop_assert!(norm <= b.min() + 1e-9, "norm {norm} bound {:?}", b);
            if mu > 0.0 {
                let l = a.nrows().min(a.ncols()) as i32;
                let alt = spectral_norm(&a).powi(nu as i32 * l) / (2.0 * mu);
                prop_assert!(norm <= alt + 1e-9);
            }
        }
    }

    #[test]
    fn damped_composite_decays_to_zero() {
        let a = DMatrix::from_row_slice(2, 3, &[0.4, -1.2, 0.9, 1.1, 0.3, -0.7]);
        for nu in 1..=3u32 {
            let mut last = f64::INFINITY;
            for k in 1..=8 {
                let eps = 10f64.powi(-k);
                let ea = &a * eps;
                let l2 = damping_value(&(&ea * ea.transpose()), 0.5, nu).unwrap();
                let n = spectral_norm(&extended_damped_pinv(&ea, l2).unwrap());
                assert!(n <= last, "norm not decaying at eps={eps}, nu={nu}");
                last = n;
            }
            assert!(last < 1e-6, "limit {last} for nu={nu}");
        }
    }
}
