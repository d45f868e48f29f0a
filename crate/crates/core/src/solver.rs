//! The four solver families and the joint velocity `u = R^-1 J_hat^T C_D^T L r'`.

use nalgebra::{DMatrix, DVector};

use crate::error::{PikError, Result};
use crate::numlin::{
    damping_value_with_tol, default_rank_tol, is_finite_vec, pinv_norm_bound, spectral_norm, DampingSpec,
    DampingValue,
};
use crate::orthqr::{
    orthogonalize_with, singularity_metrics, NullSpaceCompletion, OrthOptions, PriorityDecomposition,
    SingularityReport,
};
use crate::svd::svd;
use crate::system::{checked_velocity_map, KinematicSystem};

/// Objective family `pi_alpha`, `alpha = 1..4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SolverFamily {
    /// `L = D (I + C_L C_D^*)^-1`: damped least squares with priorities.
    Pi1,
    /// `L = H`: task-wise damped pseudoinverse of `J_a`.
    Pi2,
    /// `L = D`: damped pseudoinverse of the orthogonalized blocks.
    Pi3,
    /// `L = I`: transpose form, undamped by construction.
    Pi4,
}

impl SolverFamily {
    pub fn from_alpha(alpha: u8) -> Result<Self> {
        match alpha {
            1 => Ok(Self::Pi1),
            2 => Ok(Self::Pi2),
            3 => Ok(Self::Pi3),
            4 => Ok(Self::Pi4),
            _ => Err(PikError::config("solver.alpha", format!("must be 1, 2, 3 or 4, got {alpha}"))),
        }
    }

    pub fn alpha(self) -> u8 {
        match self {
            Self::Pi1 => 1,
            Self::Pi2 => 2,
            Self::Pi3 => 3,
            Self::Pi4 => 4,
        }
    }

    pub fn is_damped(self) -> bool {
        self != Self::Pi4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub family: SolverFamily,
    /// Ignored for [`SolverFamily::Pi4`].
    pub damping: DampingSpec,
    /// Gram-Schmidt zero threshold; 0 selects the default.
    pub zero_tol: f64,
    /// Rank threshold for pseudoinverses and the damping determinant; 0 selects the default.
    pub rank_tol: f64,
    pub reorthogonalize: bool,
}

impl SolverConfig {
    pub fn new(family: SolverFamily, damping: DampingSpec) -> Self {
        Self {
            family,
            damping,
            zero_tol: 0.0,
            rank_tol: 0.0,
            reorthogonalize: false,
        }
    }

    /// `pi_4` for `l` tasks.
    pub fn transpose(l: usize) -> Self {
        Self::new(SolverFamily::Pi4, DampingSpec::undamped(l))
    }

    /// Checks the damping spec against the number of tasks.
    pub fn validate(&self, l: usize) -> Result<()> {
        if !(self.zero_tol >= 0.0 && self.zero_tol.is_finite()) {
            return Err(PikError::config("solver.zero_tol", "must be finite and >= 0"));
        }
        if !(self.rank_tol >= 0.0 && self.rank_tol.is_finite()) {
            return Err(PikError::config("solver.rank_tol", "must be finite and >= 0"));
        }
        if self.family.is_damped() {
            if self.damping.mu.len() != l {
                return Err(PikError::config(
                    "solver.mu",
                    format!("expected {l} values, got {}", self.damping.mu.len()),
                ));
            }
            if let Some(m) = self.damping.mu.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
                return Err(PikError::config("solver.mu", format!("must be finite and >= 0, got {m}")));
            }
        }
        Ok(())
    }

    /// Trajectories with `alpha` in 1..3 need `mu_a > 0` for a bounded `L`.
    pub fn validate_for_trajectory(&self, l: usize) -> Result<()> {
        self.validate(l)?;
        if self.family.is_damped() && self.damping.mu.iter().any(|m| *m <= 0.0) {
            return Err(PikError::config(
                "solver.mu",
                "trajectories with alpha in 1..3 require every mu > 0",
            ));
        }
        Ok(())
    }

    fn orth_options(&self) -> OrthOptions {
        OrthOptions {
            zero_tol: self.zero_tol,
            reorthogonalize: self.reorthogonalize,
            completion: NullSpaceCompletion::Svd,
        }
    }
}

/// `L` together with the damping values and block factors it was built from.
#[derive(Debug, Clone)]
pub struct SolverGain {
    pub l: DMatrix<f64>,
    pub lambda_sq: Vec<DampingValue>,
    /// `D = diag(D_a)`.
    pub d: DMatrix<f64>,
    /// `H = diag(H_a)`; only for `pi_2`.
    pub h: Option<DMatrix<f64>>,
    /// `C_D^* = diag(C_aa^T D_a)`.
    pub c_d_star: DMatrix<f64>,
    /// `(I + C_L C_D^*)^-1`; only for `pi_1`.
    pub inv_factor: Option<DMatrix<f64>>,
}

/// `(A A^T + l2 I)^+` from the SVD of `A` (`rows x rows`). Singular values at
/// or below `tol` count as zero when `l2 = 0`.
fn gram_pinv(a: &DMatrix<f64>, l2: f64, tol: f64) -> DMatrix<f64> {
    let rows = a.nrows();
    let f = svd(a);
    let tol = if tol > 0.0 {
        tol
    } else {
        default_rank_tol(a.nrows(), a.ncols(), f.s[0])
    };
    let mut out = DMatrix::zeros(rows, rows);
    for i in 0..rows {
        // thin U has min(rows, cols) = rows columns since rows <= cols here
        let s = f.s.get(i).copied().unwrap_or(0.0);
        let g = if l2 > 0.0 {
            1.0 / (s * s + l2)
        } else if s > tol {
            1.0 / (s * s)
        } else {
            0.0
        };
        if g != 0.0 {
            let ui = f.u.column(i);
            out.ger(g, &ui, &ui, 1.0);
        }
    }
    out
}

fn put_block(target: &mut DMatrix<f64>, at: usize, block: &DMatrix<f64>) {
    target.view_mut((at, at), block.shape()).copy_from(block);
}

/// `lambda_a^2` for every task.
pub fn damping_values(decomp: &PriorityDecomposition, config: &SolverConfig) -> Result<Vec<DampingValue>> {
    (0..decomp.num_tasks())
        .map(|a| {
            if !config.family.is_damped() {
                return Ok(DampingValue::Finite(0.0));
            }
            let caa = decomp.block(a, a);
            let gram = &caa * caa.transpose();
            damping_value_with_tol(&gram, config.damping.mu[a], config.damping.nu, config.rank_tol)
        })
        .collect()
}

pub fn solver_gain(decomp: &PriorityDecomposition, j: &DMatrix<f64>, config: &SolverConfig) -> Result<SolverGain> {
    let l_tasks = decomp.num_tasks();
    config.validate(l_tasks)?;
    if j.shape() != (decomp.m(), decomp.n()) {
        return Err(PikError::domain("J does not match the decomposition"));
    }
    let m = decomp.m();
    let lambda_sq = damping_values(decomp, config)?;

    let mut d = DMatrix::zeros(m, m);
    let mut c_d_star = DMatrix::zeros(m, m);
    let mut h = (config.family == SolverFamily::Pi2).then(|| DMatrix::zeros(m, m));
    for (a, l2) in lambda_sq.iter().enumerate() {
        let at = decomp.task_range(a).start;
        let DampingValue::Finite(l2) = *l2 else { continue };
        let caa = decomp.block(a, a);
        let da = gram_pinv(&caa, l2, config.rank_tol);
        put_block(&mut c_d_star, at, &(caa.transpose() * &da));
        put_block(&mut d, at, &da);
        if let Some(h) = h.as_mut() {
            let ja = j.rows(at, caa.nrows()).into_owned();
            put_block(h, at, &gram_pinv(&ja, l2, config.rank_tol));
        }
    }

    let (l, inv_factor) = match config.family {
        SolverFamily::Pi4 => (DMatrix::identity(m, m), None),
        SolverFamily::Pi3 => (d.clone(), None),
        SolverFamily::Pi2 => (h.clone().expect("H built for pi_2"), None),
        SolverFamily::Pi1 => {
            // I + C_L C_D^* is unit lower triangular: C_L is strictly block
            // lower and C_D^* block diagonal.
            let a = DMatrix::identity(m, m) + decomp.c_l() * &c_d_star;
            let mut x = DMatrix::identity(m, m);
            if !a.solve_lower_triangular_with_diag_mut(&mut x, 1.0) || x.iter().any(|v| !v.is_finite()) {
                return Err(PikError::numerical("I + C_L C_D^* is not invertible"));
            }
            (&d * &x, Some(x))
        }
    };
    Ok(SolverGain {
        l,
        lambda_sq,
        d,
        h,
        c_d_star,
        inv_factor,
    })
}

/// Block lower-triangular gain `L` of the configured family.
pub fn solver_gain_matrix(decomp: &PriorityDecomposition, j: &DMatrix<f64>, config: &SolverConfig) -> Result<DMatrix<f64>> {
    Ok(solver_gain(decomp, j, config)?.l)
}

/// `r' = r - f_t`.
pub fn residual_reference<S: KinematicSystem + ?Sized>(t: f64, q: &DVector<f64>, sys: &S) -> Result<DVector<f64>> {
    let (ft, _) = checked_velocity_map(sys, t, q)?;
    let r = checked_reference(sys, t, q)?;
    Ok(r - ft)
}

fn checked_reference<S: KinematicSystem + ?Sized>(sys: &S, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
    let r = sys.reference(t, q)?;
    let m = sys.task_dim_total();
    if r.len() != m {
        return Err(PikError::domain(format!("reference has length {}, expected {m}", r.len())));
    }
    if !is_finite_vec(&r) {
        return Err(PikError::data(format!("reference is not finite at t = {t}")));
    }
    Ok(r)
}

/// `R^-1`, or `None` for the identity.
fn checked_preconditioner_inverse<S: KinematicSystem + ?Sized>(
    sys: &S,
    t: f64,
    q: &DVector<f64>,
) -> Result<Option<DMatrix<f64>>> {
    let n = sys.joint_dim();
    let Some(r) = sys.preconditioner(t, q)? else { return Ok(None) };
    if r.shape() != (n, n) {
        return Err(PikError::domain(format!("preconditioner must be {n}x{n}")));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(PikError::data(format!("preconditioner is not finite at t = {t}")));
    }
    match r.try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => Ok(Some(inv)),
        _ => Err(PikError::domain(format!("preconditioner is not invertible at t = {t}"))),
    }
}

/// Everything computed on the way to `u`.
#[derive(Debug, Clone)]
pub struct VelocitySolution {
    pub u: DVector<f64>,
    pub report: SingularityReport,
    pub decomp: PriorityDecomposition,
    pub gain: SolverGain,
    /// `J = F_q R^-1`.
    pub j: DMatrix<f64>,
    pub f_t: DVector<f64>,
    pub f_q: DMatrix<f64>,
    pub r_prime: DVector<f64>,
    /// `None` when `R = I`.
    pub r_inv: Option<DMatrix<f64>>,
}

pub fn pik_velocity<S: KinematicSystem + ?Sized>(
    t: f64,
    q: &DVector<f64>,
    sys: &S,
    config: &SolverConfig,
) -> Result<VelocitySolution> {
    let (f_t, f_q) = checked_velocity_map(sys, t, q)?;
    let r = checked_reference(sys, t, q)?;
    let r_inv = checked_preconditioner_inverse(sys, t, q)?;
    let j = match &r_inv {
        Some(ri) => &f_q * ri,
        None => f_q.clone(),
    };
    let r_prime = r - &f_t;
    let decomp = orthogonalize_with(&j, sys.task_dims(), &config.orth_options())?;
    let gain = solver_gain(&decomp, &j, config)?;
    let y = decomp.j_hat().transpose() * (decomp.c_d().transpose() * (&gain.l * &r_prime));
    let u = match &r_inv {
        Some(ri) => ri * y,
        None => y,
    };
    if !is_finite_vec(&u) {
        return Err(PikError::numerical(format!("joint velocity is not finite at t = {t}")));
    }
    let report = singularity_metrics(&decomp, &j, config.zero_tol);
    Ok(VelocitySolution {
        u,
        report,
        decomp,
        gain,
        j,
        f_t,
        f_q,
        r_prime,
        r_inv,
    })
}

/// `e_a^res = r'_a - J_a R u` per task (`J R = F_q`).
pub fn task_residuals<S: KinematicSystem + ?Sized>(
    t: f64,
    q: &DVector<f64>,
    u: &DVector<f64>,
    sys: &S,
) -> Result<Vec<DVector<f64>>> {
    let (ft, fq) = checked_velocity_map(sys, t, q)?;
    let r = checked_reference(sys, t, q)?;
    let res = r - ft - fq * u;
    let mut out = Vec::with_capacity(sys.num_tasks());
    let mut off = 0;
    for &ma in sys.task_dims() {
        out.push(res.rows(off, ma).into_owned());
        off += ma;
    }
    Ok(out)
}

/// Upper bound on `||u||` from the block norms of `C_D^T L` (`||J_hat|| <= 1`).
pub fn velocity_bound(sol: &VelocitySolution, config: &SolverConfig) -> f64 {
    let r_inv = sol.r_inv.as_ref().map(spectral_norm).unwrap_or(1.0);
    let rp = sol.r_prime.norm();
    let d = &sol.decomp;
    let blocks = 0..d.num_tasks();
    let per_block = match config.family {
        SolverFamily::Pi4 => blocks.map(|a| spectral_norm(&d.block(a, a))).fold(0.0, f64::max),
        SolverFamily::Pi2 => {
            let h = sol.gain.h.as_ref().expect("H built for pi_2");
            blocks
                .map(|a| {
                    let r = d.task_range(a);
                    let ha = h.view((r.start, r.start), (r.len(), r.len())).into_owned();
                    spectral_norm(&d.block(a, a)) * spectral_norm(&ha)
                })
                .fold(0.0, f64::max)
        }
        SolverFamily::Pi1 | SolverFamily::Pi3 => {
            let star = blocks
                .map(|a| {
                    if sol.gain.lambda_sq[a].is_infinite() {
                        return 0.0;
                    }
                    let b = pinv_norm_bound(&d.block(a, a), config.damping.mu[a], config.damping.nu as f64);
                    b.min()
                })
                .fold(0.0, f64::max);
            match &sol.gain.inv_factor {
                Some(x) => star * spectral_norm(x),
                None => star,
            }
        }
    };
    r_inv * per_block * rp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthqr::{orthogonalize, projector};
    use crate::system::CallbackSystem;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cfg(family: SolverFamily, mu: Vec<f64>, nu: u32) -> SolverConfig {
        SolverConfig::new(family, DampingSpec::new(mu, nu).unwrap())
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!(SolverFamily::from_alpha(3).unwrap(), SolverFamily::Pi3);
        let err = SolverFamily::from_alpha(5).unwrap_err();
        assert!(matches!(err, PikError::Config { ref field, .. } if field == "solver.alpha"));
        for a in 1..=4 {
            assert_eq!(SolverFamily::from_alpha(a).unwrap().alpha(), a);
        }
    }

    #[test]
    fn gain_examples() {
        let j = DMatrix::<f64>::identity(2, 2);
        let d = orthogonalize(&j, &[1, 1], 0.0).unwrap();
        let l4 = solver_gain_matrix(&d, &j, &SolverConfig::transpose(2)).unwrap();
        assert_eq!(l4, DMatrix::identity(2, 2));
        let l3 = solver_gain_matrix(&d, &j, &cfg(SolverFamily::Pi3, vec![1.0, 1.0], 0)).unwrap();
        assert_abs_diff_eq!(l3, DMatrix::from_diagonal_element(2, 2, 0.5), epsilon = 1e-15);
        let l1 = solver_gain_matrix(&d, &j, &cfg(SolverFamily::Pi1, vec![1.0, 1.0], 0)).unwrap();
        assert_abs_diff_eq!(l1, l3, epsilon = 1e-15);
    }

    #[test]
    fn pi1_equals_pi3_for_block_diagonal_c() {
        // orthogonal rows across tasks give C_L = 0
        let j = DMatrix::from_row_slice(3, 4, &[2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 3.0]);
        let d = orthogonalize(&j, &[1, 2], 0.0).unwrap();
        assert!(d.c_l().amax() < 1e-15);
        let l1 = solver_gain_matrix(&d, &j, &cfg(SolverFamily::Pi1, vec![0.3, 0.7], 1)).unwrap();
        let l3 = solver_gain_matrix(&d, &j, &cfg(SolverFamily::Pi3, vec![0.3, 0.7], 1)).unwrap();
        assert_abs_diff_eq!(l1, l3, epsilon = 1e-15);
    }

    #[test]
    fn infinite_damping_zeroes_block() {
        // second row parallel to the first: c_22 = 0 so M_2 = 0
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let d = orthogonalize(&j, &[1, 1], 0.0).unwrap();
        let c = cfg(SolverFamily::Pi2, vec![0.1, 0.1], 1);
        let g = solver_gain(&d, &j, &c).unwrap();
        assert!(g.lambda_sq[1].is_infinite());
        assert_eq!(g.l[(1, 1)], 0.0);
        assert_eq!(g.d[(1, 1)], 0.0);
    }

    #[test]
    fn velocity_examples() {
        let sys = CallbackSystem::constant(vec![1, 1], DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let q = DVector::zeros(2);
        let s4 = pik_velocity(0.0, &q, &sys, &SolverConfig::transpose(2)).unwrap();
        assert_abs_diff_eq!(s4.u, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-15);
        let s3 = pik_velocity(0.0, &q, &sys, &cfg(SolverFamily::Pi3, vec![1.0, 1.0], 0)).unwrap();
        assert_abs_diff_eq!(s3.u, DVector::from_vec(vec![0.5, 1.0]), epsilon = 1e-15);
        let res = task_residuals(0.0, &q, &s4.u, &sys).unwrap();
        assert!(res.iter().all(|r| r.norm() < 1e-15));
        assert!(s4.u.norm() <= velocity_bound(&s4, &SolverConfig::transpose(2)) * (1.0 + 1e-12));
    }

    #[test]
    fn zero_reference_and_feedforward_give_zero() {
        let sys = CallbackSystem::constant(vec![1, 1], DMatrix::identity(2, 3), DVector::zeros(2)).unwrap();
        let rp = residual_reference(0.0, &DVector::zeros(3), &sys).unwrap();
        assert_eq!(rp, DVector::zeros(2));
    }

    #[test]
    fn dependent_task_keeps_its_residual() {
        let fq = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 1.0]);
        let sys = CallbackSystem::constant(vec![1, 1], fq, DVector::from_vec(vec![0.7, 0.3])).unwrap();
        let q = DVector::zeros(2);
        let s = pik_velocity(0.0, &q, &sys, &SolverConfig::transpose(2)).unwrap();
        let res = task_residuals(0.0, &q, &s.u, &sys).unwrap();
        assert_abs_diff_eq!(res[0][0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn damping_bias_shrinks_with_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let fq = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
            let r = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let sys = CallbackSystem::constant(vec![1, 2], fq, r).unwrap();
            let q = DVector::zeros(5);
            let mut prev = vec![f64::INFINITY; 2];
            for mu in [1.0, 0.1, 0.01] {
                let s = pik_velocity(0.0, &q, &sys, &cfg(SolverFamily::Pi2, vec![mu, mu], 0)).unwrap();
                let res = task_residuals(0.0, &q, &s.u, &sys).unwrap();
                // the top task is unaffected by lower ones, so its bias shrinks with mu
                assert!(res[0].norm() < prev[0]);
                prev[0] = res[0].norm();
                prev[1] = res[1].norm();
            }
        }
    }

    #[test]
    fn rejects_singular_preconditioner_and_nan() {
        let sys = CallbackSystem::constant(vec![1, 1], DMatrix::identity(2, 2), DVector::zeros(2))
            .unwrap()
            .with_preconditioner(Arc::new(|_, _| Ok(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]))));
        let e = pik_velocity(0.0, &DVector::zeros(2), &sys, &SolverConfig::transpose(2)).unwrap_err();
        assert!(matches!(e, PikError::Domain(_)));
        let nan = CallbackSystem::constant(vec![1, 1], DMatrix::identity(2, 2), DVector::from_vec(vec![f64::NAN, 0.0]))
            .unwrap();
        let e = pik_velocity(0.0, &DVector::zeros(2), &nan, &SolverConfig::transpose(2)).unwrap_err();
        assert!(matches!(e, PikError::Data(_)));
    }

    #[test]
    fn damping_length_is_checked() {
        let sys = CallbackSystem::constant(vec![1, 1], DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let e = pik_velocity(0.0, &DVector::zeros(2), &sys, &cfg(SolverFamily::Pi1, vec![0.1], 1)).unwrap_err();
        assert!(matches!(e, PikError::Config { .. }));
        assert!(cfg(SolverFamily::Pi3, vec![0.0, 0.1], 1).validate_for_trajectory(2).is_err());
        assert!(SolverConfig::transpose(2).validate_for_trajectory(2).is_ok());
    }

    fn family(i: u8) -> SolverFamily {
        SolverFamily::from_alpha(1 + i % 4).unwrap()
    }

    /// Random system: `n` in m..m+3, tasks drawn from `dims`, optional rank drop.
    fn random_fq(seed: u64, dims: &[usize], extra: usize, rank_drop: bool) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: usize = dims.iter().sum();
        let n = m + extra;
        let mut fq = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        if rank_drop && m >= 2 {
            let row = fq.row(0) * 0.5 + fq.row(1) * rng.gen_range(-1.0..1.0);
            fq.set_row(m - 1, &row);
        }
        fq
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn priority_invariance(seed in any::<u64>(), fam in 0u8..4, extra in 0usize..3, drop in any::<bool>(), nu in 0u32..3) {
            let dims = [1usize, 2, 1];
            let fq = random_fq(seed, &dims, extra, drop);
            let (m, n) = fq.shape();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let r = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let rdiag = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
            let c = cfg(family(fam), vec![0.2, 0.3, 0.1], nu);
            let q = DVector::zeros(n);
            let make = |r: DVector<f64>| {
                let rd = rdiag.clone();
                CallbackSystem::constant(dims.to_vec(), fq.clone(), r)
                    .unwrap()
                    .with_preconditioner(Arc::new(move |_, _| Ok(DMatrix::from_diagonal(&rd))))
            };
            let base = pik_velocity(0.0, &q, &make(r.clone()), &c).unwrap();
            let ru_base = DMatrix::from_diagonal(&rdiag) * &base.u;
            let offsets = [0usize, 1, 3, 4];
            for a in 0..2 {
                let mut r2 = r.clone();
                for i in offsets[a + 1]..m {
                    r2[i] = rng.gen_range(-5.0..5.0);
                }
                let other = pik_velocity(0.0, &q, &make(r2), &c).unwrap();
                let ru = DMatrix::from_diagonal(&rdiag) * &other.u;
                let scale = ru_base.norm().max(ru.norm()).max(1.0);
                for b in 0..=a {
                    let p = projector(&base.decomp, b).unwrap();
                    let diff = (&p * &ru - &p * &ru_base).norm();
                    prop_assert!(diff <= 1e-12 * scale, "a={a} b={b} diff={diff}");
                }
            }
        }

        #[test]
        fn preconditioner_consistency(seed in any::<u64>(), fam in 0u8..4) {
            let dims = [2usize, 1];
            let fq = random_fq(seed, &dims, 2, false);
            let n = fq.ncols();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let rdiag = DVector::from_fn(n, |_, _| rng.gen_range(0.3..3.0));
            let r = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let rmat = DMatrix::from_diagonal(&rdiag);
            let rinv = DMatrix::from_diagonal(&rdiag.map(|v| 1.0 / v));
            let c = cfg(family(fam), vec![0.1, 0.2], 1);
            let q = DVector::zeros(n);
            let rm = rmat.clone();
            let with_r = CallbackSystem::constant(dims.to_vec(), fq.clone(), r.clone())
                .unwrap()
                .with_preconditioner(Arc::new(move |_, _| Ok(rm.clone())));
            let plain = CallbackSystem::constant(dims.to_vec(), &fq * &rinv, r).unwrap();
            let u_r = pik_velocity(0.0, &q, &with_r, &c).unwrap().u;
            let u_i = pik_velocity(0.0, &q, &plain, &c).unwrap().u;
            prop_assert!((u_r - &rinv * u_i).amax() <= 1e-10);
        }

        #[test]
        fn transpose_form_on_orthonormal_rows(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let qr = a.qr();
            let jo = qr.q().rows(0, 3).into_owned();
            let r = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let sys = CallbackSystem::constant(vec![1, 2], jo.clone(), r.clone()).unwrap();
            let u = pik_velocity(0.0, &DVector::zeros(5), &sys, &SolverConfig::transpose(2)).unwrap().u;
            prop_assert!((u - jo.transpose() * r).amax() <= 1e-12);
        }

        #[test]
        fn pi1_gain_identity(seed in any::<u64>(), nu in 0u32..3, drop in any::<bool>()) {
            let dims = [1usize, 2, 2];
            let j = random_fq(seed, &dims, 1, drop);
            let d = orthogonalize(&j, &dims, 0.0).unwrap();
            let c = cfg(SolverFamily::Pi1, vec![0.3, 0.2, 0.4], nu);
            let g = solver_gain(&d, &j, &c).unwrap();
            let m = 5;
            let cd_t = d.c_d().transpose();
            let lhs = &cd_t * &g.l;
            let inner = (DMatrix::identity(m, m) + &g.c_d_star * d.c_l()).try_inverse().unwrap();
            let rhs = inner * &cd_t * &g.d;
            prop_assert!((lhs - rhs).amax() <= 1e-10);
            // L is block lower triangular
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let (ra, rb) = (d.task_range(a), d.task_range(b));
                    prop_assert!(g.l.view((ra.start, rb.start), (ra.len(), rb.len())).amax() == 0.0);
                }
            }
        }

        #[test]
        fn velocity_within_bound(seed in any::<u64>(), fam in 0u8..4, nu in 0u32..3, drop in any::<bool>()) {
            let dims = [1usize, 2];
            let fq = random_fq(seed, &dims, 1, drop);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let r = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let sys = CallbackSystem::constant(dims.to_vec(), fq, r).unwrap();
            let c = cfg(family(fam), vec![0.2, 0.05], nu);
            let s = pik_velocity(0.0, &DVector::zeros(4), &sys, &c).unwrap();
            let bound = velocity_bound(&s, &c);
            prop_assert!(s.u.norm() <= bound * (1.0 + 1e-9) + 1e-12, "u {} bound {bound}", s.u.norm());
        }
    }
}
