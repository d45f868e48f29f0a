//! Priority-respecting orthogonalization of a stacked task Jacobian.
//!
//! `J = C_e * J_hat_e` with `C_e` lower triangular (m x n) and `J_hat_e`
//! orthogonal (n x n), computed by a row-wise modified Gram-Schmidt sweep in
//! priority order. Rows whose residual norm falls below `zero_tol` are treated
//! as exactly dependent: the matching column of `C_e` is zero and the
//! corresponding row of `J_hat_e` is filled from the null space of `J`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PikError, Result};
use crate::numlin::{check_matrix, default_rank_tol, numerical_rank, spectral_norm};
use crate::svd::svd;

/// How zero rows of `J_hat_e` are completed to an orthonormal basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NullSpaceCompletion {
    /// Right singular vectors of `J` with the smallest singular values, in index order.
    #[default]
    Svd,
    /// Random directions drawn from a seeded generator (for invariance checks).
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OrthOptions {
    /// Residual norms at or below this are treated as zero; 0 selects
    /// [`default_zero_tol`].
    pub zero_tol: f64,
    /// Run a second Gram-Schmidt pass against earlier rows.
    pub reorthogonalize: bool,
    pub completion: NullSpaceCompletion,
}

/// The factorization `J = C_e J_hat_e` with its task-block structure.
///
/// Task indices are zero based.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityDecomposition {
    c_e: DMatrix<f64>,
    j_hat_e: DMatrix<f64>,
    task_dims: Vec<usize>,
    offsets: Vec<usize>,
}

fn offsets_of(task_dims: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(task_dims.len() + 1);
    off.push(0);
    for d in task_dims {
        off.push(off.last().unwrap() + d);
    }
    off
}

pub(crate) fn check_task_dims(task_dims: &[usize], m: usize) -> Result<()> {
    if task_dims.is_empty() || task_dims.contains(&0) {
        return Err(PikError::domain(format!(
            "task dimensions must be positive, got {task_dims:?}"
        )));
    }
    let sum: usize = task_dims.iter().sum();
    if sum != m {
        return Err(PikError::domain(format!(
            "task dimensions {task_dims:?} sum to {sum}, expected {m}"
        )));
    }
    Ok(())
}

impl PriorityDecomposition {
    /// Assembles a decomposition from externally computed factors (closed-form
    /// QR for example). Shapes and task dimensions are checked; the numerical
    /// invariants are not.
    pub fn from_parts(c_e: DMatrix<f64>, j_hat_e: DMatrix<f64>, task_dims: Vec<usize>) -> Result<Self> {
        let (m, n) = c_e.shape();
        if j_hat_e.shape() != (n, n) {
            return Err(PikError::domain(format!(
                "J_hat_e must be {n}x{n}, got {}x{}",
                j_hat_e.nrows(),
                j_hat_e.ncols()
            )));
        }
        if m > n {
            return Err(PikError::domain(format!("C_e must have m <= n, got {m}x{n}")));
        }
        check_task_dims(&task_dims, m)?;
        let offsets = offsets_of(&task_dims);
        Ok(Self {
            c_e,
            j_hat_e,
            task_dims,
            offsets,
        })
    }

    pub fn m(&self) -> usize {
        self.c_e.nrows()
    }

    pub fn n(&self) -> usize {
        self.c_e.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_dims.len()
    }

    pub fn task_dims(&self) -> &[usize] {
        &self.task_dims
    }

    /// Row range of task `a` inside the stacked task space.
    pub fn task_range(&self, a: usize) -> Range<usize> {
        self.offsets[a]..self.offsets[a + 1]
    }

    pub fn c_e(&self) -> &DMatrix<f64> {
        &self.c_e
    }

    pub fn j_hat_e(&self) -> &DMatrix<f64> {
        &self.j_hat_e
    }

    /// Left `m x m` block of `C_e`.
    pub fn c(&self) -> DMatrix<f64> {
        let m = self.m();
        self.c_e.columns(0, m).into_owned()
    }

    /// Block diagonal part of `C`.
    pub fn c_d(&self) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for a in 0..self.num_tasks() {
            let r = self.task_range(a);
            out.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(&self.c_e.view((r.start, r.start), (r.len(), r.len())));
        }
        out
    }

    /// Strictly block-lower part `C - C_D`.
    pub fn c_l(&self) -> DMatrix<f64> {
        self.c() - self.c_d()
    }

    /// Top `m x n` block of `J_hat_e`.
    pub fn j_hat(&self) -> DMatrix<f64> {
        self.j_hat_e.rows(0, self.m()).into_owned()
    }

    /// Block `C_ab` (`m_a x m_b`).
    pub fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let ra = self.task_range(a);
        let rb = self.task_range(b);
        self.c_e.view((ra.start, rb.start), (ra.len(), rb.len())).into_owned()
    }

    /// Rows of `J_hat` belonging to task `a` (`m_a x n`).
    pub fn j_hat_task(&self, a: usize) -> DMatrix<f64> {
        let r = self.task_range(a);
        self.j_hat_e.rows(r.start, r.len()).into_owned()
    }

    /// Diagonal entries `c_11 .. c_mm`.
    pub fn diag(&self) -> Vec<f64> {
        (0..self.m()).map(|i| self.c_e[(i, i)]).collect()
    }

    /// `rank(C_aa)`: number of positive diagonal entries in the task block.
    pub fn task_rank(&self, a: usize) -> usize {
        self.task_range(a).filter(|&i| self.c_e[(i, i)] > 0.0).count()
    }

    /// `C_e * J_hat_e`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.c_e * &self.j_hat_e
    }

    /// Product of the diagonal of `C` (lower triangular determinant).
    pub fn det_c(&self) -> f64 {
        self.diag().iter().product()
    }
}

/// Headroom over the SVD rank rule for Gram-Schmidt residuals. Residuals of
/// exactly dependent rows reach a few hundred times `max(m, n) eps ||J||`
/// in random trials, far above the SVD noise floor.
pub const ZERO_TOL_FACTOR: f64 = 1024.0;

/// `ZERO_TOL_FACTOR * max(m, n) * eps * ||J||`.
pub fn default_zero_tol(j: &DMatrix<f64>) -> f64 {
    let (m, n) = j.shape();
    ZERO_TOL_FACTOR * default_rank_tol(m, n, spectral_norm(j))
}

/// Orthogonalizes the rows of `J` in priority order with default options and
/// the given zero tolerance.
pub fn orthogonalize(j: &DMatrix<f64>, task_dims: &[usize], zero_tol: f64) -> Result<PriorityDecomposition> {
    orthogonalize_with(
        j,
        task_dims,
        &OrthOptions {
            zero_tol,
            ..OrthOptions::default()
        },
    )
}

pub fn orthogonalize_with(
    j: &DMatrix<f64>,
    task_dims: &[usize],
    opts: &OrthOptions,
) -> Result<PriorityDecomposition> {
    check_matrix(j, "orthogonalize")?;
    let (m, n) = j.shape();
    if m > n {
        return Err(PikError::domain(format!(
            "orthogonalize needs m <= n, got {m}x{n}; pad the system with virtual joints"
        )));
    }
    check_task_dims(task_dims, m)?;
    if !(opts.zero_tol >= 0.0) || !opts.zero_tol.is_finite() {
        return Err(PikError::domain(format!("zero_tol must be finite and >= 0, got {}", opts.zero_tol)));
    }
    let tol = if opts.zero_tol > 0.0 {
        opts.zero_tol
    } else {
        default_zero_tol(j)
    };

    let mut v = j.transpose();
    let mut r = DMatrix::<f64>::zeros(m, m);
    let mut q = DMatrix::<f64>::zeros(n, m);
    let mut nonzero = vec![false; m];

    for a in 0..m {
        if opts.reorthogonalize {
            for k in 0..a {
                if nonzero[k] {
                    let s = q.column(k).dot(&v.column(a));
                    let qk = q.column(k).into_owned();
                    v.column_mut(a).axpy(-s, &qk, 1.0);
                    r[(k, a)] += s;
                }
            }
        }
        let raa = v.column(a).norm();
        if raa > tol {
            let qa = v.column(a) / raa;
            r[(a, a)] = raa;
            nonzero[a] = true;
            for b in (a + 1)..m {
                let rab = qa.dot(&v.column(b));
                r[(a, b)] = rab;
                v.column_mut(b).axpy(-rab, &qa, 1.0);
            }
            q.set_column(a, &qa);
        }
    }

    let mut c_e = DMatrix::<f64>::zeros(m, n);
    c_e.view_mut((0, 0), (m, m)).copy_from(&r.transpose());

    let basis: Vec<DVector<f64>> = (0..m).filter(|&a| nonzero[a]).map(|a| q.column(a).into_owned()).collect();
    let completion = complete_basis(j, &basis, n, opts.completion);
    let mut fill = completion.into_iter();
    let mut j_hat_e = DMatrix::<f64>::zeros(n, n);
    for row in 0..n {
        let vec = if row < m && nonzero[row] {
            q.column(row).into_owned()
        } else {
            fill.next().expect("completion provides n - rank vectors")
        };
        j_hat_e.set_row(row, &vec.transpose());
    }

    Ok(PriorityDecomposition {
        c_e,
        j_hat_e,
        task_dims: task_dims.to_vec(),
        offsets: offsets_of(task_dims),
    })
}

/// Extends the orthonormal `basis` to `n` vectors. The added vectors span the
/// orthogonal complement of `basis`, which is `N(J)`.
fn complete_basis(
    j: &DMatrix<f64>,
    basis: &[DVector<f64>],
    n: usize,
    completion: NullSpaceCompletion,
) -> Vec<DVector<f64>> {
    let need = n - basis.len();
    if need == 0 {
        return Vec::new();
    }
    let candidates: Vec<DVector<f64>> = match completion {
        NullSpaceCompletion::Svd => {
            let mut padded = DMatrix::<f64>::zeros(n, n);
            padded.view_mut((0, 0), j.shape()).copy_from(j);
            let f = svd(&padded);
            // ascending singular value, ties by index
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| f.s[x].total_cmp(&f.s[y]));
            order.into_iter().map(|i| f.v_t.row(i).transpose()).collect()
        }
        NullSpaceCompletion::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4 * n)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
                .collect()
        }
    };
    let standard = (0..n).map(|i| DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 }));

    let mut out: Vec<DVector<f64>> = Vec::with_capacity(need);
    for cand in candidates.into_iter().chain(standard) {
        if out.len() == need {
            break;
        }
        let mut w = cand.normalize();
        for _ in 0..2 {
            for b in basis.iter().chain(out.iter()) {
                let s = b.dot(&w);
                w.axpy(-s, b, 1.0);
            }
        }
        let norm = w.norm();
        if norm > 0.5 {
            out.push(w / norm);
        }
    }
    out
}

/// Orthogonal projector `P_a = J_hat_a^T C_aa^+ C_aa J_hat_a` (`n x n`).
///
/// With the column-zeroing rule `C_aa^+ C_aa` selects exactly the rows of the
/// block with a positive diagonal entry, so `P_a` is assembled from those rows.
pub fn projector(decomp: &PriorityDecomposition, a: usize) -> Result<DMatrix<f64>> {
    if a >= decomp.num_tasks() {
        return Err(PikError::IndexOutOfRange {
            index: a,
            len: decomp.num_tasks(),
        });
    }
    let n = decomp.n();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for i in decomp.task_range(a) {
        if decomp.c_e[(i, i)] > 0.0 {
            let row = decomp.j_hat_e.row(i).transpose();
            p.ger(1.0, &row, &row, 1.0);
        }
    }
    Ok(p)
}

/// Singular-set membership data at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularityReport {
    /// `prod_a c_aa`.
    pub det_c: f64,
    pub diag_c: Vec<f64>,
    pub rank_j: usize,
    /// All `c_aa` above the tolerance (`det(C) != 0`).
    pub in_g_s: bool,
    /// `rank(J) = m`.
    pub in_h_s: bool,
    /// Threshold actually used.
    pub tol: f64,
}

impl SingularityReport {
    pub fn min_diag(&self) -> f64 {
        self.diag_c.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `tol = 0` selects [`default_zero_tol`], the threshold `orthogonalize` uses.
pub fn singularity_metrics(decomp: &PriorityDecomposition, j: &DMatrix<f64>, tol: f64) -> SingularityReport {
    let m = j.nrows();
    let tol = if tol > 0.0 { tol } else { default_zero_tol(j) };
    let diag_c = decomp.diag();
    let rank_j = numerical_rank(j, tol);
    SingularityReport {
        det_c: diag_c.iter().product(),
        in_g_s: diag_c.iter().all(|&c| c > tol),
        in_h_s: rank_j == m,
        rank_j,
        diag_c,
        tol,
    }
}
