//! Closed-form systems and experiments: the planar two-link arm with its
//! analytic QR branches, Hessians at the singular lattice and pinched
//! activations; waypoint targets; a three-link arm; seeded random systems;
//! and Lyapunov stability probes.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PikError, Result};
use crate::numlin::{numerical_rank, singular_values};
use crate::orthqr::{projector, PriorityDecomposition};
use crate::solver::{pik_velocity, SolverConfig, SolverFamily};
use crate::system::{ActivationFn, DesiredFn, ForwardKinematicsFn, KinematicSystem, TrackingSystem};
use crate::trajectory::{error_dynamics_terms, integrate, IntegratorConfig, Outcome};

/// Absolute tolerance for snapping angles onto multiples of `pi`.
pub const LATTICE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLinkParams {
    pub l1: f64,
    pub l2: f64,
}

impl TwoLinkParams {
    pub fn new(l1: f64, l2: f64) -> Result<Self> {
        if !(l1.is_finite() && l1 > 0.0 && l2.is_finite() && l2 > 0.0) {
            return Err(PikError::domain(format!("link lengths must be > 0, got ({l1}, {l2})")));
        }
        Ok(Self { l1, l2 })
    }

    /// Outer reach `L1 + L2`.
    pub fn reach(&self) -> f64 {
        self.l1 + self.l2
    }

    /// Inner radius `|L1 - L2|`.
    pub fn inner_radius(&self) -> f64 {
        (self.l1 - self.l2).abs()
    }
}

/// End-effector position and its Jacobian. Time does not enter.
pub fn two_link_fk(p: &TwoLinkParams, _t: f64, q: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = (q[0] + q[1]).sin_cos();
    let f = DVector::from_vec(vec![p.l1 * c1 + p.l2 * c12, p.l1 * s1 + p.l2 * s12]);
    let j = DMatrix::from_row_slice(
        2,
        2,
        &[-p.l1 * s1 - p.l2 * s12, -p.l2 * s12, p.l1 * c1 + p.l2 * c12, p.l2 * c12],
    );
    (f, j)
}

/// Forward kinematics of a planar serial arm with the given link lengths.
pub fn planar_fk(lengths: &[f64], q: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = lengths.len();
    let mut theta = 0.0;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        theta += q[i];
        pts.push(theta.sin_cos());
    }
    let mut f = DVector::zeros(2);
    let mut j = DMatrix::zeros(2, n);
    for i in (0..n).rev() {
        let (s, c) = pts[i];
        f[0] += lengths[i] * c;
        f[1] += lengths[i] * s;
        for col in 0..=i {
            j[(0, col)] -= lengths[i] * s;
            j[(1, col)] += lengths[i] * c;
        }
    }
    (f, j)
}

fn unit_perp(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![-v[1], v[0]])
}

/// Nearest multiple of `pi` when within [`LATTICE_SNAP`].
fn snap_pi(x: f64) -> Option<i64> {
    let k = (x / PI).round();
    ((x - k * PI).abs() <= LATTICE_SNAP).then_some(k as i64)
}

/// Branch-wise QR of the two-link Jacobian with tasks `(x, y)`.
///
/// `q in pi Z^2`: the first row vanishes and only `j_2` survives.
/// `q_2 in pi Z` otherwise: the rows are parallel and the second task is
/// fully shadowed. Otherwise the generic branch with
/// `N_1 = I - j_1^T j_1 / (j_1 j_1^T)`. Rows with a zero diagonal are
/// completed by the perpendicular unit vector.
pub fn two_link_analytic_qr(p: &TwoLinkParams, t: f64, q: &DVector<f64>) -> Result<PriorityDecomposition> {
    let (_, jac) = two_link_fk(p, t, q);
    let j1 = jac.row(0).transpose();
    let j2 = jac.row(1).transpose();
    let on1 = snap_pi(q[0]).is_some();
    let on2 = snap_pi(q[1]).is_some();
    let mut c = DMatrix::zeros(2, 2);
    let mut jh = DMatrix::zeros(2, 2);
    if on1 && on2 {
        let c22 = j2.norm();
        let h2 = &j2 / c22;
        c[(1, 1)] = c22;
        jh.set_row(0, &unit_perp(&h2).transpose());
        jh.set_row(1, &h2.transpose());
    } else if on2 {
        let c11 = j1.norm();
        let h1 = &j1 / c11;
        c[(0, 0)] = c11;
        c[(1, 0)] = j1.dot(&j2) / c11;
        jh.set_row(0, &h1.transpose());
        jh.set_row(1, &unit_perp(&h1).transpose());
    } else {
        let n11 = j1.dot(&j1);
        let c11 = n11.sqrt();
        let n1 = DMatrix::identity(2, 2) - &j1 * j1.transpose() / n11;
        let j2n = n1 * &j2;
        // j_2 N_1 j_2^T = ||N_1 j_2||^2; the norm avoids cancellation near q_2 = pi
        let c22 = j2n.norm();
        c[(0, 0)] = c11;
        c[(1, 0)] = j1.dot(&j2) / c11;
        c[(1, 1)] = c22;
        jh.set_row(0, &(&j1 / c11).transpose());
        jh.set_row(1, &(j2n / c22).transpose());
    }
    PriorityDecomposition::from_parts(c, jh, vec![1, 1])
}

/// Components of the singular lattice `pi Z^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SingularClass {
    /// `pi Z x 2 pi Z`: the arm is stretched, `|f_1| = L1 + L2`.
    Y1,
    /// `pi Z x (pi + 2 pi Z)`: the arm is folded.
    Y2,
}

/// Lattice class of `q`, or `None` off the lattice.
pub fn classify_lattice(q: &DVector<f64>) -> Option<SingularClass> {
    let _ = snap_pi(q[0])?;
    let k2 = snap_pi(q[1])?;
    Some(if k2.rem_euclid(2) == 0 {
        SingularClass::Y1
    } else {
        SingularClass::Y2
    })
}

/// `D_q(c_11 j_hat_1^T)` at a point of `pi Z^2`, i.e. the Hessian of `f_1`.
pub fn two_link_hessian_at_singularity(p: &TwoLinkParams, q: &DVector<f64>) -> Result<(DMatrix<f64>, SingularClass)> {
    let (Some(k1), Some(k2)) = (snap_pi(q[0]), snap_pi(q[1])) else {
        return Err(PikError::domain(format!(
            "q = ({}, {}) is not on the lattice pi Z^2",
            q[0], q[1]
        )));
    };
    let (l1, l2) = (p.l1, p.l2);
    let h = match (k1.rem_euclid(2), k2.rem_euclid(2)) {
        (0, 0) => [-l1 - l2, -l2, -l2, -l2],
        (1, 0) => [l1 + l2, l2, l2, l2],
        (0, 1) => [-l1 + l2, l2, l2, l2],
        _ => [l1 - l2, -l2, -l2, -l2],
    };
    let class = if k2.rem_euclid(2) == 0 {
        SingularClass::Y1
    } else {
        SingularClass::Y2
    };
    Ok((DMatrix::from_row_slice(2, 2, &h), class))
}

/// Distance from `q` to `pi Z x (offset + 2 pi Z)`.
fn lattice_distance(q: &DVector<f64>, offset: f64) -> f64 {
    let d1 = q[0] - PI * (q[0] / PI).round();
    let d2 = q[1] - offset - 2.0 * PI * ((q[1] - offset) / (2.0 * PI)).round();
    d1.hypot(d2)
}

pub fn distance_to_y1(q: &DVector<f64>) -> f64 {
    lattice_distance(q, 0.0)
}

pub fn distance_to_y2(q: &DVector<f64>) -> f64 {
    lattice_distance(q, PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    /// `min(1, d / r2)`.
    Lipschitz,
    /// `1 - exp(1 - 1 / (1 - (d / r2)^2))` inside the ball, `1` outside.
    Smooth,
}

impl Smoothness {
    /// Smallest radius for which the profile stays below `d` everywhere.
    pub fn min_radius(self) -> f64 {
        match self {
            Smoothness::Lipschitz => 1.0,
            Smoothness::Smooth => 1.2,
        }
    }

    pub fn profile(self, d: f64, r2: f64) -> f64 {
        let x = d / r2;
        if x >= 1.0 {
            return 1.0;
        }
        match self {
            Smoothness::Lipschitz => x,
            Smoothness::Smooth => 1.0 - (1.0 - 1.0 / (1.0 - x * x)).exp(),
        }
    }
}

/// Pinched activation for the two-link arm.
///
/// `psi_2` vanishes on `Y2`, and for `alpha = 4` `psi_1` vanishes on `Y1`;
/// both rise to 1 at distance `r2` from the respective lattice. Every
/// profile satisfies `psi(q') <= ||q' - q||` for lattice points `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    pub r2: f64,
    /// Lower bound on the activation at distance `r2 / 2` or more from the
    /// pinched lattice.
    pub floor: f64,
    pub smoothness: Smoothness,
}

impl ActivationSpec {
    pub fn validate(&self) -> Result<()> {
        let lo = self.smoothness.min_radius();
        if !(self.r2 >= lo && self.r2 <= PI / 2.0) {
            return Err(PikError::config(
                "activation.r2",
                format!("must lie in [{lo}, pi/2] for this smoothness, got {}", self.r2),
            ));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(PikError::config("activation.floor", format!("must lie in (0, 1], got {}", self.floor)));
        }
        let at_half = self.smoothness.profile(0.5 * self.r2, self.r2);
        if at_half < self.floor {
            return Err(PikError::config(
                "activation.floor",
                format!("exceeds the profile value {at_half} at r2 / 2"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLinkActivation {
    pub spec: ActivationSpec,
    pub pinch_first: bool,
}

impl TwoLinkActivation {
    pub fn eval(&self, q: &DVector<f64>) -> [f64; 2] {
        let ActivationSpec { r2, smoothness, .. } = self.spec;
        let psi1 = if self.pinch_first {
            smoothness.profile(distance_to_y1(q), r2)
        } else {
            1.0
        };
        [psi1, smoothness.profile(distance_to_y2(q), r2)]
    }

    pub fn into_fn(self) -> Arc<ActivationFn> {
        Arc::new(move |_, q| self.eval(q).to_vec())
    }
}

pub fn build_activation(spec: ActivationSpec, family: SolverFamily) -> Result<TwoLinkActivation> {
    spec.validate()?;
    Ok(TwoLinkActivation {
        spec,
        pinch_first: family == SolverFamily::Pi4,
    })
}

pub fn identity_activation(l: usize) -> Arc<ActivationFn> {
    Arc::new(move |_, _| vec![1.0; l])
}

/// `35 s^4 - 84 s^5 + 70 s^6 - 20 s^7`: three vanishing derivatives at both ends.
fn ease(s: f64) -> (f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let v = s3 * s * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s)));
    let dv = 140.0 * s3 * (1.0 - s).powi(3);
    (v, dv)
}

/// Piecewise eased path through timed waypoints, held constant outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoints {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
}

impl Waypoints {
    pub fn new(times: Vec<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != points.len() {
            return Err(PikError::config("target.waypoints", "need at least one waypoint, each with a time"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(PikError::config("target.waypoints", "times must be finite and strictly increasing"));
        }
        let m = points[0].len();
        if points.iter().any(|p| p.len() != m || p.iter().any(|v| !v.is_finite())) {
            return Err(PikError::config("target.waypoints", "points must be finite and of equal length"));
        }
        Ok(Self { times, points })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let m = self.dim();
        let k = self.times.partition_point(|&ti| ti <= t);
        if k == 0 {
            return (self.points[0].clone(), DVector::zeros(m));
        }
        if k == self.times.len() {
            return (self.points[k - 1].clone(), DVector::zeros(m));
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let span = t1 - t0;
        let (s, ds) = ease((t - t0) / span);
        let delta = &self.points[k] - &self.points[k - 1];
        (&self.points[k - 1] + &delta * s, delta * (ds / span))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Constant(DVector<f64>),
    Waypoints(Waypoints),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Constant(p) => p.len(),
            Target::Waypoints(w) => w.dim(),
        }
    }

    pub fn desired_fn(&self) -> Arc<DesiredFn> {
        match self.clone() {
            Target::Constant(p) => {
                let m = p.len();
                Arc::new(move |_| (p.clone(), DVector::zeros(m)))
            }
            Target::Waypoints(w) => Arc::new(move |t| w.eval(t)),
        }
    }

    /// Value at `t -> infinity`.
    pub fn final_point(&self) -> DVector<f64> {
        match self {
            Target::Constant(p) => p.clone(),
            Target::Waypoints(w) => w.points.last().unwrap().clone(),
        }
    }
}

fn with_time_column(j: DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = j.shape();
    let mut df = DMatrix::zeros(m, n + 1);
    df.columns_mut(1, n).copy_from(&j);
    df
}

/// Two-link tracking system with tasks `x` (first) and `y` (second).
pub fn two_link_system(
    params: TwoLinkParams,
    target: &Target,
    gains: [f64; 2],
    activation: Arc<ActivationFn>,
) -> Result<TrackingSystem> {
    if target.dim() != 2 {
        return Err(PikError::config("target", format!("two-link targets have 2 coordinates, got {}", target.dim())));
    }
    let fk: Arc<ForwardKinematicsFn> = Arc::new(move |t, q| {
        let (f, j) = two_link_fk(&params, t, q);
        Ok((f, with_time_column(j)))
    });
    TrackingSystem::new(vec![1, 1], 2, fk, target.desired_fn(), gains.to_vec(), activation)
}

/// Planar arm with `lengths.len()` joints and the tasks `x`, `y`.
pub fn planar_arm_system(
    lengths: Vec<f64>,
    target: &Target,
    gains: [f64; 2],
    activation: Arc<ActivationFn>,
) -> Result<TrackingSystem> {
    if lengths.len() < 2 || lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(PikError::config("system", "need at least two positive link lengths"));
    }
    if target.dim() != 2 {
        return Err(PikError::config("target", format!("planar targets have 2 coordinates, got {}", target.dim())));
    }
    let n = lengths.len();
    let fk: Arc<ForwardKinematicsFn> = Arc::new(move |_, q| {
        let (f, j) = planar_fk(&lengths, q);
        Ok((f, with_time_column(j)))
    });
    TrackingSystem::new(vec![1, 1], n, fk, target.desired_fn(), gains.to_vec(), activation)
}

/// Name of the generator behind [`RandomMap`], recorded in reports.
pub const RANDOM_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.3), uniform(-1, 1) entries";

/// `f(q) = A q + B sin(q)` with seeded entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMap {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl RandomMap {
    pub fn new(seed: u64, m: usize, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        Self { a, b }
    }

    pub fn eval(&self, q: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let f = &self.a * q + &self.b * q.map(f64::sin);
        let mut j = self.b.clone();
        for (c, qc) in q.iter().enumerate() {
            j.column_mut(c).scale_mut(qc.cos());
        }
        (f, j + &self.a)
    }
}

pub fn random_system(
    seed: u64,
    task_dims: Vec<usize>,
    n: usize,
    target: &Target,
    gains: Vec<f64>,
) -> Result<TrackingSystem> {
    let m: usize = task_dims.iter().sum();
    if target.dim() != m {
        return Err(PikError::config("target", format!("expected {m} target coordinates, got {}", target.dim())));
    }
    let map = RandomMap::new(seed, m, n);
    let fk: Arc<ForwardKinematicsFn> = Arc::new(move |_, q| {
        let (f, j) = map.eval(q);
        Ok((f, with_time_column(j)))
    });
    let l = task_dims.len();
    TrackingSystem::new(task_dims, n, fk, target.desired_fn(), gains, identity_activation(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    AsymptoticallyStableEvidence,
    SemistableEvidence,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub delta: f64,
    pub samples: usize,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
    /// Limit points and final errors are compared at this tolerance.
    pub limit_tol: f64,
    pub lyapunov_slack: f64,
    /// Leading fraction of the horizon ignored by the decrease check.
    pub transient: f64,
}

impl ProbeOptions {
    pub fn new(delta: f64, samples: usize, horizon: f64, step: f64, seed: u64) -> Self {
        Self {
            delta,
            samples,
            horizon,
            step,
            seed,
            limit_tol: 1e-4,
            lyapunov_slack: 1e-10,
            transient: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSample {
    pub offset: Vec<f64>,
    pub max_excursion: f64,
    pub limit: Vec<f64>,
    pub limit_distance: f64,
    pub final_error: f64,
    pub final_speed: f64,
    /// Largest one-step increase of `V` after the transient.
    pub v_max_increase: f64,
    /// `(t, V)` at up to 101 evenly spaced steps.
    pub v_trace: Vec<(f64, f64)>,
    pub outcome: Outcome,
}

/// Checkable hypotheses at `q_inf`, reported rather than assumed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeHypotheses {
    pub target_residual: f64,
    pub rank_j: usize,
    pub rank_psi: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityProbeReport {
    pub q_inf: Vec<f64>,
    pub p: Vec<f64>,
    pub delta: f64,
    pub horizon: f64,
    /// Per-task weights of `V = 1/2 sum_a p_a ||e_a||^2`.
    pub weights: Vec<f64>,
    pub hypotheses: ProbeHypotheses,
    pub samples: Vec<ProbeSample>,
    pub max_excursion: f64,
    pub max_final_error: f64,
    pub max_limit_distance: f64,
    pub verdict: Verdict,
}

fn uniform_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r = radius * rng.gen::<f64>().powf(1.0 / n as f64);
    dir.normalize() * r
}

/// Per-task weights making `V` a Lyapunov function on the ball.
///
/// With `M = C C_D^T L Psi K`, `phi_aa = min sigma_min(M_aa)` and
/// `phi_ab = max sigma_max(M_ab) / 2` over the sample points, the weights are
/// chosen so that the comparison matrix `Q` (`q_aa = p_a phi_aa`,
/// `q_ab = -p_a phi_ab` for `b < a`) stays positive definite: `p_1 = 1` and
/// each later weight is half its Schur-complement limit, capped at 1.
pub fn lyapunov_weights(sys: &TrackingSystem, config: &SolverConfig, points: &[DVector<f64>]) -> Result<Vec<f64>> {
    let l = sys.task_dims().len();
    let mut phi = DMatrix::<f64>::zeros(l, l);
    for a in 0..l {
        phi[(a, a)] = f64::INFINITY;
    }
    for q in points {
        let sol = pik_velocity(0.0, q, sys, config)?;
        let ev = sys.evaluate(0.0, q)?;
        let terms = error_dynamics_terms(&ev, &sol.decomp, &sol.gain.l, sys);
        for a in 0..l {
            for b in 0..=a {
                let mab = terms.a(a, b) * (ev.psi[b] * sys.gains()[b]);
                let s = singular_values(&mab);
                if a == b {
                    phi[(a, a)] = phi[(a, a)].min(s.last().copied().unwrap_or(0.0));
                } else {
                    phi[(a, b)] = phi[(a, b)].max(0.5 * s.first().copied().unwrap_or(0.0));
                }
            }
        }
    }
    if (0..l).any(|a| !(phi[(a, a)] > 0.0)) {
        return Err(PikError::domain("diagonal blocks of M are not positive definite on the probe ball"));
    }
    let mut p = vec![1.0];
    let mut q = DMatrix::from_element(1, 1, phi[(0, 0)]);
    for a in 1..l {
        let w = DVector::from_fn(a, |b, _| phi[(a, b)]);
        let quad = match q.clone().cholesky() {
            Some(ch) => w.dot(&ch.solve(&w)),
            None => return Err(PikError::numerical("comparison matrix lost definiteness")),
        };
        let pa = if quad > 0.0 { (0.5 * phi[(a, a)] / quad).min(1.0) } else { 1.0 };
        p.push(pa);
        let mut grown = DMatrix::zeros(a + 1, a + 1);
        grown.view_mut((0, 0), (a, a)).copy_from(&q);
        for b in 0..a {
            grown[(a, b)] = -pa * phi[(a, b)];
            grown[(b, a)] = -pa * phi[(a, b)];
        }
        grown[(a, a)] = pa * phi[(a, a)];
        q = grown;
    }
    Ok(p)
}

fn weighted_v(e: &DVector<f64>, dims: &[usize], w: &[f64]) -> f64 {
    let mut off = 0;
    let mut v = 0.0;
    for (a, &ma) in dims.iter().enumerate() {
        v += w[a] * e.rows(off, ma).norm_squared();
        off += ma;
    }
    0.5 * v
}

/// Integrates from `samples` points uniform in `q_inf + delta B_n` with the
/// target held constant and summarizes limits, excursions and `V` traces.
pub fn stability_probe(
    sys: &TrackingSystem,
    config: &SolverConfig,
    q_inf: &DVector<f64>,
    opts: &ProbeOptions,
) -> Result<StabilityProbeReport> {
    if !(opts.delta > 0.0 && opts.samples > 0 && opts.horizon > 0.0 && opts.step > 0.0) {
        return Err(PikError::config("probe", "delta, samples, horizon and step must be positive"));
    }
    let n = sys.joint_dim();
    let m = sys.task_dim_total();
    if q_inf.len() != n {
        return Err(PikError::config("probe.q_inf", format!("expected {n} joints, got {}", q_inf.len())));
    }
    let ev = sys.evaluate(0.0, q_inf)?;
    let psi_rank = sys
        .task_dims()
        .iter()
        .zip(&ev.psi)
        .map(|(ma, psi)| if *psi > 0.0 { *ma } else { 0 })
        .sum();
    let fq = ev.f_q();
    let hypotheses = ProbeHypotheses {
        target_residual: ev.e.norm(),
        rank_j: numerical_rank(&fq, 0.0),
        rank_psi: psi_rank,
        m,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let offsets: Vec<DVector<f64>> = (0..opts.samples).map(|_| uniform_ball(&mut rng, n, opts.delta)).collect();
    let ball: Vec<DVector<f64>> = std::iter::once(q_inf.clone())
        .chain((0..64).map(|_| q_inf + uniform_ball(&mut rng, n, 5.0 * opts.delta)))
        .collect();
    let weights = match lyapunov_weights(sys, config, &ball) {
        Ok(w) => w,
        Err(_) => vec![1.0; sys.task_dims().len()],
    };

    let icfg = IntegratorConfig::rk4(opts.step, opts.horizon);
    let dims = sys.task_dims().to_vec();
    let results: Vec<ProbeSample> = offsets
        .par_iter()
        .map(|off| {
            let q0 = q_inf + off;
            let rec = match integrate(sys, config, &icfg, 0.0, &q0) {
                Ok(r) => r,
                Err(e) => {
                    return ProbeSample {
                        offset: off.iter().copied().collect(),
                        max_excursion: f64::NAN,
                        limit: q0.iter().copied().collect(),
                        limit_distance: f64::NAN,
                        final_error: f64::NAN,
                        final_speed: f64::NAN,
                        v_max_increase: f64::NAN,
                        v_trace: Vec::new(),
                        outcome: Outcome::Failed {
                            t: 0.0,
                            kind: e.kind().to_string(),
                            message: e.to_string(),
                        },
                    }
                }
            };
            let vs: Vec<f64> = rec.steps.iter().map(|s| weighted_v(&s.e, &dims, &weights)).collect();
            let skip = rec.steps.partition_point(|s| s.t < opts.transient * opts.horizon);
            let v_max_increase = vs[skip.min(vs.len() - 1)..]
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::NEG_INFINITY, f64::max);
            let stride = (rec.steps.len() / 100).max(1);
            let v_trace = rec
                .steps
                .iter()
                .zip(&vs)
                .enumerate()
                .filter(|(k, _)| k % stride == 0 || *k == rec.steps.len() - 1)
                .map(|(_, (s, v))| (s.t, *v))
                .collect();
            let last = rec.last();
            ProbeSample {
                offset: off.iter().copied().collect(),
                max_excursion: rec.steps.iter().map(|s| (&s.q - q_inf).norm()).fold(0.0, f64::max),
                limit: last.q.iter().copied().collect(),
                limit_distance: (&last.q - q_inf).norm(),
                final_error: last.e.norm(),
                final_speed: last.u.norm(),
                v_max_increase,
                v_trace,
                outcome: rec.outcome.clone(),
            }
        })
        .collect();

    let max_of = |f: &dyn Fn(&ProbeSample) -> f64| results.iter().map(f).fold(0.0, f64::max);
    let max_excursion = max_of(&|s| s.max_excursion);
    let max_final_error = max_of(&|s| s.final_error);
    let max_limit_distance = max_of(&|s| s.limit_distance);
    let all_ok = results.iter().all(|s| s.outcome == Outcome::Completed && s.final_error.is_finite());
    let verdict = if !all_ok || max_final_error > opts.limit_tol {
        Verdict::Inconclusive
    } else if max_limit_distance <= opts.limit_tol {
        Verdict::AsymptoticallyStableEvidence
    } else {
        Verdict::SemistableEvidence
    };
    Ok(StabilityProbeReport {
        q_inf: q_inf.iter().copied().collect(),
        p: sys.desired(0.0).0.iter().copied().collect(),
        delta: opts.delta,
        horizon: opts.horizon,
        weights,
        hypotheses,
        samples: results,
        max_excursion,
        max_final_error,
        max_limit_distance,
        verdict,
    })
}

/// `(P_1, P_2)` of a two-link decomposition.
pub fn two_link_projectors(d: &PriorityDecomposition) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((projector(d, 0)?, projector(d, 1)?))
}
