//! Integration of `q_dot = u(t, q)` with per-step diagnostics, the tracking
//! error dynamics and convergence summaries.

use nalgebra::{DMatrix, DVector};

use crate::error::{PikError, Result};
use crate::numlin::singular_values;
use crate::orthqr::PriorityDecomposition;
use crate::solver::{pik_velocity, task_residuals, velocity_bound, SolverConfig, VelocitySolution};
use crate::system::{KinematicSystem, TrackingEval, TrackingSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Classical fixed-step Runge-Kutta of order 4.
    Rk4,
    /// Dormand-Prince 5(4) with error control; `step` is the initial and maximal step.
    DormandPrince { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    pub step: f64,
    pub t_end: f64,
    pub min_step: f64,
    /// Halve the step (down to `min_step`) when `|det C|` at the new point
    /// falls below `guard_factor` times the singularity tolerance.
    pub singularity_guard: bool,
    pub guard_factor: f64,
}

impl IntegratorConfig {
    pub fn rk4(step: f64, t_end: f64) -> Self {
        Self {
            method: Method::Rk4,
            step,
            t_end,
            min_step: step / 64.0,
            singularity_guard: true,
            guard_factor: 10.0,
        }
    }

    pub fn validate(&self, t0: f64) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(PikError::config("integrator.step", "must be finite and > 0"));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.step) {
            return Err(PikError::config("integrator.min_step", "must satisfy 0 < min_step <= step"));
        }
        if !(self.t_end.is_finite() && self.t_end > t0) {
            return Err(PikError::config("integrator.t_end", format!("must be finite and > t0 = {t0}")));
        }
        if let Method::DormandPrince { rtol, atol } = self.method {
            if !(rtol > 0.0 && atol > 0.0) {
                return Err(PikError::config("integrator.method", "tolerances must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// `|det C|` dropped into the guard band.
    EnteredSingularBand,
    LeftSingularBand,
    StepHalved,
    /// The adaptive controller hit `min_step` and accepted anyway.
    MinStepForced,
    /// `||u||` exceeded the assembled norm bound.
    VelocityBoundExceeded,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrajectoryEvent {
    pub t: f64,
    pub step: usize,
    pub kind: EventKind,
    pub value: f64,
}

/// Per-step values. Task-error fields are empty for systems without a
/// tracking structure.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub u: DVector<f64>,
    pub e: DVector<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub gamma: Vec<f64>,
    pub det_c: f64,
    pub diag_c: Vec<f64>,
    pub in_g_s: bool,
    pub sigma_min_psi_a: Vec<f64>,
    pub sigma_min_psi_c: Vec<f64>,
    /// `lambda_a^2`, `f64::INFINITY` for the infinite state.
    pub lambda_sq: Vec<f64>,
    /// `||e_a^res||`.
    pub residual_norms: Vec<f64>,
    pub u_bound: f64,
    /// Threshold used for the singular-set flags.
    pub tol: f64,
}

/// Trapezoidal running integrals up to a step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningIntegrals {
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
    pub eta_sq: Vec<f64>,
    pub u_norm: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    Failed { t: f64, kind: String, message: String },
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub task_dims: Vec<usize>,
    pub n: usize,
    pub config: SolverConfig,
    pub steps: Vec<StepRecord>,
    pub integrals: Vec<RunningIntegrals>,
    pub events: Vec<TrajectoryEvent>,
    pub outcome: Outcome,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("records hold the initial step")
    }

    pub fn is_complete(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    /// `min_k |c_ii(x(t_k))|` for every row `i`.
    pub fn min_abs_diag_c(&self) -> Vec<f64> {
        let m = self.task_dims.iter().sum();
        let mut out = vec![f64::INFINITY; m];
        for s in &self.steps {
            for (o, c) in out.iter_mut().zip(&s.diag_c) {
                *o = o.min(c.abs());
            }
        }
        out
    }
}

/// `A_ab` for `b <= a` (stored as `a_blocks[a][b]`) and `b_a`.
#[derive(Debug, Clone)]
pub struct ErrorDynamicsTerms {
    pub a_blocks: Vec<Vec<DMatrix<f64>>>,
    pub b: Vec<DVector<f64>>,
}

impl ErrorDynamicsTerms {
    pub fn a(&self, a: usize, b: usize) -> &DMatrix<f64> {
        &self.a_blocks[a][b]
    }
}

fn block_of(m: &DMatrix<f64>, d: &PriorityDecomposition, a: usize, b: usize) -> DMatrix<f64> {
    let (ra, rb) = (d.task_range(a), d.task_range(b));
    m.view((ra.start, rb.start), (ra.len(), rb.len())).into_owned()
}

fn task_slice(v: &DVector<f64>, d: &PriorityDecomposition, a: usize) -> DVector<f64> {
    let r = d.task_range(a);
    v.rows(r.start, r.len()).into_owned()
}

/// `A_ab = sum_{i=b..a} C_ai C_ii^T L_ib` and
/// `b_a = p_dot_a - f_ta - sum_{b<=a} A_ab (psi_b p_dot_b - f_tb) - sum_{b<a} k_b psi_b A_ab e_b`.
pub fn error_dynamics_terms(
    ev: &TrackingEval,
    decomp: &PriorityDecomposition,
    l: &DMatrix<f64>,
    sys: &TrackingSystem,
) -> ErrorDynamicsTerms {
    let nt = decomp.num_tasks();
    let f_t = ev.f_t();
    let mut a_blocks: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(nt);
    for a in 0..nt {
        let mut row = Vec::with_capacity(a + 1);
        for b in 0..=a {
            let mut acc = DMatrix::zeros(decomp.task_dims()[a], decomp.task_dims()[b]);
            for i in b..=a {
                acc += decomp.block(a, i) * decomp.block(i, i).transpose() * block_of(l, decomp, i, b);
            }
            row.push(acc);
        }
        a_blocks.push(row);
    }
    let k = sys.gains();
    let b = (0..nt)
        .map(|a| {
            let mut ba = task_slice(&ev.p_dot, decomp, a) - task_slice(&f_t, decomp, a);
            for bb in 0..=a {
                let ff = task_slice(&ev.p_dot, decomp, bb) * ev.psi[bb] - task_slice(&f_t, decomp, bb);
                ba -= &a_blocks[a][bb] * ff;
                if bb < a {
                    ba -= &a_blocks[a][bb] * task_slice(&ev.e, decomp, bb) * (k[bb] * ev.psi[bb]);
                }
            }
            ba
        })
        .collect();
    ErrorDynamicsTerms { a_blocks, b }
}

fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

fn step_record<S: KinematicSystem + ?Sized>(
    t: f64,
    q: &DVector<f64>,
    sol: &VelocitySolution,
    sys: &S,
    config: &SolverConfig,
) -> Result<StepRecord> {
    let d = &sol.decomp;
    let nt = d.num_tasks();
    let residual_norms = task_residuals(t, q, &sol.u, sys)?.iter().map(|r| r.norm()).collect();
    let mut rec = StepRecord {
        t,
        q: q.clone(),
        u: sol.u.clone(),
        e: DVector::zeros(0),
        psi: Vec::new(),
        phi: Vec::new(),
        eta: Vec::new(),
        rho: Vec::new(),
        gamma: Vec::new(),
        det_c: sol.report.det_c,
        diag_c: sol.report.diag_c.clone(),
        in_g_s: sol.report.in_g_s,
        sigma_min_psi_a: Vec::new(),
        sigma_min_psi_c: (0..nt).map(|a| sigma_min(&d.block(a, a))).collect(),
        lambda_sq: sol.gain.lambda_sq.iter().map(|v| v.as_extended()).collect(),
        residual_norms,
        u_bound: velocity_bound(sol, config),
        tol: sol.report.tol,
    };
    let Some(tr) = sys.tracking() else { return Ok(rec) };
    let ev = tr.evaluate(t, q)?;
    let terms = error_dynamics_terms(&ev, d, &sol.gain.l, tr);
    let k = tr.gains();
    for a in 0..nt {
        let ea = task_slice(&ev.e, d, a);
        let psi = ev.psi[a];
        let phi = ea.norm();
        let phi_plus = if phi == 0.0 { 0.0 } else { 1.0 / phi };
        let caa = d.block(a, a);
        let laa = block_of(&sol.gain.l, d, a, a);
        let aaa = terms.a(a, a);
        rec.phi.push(phi);
        rec.eta.push((caa.transpose() * (&laa * &ea) * psi).norm());
        rec.rho.push(k[a] * psi * phi_plus * phi_plus * ea.dot(&(aaa * &ea)));
        rec.gamma.push(phi_plus * ea.dot(&terms.b[a]));
        rec.sigma_min_psi_a.push(sigma_min(&(aaa * psi)));
        rec.sigma_min_psi_c[a] *= psi;
    }
    rec.e = ev.e;
    rec.psi = ev.psi;
    Ok(rec)
}

fn advance_integrals(prev: &RunningIntegrals, a: &StepRecord, b: &StepRecord) -> RunningIntegrals {
    let dt = b.t - a.t;
    let trap = |x: f64, y: f64| 0.5 * dt * (x + y);
    RunningIntegrals {
        phi: (0..a.phi.len()).map(|i| prev.phi[i] + trap(a.phi[i], b.phi[i])).collect(),
        eta: (0..a.eta.len()).map(|i| prev.eta[i] + trap(a.eta[i], b.eta[i])).collect(),
        eta_sq: (0..a.eta.len())
            .map(|i| prev.eta_sq[i] + trap(a.eta[i] * a.eta[i], b.eta[i] * b.eta[i]))
            .collect(),
        u_norm: prev.u_norm + trap(a.u.norm(), b.u.norm()),
    }
}

fn in_band(sol: &VelocitySolution, factor: f64) -> bool {
    sol.report.det_c.abs() < factor * sol.report.tol
}

struct Stepper<'a, S: ?Sized> {
    sys: &'a S,
    config: &'a SolverConfig,
}

impl<S: KinematicSystem + ?Sized> Stepper<'_, S> {
    fn eval(&self, t: f64, q: &DVector<f64>) -> Result<VelocitySolution> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(PikError::data(format!("state is not finite at t = {t}")));
        }
        pik_velocity(t, q, self.sys, self.config)
    }

    fn u(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(t, q)?.u)
    }

    /// One RK4 step; returns the new state and the solution there.
    fn rk4(&self, t: f64, q: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Result<(DVector<f64>, VelocitySolution)> {
        let k2 = self.u(t + 0.5 * h, &(q + k1 * (0.5 * h)))?;
        let k3 = self.u(t + 0.5 * h, &(q + &k2 * (0.5 * h)))?;
        let k4 = self.u(t + h, &(q + &k3 * h))?;
        let q_new = q + (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let sol = self.eval(t + h, &q_new)?;
        Ok((q_new, sol))
    }

    /// One Dormand-Prince attempt; returns the new state, the solution there
    /// (first stage of the next step) and the scaled error norm.
    fn dopri(
        &self,
        t: f64,
        q: &DVector<f64>,
        k1: &DVector<f64>,
        h: f64,
        rtol: f64,
        atol: f64,
    ) -> Result<(DVector<f64>, VelocitySolution, f64)> {
        const A: [[f64; 6]; 6] = [
            [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
        const E: [f64; 7] = [
            35.0 / 384.0 - 5179.0 / 57600.0,
            0.0,
            500.0 / 1113.0 - 7571.0 / 16695.0,
            125.0 / 192.0 - 393.0 / 640.0,
            -2187.0 / 6784.0 + 92097.0 / 339200.0,
            11.0 / 84.0 - 187.0 / 2100.0,
            -1.0 / 40.0,
        ];
        let mut k: Vec<DVector<f64>> = vec![k1.clone()];
        let mut q_new = q.clone();
        for s in 0..6 {
            let mut y = q.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[s][j] != 0.0 {
                    y.axpy(h * A[s][j], kj, 1.0);
                }
            }
            if s == 5 {
                q_new = y;
                break;
            }
            k.push(self.u(t + C[s] * h, &y)?);
        }
        let sol = self.eval(t + h, &q_new)?;
        k.push(sol.u.clone());
        let mut err = DVector::zeros(q.len());
        for (ki, ei) in k.iter().zip(E) {
            err.axpy(h * ei, ki, 1.0);
        }
        let sq: f64 = (0..q.len())
            .map(|i| {
                let sc = atol + rtol * q[i].abs().max(q_new[i].abs());
                (err[i] / sc).powi(2)
            })
            .sum();
        Ok((q_new, sol, (sq / q.len() as f64).sqrt()))
    }
}

/// Integrates `q_dot = u(t, q)` from `(t0, q0)` to `icfg.t_end`.
///
/// Stops early on a non-finite state or an evaluator error; the partial
/// record is returned with [`Outcome::Failed`]. Errors in the initial point
/// or the configuration are returned as `Err`.
pub fn integrate<S: KinematicSystem + ?Sized>(
    sys: &S,
    config: &SolverConfig,
    icfg: &IntegratorConfig,
    t0: f64,
    q0: &DVector<f64>,
) -> Result<TrajectoryRecord> {
    icfg.validate(t0)?;
    config.validate(sys.num_tasks())?;
    if q0.len() != sys.joint_dim() {
        return Err(PikError::domain(format!(
            "q0 has length {}, expected {}",
            q0.len(),
            sys.joint_dim()
        )));
    }
    let stepper = Stepper { sys, config };
    let mut sol = stepper.eval(t0, q0)?;
    let first = step_record(t0, q0, &sol, sys, config)?;
    let l = sys.num_tasks();
    let tracking = sys.tracking().is_some();
    let zero = RunningIntegrals {
        phi: vec![0.0; if tracking { l } else { 0 }],
        eta: vec![0.0; if tracking { l } else { 0 }],
        eta_sq: vec![0.0; if tracking { l } else { 0 }],
        u_norm: 0.0,
    };
    let mut rec = TrajectoryRecord {
        task_dims: sys.task_dims().to_vec(),
        n: sys.joint_dim(),
        config: config.clone(),
        steps: vec![first],
        integrals: vec![zero],
        events: Vec::new(),
        outcome: Outcome::Completed,
    };
    check_bound(&mut rec, 0);

    let mut t = t0;
    let mut q = q0.clone();
    let mut h = icfg.step;
    let mut banded = in_band(&sol, icfg.guard_factor);
    let span = icfg.t_end - t0;
    let mut step_idx = 0usize;
    while t < icfg.t_end {
        // land exactly on t_end, absorbing a final sliver
        let mut h_try = h.min(icfg.t_end - t);
        if icfg.t_end - (t + h_try) < 1e-9 * h {
            h_try = icfg.t_end - t;
        }
        let attempt = loop {
            let res = match icfg.method {
                Method::Rk4 => stepper.rk4(t, &q, &sol.u, h_try).map(|(qn, s)| (qn, s, 0.0)),
                Method::DormandPrince { rtol, atol } => stepper.dopri(t, &q, &sol.u, h_try, rtol, atol),
            };
            let (q_new, sol_new, err) = match res {
                Ok(v) => v,
                Err(e) => break Err(e),
            };
            let forced = h_try / 2.0 < icfg.min_step;
            if let Method::DormandPrince { .. } = icfg.method {
                if err > 1.0 && !forced {
                    h_try *= (0.9 * err.powf(-0.2)).max(0.2);
                    h_try = h_try.max(icfg.min_step);
                    continue;
                }
                if err > 1.0 {
                    rec.events.push(TrajectoryEvent {
                        t: t + h_try,
                        step: step_idx + 1,
                        kind: EventKind::MinStepForced,
                        value: err,
                    });
                }
            }
            if icfg.singularity_guard && !banded && in_band(&sol_new, icfg.guard_factor) && !forced {
                h_try *= 0.5;
                rec.events.push(TrajectoryEvent {
                    t,
                    step: step_idx,
                    kind: EventKind::StepHalved,
                    value: h_try,
                });
                continue;
            }
            break Ok((q_new, sol_new, err));
        };
        let (q_new, sol_new, err) = match attempt {
            Ok(v) => v,
            Err(e) => {
                rec.outcome = Outcome::Failed {
                    t,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                };
                return Ok(rec);
            }
        };
        let t_new = if (icfg.t_end - (t + h_try)).abs() <= 1e-12 * span {
            icfg.t_end
        } else {
            t + h_try
        };
        let step = match step_record(t_new, &q_new, &sol_new, sys, config) {
            Ok(s) => s,
            Err(e) => {
                rec.outcome = Outcome::Failed {
                    t: t_new,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                };
                return Ok(rec);
            }
        };
        step_idx += 1;
        let now_banded = in_band(&sol_new, icfg.guard_factor);
        if now_banded != banded {
            rec.events.push(TrajectoryEvent {
                t: t_new,
                step: step_idx,
                kind: if now_banded {
                    EventKind::EnteredSingularBand
                } else {
                    EventKind::LeftSingularBand
                },
                value: sol_new.report.det_c,
            });
        }
        banded = now_banded;
        let integ = advance_integrals(rec.integrals.last().unwrap(), rec.steps.last().unwrap(), &step);
        rec.steps.push(step);
        rec.integrals.push(integ);
        check_bound(&mut rec, step_idx);
        t = t_new;
        q = q_new;
        sol = sol_new;
        h = match icfg.method {
            Method::Rk4 => icfg.step,
            Method::DormandPrince { .. } => {
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                (h_try * grow).clamp(icfg.min_step, icfg.step)
            }
        };
    }
    Ok(rec)
}

fn check_bound(rec: &mut TrajectoryRecord, idx: usize) {
    let s = &rec.steps[idx];
    let un = s.u.norm();
    if un > s.u_bound * (1.0 + 1e-9) + 1e-12 {
        rec.events.push(TrajectoryEvent {
            t: s.t,
            step: idx,
            kind: EventKind::VelocityBoundExceeded,
            value: un,
        });
    }
}

/// Residuals of `e_dot_a + k_a psi_a A_aa e_a = b_a` on the recorded grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Per task, over steps not flagged as spikes.
    pub max_smooth: Vec<f64>,
    /// Per task, over every interior step.
    pub max_all: Vec<f64>,
    /// Step indices excluded from `max_smooth`.
    pub excluded: Vec<usize>,
    /// Per interior step `k` (index `k - 1`), per task.
    pub per_step: Vec<Vec<f64>>,
}

/// Steps within this many multiples of the median residual are smooth.
pub const SPIKE_FACTOR: f64 = 100.0;

/// Central-difference `e_dot` (three-point, non-uniform grid) against the
/// error dynamics recomputed at each recorded state.
///
/// A step is excluded from the smooth metric when its residual exceeds
/// `SPIKE_FACTOR` times the task median, or when a neighbouring step lies in
/// the singular band (`min_a |c_aa| <= singular_band`).
pub fn error_dynamics_residual(
    record: &TrajectoryRecord,
    sys: &TrackingSystem,
    singular_band: f64,
) -> Result<ResidualReport> {
    let st = &record.steps;
    if st.len() < 3 {
        return Err(PikError::domain("error_dynamics_residual needs at least 3 recorded steps"));
    }
    let nt = record.task_dims.len();
    let mut per_step = Vec::with_capacity(st.len() - 2);
    for k in 1..st.len() - 1 {
        let (t0, t1, t2) = (st[k - 1].t, st[k].t, st[k + 1].t);
        let (h0, h1) = (t1 - t0, t2 - t1);
        // exact for quadratics on non-uniform grids
        let w0 = -h1 / (h0 * (h0 + h1));
        let w1 = (h1 - h0) / (h0 * h1);
        let w2 = h0 / (h1 * (h0 + h1));
        let e_dot = &st[k - 1].e * w0 + &st[k].e * w1 + &st[k + 1].e * w2;
        let sol = pik_velocity(t1, &st[k].q, sys, &record.config)?;
        let ev = sys.evaluate(t1, &st[k].q)?;
        let terms = error_dynamics_terms(&ev, &sol.decomp, &sol.gain.l, sys);
        let row = (0..nt)
            .map(|a| {
                let ea = task_slice(&ev.e, &sol.decomp, a);
                let lhs = task_slice(&e_dot, &sol.decomp, a) + terms.a(a, a) * &ea * (sys.gains()[a] * ev.psi[a]);
                (lhs - &terms.b[a]).norm()
            })
            .collect::<Vec<f64>>();
        per_step.push(row);
    }
    let near_singular = |k: usize| {
        (k - 1..=k + 1).any(|j| st[j].diag_c.iter().any(|c| c.abs() <= singular_band))
    };
    let mut excluded = Vec::new();
    let mut max_smooth = vec![0.0f64; nt];
    let mut max_all = vec![0.0f64; nt];
    let medians: Vec<f64> = (0..nt)
        .map(|a| {
            let mut v: Vec<f64> = per_step.iter().map(|r| r[a]).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    for (i, row) in per_step.iter().enumerate() {
        let k = i + 1;
        let spike = row.iter().zip(&medians).any(|(r, m)| *r > SPIKE_FACTOR * m.max(f64::MIN_POSITIVE));
        let flagged = near_singular(k) || spike;
        if flagged {
            excluded.push(k);
        }
        for a in 0..nt {
            max_all[a] = max_all[a].max(row[a]);
            if !flagged {
                max_smooth[a] = max_smooth[a].max(row[a]);
            }
        }
    }
    Ok(ResidualReport {
        max_smooth,
        max_all,
        excluded,
        per_step,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TaskConvergence {
    pub int_eta_sq: f64,
    pub int_eta: f64,
    pub int_phi: f64,
    pub final_phi: f64,
    pub inf_sigma_min_psi_a: f64,
    pub inf_sigma_min_psi_c: f64,
    /// Last 10% of the time span adds less than 1% to the integral of `eta^2`.
    pub integral_bounded: bool,
    pub error_converged: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConvergenceReport {
    pub tasks: Vec<TaskConvergence>,
    pub int_u_norm: f64,
    pub min_abs_diag_c: Vec<f64>,
    pub min_abs_det_c: f64,
    pub steps: usize,
    pub t_final: f64,
    pub error_threshold: f64,
}

pub const DEFAULT_ERROR_THRESHOLD: f64 = 1e-3;

fn plateaued(times: &[f64], running: &[f64]) -> bool {
    let total = *running.last().unwrap();
    if total == 0.0 {
        return true;
    }
    let (t0, t1) = (times[0], *times.last().unwrap());
    let cut = t1 - 0.1 * (t1 - t0);
    let k = times.partition_point(|&t| t < cut).min(times.len() - 1);
    (total - running[k]) < 0.01 * total
}

pub fn convergence_report(record: &TrajectoryRecord, error_threshold: f64) -> ConvergenceReport {
    let times = record.times();
    let last = record.integrals.last().unwrap();
    let nt = last.phi.len();
    let tasks = (0..nt)
        .map(|a| {
            let running: Vec<f64> = record.integrals.iter().map(|i| i.eta_sq[a]).collect();
            let final_phi = record.last().phi[a];
            TaskConvergence {
                int_eta_sq: last.eta_sq[a],
                int_eta: last.eta[a],
                int_phi: last.phi[a],
                final_phi,
                inf_sigma_min_psi_a: record.steps.iter().map(|s| s.sigma_min_psi_a[a]).fold(f64::INFINITY, f64::min),
                inf_sigma_min_psi_c: record.steps.iter().map(|s| s.sigma_min_psi_c[a]).fold(f64::INFINITY, f64::min),
                integral_bounded: plateaued(&times, &running),
                error_converged: final_phi < error_threshold,
            }
        })
        .collect();
    ConvergenceReport {
        tasks,
        int_u_norm: last.u_norm,
        min_abs_diag_c: record.min_abs_diag_c(),
        min_abs_det_c: record.steps.iter().map(|s| s.det_c.abs()).fold(f64::INFINITY, f64::min),
        steps: record.steps.len(),
        t_final: record.last().t,
        error_threshold,
    }
}
