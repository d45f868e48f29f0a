//! Kinematic systems: the generic callback form, the tracking system built
//! from forward kinematics, a desired trajectory, gains and activations, and a
//! virtual-joint padding adapter.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{PikError, Result};
use crate::numlin::is_finite_vec;
use crate::orthqr::check_task_dims;

/// `(t, q) -> (f_t, F_q)`.
pub type VelocityMapFn = dyn Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync;
/// `(t, q) -> R`.
pub type MatrixFn = dyn Fn(f64, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;
/// `(t, q) -> r`.
pub type VectorFn = dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync;
/// `(t, q) -> (f, Df)` with `Df = [f_t | F_q]` of size `m x (n + 1)`.
pub type ForwardKinematicsFn = dyn Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync;
/// `t -> (p, p_dot)`.
pub type DesiredFn = dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync;
/// `(t, q) -> (psi_1, .., psi_l)`.
pub type ActivationFn = dyn Fn(f64, &DVector<f64>) -> Vec<f64> + Send + Sync;

/// A kinematic system with `l` prioritized tasks: dimensions, the velocity
/// map `F`, the preconditioner `R` and the reference `r`.
pub trait KinematicSystem: Send + Sync {
    fn task_dims(&self) -> &[usize];

    fn joint_dim(&self) -> usize;

    /// `(f_t, F_q)` at `(t, q)`; `f_t` has length `m`, `F_q` is `m x n`.
    fn velocity_map(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;

    /// `R(t, q)`; `None` means the identity.
    fn preconditioner(&self, _t: f64, _q: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }

    /// Reference `r(t, q)`.
    fn reference(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>>;

    /// The underlying tracking system, when there is one.
    fn tracking(&self) -> Option<&TrackingSystem> {
        None
    }

    fn num_tasks(&self) -> usize {
        self.task_dims().len()
    }

    fn task_dim_total(&self) -> usize {
        self.task_dims().iter().sum()
    }
}

/// Checks `(f_t, F_q)` against the system dimensions and for NaN/Inf.
pub(crate) fn checked_velocity_map<S: KinematicSystem + ?Sized>(
    sys: &S,
    t: f64,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, n) = (sys.task_dim_total(), sys.joint_dim());
    if q.len() != n {
        return Err(PikError::domain(format!("q has length {}, expected {n}", q.len())));
    }
    let (ft, fq) = sys.velocity_map(t, q)?;
    if ft.len() != m || fq.shape() != (m, n) {
        return Err(PikError::domain(format!(
            "velocity map returned f_t of length {} and F_q {}x{}, expected {m} and {m}x{n}",
            ft.len(),
            fq.nrows(),
            fq.ncols()
        )));
    }
    if !is_finite_vec(&ft) || fq.iter().any(|v| !v.is_finite()) {
        return Err(PikError::data(format!("velocity map is not finite at t = {t}")));
    }
    Ok((ft, fq))
}

/// A kinematic system assembled from closures.
#[derive(Clone)]
pub struct CallbackSystem {
    task_dims: Vec<usize>,
    n: usize,
    velocity_map: Arc<VelocityMapFn>,
    preconditioner: Option<Arc<MatrixFn>>,
    reference: Arc<VectorFn>,
}

impl CallbackSystem {
    pub fn new(
        task_dims: Vec<usize>,
        n: usize,
        velocity_map: Arc<VelocityMapFn>,
        reference: Arc<VectorFn>,
    ) -> Result<Self> {
        let m: usize = task_dims.iter().sum();
        check_task_dims(&task_dims, m)?;
        if m > n {
            return Err(PikError::domain(format!(
                "m = {m} exceeds n = {n}; wrap the system in VirtualJointPadding"
            )));
        }
        Ok(Self {
            task_dims,
            n,
            velocity_map,
            preconditioner: None,
            reference,
        })
    }

    pub fn with_preconditioner(mut self, r: Arc<MatrixFn>) -> Self {
        self.preconditioner = Some(r);
        self
    }

    /// Constant `F_q`, zero `f_t`, constant reference.
    pub fn constant(task_dims: Vec<usize>, f_q: DMatrix<f64>, r: DVector<f64>) -> Result<Self> {
        let m = f_q.nrows();
        let n = f_q.ncols();
        if r.len() != m {
            return Err(PikError::domain(format!("reference has length {}, expected {m}", r.len())));
        }
        Self::new(
            task_dims,
            n,
            Arc::new(move |_, _| Ok((DVector::zeros(m), f_q.clone()))),
            Arc::new(move |_, _| Ok(r.clone())),
        )
    }
}

impl KinematicSystem for CallbackSystem {
    fn task_dims(&self) -> &[usize] {
        &self.task_dims
    }

    fn joint_dim(&self) -> usize {
        self.n
    }

    fn velocity_map(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (self.velocity_map)(t, q)
    }

    fn preconditioner(&self, t: f64, q: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        match &self.preconditioner {
            Some(r) => r(t, q).map(Some),
            None => Ok(None),
        }
    }

    fn reference(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        (self.reference)(t, q)
    }
}

/// Task-space quantities of a tracking system at one point.
#[derive(Debug, Clone)]
pub struct TrackingEval {
    pub f: DVector<f64>,
    /// `[f_t | F_q]`.
    pub df: DMatrix<f64>,
    pub p: DVector<f64>,
    pub p_dot: DVector<f64>,
    /// `e = p - f`.
    pub e: DVector<f64>,
    /// One activation per task.
    pub psi: Vec<f64>,
}

impl TrackingEval {
    pub fn f_t(&self) -> DVector<f64> {
        self.df.column(0).into_owned()
    }

    pub fn f_q(&self) -> DMatrix<f64> {
        self.df.columns(1, self.df.ncols() - 1).into_owned()
    }
}

/// Tracking system with reference `r = Psi (p_dot + K (p - f))`.
#[derive(Clone)]
pub struct TrackingSystem {
    task_dims: Vec<usize>,
    n: usize,
    fk: Arc<ForwardKinematicsFn>,
    desired: Arc<DesiredFn>,
    gains: Vec<f64>,
    activation: Arc<ActivationFn>,
    preconditioner: Option<Arc<MatrixFn>>,
}

impl TrackingSystem {
    pub fn new(
        task_dims: Vec<usize>,
        n: usize,
        fk: Arc<ForwardKinematicsFn>,
        desired: Arc<DesiredFn>,
        gains: Vec<f64>,
        activation: Arc<ActivationFn>,
    ) -> Result<Self> {
        let m: usize = task_dims.iter().sum();
        check_task_dims(&task_dims, m)?;
        if m > n {
            return Err(PikError::domain(format!("m = {m} exceeds n = {n}")));
        }
        if gains.len() != task_dims.len() {
            return Err(PikError::domain(format!(
                "expected {} gains, got {}",
                task_dims.len(),
                gains.len()
            )));
        }
        if let Some(k) = gains.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(PikError::domain(format!("gains must be finite and > 0, got {k}")));
        }
        Ok(Self {
            task_dims,
            n,
            fk,
            desired,
            gains,
            activation,
            preconditioner: None,
        })
    }

    pub fn with_preconditioner(mut self, r: Arc<MatrixFn>) -> Self {
        self.preconditioner = Some(r);
        self
    }

    /// Same system with the activation replaced.
    pub fn with_activation(mut self, activation: Arc<ActivationFn>) -> Self {
        self.activation = activation;
        self
    }

    /// Same system with a constant target `p` (`p_dot = 0`).
    pub fn with_constant_target(mut self, p: DVector<f64>) -> Self {
        let m = p.len();
        self.desired = Arc::new(move |_| (p.clone(), DVector::zeros(m)));
        self
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn desired(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        (self.desired)(t)
    }

    pub fn forward_kinematics(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.task_dim_total();
        let (f, df) = (self.fk)(t, q)?;
        if f.len() != m || df.shape() != (m, self.n + 1) {
            return Err(PikError::domain(format!(
                "forward kinematics returned f of length {} and Df {}x{}, expected {m} and {m}x{}",
                f.len(),
                df.nrows(),
                df.ncols(),
                self.n + 1
            )));
        }
        if !is_finite_vec(&f) || df.iter().any(|v| !v.is_finite()) {
            return Err(PikError::data(format!("forward kinematics is not finite at t = {t}")));
        }
        Ok((f, df))
    }

    /// Activations, checked to lie in `[0, 1]`.
    pub fn activation(&self, t: f64, q: &DVector<f64>) -> Result<Vec<f64>> {
        let psi = (self.activation)(t, q);
        if psi.len() != self.task_dims.len() {
            return Err(PikError::domain(format!(
                "activation returned {} values for {} tasks",
                psi.len(),
                self.task_dims.len()
            )));
        }
        if let Some(v) = psi.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(PikError::data(format!("activation {v} outside [0, 1] at t = {t}")));
        }
        Ok(psi)
    }

    pub fn evaluate(&self, t: f64, q: &DVector<f64>) -> Result<TrackingEval> {
        if q.len() != self.n {
            return Err(PikError::domain(format!("q has length {}, expected {}", q.len(), self.n)));
        }
        let (f, df) = self.forward_kinematics(t, q)?;
        let (p, p_dot) = self.desired(t);
        let m = self.task_dim_total();
        if p.len() != m || p_dot.len() != m {
            return Err(PikError::domain(format!("desired trajectory must have length {m}")));
        }
        if !is_finite_vec(&p) || !is_finite_vec(&p_dot) {
            return Err(PikError::data(format!("desired trajectory is not finite at t = {t}")));
        }
        let psi = self.activation(t, q)?;
        let e = &p - &f;
        Ok(TrackingEval { f, df, p, p_dot, e, psi })
    }

    /// `Psi (p_dot + K e)` from an evaluation.
    pub fn reference_from(&self, ev: &TrackingEval) -> DVector<f64> {
        let mut r = DVector::zeros(ev.e.len());
        let mut off = 0;
        for (a, &ma) in self.task_dims.iter().enumerate() {
            for i in off..off + ma {
                r[i] = ev.psi[a] * (ev.p_dot[i] + self.gains[a] * ev.e[i]);
            }
            off += ma;
        }
        r
    }
}

impl KinematicSystem for TrackingSystem {
    fn task_dims(&self) -> &[usize] {
        &self.task_dims
    }

    fn joint_dim(&self) -> usize {
        self.n
    }

    fn velocity_map(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (_, df) = self.forward_kinematics(t, q)?;
        Ok((df.column(0).into_owned(), df.columns(1, self.n).into_owned()))
    }

    fn preconditioner(&self, t: f64, q: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        match &self.preconditioner {
            Some(r) => r(t, q).map(Some),
            None => Ok(None),
        }
    }

    fn reference(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        let ev = self.evaluate(t, q)?;
        Ok(self.reference_from(&ev))
    }

    fn tracking(&self) -> Option<&TrackingSystem> {
        Some(self)
    }
}

/// Appends `m - n` virtual joints to a system with more task rows than
/// joints. The virtual joints do not move the tasks (zero columns of `F_q`)
/// and the preconditioner acts as the identity on them. Never applied
/// implicitly.
pub struct VirtualJointPadding<S> {
    inner: S,
    extra: usize,
}

impl<S: KinematicSystem> VirtualJointPadding<S> {
    /// Pads to `n = m`; a system that already has `m <= n` gets no extra joints.
    pub fn new(inner: S) -> Self {
        let extra = inner.task_dim_total().saturating_sub(inner.joint_dim());
        Self { inner, extra }
    }

    pub fn virtual_joints(&self) -> usize {
        self.extra
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    fn real(&self, q: &DVector<f64>) -> DVector<f64> {
        q.rows(0, self.inner.joint_dim()).into_owned()
    }
}

impl<S: KinematicSystem> KinematicSystem for VirtualJointPadding<S> {
    fn task_dims(&self) -> &[usize] {
        self.inner.task_dims()
    }

    fn joint_dim(&self) -> usize {
        self.inner.joint_dim() + self.extra
    }

    fn velocity_map(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (ft, fq) = self.inner.velocity_map(t, &self.real(q))?;
        let mut padded = DMatrix::zeros(fq.nrows(), self.joint_dim());
        padded.columns_mut(0, fq.ncols()).copy_from(&fq);
        Ok((ft, padded))
    }

    fn preconditioner(&self, t: f64, q: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let n0 = self.inner.joint_dim();
        Ok(self.inner.preconditioner(t, &self.real(q))?.map(|r| {
            let mut out = DMatrix::identity(self.joint_dim(), self.joint_dim());
            out.view_mut((0, 0), (n0, n0)).copy_from(&r);
            out
        }))
    }

    fn reference(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.reference(t, &self.real(q))
    }
}

impl<S: KinematicSystem> KinematicSystem for &S {
    fn task_dims(&self) -> &[usize] {
        (**self).task_dims()
    }

    fn joint_dim(&self) -> usize {
        (**self).joint_dim()
    }

    fn velocity_map(&self, t: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (**self).velocity_map(t, q)
    }

    fn preconditioner(&self, t: f64, q: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        (**self).preconditioner(t, q)
    }

    fn reference(&self, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).reference(t, q)
    }

    fn tracking(&self) -> Option<&TrackingSystem> {
        (**self).tracking()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar_tracking() -> TrackingSystem {
        // f = q for a 2-joint, 2-task toy system
        TrackingSystem::new(
            vec![1, 1],
            2,
            Arc::new(|_, q: &DVector<f64>| {
                let mut df = DMatrix::zeros(2, 3);
                df[(0, 1)] = 1.0;
                df[(1, 2)] = 1.0;
                Ok((q.clone(), df))
            }),
            Arc::new(|_| (DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.5, 0.0]))),
            vec![2.0, 3.0],
            Arc::new(|_, _| vec![1.0, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn tracking_reference() {
        let s = planar_tracking();
        let r = s.reference(0.0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        // task 1: 1 * (0.5 + 2 * 1), task 2: 0.5 * (0 + 3 * 1)
        assert_eq!(r.as_slice(), &[2.5, 1.5]);
        let (ft, fq) = s.velocity_map(0.0, &DVector::zeros(2)).unwrap();
        assert_eq!(ft, DVector::zeros(2));
        assert_eq!(fq, DMatrix::identity(2, 2));
    }

    #[test]
    fn rejects_bad_gains_and_activation() {
        let s = planar_tracking();
        let bad = TrackingSystem::new(
            vec![1, 1],
            2,
            s.fk.clone(),
            s.desired.clone(),
            vec![1.0, 0.0],
            s.activation.clone(),
        );
        assert!(matches!(bad, Err(PikError::Domain(_))));
        let s2 = s.with_activation(Arc::new(|_, _| vec![1.5, 0.0]));
        assert!(matches!(s2.reference(0.0, &DVector::zeros(2)), Err(PikError::Data(_))));
    }

    #[test]
    fn padding_adds_zero_columns() {
        let sys = CallbackSystem::new(
            vec![2, 1],
            3,
            Arc::new(|_, _| Ok((DVector::zeros(3), DMatrix::identity(3, 3)))),
            Arc::new(|_, _| Ok(DVector::zeros(3))),
        )
        .unwrap();
        let p = VirtualJointPadding::new(&sys);
        assert_eq!(p.virtual_joints(), 0);

        struct Wide;
        impl KinematicSystem for Wide {
            fn task_dims(&self) -> &[usize] {
                &[2, 1]
            }
            fn joint_dim(&self) -> usize {
                2
            }
            fn velocity_map(&self, _: f64, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
                assert_eq!(q.len(), 2);
                Ok((DVector::zeros(3), DMatrix::from_element(3, 2, 1.0)))
            }
            fn reference(&self, _: f64, _: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::zeros(3))
            }
        }
        let p = VirtualJointPadding::new(Wide);
        assert_eq!(p.joint_dim(), 3);
        let (_, fq) = p.velocity_map(0.0, &DVector::zeros(3)).unwrap();
        assert_eq!(fq.shape(), (3, 3));
        assert!(fq.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn callback_rejects_wide_task_space() {
        let r = CallbackSystem::constant(vec![2, 1], DMatrix::identity(3, 2), DVector::zeros(3));
        assert!(matches!(r, Err(PikError::Domain(_))));
    }
}
