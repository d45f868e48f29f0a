//! Declarative scenario configs (JSON with a strict schema) and the bundled
//! presets.

use std::path::PathBuf;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PikError, Result};
use crate::numlin::DampingSpec;
use crate::scenarios::{
    build_activation, identity_activation, planar_arm_system, planar_fk, random_system, two_link_fk, two_link_system,
    ActivationSpec, ProbeOptions, Smoothness, Target, TwoLinkParams, Waypoints,
};
use crate::solver::{SolverConfig, SolverFamily};
use crate::system::TrackingSystem;
use crate::trajectory::{IntegratorConfig, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub system: SystemSpec,
    pub solver: SolverSpec,
    /// One gain per task.
    pub gains: Vec<f64>,
    #[serde(default)]
    pub activation: ActivationChoice,
    pub target: TargetSpec,
    pub initial: InitialSpec,
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub outputs: OutputsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    TwoLink { l1: f64, l2: f64 },
    ThreeLink { l1: f64, l2: f64, l3: f64 },
    /// `f(q) = A q + B sin(q)` with seeded entries; `dims` are the task dimensions.
    BuiltinRandom { seed: u64, dims: Vec<usize>, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub alpha: u8,
    /// One value per task; ignored for `alpha = 4`.
    #[serde(default)]
    pub mu: Vec<f64>,
    #[serde(default = "default_nu")]
    pub nu: u32,
    #[serde(default)]
    pub zero_tol: f64,
}

fn default_nu() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKeyword {
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActivationChoice {
    Keyword(ActivationKeyword),
    Pinched(ActivationSpec),
}

impl Default for ActivationChoice {
    fn default() -> Self {
        ActivationChoice::Keyword(ActivationKeyword::Identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSpec {
    pub t: f64,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSpec {
    /// Hold the initial task position, so `r = 0` along the initial state.
    Initial,
    Constant(Vec<f64>),
    /// The task position of the given joint configuration.
    Joints(Vec<f64>),
    Waypoints(Vec<WaypointSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub t0: f64,
    pub q0: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    #[default]
    Rk4,
    DormandPrince { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    pub step: f64,
    pub t_end: f64,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_step: Option<f64>,
    #[serde(default = "default_true")]
    pub singularity_guard: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub q_inf: Vec<f64>,
    pub delta: f64,
    pub samples: usize,
    pub horizon: f64,
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Parses a config, reporting schema violations with their field path.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        PikError::config(field, e.inner().to_string())
    })
}

pub fn load_config(path: &std::path::Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| PikError::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// A config resolved into runnable objects.
pub struct Scenario {
    pub name: String,
    pub system: TrackingSystem,
    pub solver: SolverConfig,
    pub integrator: IntegratorConfig,
    pub t0: f64,
    pub q0: DVector<f64>,
    pub target: Target,
    pub two_link: Option<TwoLinkParams>,
    /// Seed actually used by a random system.
    pub random_seed: Option<u64>,
    pub probe: Option<(DVector<f64>, ProbeOptions)>,
}

fn check_len(field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(PikError::config(field, format!("expected {want} values, got {got}")));
    }
    Ok(())
}

fn finite(field: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PikError::config(field, "values must be finite"));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn solver_config(&self, l: usize) -> Result<SolverConfig> {
        let family = SolverFamily::from_alpha(self.solver.alpha)?;
        let damping = if family.is_damped() {
            check_len("solver.mu", self.solver.mu.len(), l)?;
            DampingSpec::new(self.solver.mu.clone(), self.solver.nu)
                .map_err(|e| PikError::config("solver.mu", e.to_string()))?
        } else {
            DampingSpec::undamped(l)
        };
        let mut cfg = SolverConfig::new(family, damping);
        cfg.zero_tol = self.solver.zero_tol;
        cfg.validate_for_trajectory(l)?;
        Ok(cfg)
    }

    /// Resolves the config; `seed` overrides the random-system and probe seeds.
    pub fn build(&self, seed: Option<u64>) -> Result<Scenario> {
        let (task_dims, n) = match &self.system {
            SystemSpec::TwoLink { .. } => (vec![1, 1], 2),
            SystemSpec::ThreeLink { .. } => (vec![1, 1], 3),
            SystemSpec::BuiltinRandom { dims, n, .. } => {
                if dims.is_empty() || dims.contains(&0) {
                    return Err(PikError::config("system.dims", "task dimensions must be positive"));
                }
                if dims.iter().sum::<usize>() > *n {
                    return Err(PikError::config("system.n", "total task dimension exceeds n"));
                }
                (dims.clone(), *n)
            }
        };
        let l = task_dims.len();
        let m: usize = task_dims.iter().sum();
        check_len("gains", self.gains.len(), l)?;
        if self.gains.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(PikError::config("gains", "gains must be finite and > 0"));
        }
        check_len("initial.q0", self.initial.q0.len(), n)?;
        finite("initial.q0", &self.initial.q0)?;
        let q0 = DVector::from_vec(self.initial.q0.clone());
        let t0 = self.initial.t0;

        let two_link = match self.system {
            SystemSpec::TwoLink { l1, l2 } => {
                Some(TwoLinkParams::new(l1, l2).map_err(|e| PikError::config("system", e.to_string()))?)
            }
            _ => None,
        };
        let random_seed = match self.system {
            SystemSpec::BuiltinRandom { seed: s, .. } => Some(seed.unwrap_or(s)),
            _ => None,
        };
        let lengths = match self.system {
            SystemSpec::ThreeLink { l1, l2, l3 } => Some(vec![l1, l2, l3]),
            _ => None,
        };
        let fk = |q: &DVector<f64>| -> DVector<f64> {
            if let Some(p) = &two_link {
                two_link_fk(p, t0, q).0
            } else if let Some(ls) = &lengths {
                planar_fk(ls, q).0
            } else {
                crate::scenarios::RandomMap::new(random_seed.unwrap(), m, n).eval(q).0
            }
        };
        let target = match &self.target {
            TargetSpec::Initial => Target::Constant(fk(&q0)),
            TargetSpec::Constant(p) => {
                check_len("target.constant", p.len(), m)?;
                finite("target.constant", p)?;
                Target::Constant(DVector::from_vec(p.clone()))
            }
            TargetSpec::Joints(q) => {
                check_len("target.joints", q.len(), n)?;
                finite("target.joints", q)?;
                Target::Constant(fk(&DVector::from_vec(q.clone())))
            }
            TargetSpec::Waypoints(ws) => {
                for (i, w) in ws.iter().enumerate() {
                    check_len(&format!("target.waypoints[{i}].p"), w.p.len(), m)?;
                }
                Target::Waypoints(Waypoints::new(
                    ws.iter().map(|w| w.t).collect(),
                    ws.iter().map(|w| DVector::from_vec(w.p.clone())).collect(),
                )?)
            }
        };

        let solver = self.solver_config(l)?;
        let gains2 = || [self.gains[0], self.gains[1]];
        let system = match (&self.system, self.activation) {
            (SystemSpec::TwoLink { .. }, act) => {
                let psi = match act {
                    ActivationChoice::Keyword(ActivationKeyword::Identity) => identity_activation(2),
                    ActivationChoice::Pinched(spec) => build_activation(spec, solver.family)?.into_fn(),
                };
                two_link_system(two_link.unwrap(), &target, gains2(), psi)?
            }
            (_, ActivationChoice::Pinched(_)) => {
                return Err(PikError::config("activation", "pinched activations are defined for the two-link arm only"));
            }
            (SystemSpec::ThreeLink { .. }, _) => {
                planar_arm_system(lengths.clone().unwrap(), &target, gains2(), identity_activation(2))?
            }
            (SystemSpec::BuiltinRandom { .. }, _) => {
                random_system(random_seed.unwrap(), task_dims.clone(), n, &target, self.gains.clone())?
            }
        };

        let it = &self.integrator;
        let mut integrator = IntegratorConfig::rk4(it.step, it.t_end);
        if let MethodSpec::DormandPrince { rtol, atol } = it.method {
            integrator.method = Method::DormandPrince { rtol, atol };
        }
        if let Some(ms) = it.min_step {
            integrator.min_step = ms;
        }
        integrator.singularity_guard = it.singularity_guard;
        integrator.validate(t0)?;

        let probe = match &self.probe {
            None => None,
            Some(p) => {
                check_len("probe.q_inf", p.q_inf.len(), n)?;
                finite("probe.q_inf", &p.q_inf)?;
                if !(p.delta > 0.0 && p.samples > 0 && p.horizon > 0.0 && p.step > 0.0 && p.step <= p.horizon) {
                    return Err(PikError::config("probe", "delta, samples, horizon and step must be positive, step <= horizon"));
                }
                Some((
                    DVector::from_vec(p.q_inf.clone()),
                    ProbeOptions::new(p.delta, p.samples, p.horizon, p.step, seed.unwrap_or(p.seed)),
                ))
            }
        };

        Ok(Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            system,
            solver,
            integrator,
            t0,
            q0,
            target,
            two_link,
            random_seed,
            probe,
        })
    }
}

fn two_link_base(name: &str, alpha: u8, gains: f64, activation: ActivationChoice, target: TargetSpec, t_end: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: Some(name.into()),
        system: SystemSpec::TwoLink { l1: 1.0, l2: 1.0 },
        solver: SolverSpec {
            alpha,
            mu: if alpha == 4 { Vec::new() } else { vec![0.05, 0.05] },
            nu: 1,
            zero_tol: 0.0,
        },
        gains: vec![gains, gains],
        activation,
        target,
        initial: InitialSpec { t0: 0.0, q0: vec![0.3, 0.7] },
        integrator: IntegratorSpec {
            step: 1e-3,
            t_end,
            method: MethodSpec::Rk4,
            min_step: None,
            singularity_guard: true,
        },
        outputs: OutputsSpec::default(),
        probe: None,
    }
}

/// Interior target: eased from near the start to `(1.2, 0.9)` over 5 s.
pub fn case2_config(alpha: u8) -> ScenarioConfig {
    let name = if alpha == 4 { "twolink_case2".to_string() } else { format!("twolink_case2_pi{alpha}") };
    two_link_base(
        &name,
        alpha,
        5.0,
        ActivationChoice::Pinched(ActivationSpec {
            r2: 1.5,
            floor: 0.1,
            smoothness: Smoothness::Smooth,
        }),
        TargetSpec::Waypoints(vec![
            WaypointSpec { t: 0.0, p: vec![1.5, 1.1] },
            WaypointSpec { t: 5.0, p: vec![1.2, 0.9] },
        ]),
        20.0,
    )
}

/// Target `(3, 0)` beyond the reach `L1 + L2 = 2`.
pub fn case1_config(alpha: u8) -> ScenarioConfig {
    let name = if alpha == 4 { "twolink_case1".to_string() } else { format!("twolink_case1_pi{alpha}") };
    two_link_base(
        &name,
        alpha,
        20.0,
        ActivationChoice::Pinched(ActivationSpec {
            r2: 1.5,
            floor: 0.1,
            smoothness: Smoothness::Lipschitz,
        }),
        TargetSpec::Constant(vec![3.0, 0.0]),
        20.0,
    )
}

pub fn zero_reference_config() -> ScenarioConfig {
    let mut c = two_link_base(
        "twolink_zero_reference",
        4,
        1.0,
        ActivationChoice::default(),
        TargetSpec::Initial,
        1.0,
    );
    c.integrator.step = 1e-2;
    c
}

pub fn two_link_probe_config() -> ScenarioConfig {
    let mut c = two_link_base("twolink_probe", 4, 5.0, ActivationChoice::default(), TargetSpec::Joints(vec![0.3, 0.8]), 15.0);
    c.initial.q0 = vec![0.3, 0.8];
    c.integrator.step = 1e-2;
    c.probe = Some(ProbeSpec {
        q_inf: vec![0.3, 0.8],
        delta: 0.05,
        samples: 32,
        horizon: 15.0,
        step: 1e-2,
        seed: 7,
    });
    c
}

pub fn three_link_probe_config() -> ScenarioConfig {
    let mut c = two_link_probe_config();
    c.name = Some("threelink_probe".into());
    c.system = SystemSpec::ThreeLink { l1: 1.0, l2: 0.8, l3: 0.6 };
    c.target = TargetSpec::Joints(vec![0.3, 0.6, 0.5]);
    c.initial.q0 = vec![0.3, 0.6, 0.5];
    c.probe.as_mut().unwrap().q_inf = vec![0.3, 0.6, 0.5];
    c
}

pub fn random_config() -> ScenarioConfig {
    ScenarioConfig {
        name: Some("random_tracking".into()),
        system: SystemSpec::BuiltinRandom { seed: 11, dims: vec![1, 1], n: 3 },
        solver: SolverSpec {
            alpha: 1,
            mu: vec![0.05, 0.05],
            nu: 1,
            zero_tol: 0.0,
        },
        gains: vec![2.0, 2.0],
        activation: ActivationChoice::default(),
        target: TargetSpec::Joints(vec![0.4, -0.3, 0.2]),
        initial: InitialSpec { t0: 0.0, q0: vec![0.0, 0.0, 0.0] },
        integrator: IntegratorSpec {
            step: 1e-2,
            t_end: 10.0,
            method: MethodSpec::Rk4,
            min_step: None,
            singularity_guard: true,
        },
        outputs: OutputsSpec::default(),
        probe: None,
    }
}

/// Every bundled preset, keyed by file stem.
pub fn presets() -> Vec<ScenarioConfig> {
    vec![
        case2_config(4),
        case2_config(1),
        case1_config(4),
        case1_config(1),
        zero_reference_config(),
        two_link_probe_config(),
        three_link_probe_config(),
        random_config(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in presets() {
            let text = serde_json::to_string_pretty(&p).unwrap();
            assert_eq!(parse_config(&text).unwrap(), p);
            p.build(None).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let mut v = serde_json::to_value(case2_config(4)).unwrap();
        v["solver"]["extra"] = serde_json::json!(1);
        match parse_config(&v.to_string()) {
            Err(PikError::Config { field, .. }) => assert_eq!(field, "solver.extra"),
            other => panic!("{other:?}"),
        }
        let mut v = serde_json::to_value(case2_config(4)).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(parse_config(&v.to_string()).is_err());
        let mut v = serde_json::to_value(case2_config(4)).unwrap();
        v["integrator"]["step"] = serde_json::json!("fast");
        match parse_config(&v.to_string()) {
            Err(PikError::Config { field, .. }) => assert_eq!(field, "integrator.step"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alpha_five_names_the_field() {
        let mut c = case2_config(4);
        c.solver.alpha = 5;
        match c.build(None) {
            Err(PikError::Config { field, .. }) => assert_eq!(field, "solver.alpha"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted alpha = 5"),
        }
    }

    #[test]
    fn dimension_mismatches() {
        let mut c = case2_config(1);
        c.solver.mu = vec![0.1];
        assert!(matches!(c.build(None), Err(PikError::Config { field, .. }) if field == "solver.mu"));
        let mut c = case2_config(4);
        c.initial.q0 = vec![0.0; 3];
        assert!(matches!(c.build(None), Err(PikError::Config { field, .. }) if field == "initial.q0"));
        let mut c = case2_config(4);
        c.gains = vec![1.0];
        assert!(matches!(c.build(None), Err(PikError::Config { field, .. }) if field == "gains"));
        let mut c = three_link_probe_config();
        c.activation = case2_config(4).activation;
        assert!(matches!(c.build(None), Err(PikError::Config { field, .. }) if field == "activation"));
        let mut c = random_config();
        c.system = SystemSpec::BuiltinRandom { seed: 1, dims: vec![2, 2], n: 3 };
        assert!(matches!(c.build(None), Err(PikError::Config { field, .. }) if field == "system.n"));
    }

    #[test]
    fn activation_keyword_and_spec_parse() {
        let c = parse_config(&serde_json::to_string(&zero_reference_config()).unwrap()).unwrap();
        assert_eq!(c.activation, ActivationChoice::Keyword(ActivationKeyword::Identity));
        let text = serde_json::to_string(&case1_config(4)).unwrap();
        assert!(text.contains("\"smoothness\":\"lipschitz\""));
    }

    #[test]
    fn seed_override() {
        let s = random_config().build(Some(99)).unwrap();
        assert_eq!(s.random_seed, Some(99));
        let s = two_link_probe_config().build(Some(3)).unwrap();
        assert_eq!(s.probe.unwrap().1.seed, 3);
    }
}
