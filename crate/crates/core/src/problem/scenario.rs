use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coefficients::{CoefficientSet, Lipschitz};
use super::controls::{ControlSet, ControlSpec};
use super::diagnostics::{estimate_lipschitz, Domain};
use super::terms::{Term, TermModel};
use crate::error::{Error, Result};

/// Which structural case of the problem a scenario targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    General,
    LinearSigma,
    LocalConvex,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::General => "general",
            Regime::LinearSigma => "linear_sigma",
            Regime::LocalConvex => "local_convex",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    #[serde(default)]
    pub b: Vec<Term>,
    #[serde(default)]
    pub sigma: Vec<Term>,
    #[serde(default)]
    pub g: Vec<Term>,
    #[serde(default)]
    pub phi: Vec<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<Lipschitz>,
}

/// Affine drift and diffusion, generator quadratic in x and u, quadratic
/// terminal cost:
///
/// ```text
/// b     = b0 + a1 x + a2 y + a3 z + cb u
/// sigma = s0 + s1 x + s2 y + s3 z + cs u
/// g     = g0 + g1 x + g2 y + g3 z + r x^2 / 2 + rho u^2 / 2 + gu u
/// phi   = k0 + k1 x + k x^2 / 2
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearQuadraticSpec {
    pub b0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub cb: f64,
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub cs: f64,
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub r: f64,
    pub rho: f64,
    pub gu: f64,
    pub k0: f64,
    pub k1: f64,
    pub k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<Lipschitz>,
}

impl LinearQuadraticSpec {
    pub fn to_model(&self) -> TermModel {
        fn push(out: &mut Vec<Term>, c: f64, powers: [u32; 5]) {
            if c != 0.0 {
                out.push(Term::monomial(c, powers));
            }
        }
        let mut m = TermModel::default();
        push(&mut m.drift, self.b0, [0; 5]);
        push(&mut m.drift, self.a1, [0, 1, 0, 0, 0]);
        push(&mut m.drift, self.a2, [0, 0, 1, 0, 0]);
        push(&mut m.drift, self.a3, [0, 0, 0, 1, 0]);
        push(&mut m.drift, self.cb, [0, 0, 0, 0, 1]);
        push(&mut m.diffusion, self.s0, [0; 5]);
        push(&mut m.diffusion, self.s1, [0, 1, 0, 0, 0]);
        push(&mut m.diffusion, self.s2, [0, 0, 1, 0, 0]);
        push(&mut m.diffusion, self.s3, [0, 0, 0, 1, 0]);
        push(&mut m.diffusion, self.cs, [0, 0, 0, 0, 1]);
        push(&mut m.generator, self.g0, [0; 5]);
        push(&mut m.generator, self.g1, [0, 1, 0, 0, 0]);
        push(&mut m.generator, self.g2, [0, 0, 1, 0, 0]);
        push(&mut m.generator, self.g3, [0, 0, 0, 1, 0]);
        push(&mut m.generator, 0.5 * self.r, [0, 2, 0, 0, 0]);
        push(&mut m.generator, 0.5 * self.rho, [0, 0, 0, 0, 2]);
        push(&mut m.generator, self.gu, [0, 0, 0, 0, 1]);
        push(&mut m.terminal, self.k0, [0; 5]);
        push(&mut m.terminal, self.k1, [0, 1, 0, 0, 0]);
        push(&mut m.terminal, 0.5 * self.k, [0, 2, 0, 0, 0]);
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CoefficientSpec {
    Table(TableSpec),
    LinearQuadratic(LinearQuadraticSpec),
}

impl CoefficientSpec {
    pub fn to_model(&self) -> TermModel {
        match self {
            CoefficientSpec::Table(t) => TermModel {
                drift: t.b.clone(),
                diffusion: t.sigma.clone(),
                generator: t.g.clone(),
                terminal: t.phi.clone(),
            },
            CoefficientSpec::LinearQuadratic(lq) => lq.to_model(),
        }
    }

    pub fn declared_lipschitz(&self) -> Option<Lipschitz> {
        match self {
            CoefficientSpec::Table(t) => t.lipschitz,
            CoefficientSpec::LinearQuadratic(lq) => lq.lipschitz,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub time_steps: usize,
    pub state_nodes: usize,
    pub x_min: f64,
    pub x_max: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloParams {
    pub paths: usize,
    pub seed: u64,
    /// Number of simulation steps; defaults to the grid's time steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    pub basis_degree: usize,
    pub exit_cap: f64,
    pub picard_tol: f64,
    pub max_sweeps: usize,
}

impl Default for MonteCarloParams {
    fn default() -> Self {
        MonteCarloParams {
            paths: 1000,
            seed: 0,
            time_steps: None,
            basis_degree: 4,
            exit_cap: 0.01,
            picard_tol: 1e-6,
            max_sweeps: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub fixed_point: f64,
    pub max_iter: usize,
    /// Absolute floor for margin-type checks.
    pub verification: f64,
    /// Discretization error budget of the value field.
    pub field: f64,
    /// Error budget of the regression estimates.
    pub regression: f64,
    /// Monte Carlo error budget on top of the reported standard errors.
    pub mc: f64,
    /// Bound on median relative residuals.
    pub relative: f64,
    pub lipschitz_slack: f64,
    pub derivative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            fixed_point: 1e-12,
            max_iter: 200,
            verification: 1e-6,
            field: 1e-3,
            regression: 1e-3,
            mc: 0.0,
            relative: 0.05,
            lipschitz_slack: 0.1,
            derivative: 1e-5,
        }
    }
}

impl Tolerances {
    /// `tol_total = field + regression + mc`.
    pub fn total(&self) -> f64 {
        self.field + self.regression + self.mc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub sample_paths: usize,
    pub sample_times: usize,
    /// Controls scanned by the maximum-principle checks; defaults to the
    /// full control set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check_controls: Option<ControlSpec>,
    /// Number of rungs of the jet probe ladders.
    pub ladder: usize,
    /// Random feedback maps tried by the verification-theorem check.
    pub random_feedbacks: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            sample_paths: 32,
            sample_times: 8,
            check_controls: None,
            ladder: 4,
            random_feedbacks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionParams {
    /// Constants C_beta for beta = 2..=8.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_beta: Option<Vec<f64>>,
    pub ode_steps: usize,
    pub blowup_cap: f64,
    pub monotonicity_samples: usize,
    pub seed: u64,
}

impl Default for AssumptionParams {
    fn default() -> Self {
        AssumptionParams {
            c_beta: None,
            ode_steps: 1000,
            blowup_cap: 1e8,
            monotonicity_samples: 200,
            seed: 7,
        }
    }
}

/// On-disk form of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub horizon: f64,
    #[serde(default)]
    pub t0: f64,
    pub x0: f64,
    pub beta0: f64,
    #[serde(default)]
    pub regime: Regime,
    pub coefficients: CoefficientSpec,
    pub controls: ControlSpec,
    pub grid: GridParams,
    #[serde(default)]
    pub montecarlo: MonteCarloParams,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub verify: VerifyParams,
    #[serde(default)]
    pub assumptions: AssumptionParams,
}

/// A validated control problem with solver settings.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub horizon: f64,
    pub t0: f64,
    pub x0: f64,
    pub beta0: f64,
    pub regime: Regime,
    pub coefficients: CoefficientSet,
    pub controls: ControlSet,
    pub check_controls: Vec<f64>,
    pub grid: GridParams,
    pub montecarlo: MonteCarloParams,
    pub tolerances: Tolerances,
    pub verify: VerifyParams,
    pub assumptions: AssumptionParams,
    coefficient_spec: CoefficientSpec,
    control_spec: ControlSpec,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        self.to_doc() == other.to_doc()
            && self.coefficients.lipschitz == other.coefficients.lipschitz
    }
}

fn check(cond: bool, field: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invariant(field, message))
    }
}

/// Number of sample points used when Lipschitz constants are not declared.
const LIPSCHITZ_SAMPLES: usize = 4000;

impl Scenario {
    pub fn from_doc(doc: ScenarioDoc) -> Result<Self> {
        check(
            doc.beta0 > 0.0 && doc.beta0 < 1.0,
            "beta0",
            "β₀ ∈ (0,1) violated",
        )?;
        check(
            doc.horizon.is_finite() && doc.horizon > 0.0,
            "horizon",
            "T > 0 violated",
        )?;
        check(
            doc.t0 >= 0.0 && doc.t0 < doc.horizon,
            "t0",
            "0 ≤ t < T violated",
        )?;
        check(
            doc.grid.time_steps >= 2,
            "grid.time_steps",
            "N_t ≥ 2 violated",
        )?;
        check(
            doc.grid.state_nodes >= 3,
            "grid.state_nodes",
            "N_x ≥ 3 violated",
        )?;
        check(
            doc.grid.x_min < doc.grid.x_max,
            "grid",
            "x_min < x_max violated",
        )?;
        check(
            doc.x0 >= doc.grid.x_min && doc.x0 <= doc.grid.x_max,
            "x0",
            "state box contains x violated",
        )?;
        check(doc.grid.cfl > 0.0, "grid.cfl", "cfl > 0 violated")?;
        check(
            doc.montecarlo.paths >= 2,
            "montecarlo.paths",
            "M ≥ 2 violated",
        )?;
        check(
            doc.montecarlo.basis_degree <= 8,
            "montecarlo.basis_degree",
            "degree ≤ 8 violated",
        )?;
        if let Some(n) = doc.montecarlo.time_steps {
            check(n >= 2, "montecarlo.time_steps", "N_t ≥ 2 violated")?;
        }
        check(
            doc.tolerances.fixed_point > 0.0,
            "tolerances.fixed_point",
            "tol > 0 violated",
        )?;
        check(
            doc.tolerances.max_iter >= 1,
            "tolerances.max_iter",
            "max_iter ≥ 1 violated",
        )?;
        check(
            doc.verify.ladder >= 2,
            "verify.ladder",
            "ladder ≥ 2 violated",
        )?;
        if let Some(c) = &doc.assumptions.c_beta {
            check(
                c.len() == 7,
                "assumptions.c_beta",
                "seven values (β = 2..8) required",
            )?;
        }

        let model = doc.coefficients.to_model();
        check(
            model.terminal_is_state_only(),
            "coefficients.phi",
            "terminal cost may depend on x only",
        )?;
        let controls = ControlSet::from_spec(&doc.controls)?;
        let check_controls = match &doc.verify.check_controls {
            Some(spec) => spec.values("verify.check_controls")?,
            None => controls.points().to_vec(),
        };
        let mut scenario = Scenario {
            horizon: doc.horizon,
            t0: doc.t0,
            x0: doc.x0,
            beta0: doc.beta0,
            regime: doc.regime,
            coefficients: CoefficientSet::new(model, Lipschitz::default()),
            controls,
            check_controls,
            grid: doc.grid,
            montecarlo: doc.montecarlo,
            tolerances: doc.tolerances,
            verify: doc.verify.clone(),
            assumptions: doc.assumptions.clone(),
            coefficient_spec: doc.coefficients.clone(),
            control_spec: doc.controls.clone(),
        };
        let lipschitz = match doc.coefficients.declared_lipschitz() {
            Some(l) => {
                check(
                    l.l1 >= 0.0 && l.l2 >= 0.0 && l.l3 >= 0.0,
                    "coefficients.lipschitz",
                    "constants must be nonnegative",
                )?;
                l
            }
            None => {
                let est = estimate_lipschitz(
                    &scenario.coefficients,
                    &scenario.domain(),
                    LIPSCHITZ_SAMPLES,
                    scenario.assumptions.seed,
                );
                let f = 1.0 + scenario.tolerances.lipschitz_slack;
                Lipschitz {
                    l1: est.l1 * f,
                    l2: est.l2 * f,
                    l3: est.l3 * f,
                }
            }
        };
        scenario.coefficients.lipschitz = lipschitz;
        Ok(scenario)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: ScenarioDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Scenario::from_doc(doc)
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        ScenarioDoc {
            horizon: self.horizon,
            t0: self.t0,
            x0: self.x0,
            beta0: self.beta0,
            regime: self.regime,
            coefficients: self.coefficient_spec.clone(),
            controls: self.control_spec.clone(),
            grid: self.grid,
            montecarlo: self.montecarlo,
            tolerances: self.tolerances,
            verify: self.verify.clone(),
            assumptions: self.assumptions.clone(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_doc()).expect("scenario documents always serialize")
    }

    pub fn coefficient_spec(&self) -> &CoefficientSpec {
        &self.coefficient_spec
    }

    /// Replace the coefficient model, keeping every other setting.
    pub fn with_coefficients(&self, spec: CoefficientSpec) -> Result<Self> {
        let mut doc = self.to_doc();
        doc.coefficients = spec;
        Scenario::from_doc(doc)
    }

    pub fn with_controls(&self, spec: ControlSpec) -> Result<Self> {
        let mut doc = self.to_doc();
        doc.controls = spec;
        Scenario::from_doc(doc)
    }

    /// Simulation time steps.
    pub fn mc_steps(&self) -> usize {
        self.montecarlo.time_steps.unwrap_or(self.grid.time_steps)
    }

    /// Box on which the coefficient oracles are sampled.
    pub fn domain(&self) -> Domain {
        let r = self.grid.x_min.abs().max(self.grid.x_max.abs()).max(1.0);
        Domain {
            t: [self.t0, self.horizon],
            x: [self.grid.x_min, self.grid.x_max],
            y: [-r, r],
            z: [-r, r],
            u: self.controls.bounds(),
        }
    }
}

/// Read and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
horizon = 1.0
x0 = 0.0
beta0 = 0.5

[coefficients]
family = "table"
phi = [{ c = 1.0, x = 1 }]

[controls]
points = [0.0]

[grid]
time_steps = 10
state_nodes = 11
x_min = -1.0
x_max = 1.0
"#;

    #[test]
    fn minimal_document_is_valid() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.horizon, 1.0);
        assert_eq!(s.controls.points(), &[0.0]);
        assert_eq!(s.coefficients.phi(0.25), 0.25);
        assert_eq!(s.coefficients.lipschitz.l2, 0.0);
        assert_eq!(s.coefficients.lipschitz.l3, 0.0);
    }

    #[test]
    fn beta0_out_of_range() {
        let text = MINIMAL.replace("beta0 = 0.5", "beta0 = 1.5");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("β₀ ∈ (0,1) violated"), "{err}");
        assert!(err.to_string().contains("beta0"));
    }

    #[test]
    fn too_few_state_nodes() {
        let text = MINIMAL.replace("state_nodes = 11", "state_nodes = 2");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("N_x ≥ 3 violated"), "{err}");
    }

    #[test]
    fn parse_errors_are_reported() {
        let err = Scenario::from_toml_str("horizon = [").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn round_trip() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        let again = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn lq_family_expands_to_terms() {
        let spec = LinearQuadraticSpec {
            a1: -0.2,
            s0: 0.3,
            r: 1.0,
            k: 2.0,
            ..Default::default()
        };
        let m = spec.to_model();
        assert_eq!(m.drift.len(), 1);
        assert_eq!(m.generator, vec![Term::monomial(0.5, [0, 2, 0, 0, 0])]);
        assert_eq!(m.terminal, vec![Term::monomial(1.0, [0, 2, 0, 0, 0])]);
    }
}
