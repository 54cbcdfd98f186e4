//! Problem data: coefficients with derivative oracles, control sets and
//! scenario documents.

mod coefficients;
mod controls;
mod diagnostics;
mod scenario;
mod terms;

pub use coefficients::{
    Coef, CoefficientSet, Coefficients, FiniteDifferenced, Lipschitz, LocalData, Point,
};
pub use controls::{ControlSet, ControlSpec, UniformGrid};
pub use diagnostics::{
    estimate_lipschitz, validate_derivatives, DerivativeCheck, DerivativeReport, Domain,
};
pub use scenario::{
    load_scenario, AssumptionParams, CoefficientSpec, GridParams, LinearQuadraticSpec,
    MonteCarloParams, Regime, Scenario, ScenarioDoc, TableSpec, Tolerances, VerifyParams,
};
pub use terms::{Monomial, Sine, Term, TermModel, Var};
