//! One-sided Taylor-residual probes of the super- and sub-jets of W.
//!
//! A probe ladder has `ladder` rungs at offsets `2^{L-1-j}` grid steps,
//! `j = 0..L`. The envelope at a rung is the largest normalized residual over
//! the sampled points. A rung passes if its envelope is below the grid-error
//! floor or no larger than the envelope of the previous rung; the finest rung
//! must be below the floor.

use super::checks::{collect_samples, reference, sample};
use super::{sample_points, Check, RelationId, RelationReport, Rule, Sample, ToleranceBreakdown};
use crate::adjoint::AdjointPath;
use crate::algebra::{self, FixedPointConfig};
use crate::error::{Error, Result};
use crate::fbsde::TrajectoryBundle;
use crate::hjb::ValueField;
use crate::problem::Scenario;

/// Perturbations applied to the adjoint values before probing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JetOptions {
    /// Added to p in both the super-jet and the sub-jet candidate.
    pub p_shift: f64,
    /// Added to P in the super-jet candidate.
    pub big_p_shift: f64,
}

fn ladder(base: f64, rungs: usize) -> Vec<f64> {
    (0..rungs)
        .map(|j| base * 2f64.powi((rungs - 1 - j) as i32))
        .collect()
}

fn envelope(samples: &[Sample], quantity: &str) -> f64 {
    samples
        .iter()
        .filter(|s| s.quantity == quantity)
        .map(|s| s.value)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Ladder checks on the quantities `name[j]` with floors `floors[j]`.
fn ladder_checks(samples: &[Sample], name: &str, floors: &[f64]) -> (Vec<Check>, Vec<f64>) {
    let env: Vec<f64> = (0..floors.len())
        .map(|j| envelope(samples, &format!("{name}[{j}]")))
        .collect();
    let last = floors.len() - 1;
    let checks = (1..floors.len())
        .map(|j| {
            let threshold = if j == last {
                floors[j]
            } else {
                floors[j].max(env[j - 1])
            };
            Check::evaluate(samples, &format!("{name}[{j}]"), Rule::MaxAtMost, threshold)
        })
        .collect();
    (checks, env)
}

/// Least-squares slope of `ln envelope` against `ln offset` over the rungs
/// with a positive envelope.
fn envelope_slope(offsets: &[f64], env: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = offsets
        .iter()
        .zip(env)
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(d, e)| (d.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn rungs(scenario: &Scenario) -> Result<usize> {
    match scenario.verify.ladder {
        0 | 1 => Err(Error::Precondition(
            "jet probes need a ladder of at least two rungs".into(),
        )),
        n => Ok(n),
    }
}

/// Spatial probe of `{p} × [P, ∞) ⊆ D²'⁺ₓW` and of the sub-jet side.
///
/// Super-jet residual `R(δ) = W(s, x̄+δ) − W(s, x̄) − p δ − ½ P δ²` is
/// normalized by δ² (`super[j]`); the sub-jet candidate uses the field's own
/// curvature, `W(s, x̄+δ) − W(s, x̄) − p δ − ½ W_xx δ²`, and must stay above
/// minus the floor at the finest rung (`sub[j]`). The floor at offset δ is
/// `Δx² max|W_xx| / (4 δ²) + tol_total / δ`: the linear-interpolation error
/// of two field evaluations plus the adjoint error budget.
pub fn check_jet_spatial(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
    second: &AdjointPath,
    opts: &JetOptions,
) -> Result<RelationReport> {
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let l = rungs(scenario)?;
    let dx = field.dx();
    let offsets = ladder(dx, l);
    let points = sample_points(scenario, bundle);
    let [lo, hi] = field.x_range();
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let (s, x) = (bundle.times[k], bundle.x[i]);
        if x - offsets[0] < lo || x + offsets[0] > hi {
            return Err(Error::Precondition(format!(
                "jet probe at x={x} leaves the state box [{lo}, {hi}]"
            )));
        }
        let p = first.p[i] + opts.p_shift;
        let big_p = second.big_p[i] + opts.big_p_shift;
        let w0 = field.value(s, x);
        let wxx = field.value_xx(s, x);
        let mut out = vec![sample("|Wxx|", Some(m), k, s, None, None, wxx.abs())];
        for (j, &d) in offsets.iter().enumerate() {
            for delta in [-d, d] {
                let dw = field.value(s, x + delta) - w0 - p * delta;
                let sup = (dw - 0.5 * big_p * delta * delta) / (delta * delta);
                let sub = (dw - 0.5 * wxx * delta * delta) / (delta * delta);
                out.push(sample(
                    &format!("super[{j}]"),
                    Some(m),
                    k,
                    s,
                    None,
                    Some(delta),
                    sup,
                ));
                out.push(sample(
                    &format!("sub[{j}]"),
                    Some(m),
                    k,
                    s,
                    None,
                    Some(delta),
                    sub,
                ));
            }
        }
        Ok(out)
    })?;
    let curvature = envelope(&samples, "|Wxx|").max(0.0);
    let floors: Vec<f64> = offsets
        .iter()
        .map(|d| dx * dx * curvature / (4.0 * d * d) + tol.total / d)
        .collect();
    let (mut checks, env) = ladder_checks(&samples, "super", &floors);
    checks.push(Check::evaluate(
        &samples,
        &format!("sub[{}]", l - 1),
        Rule::MinAtLeast,
        floors[l - 1],
    ));
    let mut report = RelationReport::new(RelationId::JetSpace, tol, samples, checks);
    push_ladder_diagnostics(&mut report, &offsets, &env, &floors);
    Ok(report)
}

/// Temporal probe of `[𝓗₁, ∞) ⊆ D¹'⁺ₜ₊W`.
///
/// `temporal[j]` is `(W(τ, x̄) − W(s, x̄) − (τ − s) 𝓗₁) / (τ − s)` with τ − s
/// on a ladder of field time steps. Both evaluations share x̄, so the spatial
/// interpolation error cancels and the floor is `tol_total`.
pub fn check_jet_temporal(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
    second: &AdjointPath,
    opts: &JetOptions,
) -> Result<RelationReport> {
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let l = rungs(scenario)?;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let coeffs = &scenario.coefficients;
    let steps = ladder(field.dt(), l);
    let horizon = *field.times.last().expect("field has time levels");
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        if r.s + steps[0] > horizon + 1e-12 {
            return Err(Error::Precondition(format!(
                "temporal probe from s={} by {} passes the horizon {horizon}",
                r.s, steps[0]
            )));
        }
        let p = first.p[i] + opts.p_shift;
        let big_p = second.big_p[i] + opts.big_p_shift;
        let h1 = algebra::hamiltonian_h1(coeffs, &r, p, first.q[i], big_p, &cfg)?;
        let w0 = field.value(r.s, r.x);
        Ok(steps
            .iter()
            .enumerate()
            .map(|(j, &tau)| {
                let rate = (field.value(r.s + tau, r.x) - w0 - tau * h1) / tau;
                sample(
                    &format!("temporal[{j}]"),
                    Some(m),
                    k,
                    r.s,
                    Some(r.u),
                    Some(tau),
                    rate,
                )
            })
            .collect())
    })?;
    let floors = vec![tol.total; l];
    let (checks, env) = ladder_checks(&samples, "temporal", &floors);
    let mut report = RelationReport::new(RelationId::JetTime, tol, samples, checks);
    push_ladder_diagnostics(&mut report, &steps, &env, &floors);
    Ok(report)
}

fn push_ladder_diagnostics(
    report: &mut RelationReport,
    offsets: &[f64],
    env: &[f64],
    floors: &[f64],
) {
    for (j, ((d, e), f)) in offsets.iter().zip(env).zip(floors).enumerate() {
        report.diagnostics.push((format!("offset[{j}]"), *d));
        report.diagnostics.push((format!("envelope[{j}]"), *e));
        report.diagnostics.push((format!("floor[{j}]"), *f));
    }
    if let Some(slope) = envelope_slope(offsets, env) {
        report.diagnostics.push(("envelope_slope".into(), slope));
    }
}
