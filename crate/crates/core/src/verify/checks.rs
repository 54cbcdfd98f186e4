use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sample_points, Check, RelationId, RelationReport, Rule, Sample, ToleranceBreakdown};
use crate::adjoint::{self, AdjointPath, LocalAdjointPath};
use crate::algebra::{self, FixedPointConfig, HamiltonianInputs, Reference};
use crate::error::{Error, Result};
use crate::fbsde::{self, AffinePolicy, FieldPolicy, PiecewisePolicy, Policy, TrajectoryBundle};
use crate::hjb::ValueField;
use crate::problem::{Point, Scenario};

pub(super) fn reference(bundle: &TrajectoryBundle, m: usize, k: usize) -> Reference {
    let i = bundle.at(m, k);
    Reference {
        s: bundle.times[k],
        x: bundle.x[i],
        y: bundle.y[i],
        z: bundle.z[i],
        u: bundle.u[i],
    }
}

pub(super) fn sample(
    quantity: &str,
    m: Option<usize>,
    k: usize,
    t: f64,
    control: Option<f64>,
    probe: Option<f64>,
    value: f64,
) -> Sample {
    Sample {
        quantity: quantity.to_string(),
        path: m,
        step: k,
        t,
        control,
        probe,
        value,
    }
}

/// Evaluate `f` at every sampled point in parallel, keeping sample order.
pub(super) fn collect_samples<F>(points: &[(usize, usize)], f: F) -> Result<Vec<Sample>>
where
    F: Fn(usize, usize) -> Result<Vec<Sample>> + Sync,
{
    let nested: Vec<Result<Vec<Sample>>> = points.par_iter().map(|&(m, k)| f(m, k)).collect();
    let mut out = Vec::new();
    for r in nested {
        out.extend(r?);
    }
    Ok(out)
}

fn median_abs(samples: &[Sample], quantity: &str) -> f64 {
    let v: Vec<f64> = samples
        .iter()
        .filter(|s| s.quantity == quantity)
        .map(|s| s.value.abs())
        .collect();
    if v.is_empty() {
        0.0
    } else {
        fbsde::median(&v)
    }
}

/// `relative · median|reference| + verification`.
fn relative_threshold(scenario: &Scenario, reference: f64) -> f64 {
    scenario.tolerances.relative * reference + scenario.tolerances.verification
}

fn ensure_aligned(bundle: &TrajectoryBundle, adj: &AdjointPath) -> Result<()> {
    if adj.paths != bundle.paths() || adj.times.len() != bundle.times.len() {
        return Err(Error::Precondition(format!(
            "adjoint has {} paths × {} times, trajectories {} × {}",
            adj.paths,
            adj.times.len(),
            bundle.paths(),
            bundle.times.len()
        )));
    }
    Ok(())
}

/// `𝓗(u) − 𝓗(ū)` over the control grid at every sampled point.
pub fn check_mp_global(
    scenario: &Scenario,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
    second: &AdjointPath,
    controls: &[f64],
) -> Result<RelationReport> {
    ensure_aligned(bundle, first)?;
    ensure_aligned(bundle, second)?;
    let coeffs = &scenario.coefficients;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        let inputs = |u: f64| HamiltonianInputs {
            reference: r,
            u,
            p: first.p[i],
            q: first.q[i],
            big_p: second.big_p[i],
        };
        let base = algebra::hamiltonian_h(&inputs(r.u), coeffs, &cfg)?;
        controls
            .iter()
            .map(|&u| {
                let h = algebra::hamiltonian_h(&inputs(u), coeffs, &cfg)?;
                Ok(sample(
                    "H(u)-H(u_bar)",
                    Some(m),
                    k,
                    r.s,
                    Some(u),
                    None,
                    h - base,
                ))
            })
            .collect()
    })?;
    let checks = vec![Check::evaluate(
        &samples,
        "H(u)-H(u_bar)",
        Rule::MinAtLeast,
        tol.total,
    )];
    Ok(RelationReport::new(
        RelationId::MpGlobal,
        tol,
        samples,
        checks,
    ))
}

/// `⟨H'_u, u − ū⟩` over the control grid at every sampled point.
pub fn check_mp_local(
    scenario: &Scenario,
    bundle: &TrajectoryBundle,
    local: &LocalAdjointPath,
    controls: &[f64],
) -> Result<RelationReport> {
    if !scenario.controls.is_convex() {
        return Err(Error::Precondition(
            "MP_LOCAL needs a convex control set".into(),
        ));
    }
    let coeffs = &scenario.coefficients;
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        let (_, grad) =
            algebra::hamiltonian_hprime(coeffs, &r.point(), local.h[i], local.m[i], local.n[i])?;
        Ok(controls
            .iter()
            .map(|&u| {
                sample(
                    "H'_u*(u-u_bar)",
                    Some(m),
                    k,
                    r.s,
                    Some(u),
                    None,
                    grad * (u - r.u),
                )
            })
            .collect())
    })?;
    let checks = vec![Check::evaluate(
        &samples,
        "H'_u*(u-u_bar)",
        Rule::MinAtLeast,
        tol.total,
    )];
    Ok(RelationReport::new(
        RelationId::MpLocal,
        tol,
        samples,
        checks,
    ))
}

/// `p − W_x`, `q − W_xx σ`, `Y − W` and `Z − V` along the trajectories.
pub fn check_smooth_relations(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
) -> Result<RelationReport> {
    ensure_aligned(bundle, first)?;
    let coeffs = &scenario.coefficients;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        let w = field.value(r.s, r.x);
        let wx = field.value_x(r.s, r.x);
        let wxx = field.value_xx(r.s, r.x);
        let sigma = coeffs.sigma(&r.point());
        let v = algebra::solve_v(coeffs, r.s, r.x, w, wx, r.u, &cfg)?.value;
        let at = |q: &str, value: f64| sample(q, Some(m), k, r.s, Some(r.u), None, value);
        Ok(vec![
            at("p-Wx", first.p[i] - wx),
            at("Wx", wx),
            at("q-Wxx*sigma", first.q[i] - wxx * sigma),
            at("Wxx*sigma", wxx * sigma),
            at("Y-W", r.y - w),
            at("Z-V", r.z - v),
            at("V", v),
        ])
    })?;
    let checks = vec![
        Check::evaluate(
            &samples,
            "p-Wx",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, median_abs(&samples, "Wx")),
        ),
        Check::evaluate(
            &samples,
            "q-Wxx*sigma",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, median_abs(&samples, "Wxx*sigma")),
        ),
        Check::evaluate(
            &samples,
            "Y-W",
            Rule::MedianAbsAtMost,
            tol.field + tol.regression,
        ),
        Check::evaluate(
            &samples,
            "Z-V",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, median_abs(&samples, "V")),
        ),
    ];
    Ok(RelationReport::new(
        RelationId::SmoothPq,
        tol,
        samples,
        checks,
    ))
}

/// `P − W_xx ≥ −tol_total` along the trajectories.
pub fn check_smooth_p2(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    second: &AdjointPath,
) -> Result<RelationReport> {
    ensure_aligned(bundle, second)?;
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let (s, x) = (bundle.times[k], bundle.x[i]);
        Ok(vec![sample(
            "P-Wxx",
            Some(m),
            k,
            s,
            Some(bundle.u[i]),
            None,
            second.big_p[i] - field.value_xx(s, x),
        )])
    })?;
    let checks = vec![Check::evaluate(
        &samples,
        "P-Wxx",
        Rule::MinAtLeast,
        tol.total,
    )];
    Ok(RelationReport::new(
        RelationId::SmoothP2,
        tol,
        samples,
        checks,
    ))
}

/// Finite-difference derivatives of `x ↦ V(s, x, W(s, x), W_x(s, x), ū)`
/// against K1 and K̃2.
///
/// Returns the K1_VX and K2_VXX reports.
pub fn check_k_relations(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
    second: &AdjointPath,
) -> Result<(RelationReport, RelationReport)> {
    ensure_aligned(bundle, first)?;
    ensure_aligned(bundle, second)?;
    let coeffs = &scenario.coefficients;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let h = field.dx();
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        let v_at = |x: f64| -> Result<f64> {
            Ok(algebra::solve_v(
                coeffs,
                r.s,
                x,
                field.value(r.s, x),
                field.value_x(r.s, x),
                r.u,
                &cfg,
            )?
            .value)
        };
        let (vm, v0, vp) = (v_at(r.x - h)?, v_at(r.x)?, v_at(r.x + h)?);
        let dv = (vp - vm) / (2.0 * h);
        let d2v = (vp - 2.0 * v0 + vm) / (h * h);

        let w = field.value(r.s, r.x);
        let wx = field.value_x(r.s, r.x);
        let wxx = field.value_xx(r.s, r.x);
        let wxxx = (field.value_xx(r.s, r.x + h) - field.value_xx(r.s, r.x - h)) / (2.0 * h);
        let on_field = Point::new(r.s, r.x, w, v0, r.u);
        let d = coeffs.local(&on_field);
        let sigma = d.sigma();
        let closed = algebra::k1(d.dsigma(), wx, wxx * sigma)?;
        let (p, k1) = (first.p[i], first.k1[i]);
        let k2t = algebra::k2_tilde(d.dsigma(), &d.hess[1], p, wxx, wxxx * sigma, k1)?;
        let at = |q: &str, value: f64| sample(q, Some(m), k, r.s, Some(r.u), Some(h), value);
        Ok(vec![
            at("dV/dx", dv),
            at("dV/dx-K1", dv - k1),
            at("dV/dx-closed_form", dv - closed),
            at("d2V/dx2", d2v),
            at("d2V/dx2-K2_tilde", d2v - k2t),
            at("K2-K2_tilde", second.k2[i] - k2t),
        ])
    })?;
    let (first_order, second_order): (Vec<Sample>, Vec<Sample>) = samples
        .into_iter()
        .partition(|s| s.quantity.starts_with("dV"));
    let scale1 = median_abs(&first_order, "dV/dx");
    let k1_checks = vec![
        Check::evaluate(
            &first_order,
            "dV/dx-K1",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, scale1),
        ),
        Check::evaluate(
            &first_order,
            "dV/dx-closed_form",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, scale1),
        ),
    ];
    let scale2 = median_abs(&second_order, "d2V/dx2");
    let k2_checks = vec![Check::evaluate(
        &second_order,
        "d2V/dx2-K2_tilde",
        Rule::MedianAbsAtMost,
        relative_threshold(scenario, scale2) + tol.field,
    )];
    Ok((
        RelationReport::new(RelationId::K1Vx, tol, first_order, k1_checks),
        RelationReport::new(RelationId::K2Vxx, tol, second_order, k2_checks),
    ))
}

/// `m − p h` and `n − local_relation_n(p, q, h)` along the trajectories.
pub fn check_local_relations(
    scenario: &Scenario,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
    local: &LocalAdjointPath,
) -> Result<RelationReport> {
    ensure_aligned(bundle, first)?;
    let coeffs = &scenario.coefficients;
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let r = reference(bundle, m, k);
        let d = coeffs.local(&r.point());
        let (p, q, h) = (first.p[i], first.q[i], local.h[i]);
        let n = adjoint::local_relation_n(&d, p, q, h)?;
        let at = |name: &str, value: f64| sample(name, Some(m), k, r.s, Some(r.u), None, value);
        Ok(vec![
            at("m", local.m[i]),
            at("m-p*h", local.m[i] - p * h),
            at("n", n),
            at("n-n_formula", local.n[i] - n),
        ])
    })?;
    let checks = vec![
        Check::evaluate(
            &samples,
            "m-p*h",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, median_abs(&samples, "m")),
        ),
        Check::evaluate(
            &samples,
            "n-n_formula",
            Rule::MedianAbsAtMost,
            relative_threshold(scenario, median_abs(&samples, "n")) + tol.regression,
        ),
    ];
    Ok(RelationReport::new(
        RelationId::LocalMh,
        tol,
        samples,
        checks,
    ))
}

/// Random feedback maps with values in the control set: clamped affine maps
/// for a convex set, piecewise-constant maps over grid points otherwise.
///
/// Discontinuous feedbacks can make the Picard sweeps cycle on paths that sit
/// on a switching edge, so they are only used when the set forces them.
pub fn random_feedbacks(scenario: &Scenario, count: usize) -> Vec<Box<dyn Policy>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.montecarlo.seed);
    rng.set_stream(u64::MAX);
    let controls = scenario.controls.points();
    let [lo, hi] = scenario.controls.bounds();
    (0..count)
        .map(|_| -> Box<dyn Policy> {
            if scenario.controls.is_convex() {
                Box::new(AffinePolicy {
                    intercept: rng.random_range(lo..=hi),
                    slope: rng.random_range(-1.0..1.0),
                    bounds: [lo, hi],
                })
            } else {
                let mut edges: Vec<f64> = (0..3)
                    .map(|_| scenario.x0 + rng.random_range(-1.0..1.0))
                    .collect();
                edges.sort_by(f64::total_cmp);
                let values = (0..4)
                    .map(|_| controls[rng.random_range(0..controls.len())])
                    .collect();
                Box::new(PiecewisePolicy { edges, values })
            }
        })
        .collect()
}

/// Monte Carlo cost of sampled controls against `W(t, x)`.
///
/// Constant controls from the check grid and random feedback maps must cost
/// at least `W − 3·stderr − (tol_field + tol_mc)`; the field's own feedback
/// must cost `W` within the same band.
pub fn check_verification_theorem(
    scenario: &Scenario,
    field: &ValueField,
) -> Result<RelationReport> {
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let w = field.value(scenario.t0, scenario.x0);
    let t0 = scenario.t0;
    let mut samples = Vec::new();
    let run = |policy: &dyn Policy| -> Result<fbsde::Estimate> {
        Ok(fbsde::cost(&fbsde::simulate_picard(scenario, policy)?))
    };
    for &u in &scenario.check_controls {
        let est = run(&fbsde::ConstantPolicy(u))?;
        samples.push(sample(
            "J(u)-W+3se",
            None,
            0,
            t0,
            Some(u),
            None,
            est.mean - w + 3.0 * est.stderr,
        ));
    }
    for policy in random_feedbacks(scenario, scenario.verify.random_feedbacks) {
        let est = run(policy.as_ref())?;
        samples.push(sample(
            "J(u)-W+3se",
            None,
            0,
            t0,
            None,
            None,
            est.mean - w + 3.0 * est.stderr,
        ));
    }
    let optimal = FieldPolicy::new(field, scenario);
    let est = run(&optimal)?;
    samples.push(sample(
        "|J(u*)-W|-3se",
        None,
        0,
        t0,
        None,
        None,
        (est.mean - w).abs() - 3.0 * est.stderr,
    ));
    samples.push(sample("J(u*)", None, 0, t0, None, None, est.mean));
    samples.push(sample("W", None, 0, t0, None, None, w));
    let band = tol.field + tol.mc;
    let checks = vec![
        Check::evaluate(&samples, "J(u)-W+3se", Rule::MinAtLeast, band),
        Check::evaluate(&samples, "|J(u*)-W|-3se", Rule::MaxAtMost, band),
    ];
    Ok(RelationReport::new(
        RelationId::VerificationThm,
        tol,
        samples,
        checks,
    ))
}

/// `Y − W(s, X)` with Y the pathwise backward value, at the sampled points.
pub fn check_dpp(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
) -> Result<RelationReport> {
    let tol = ToleranceBreakdown::from_scenario(scenario);
    let points = sample_points(scenario, bundle);
    let samples = collect_samples(&points, |m, k| {
        let i = bundle.at(m, k);
        let s = bundle.times[k];
        Ok(vec![sample(
            "Y-W",
            Some(m),
            k,
            s,
            Some(bundle.u[i]),
            None,
            bundle.y_pathwise[i] - field.value(s, bundle.x[i]),
        )])
    })?;
    let checks = vec![Check::evaluate(
        &samples,
        "Y-W",
        Rule::MedianAbsAtMost,
        tol.field + tol.regression,
    )];
    Ok(RelationReport::new(
        RelationId::DppConsistency,
        tol,
        samples,
        checks,
    ))
}
