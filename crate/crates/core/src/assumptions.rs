//! Standing assumptions: the bounding ODEs, the contraction condition on
//! `L3`, the Λ_β smallness numbers, monotonicity and regime detection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::hjb::uniform;
use crate::problem::{Coef, CoefficientSet, Domain, Lipschitz, Point, Regime, Scenario};

/// Right-hand side of the bounding ODEs.
pub fn f_eval(y: f64, l1: f64, l2: f64, beta0: f64) -> f64 {
    let a = y.abs();
    l1 + (l2 + l1 + l1 * l2 / beta0) * a
        + (l2 + (l1 * l2 + l2 * l2) / beta0) * y * y
        + l2 * l2 / beta0 * a * a * a
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundOdeSolution {
    pub times: Vec<f64>,
    pub s: Vec<f64>,
    pub l: Vec<f64>,
    /// Time at which `s` passed the blow-up cap, if it did before 0.
    pub blowup_time: Option<f64>,
    pub t1: f64,
    pub t2: f64,
    pub t_star: f64,
}

impl BoundOdeSolution {
    pub fn s0(&self) -> f64 {
        self.s[0]
    }

    pub fn l0(&self) -> f64 {
        self.l[0]
    }

    /// `s(0) ∨ (-l(0))`, the bound on the first-order adjoint.
    pub fn adjoint_bound(&self) -> f64 {
        self.s0().max(-self.l0())
    }
}

/// Integrate `y' = sign · F(y)` in reversed time `τ = T - t` by RK4,
/// stopping once `|y|` exceeds `cap`.
#[allow(clippy::too_many_arguments)]
fn integrate(
    start: f64,
    sign: f64,
    l1: f64,
    l2: f64,
    beta0: f64,
    horizon: f64,
    steps: usize,
    cap: f64,
) -> (Vec<f64>, Option<f64>) {
    let h = horizon / steps as f64;
    let f = |y: f64| sign * f_eval(y, l1, l2, beta0);
    let mut out = vec![f64::NAN; steps + 1];
    let mut y = start;
    out[steps] = y;
    for i in (0..steps).rev() {
        let k1 = f(y);
        let k2 = f(y + 0.5 * h * k1);
        let k3 = f(y + 0.5 * h * k2);
        let k4 = f(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !(y.abs() <= cap) {
            for v in out[..=i].iter_mut() {
                *v = sign * f64::INFINITY;
            }
            return (out, Some(horizon * i as f64 / steps as f64));
        }
        out[i] = y;
    }
    (out, None)
}

/// `∫_a^∞ dy / F(y)`, or `+∞` when the integral diverges.
fn tail_integral(a: f64, l1: f64, l2: f64, beta0: f64) -> f64 {
    let quad = l2 + (l1 * l2 + l2 * l2) / beta0;
    let cubic = l2 * l2 / beta0;
    if l1 <= 0.0 || (quad <= 0.0 && cubic <= 0.0) {
        return f64::INFINITY;
    }
    // y = a + v / (1 - v), composite Simpson on v ∈ [0, 1]
    let n = 20_000;
    let h = 1.0 / n as f64;
    let g = |v: f64| {
        if v >= 1.0 {
            return 0.0;
        }
        let w = 1.0 - v;
        1.0 / (f_eval(a + v / w, l1, l2, beta0) * w * w)
    };
    let mut acc = g(0.0) + g(1.0);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
    }
    acc * h / 3.0
}

/// Solve the bounding ODEs on `[0, T]` with `steps` RK4 steps.
pub fn solve_bound_odes(
    l1: f64,
    l2: f64,
    beta0: f64,
    horizon: f64,
    steps: usize,
    cap: f64,
) -> BoundOdeSolution {
    let steps = steps.max(10);
    let (s, blow_s) = integrate(l1, 1.0, l1, l2, beta0, horizon, steps, cap);
    let (l, blow_l) = integrate(-l1, -1.0, l1, l2, beta0, horizon, steps, cap);
    let t2 = horizon - tail_integral(l1, l1, l2, beta0);
    // F is even, so the lower tail integral equals the upper one
    let t1 = horizon - tail_integral(l1, l1, l2, beta0);
    BoundOdeSolution {
        times: uniform(0.0, horizon, steps + 1),
        s,
        l,
        blowup_time: blow_s.or(blow_l),
        t1,
        t2,
        t_star: t1.max(t2),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Assumption3 {
    pub pass: bool,
    pub t_star: f64,
    pub adjoint_bound: f64,
    /// `(1 - β₀) - [s(0) ∨ (-l(0))] L3`.
    pub margin: f64,
}

pub fn check_assumption3(ode: &BoundOdeSolution, l3: f64, beta0: f64) -> Assumption3 {
    let bound = ode.adjoint_bound();
    let product = if l3 == 0.0 { 0.0 } else { bound * l3 };
    let margin = (1.0 - beta0) - product;
    Assumption3 {
        pass: ode.t_star < 0.0 && margin >= 0.0,
        t_star: ode.t_star,
        adjoint_bound: bound,
        margin,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaEntry {
    pub beta: u32,
    pub c_beta: Option<f64>,
    pub value: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaReport {
    pub c1: f64,
    pub entries: Vec<LambdaEntry>,
    /// True when no `C_β` was supplied and nothing could be evaluated.
    pub advisory_only: bool,
}

/// `Λ_β = C_β 2^{β+1} (1 + T^β) c1^β` with `c1 = max(L2, L3)`, for β = 2..=8.
pub fn lambda_beta(c_beta: Option<&[f64]>, l2: f64, l3: f64, horizon: f64) -> LambdaReport {
    let c1 = l2.max(l3);
    let entries = (2u32..=8)
        .map(|beta| {
            let c = c_beta.and_then(|c| c.get(beta as usize - 2).copied());
            let value = c.map(|c| {
                c * 2f64.powi(beta as i32 + 1)
                    * (1.0 + horizon.powi(beta as i32))
                    * c1.powi(beta as i32)
            });
            LambdaEntry {
                beta,
                c_beta: c,
                value,
                pass: value.map(|v| v < 1.0),
            }
        })
        .collect();
    LambdaReport {
        c1,
        entries,
        advisory_only: c_beta.is_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityWitness {
    pub control: f64,
    pub first: [f64; 4],
    pub second: [f64; 4],
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pass: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub worst_margin: f64,
    pub pairs: usize,
    pub witness: Option<MonotonicityWitness>,
}

/// One sampled inequality `a β1 + b β2 <= c`.
#[derive(Clone, Copy, Debug)]
struct Constraint {
    a: f64,
    b: f64,
    c: f64,
    control: f64,
    first: [f64; 4],
    second: [f64; 4],
}

const BETA_MAX: f64 = 10.0;

fn sample_constraints(
    coeffs: &CoefficientSet,
    controls: &[f64],
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> (Vec<Constraint>, Vec<(f64, f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
    let mut out = Vec::new();
    let mut terminal = Vec::new();
    for _ in 0..samples {
        let s = draw(domain.t);
        let p = [draw(domain.x), draw(domain.y), draw(domain.z)];
        let q = [draw(domain.x), draw(domain.y), draw(domain.z)];
        // the full pair plus pairs that move one coordinate at a time
        let partners = [
            q,
            [q[0], p[1], p[2]],
            [p[0], q[1], p[2]],
            [p[0], p[1], q[2]],
        ];
        for &u in controls {
            let a = Point::new(s, p[0], p[1], p[2], u);
            let pi_a = [-coeffs.g(&a), coeffs.b(&a), coeffs.sigma(&a)];
            for r in partners {
                let b = Point::new(s, r[0], r[1], r[2], u);
                let pi_b = [-coeffs.g(&b), coeffs.b(&b), coeffs.sigma(&b)];
                let d = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
                let inner = (pi_a[0] - pi_b[0]) * d[0]
                    + (pi_a[1] - pi_b[1]) * d[1]
                    + (pi_a[2] - pi_b[2]) * d[2];
                out.push(Constraint {
                    a: d[0] * d[0],
                    b: d[1] * d[1] + d[2] * d[2],
                    c: -inner,
                    control: u,
                    first: [s, p[0], p[1], p[2]],
                    second: [s, r[0], r[1], r[2]],
                });
            }
        }
        let dx = p[0] - q[0];
        if dx != 0.0 {
            terminal.push(((coeffs.phi(p[0]) - coeffs.phi(q[0])) * dx, dx * dx, q[0]));
        }
    }
    (out, terminal)
}

fn feasible(cs: &[Constraint], b1: f64, b2: f64) -> bool {
    cs.iter().all(|c| c.a * b1 + c.b * b2 <= c.c)
}

/// Largest `β` with `a β + fixed <= c` for all constraints, capped.
fn max_along(cs: &[Constraint], coef: impl Fn(&Constraint) -> (f64, f64)) -> f64 {
    cs.iter()
        .filter_map(|c| {
            let (k, rest) = coef(c);
            (k > 0.0).then(|| (c.c - rest) / k)
        })
        .fold(BETA_MAX, f64::min)
        .max(0.0)
}

/// Fit the largest monotonicity constants consistent with sampled pairs.
pub fn check_monotonicity(
    coeffs: &CoefficientSet,
    controls: &[f64],
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> MonotonicityReport {
    let (cs, terminal) = sample_constraints(coeffs, controls, domain, samples.max(2), seed);
    let pairs = cs.len() + terminal.len();

    let beta3_raw = terminal
        .iter()
        .map(|&(num, den, _)| num / den)
        .fold(BETA_MAX, f64::min);
    let fail_with = |c: &Constraint, margin: f64| MonotonicityReport {
        pass: false,
        beta1: 0.0,
        beta2: 0.0,
        beta3: beta3_raw.max(0.0),
        worst_margin: margin,
        pairs,
        witness: Some(MonotonicityWitness {
            control: c.control,
            first: c.first,
            second: c.second,
            margin,
        }),
    };
    if let Some(c) = cs
        .iter()
        .min_by(|x, y| x.c.total_cmp(&y.c))
        .filter(|c| c.c < 0.0)
    {
        return fail_with(c, c.c);
    }
    if beta3_raw < 0.0 {
        let (num, den, x) = terminal
            .iter()
            .copied()
            .min_by(|a, b| (a.0 / a.1).total_cmp(&(b.0 / b.1)))
            .expect("negative minimum implies a sample");
        let margin = num;
        return MonotonicityReport {
            pass: false,
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            worst_margin: margin,
            pairs,
            witness: Some(MonotonicityWitness {
                control: f64::NAN,
                first: [f64::NAN, x + den.sqrt(), f64::NAN, f64::NAN],
                second: [f64::NAN, x, f64::NAN, f64::NAN],
                margin,
            }),
        };
    }
    let beta3 = beta3_raw;

    // coarse scan, then exact coordinate-wise maximization
    let grid = uniform(0.0, BETA_MAX, 41);
    let mut best = (0.0, 0.0);
    let mut best_score = (false, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &b1 in &grid {
        for &b2 in &grid {
            if !feasible(&cs, b1, b2) {
                continue;
            }
            let ok = b1 + b2 > 0.0 && b2 + beta3 > 0.0;
            let score = if beta3 > 0.0 {
                (ok, b1 + b2, b2)
            } else {
                (ok, b2, b1)
            };
            if (score.0 && !best_score.0)
                || (score.0 == best_score.0 && (score.1, score.2) > (best_score.1, best_score.2))
            {
                best_score = score;
                best = (b1, b2);
            }
        }
    }
    let beta1 = max_along(&cs, |c| (c.a, c.b * best.1));
    let beta2 = max_along(&cs, |c| (c.b, c.a * beta1));
    let worst = cs
        .iter()
        .map(|c| c.c - c.a * beta1 - c.b * beta2)
        .chain(terminal.iter().map(|&(num, den, _)| num - beta3 * den))
        .fold(f64::INFINITY, f64::min);
    MonotonicityReport {
        pass: beta1 + beta2 > 0.0 && beta2 + beta3 > 0.0,
        beta1,
        beta2,
        beta3,
        worst_margin: worst,
        pairs,
        witness: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeReport {
    pub classes: Vec<Regime>,
    /// Sampled `σ_z` when σ is affine in z.
    pub a_tilde: Vec<f64>,
    pub rationale: String,
}

impl RegimeReport {
    pub fn is(&self, r: Regime) -> bool {
        self.classes.contains(&r)
    }
}

/// Detect σ affine in z by second differences, and the local convex case
/// from the convexity flag plus control derivatives.
pub fn classify_regime(
    coeffs: &CoefficientSet,
    convex_flag: bool,
    domain: &Domain,
    probes: usize,
    seed: u64,
) -> RegimeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 0.1 * (domain.z[1] - domain.z[0]).abs().max(1e-3);
    let mut worst: f64 = 0.0;
    let mut a_tilde = Vec::new();
    for _ in 0..probes.max(1) {
        let mut draw = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let pt = Point::new(
            draw(domain.t),
            draw(domain.x),
            draw(domain.y),
            draw(domain.z),
            draw(domain.u),
        );
        let s = |z: f64| coeffs.model.value(Coef::Diffusion, &pt.with_z(z));
        let (lo, mid, hi) = (s(pt.z - h), s(pt.z), s(pt.z + h));
        let second = (hi - 2.0 * mid + lo).abs() / (1.0 + mid.abs());
        worst = worst.max(second);
        a_tilde.push((hi - lo) / (2.0 * h));
    }
    let affine = worst <= 1e-9;
    let mut classes = Vec::new();
    let mut rationale = Vec::new();
    if affine {
        classes.push(Regime::LinearSigma);
        rationale.push(format!(
            "sigma affine in z (max second difference {worst:.2e})"
        ));
    } else {
        classes.push(Regime::General);
        rationale.push(format!(
            "sigma curved in z (max second difference {worst:.2e})"
        ));
        a_tilde.clear();
    }
    let has_du = coeffs.has_control_derivatives();
    if convex_flag && has_du {
        classes.push(Regime::LocalConvex);
        rationale.push("convex control set with control derivatives".into());
    } else if convex_flag {
        rationale.push("convex control set but no control derivatives".into());
    }
    RegimeReport {
        classes,
        a_tilde,
        rationale: rationale.join("; "),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub lipschitz: Lipschitz,
    pub beta0: f64,
    pub lambda: LambdaReport,
    pub ode: BoundOdeSolution,
    pub assumption3: Assumption3,
    pub monotonicity: MonotonicityReport,
    pub regime: RegimeReport,
    pub declared_regime: Regime,
    /// Contraction margin of the bounding ODEs, plus monotonicity when the
    /// scenario is in the local case.
    pub gates_pass: bool,
}

pub fn assess(scenario: &Scenario) -> AssumptionReport {
    let l = scenario.coefficients.lipschitz;
    let a = &scenario.assumptions;
    let domain = scenario.domain();
    let ode = solve_bound_odes(
        l.l1,
        l.l2,
        scenario.beta0,
        scenario.horizon,
        a.ode_steps,
        a.blowup_cap,
    );
    let assumption3 = check_assumption3(&ode, l.l3, scenario.beta0);
    let monotonicity = check_monotonicity(
        &scenario.coefficients,
        scenario.controls.points(),
        &domain,
        a.monotonicity_samples,
        a.seed,
    );
    let regime = classify_regime(
        &scenario.coefficients,
        scenario.controls.is_convex(),
        &domain,
        64,
        a.seed,
    );
    let local = scenario.regime == Regime::LocalConvex;
    AssumptionReport {
        lipschitz: l,
        beta0: scenario.beta0,
        lambda: lambda_beta(a.c_beta.as_deref(), l.l2, l.l3, scenario.horizon),
        gates_pass: assumption3.pass && (!local || monotonicity.pass),
        ode,
        assumption3,
        monotonicity,
        regime,
        declared_regime: scenario.regime,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_examples() {
        assert_eq!(f_eval(0.0, 0.7, 0.3, 0.5), 0.7);
        assert!((f_eval(2.0, 0.7, 0.0, 0.5) - 0.7 * 3.0).abs() < 1e-15);
        assert_eq!(f_eval(-1.3, 0.4, 0.2, 0.3), f_eval(1.3, 0.4, 0.2, 0.3));
    }

    #[test]
    fn zero_constants_stay_zero() {
        let ode = solve_bound_odes(0.0, 0.0, 0.5, 1.0, 100, 1e8);
        assert!(ode.s.iter().all(|&v| v == 0.0));
        assert_eq!(ode.t_star, f64::NEG_INFINITY);
    }

    #[test]
    fn lambda_arithmetic() {
        let r = lambda_beta(Some(&[1.0; 7]), 0.5, 0.2, 1.0);
        assert_eq!(r.entries[0].value, Some(4.0));
        assert_eq!(r.entries[0].pass, Some(false));
        let zero = lambda_beta(Some(&[3.0; 7]), 0.0, 0.0, 2.0);
        assert!(zero
            .entries
            .iter()
            .all(|e| e.value == Some(0.0) && e.pass == Some(true)));
        assert!(lambda_beta(None, 0.1, 0.1, 1.0).advisory_only);
    }

    #[test]
    fn boundary_margin_passes() {
        let ode = BoundOdeSolution {
            times: vec![0.0, 1.0],
            s: vec![2.0, 1.0],
            l: vec![-2.0, -1.0],
            blowup_time: None,
            t1: f64::NEG_INFINITY,
            t2: f64::NEG_INFINITY,
            t_star: f64::NEG_INFINITY,
        };
        let v = check_assumption3(&ode, 0.25, 0.5);
        assert_eq!(v.margin, 0.0);
        assert!(v.pass);
    }
}
