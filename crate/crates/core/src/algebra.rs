//! Pointwise algebra: the implicit equations for V and Delta, the coupling
//! coefficients K1, K2, and the Hamiltonians.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{Coef, CoefficientSet, Point, Scenario};

/// Result of a scalar fixed-point solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlgebraSolution {
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Contraction margin and stopping rule for the fixed-point solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointConfig {
    pub beta0: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl FixedPointConfig {
    pub fn new(beta0: f64) -> Self {
        FixedPointConfig {
            beta0,
            tol: 1e-12,
            max_iter: 200,
        }
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        FixedPointConfig {
            beta0: s.beta0,
            tol: s.tolerances.fixed_point,
            max_iter: s.tolerances.max_iter,
        }
    }
}

/// Guard below which `1 - p sigma_z` is treated as singular.
pub const SINGULAR_GUARD: f64 = 1e-12;

fn margin(p: f64, l3: f64, beta0: f64) -> Result<()> {
    let product = p.abs() * l3;
    let bound = 1.0 - beta0;
    if product > bound {
        Err(Error::ContractionMarginViolated { product, bound })
    } else {
        Ok(())
    }
}

/// Plain Picard iteration `z <- map(z)` until `|z - map(z)| <= tol`.
pub fn picard(
    map: impl Fn(f64) -> f64,
    start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<AlgebraSolution> {
    picard_inner(map, start, tol, max_iter, None)
}

/// Like [`picard`], also returning every iterate starting with `start`.
pub fn picard_trace(
    map: impl Fn(f64) -> f64,
    start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(AlgebraSolution, Vec<f64>)> {
    let mut trace = Vec::new();
    let sol = picard_inner(map, start, tol, max_iter, Some(&mut trace))?;
    Ok((sol, trace))
}

fn picard_inner(
    map: impl Fn(f64) -> f64,
    start: f64,
    tol: f64,
    max_iter: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<AlgebraSolution> {
    let mut z = start;
    let mut last_step = f64::INFINITY;
    for k in 0..=max_iter {
        if let Some(t) = trace.as_deref_mut() {
            t.push(z);
        }
        let fz = map(z);
        let residual = (z - fz).abs();
        if residual <= tol {
            return Ok(AlgebraSolution {
                value: z,
                iterations: k,
                residual,
            });
        }
        if !residual.is_finite() {
            break;
        }
        last_step = residual;
        z = fz;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_step,
    })
}

/// Solve `V = p sigma(t, x, v, V, u)`.
pub fn solve_v(
    coeffs: &CoefficientSet,
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    u: f64,
    cfg: &FixedPointConfig,
) -> Result<AlgebraSolution> {
    solve_v_from(coeffs, t, x, v, p, u, 0.0, cfg)
}

/// [`solve_v`] started from `start` instead of 0.
#[allow(clippy::too_many_arguments)]
pub fn solve_v_from(
    coeffs: &CoefficientSet,
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    u: f64,
    start: f64,
    cfg: &FixedPointConfig,
) -> Result<AlgebraSolution> {
    margin(p, coeffs.lipschitz.l3, cfg.beta0)?;
    let base = Point::new(t, x, v, 0.0, u);
    picard(
        |z| p * coeffs.sigma(&base.with_z(z)),
        start,
        cfg.tol,
        cfg.max_iter,
    )
}

/// Reference point `(s, x̄, ȳ, z̄, ū)` of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
}

impl Reference {
    pub fn point(&self) -> Point {
        Point::new(self.s, self.x, self.y, self.z, self.u)
    }
}

/// Solve `Δ = p [sigma(s, x̄, ȳ, z̄ + Δ, u) - sigma(s, x̄, ȳ, z̄, ū)]`.
pub fn solve_delta(
    coeffs: &CoefficientSet,
    reference: &Reference,
    p: f64,
    u: f64,
    cfg: &FixedPointConfig,
) -> Result<AlgebraSolution> {
    margin(p, coeffs.lipschitz.l3, cfg.beta0)?;
    let at_ref = coeffs.sigma(&reference.point());
    let moved = reference.point().with_u(u);
    picard(
        |d| p * (coeffs.sigma(&moved.with_z(reference.z + d)) - at_ref),
        0.0,
        cfg.tol,
        cfg.max_iter,
    )
}

fn inverse_gap(p: f64, sigma_z: f64) -> Result<f64> {
    let gap = 1.0 - p * sigma_z;
    if gap.abs() < SINGULAR_GUARD {
        Err(Error::SingularDenominator { value: gap })
    } else {
        Ok(1.0 / gap)
    }
}

/// `v H vᵀ` summed row by row in a fixed order.
pub fn quadratic_form(v: [f64; 3], h: &[[f64; 3]; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += v[i] * h[i][j] * v[j];
        }
    }
    acc
}

/// `K1 = (1 - p σ_z)^{-1} [σ_x p + σ_y p² + q]`, with `dsigma = (σ_x, σ_y, σ_z)`.
pub fn k1(dsigma: [f64; 3], p: f64, q: f64) -> Result<f64> {
    let [sx, sy, sz] = dsigma;
    Ok(inverse_gap(p, sz)? * (sx * p + sy * p * p + q))
}

/// Second-order coupling coefficient.
///
/// ```text
/// K2 = (1 - p σ_z)^{-1} {p σ_y + 2 [σ_x + σ_y p + σ_z K1]} P
///    + (1 - p σ_z)^{-1} {Q + p (1, p, K1) D²σ (1, p, K1)ᵀ}
/// ```
pub fn k2(
    dsigma: [f64; 3],
    d2sigma: &[[f64; 3]; 3],
    p: f64,
    big_p: f64,
    big_q: f64,
    k1: f64,
) -> Result<f64> {
    let [sx, sy, sz] = dsigma;
    let inv = inverse_gap(p, sz)?;
    let first = inv * (p * sy + 2.0 * (sx + sy * p + sz * k1)) * big_p;
    let second = inv * (big_q + p * quadratic_form([1.0, p, k1], d2sigma));
    Ok(first + second)
}

/// [`k2`] with `P` replaced by `W_xx` and `Q` by `W_xxx σ`.
pub fn k2_tilde(
    dsigma: [f64; 3],
    d2sigma: &[[f64; 3]; 3],
    p: f64,
    w_xx: f64,
    w_xxx_sigma: f64,
    k1: f64,
) -> Result<f64> {
    k2(dsigma, d2sigma, p, w_xx, w_xxx_sigma, k1)
}

/// Value of `p b + A σ²/2 + g` at `z = V(t, x, v, p, u)`, and the solution for V.
#[allow(clippy::too_many_arguments)]
pub fn g_value(
    coeffs: &CoefficientSet,
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    a: f64,
    u: f64,
    cfg: &FixedPointConfig,
) -> Result<(f64, AlgebraSolution)> {
    g_value_from(coeffs, t, x, v, p, a, u, 0.0, cfg)
}

/// [`g_value`] with a warm start for V.
#[allow(clippy::too_many_arguments)]
pub fn g_value_from(
    coeffs: &CoefficientSet,
    t: f64,
    x: f64,
    v: f64,
    p: f64,
    a: f64,
    u: f64,
    start: f64,
    cfg: &FixedPointConfig,
) -> Result<(f64, AlgebraSolution)> {
    let sol = solve_v_from(coeffs, t, x, v, p, u, start, cfg)?;
    let pt = Point::new(t, x, v, sol.value, u);
    let sigma = coeffs.sigma(&pt);
    let value = p * coeffs.b(&pt) + 0.5 * a * sigma * sigma + coeffs.g(&pt);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            oracle: "G".into(),
            t,
            x,
            y: v,
            z: sol.value,
            u,
        });
    }
    Ok((value, sol))
}

/// Arguments of the Hamiltonian with the σ-difference term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianInputs {
    pub reference: Reference,
    pub u: f64,
    pub p: f64,
    pub q: f64,
    pub big_p: f64,
}

/// `p b + q σ + g` at `(s, x̄, ȳ, z̄ + Δ, u)` plus `P (σ(z̄ + Δ, u) - σ(z̄, ū))² / 2`.
pub fn hamiltonian_h(
    inputs: &HamiltonianInputs,
    coeffs: &CoefficientSet,
    cfg: &FixedPointConfig,
) -> Result<f64> {
    let r = &inputs.reference;
    let delta = solve_delta(coeffs, r, inputs.p, inputs.u, cfg)?.value;
    let pt = Point::new(r.s, r.x, r.y, r.z + delta, inputs.u);
    let sigma = coeffs.sigma(&pt);
    let jump = sigma - coeffs.sigma(&r.point());
    Ok(inputs.p * coeffs.b(&pt)
        + inputs.q * sigma
        + coeffs.g(&pt)
        + 0.5 * inputs.big_p * jump * jump)
}

/// `-𝓗(s, x̄, ȳ, z̄, ū, p, q, P) + P σ(s, x̄, ȳ, z̄, ū)²`.
pub fn hamiltonian_h1(
    coeffs: &CoefficientSet,
    reference: &Reference,
    p: f64,
    q: f64,
    big_p: f64,
    cfg: &FixedPointConfig,
) -> Result<f64> {
    let inputs = HamiltonianInputs {
        reference: *reference,
        u: reference.u,
        p,
        q,
        big_p,
    };
    let sigma = coeffs.sigma(&reference.point());
    Ok(-hamiltonian_h(&inputs, coeffs, cfg)? + big_p * sigma * sigma)
}

/// `H' = m b + n σ + h g` and its derivative in the control.
pub fn hamiltonian_hprime(
    coeffs: &CoefficientSet,
    pt: &Point,
    h: f64,
    m: f64,
    n: f64,
) -> Result<(f64, f64)> {
    let value = m * coeffs.b(pt) + n * coeffs.sigma(pt) + h * coeffs.g(pt);
    let du = |c: Coef| {
        coeffs
            .model
            .control_derivative(c, pt)
            .ok_or(Error::MissingControlDerivative(c.name()))
    };
    let grad = m * du(Coef::Drift)? + n * du(Coef::Diffusion)? + h * du(Coef::Generator)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Lipschitz, Term, TermModel};

    fn sigma_model(terms: Vec<Term>, l3: f64) -> CoefficientSet {
        CoefficientSet::new(
            TermModel {
                diffusion: terms,
                ..Default::default()
            },
            Lipschitz {
                l1: 1.0,
                l2: 0.0,
                l3,
            },
        )
    }

    #[test]
    fn linear_fixed_point() {
        let c = sigma_model(
            vec![
                Term::monomial(0.5, [0, 0, 0, 1, 0]),
                Term::monomial(1.0, [0; 5]),
            ],
            0.5,
        );
        let sol = solve_v(&c, 0.0, 0.0, 0.0, 0.5, 0.0, &FixedPointConfig::new(0.2)).unwrap();
        assert!((sol.value - 2.0 / 3.0).abs() < 1e-11);
        assert!(sol.residual <= 1e-12);
    }

    #[test]
    fn z_free_sigma_takes_one_iteration() {
        let c = sigma_model(vec![Term::monomial(1.5, [0, 1, 0, 0, 0])], 0.0);
        let sol = solve_v(&c, 0.0, 2.0, 0.0, 0.4, 0.0, &FixedPointConfig::new(0.2)).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.value, 0.4 * 3.0);
    }

    #[test]
    fn margin_is_enforced() {
        let c = sigma_model(vec![Term::monomial(0.9, [0, 0, 0, 1, 0])], 0.9);
        let err = solve_v(&c, 0.0, 0.0, 0.0, 1.0, 0.0, &FixedPointConfig::new(0.2)).unwrap_err();
        assert!(matches!(err, Error::ContractionMarginViolated { .. }));
    }

    #[test]
    fn non_convergence_is_reported() {
        let c = sigma_model(
            vec![
                Term::monomial(0.79, [0, 0, 0, 1, 0]),
                Term::monomial(1.0, [0; 5]),
            ],
            0.79,
        );
        let cfg = FixedPointConfig {
            beta0: 0.2,
            tol: 1e-12,
            max_iter: 3,
        };
        let err = solve_v(&c, 0.0, 0.0, 0.0, 1.0, 0.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn delta_examples() {
        let c = sigma_model(
            vec![
                Term::monomial(0.3, [0, 0, 0, 1, 0]),
                Term::monomial(1.0, [0, 0, 0, 0, 1]),
            ],
            0.3,
        );
        let r = Reference {
            s: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            u: 0.0,
        };
        let cfg = FixedPointConfig::new(0.2);
        let d = solve_delta(&c, &r, 0.5, 1.0, &cfg).unwrap();
        assert!((d.value - 10.0 / 17.0).abs() < 1e-11);
        let same = solve_delta(&c, &r, 0.5, 0.0, &cfg).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.iterations <= 1);
    }

    #[test]
    fn k1_examples() {
        assert_eq!(k1([0.7, 0.2, 0.4], 0.0, 0.3).unwrap(), 0.3);
        assert!((k1([1.0, 0.0, 0.5], 0.5, 0.2).unwrap() - 14.0 / 15.0).abs() < 1e-15);
        assert!(matches!(
            k1([0.0, 0.0, 2.0], 0.5, 0.0),
            Err(Error::SingularDenominator { .. })
        ));
    }

    #[test]
    fn k2_examples() {
        let zero = [[0.0; 3]; 3];
        assert_eq!(k2([0.0; 3], &zero, 0.0, 3.0, 0.7, 1.0).unwrap(), 0.7);
        assert_eq!(k2([0.3, 0.2, 0.1], &zero, 0.4, 0.0, 0.0, 1.2).unwrap(), 0.0);
        assert_eq!(k2_tilde([0.0; 3], &zero, 0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn g_examples() {
        let c = sigma_model(vec![Term::monomial(1.0, [0; 5])], 0.0);
        let (v, _) = g_value(
            &c,
            0.0,
            0.3,
            0.1,
            0.0,
            2.0,
            0.0,
            &FixedPointConfig::new(0.5),
        )
        .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn hprime_requires_control_derivatives() {
        #[derive(Debug)]
        struct NoU;
        impl crate::problem::Coefficients for NoU {
            fn value(&self, _: Coef, _: &Point) -> f64 {
                0.0
            }
            fn gradient(&self, _: Coef, _: &Point) -> [f64; 3] {
                [0.0; 3]
            }
            fn hessian(&self, _: Coef, _: &Point) -> [[f64; 3]; 3] {
                [[0.0; 3]; 3]
            }
            fn terminal(&self, _: f64) -> f64 {
                0.0
            }
            fn terminal_dx(&self, _: f64) -> f64 {
                0.0
            }
            fn terminal_dxx(&self, _: f64) -> f64 {
                0.0
            }
        }
        let c = CoefficientSet::new(NoU, Lipschitz::default());
        let err = hamiltonian_hprime(&c, &Point::new(0.0, 0.0, 0.0, 0.0, 0.0), 1.0, 0.0, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::MissingControlDerivative("b")));
    }
}
