//! Sampling checks on coefficient oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::coefficients::{Coef, CoefficientSet, Lipschitz, Point};
use crate::error::{Error, Result};

/// Sampling box for `(t, x, y, z, u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub t: [f64; 2],
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub u: [f64; 2],
}

impl Domain {
    pub fn cube(t_max: f64, half_width: f64) -> Self {
        let r = [-half_width, half_width];
        Domain {
            t: [0.0, t_max],
            x: r,
            y: r,
            z: r,
            u: r,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let mut draw = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        Point {
            t: draw(self.t),
            x: draw(self.x),
            y: draw(self.y),
            z: draw(self.z),
            u: draw(self.u),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub oracle: String,
    pub max_mismatch: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.failed)
    }

    pub fn get(&self, oracle: &str) -> Option<&DerivativeCheck> {
        self.checks.iter().find(|c| c.oracle == oracle)
    }

    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_mismatch)
            .fold(0.0, f64::max)
    }
}

const SLOTS: [&str; 3] = ["x", "y", "z"];

fn finite(v: f64, oracle: &str, pt: &Point) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            oracle: oracle.to_string(),
            t: pt.t,
            x: pt.x,
            y: pt.y,
            z: pt.z,
            u: pt.u,
        })
    }
}

/// Compare every derivative oracle against a central difference of the
/// next-lower oracle, at `samples` random points of `domain`.
pub fn validate_derivatives(
    coeffs: &CoefficientSet,
    domain: &Domain,
    samples: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<DerivativeReport> {
    if samples == 0 {
        return Err(Error::Precondition(
            "validate_derivatives needs samples ≥ 1".into(),
        ));
    }
    let model = &coeffs.model;
    let h = step;
    let mut names: Vec<String> = Vec::new();
    let mut worst: Vec<f64> = Vec::new();
    let mut record = |name: String, mismatch: f64| match names.iter().position(|n| *n == name) {
        Some(i) => worst[i] = worst[i].max(mismatch),
        None => {
            names.push(name);
            worst.push(mismatch);
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let pt = domain.sample(&mut rng);
        for c in Coef::ALL {
            let name = c.name();
            finite(model.value(c, &pt), name, &pt)?;
            let grad = model.gradient(c, &pt);
            let hess = model.hessian(c, &pt);
            for i in 0..3 {
                let oracle = format!("{name}_{}", SLOTS[i]);
                let g = finite(grad[i], &oracle, &pt)?;
                let fd = (model.value(c, &pt.shifted(i, h)) - model.value(c, &pt.shifted(i, -h)))
                    / (2.0 * h);
                record(oracle, (g - fd).abs());
                for j in i..3 {
                    let oracle = format!("{name}_{}{}", SLOTS[i], SLOTS[j]);
                    let second = finite(hess[i][j], &oracle, &pt)?;
                    let fd = (model.gradient(c, &pt.shifted(j, h))[i]
                        - model.gradient(c, &pt.shifted(j, -h))[i])
                        / (2.0 * h);
                    record(oracle, (second - fd).abs());
                }
            }
            if let Some(du) = model.control_derivative(c, &pt) {
                let oracle = format!("{name}_u");
                let du = finite(du, &oracle, &pt)?;
                let fd = (model.value(c, &pt.shifted(3, h)) - model.value(c, &pt.shifted(3, -h)))
                    / (2.0 * h);
                record(oracle, (du - fd).abs());
            }
        }
        let x = pt.x;
        finite(model.terminal(x), "phi", &pt)?;
        let d1 = finite(model.terminal_dx(x), "phi_x", &pt)?;
        let d2 = finite(model.terminal_dxx(x), "phi_xx", &pt)?;
        let fd1 = (model.terminal(x + h) - model.terminal(x - h)) / (2.0 * h);
        let fd2 = (model.terminal_dx(x + h) - model.terminal_dx(x - h)) / (2.0 * h);
        record("phi_x".into(), (d1 - fd1).abs());
        record("phi_xx".into(), (d2 - fd2).abs());
    }

    let checks = names
        .into_iter()
        .zip(worst)
        .map(|(oracle, max_mismatch)| DerivativeCheck {
            oracle,
            max_mismatch,
            failed: !(max_mismatch <= tolerance),
        })
        .collect();
    Ok(DerivativeReport {
        step,
        tolerance,
        checks,
    })
}

/// Largest sampled difference quotients, grouped like the declared
/// constants. Sample `i` is the same for every `samples ≥ i`, so the result
/// is nondecreasing in `samples`.
pub fn estimate_lipschitz(
    coeffs: &CoefficientSet,
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> Lipschitz {
    let model = &coeffs.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = Lipschitz::default();
    let ratio = |a: f64, b: f64, d: f64| {
        let r = (a - b).abs() / d.abs();
        if r.is_finite() {
            r
        } else {
            0.0
        }
    };
    for _ in 0..samples {
        let p = domain.sample(&mut rng);
        let q = domain.sample(&mut rng);
        let deltas = [q.x - p.x, q.y - p.y, q.z - p.z];
        for (slot, &d) in deltas.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let moved = p.shifted(slot, d);
            for c in Coef::ALL {
                let r = ratio(model.value(c, &moved), model.value(c, &p), d);
                let target = match (c, slot) {
                    (_, 0) | (Coef::Generator, _) => &mut est.l1,
                    (Coef::Drift, _) | (Coef::Diffusion, 1) => &mut est.l2,
                    (Coef::Diffusion, _) => &mut est.l3,
                };
                *target = target.max(r);
            }
        }
        if deltas[0] != 0.0 {
            est.l1 = est
                .l1
                .max(ratio(model.terminal(q.x), model.terminal(p.x), deltas[0]));
        }
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::terms::{Term, TermModel, Var};

    fn set(model: TermModel) -> CoefficientSet {
        CoefficientSet::new(model, Lipschitz::default())
    }

    #[test]
    fn zero_model_has_zero_constants() {
        let l = estimate_lipschitz(&set(TermModel::default()), &Domain::cube(1.0, 2.0), 50, 1);
        assert_eq!(l, Lipschitz::default());
    }

    #[test]
    fn linear_slopes_are_recovered() {
        let model = TermModel {
            diffusion: vec![Term::monomial(0.3, [0, 0, 0, 1, 0])],
            generator: vec![
                Term::monomial(1.0, [0, 1, 0, 0, 0]),
                Term::monomial(1.0, [0, 0, 1, 0, 0]),
                Term::monomial(1.0, [0, 0, 0, 1, 0]),
            ],
            ..Default::default()
        };
        let l = estimate_lipschitz(&set(model), &Domain::cube(1.0, 2.0), 200, 3);
        assert!((l.l3 - 0.3).abs() < 1e-12);
        assert!((l.l1 - 1.0).abs() < 1e-12);
        assert_eq!(l.l2, 0.0);
    }

    #[test]
    fn sine_derivatives_validate() {
        let model = TermModel {
            diffusion: vec![
                Term::sine(0.3, Var::Z, 1.0, 0.0),
                Term::monomial(1.0, [0, 1, 0, 0, 0]),
            ],
            terminal: vec![Term::monomial(1.0, [0, 2, 0, 0, 0])],
            ..Default::default()
        };
        let r =
            validate_derivatives(&set(model), &Domain::cube(1.0, 2.0), 100, 5, 1e-4, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.get("sigma_zz").unwrap().max_mismatch < 1e-7);
    }
}
