#![allow(dead_code)]

use std::path::PathBuf;

use fbcontrol::problem::{load_scenario, LinearQuadraticSpec, Scenario};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn scenario(name: &str) -> Scenario {
    load_scenario(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Root of `f` on `[lo, hi]` by bisection; `f(lo)` and `f(hi)` must differ in sign.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    assert!(
        flo * f(hi) <= 0.0,
        "bisection bracket does not straddle a root"
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Quadratic value function `A x²/2 + B x + C` of an LQ instance with
/// constant σ, no y in the drift and an unconstrained quadratic control
/// cost. The coefficients solve the Riccati-type system obtained by
/// matching powers of x in `W_t + min_u G = 0`.
pub struct RiccatiOracle {
    pub horizon: f64,
    pub t0: f64,
    pub steps: usize,
    /// `(A, B, C)` at `t0 + i (T - t0) / steps`.
    pub abc: Vec<[f64; 3]>,
}

fn hamiltonian_min(lq: &LinearQuadraticSpec, abc: [f64; 3], x: f64) -> f64 {
    let [a, b, c] = abc;
    let w = 0.5 * a * x * x + b * x + c;
    let p = a * x + b;
    let z = p * lq.s0;
    let u = -(lq.cb * p + lq.gu) / lq.rho;
    let drift = lq.b0 + lq.a1 * x + lq.a3 * z + lq.cb * u;
    let gen = lq.g0
        + lq.g1 * x
        + lq.g2 * w
        + lq.g3 * z
        + 0.5 * lq.r * x * x
        + 0.5 * lq.rho * u * u
        + lq.gu * u;
    p * drift + 0.5 * a * lq.s0 * lq.s0 + gen
}

fn rhs(lq: &LinearQuadraticSpec, abc: [f64; 3]) -> [f64; 3] {
    let gm = hamiltonian_min(lq, abc, -1.0);
    let g0 = hamiltonian_min(lq, abc, 0.0);
    let gp = hamiltonian_min(lq, abc, 1.0);
    let c2 = 0.5 * (gp + gm) - g0;
    let c1 = 0.5 * (gp - gm);
    // d/dt (A/2, B, C) = -(c2, c1, c0)
    [-2.0 * c2, -c1, -g0]
}

impl RiccatiOracle {
    pub fn solve(lq: &LinearQuadraticSpec, t0: f64, horizon: f64, steps: usize) -> Self {
        assert!(lq.a2 == 0.0 && lq.s1 == 0.0 && lq.s2 == 0.0 && lq.s3 == 0.0 && lq.cs == 0.0);
        let h = (horizon - t0) / steps as f64;
        let mut abc = vec![[0.0; 3]; steps + 1];
        let mut y = [lq.k, lq.k1, lq.k0];
        abc[steps] = y;
        let add =
            |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
        for i in (0..steps).rev() {
            // integrate backward: dt = -h
            let k1 = rhs(lq, y);
            let k2 = rhs(lq, add(y, k1, -0.5 * h));
            let k3 = rhs(lq, add(y, k2, -0.5 * h));
            let k4 = rhs(lq, add(y, k3, -h));
            for j in 0..3 {
                y[j] -= h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            abc[i] = y;
        }
        RiccatiOracle {
            horizon,
            t0,
            steps,
            abc,
        }
    }

    pub fn coefficients(&self, t: f64) -> [f64; 3] {
        let pos = (t - self.t0) / (self.horizon - self.t0) * self.steps as f64;
        let i = (pos.floor() as usize).min(self.steps - 1);
        let w = pos - i as f64;
        let (a, b) = (self.abc[i], self.abc[i + 1]);
        [0, 1, 2].map(|j| (1.0 - w) * a[j] + w * b[j])
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        let [a, b, c] = self.coefficients(t);
        0.5 * a * x * x + b * x + c
    }

    pub fn gradient(&self, t: f64, x: f64) -> f64 {
        let [a, b, _] = self.coefficients(t);
        a * x + b
    }
}

pub fn lq_spec(s: &Scenario) -> LinearQuadraticSpec {
    match s.coefficient_spec() {
        fbcontrol::problem::CoefficientSpec::LinearQuadratic(lq) => lq.clone(),
        _ => panic!("not a linear-quadratic scenario"),
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
