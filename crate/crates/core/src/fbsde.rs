//! Monte Carlo simulation of the controlled forward-backward system.

use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::{self, FixedPointConfig};
use crate::brownian::Increments;
use crate::error::{Error, Result};
use crate::hjb::{uniform, ValueField};
use crate::problem::{CoefficientSet, Point, Scenario};
use crate::regression::Design;

/// A control rule evaluated along simulated paths.
pub trait Policy: Sync {
    /// Control at step `k` (time `t`) in state `x`.
    fn control(&self, k: usize, t: f64, x: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn control(&self, _: usize, _: f64, _: f64) -> f64 {
        self.0
    }
}

/// Deterministic control path indexed by simulation step.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoop(pub Vec<f64>);

impl Policy for OpenLoop {
    fn control(&self, k: usize, _: f64, _: f64) -> f64 {
        self.0[k.min(self.0.len() - 1)]
    }
}

/// Piecewise-constant feedback map: `values[i]` on `[edges[i-1], edges[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewisePolicy {
    pub edges: Vec<f64>,
    pub values: Vec<f64>,
}

impl Policy for PiecewisePolicy {
    fn control(&self, _: usize, _: f64, x: f64) -> f64 {
        let i = self.edges.iter().take_while(|&&e| x >= e).count();
        self.values[i]
    }
}

/// `clamp(intercept + slope·x, lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePolicy {
    pub intercept: f64,
    pub slope: f64,
    pub bounds: [f64; 2],
}

impl Policy for AffinePolicy {
    fn control(&self, _: usize, _: f64, x: f64) -> f64 {
        (self.intercept + self.slope * x).clamp(self.bounds[0], self.bounds[1])
    }
}

/// The G-minimizing feedback read off a value field.
///
/// Between two grid nodes the candidate controls are the minimizers stored
/// at both neighbours; the one with the smaller G at the interpolated
/// `(W, W_x, W_xx)` wins, ties going to the lower control index.
#[derive(Clone, Debug)]
pub struct FieldPolicy<'a> {
    pub field: &'a ValueField,
    pub coeffs: &'a CoefficientSet,
    pub cfg: FixedPointConfig,
}

impl<'a> FieldPolicy<'a> {
    pub fn new(field: &'a ValueField, scenario: &'a Scenario) -> Self {
        FieldPolicy {
            field,
            coeffs: &scenario.coefficients,
            cfg: FixedPointConfig::from_scenario(scenario),
        }
    }

    pub fn control_index(&self, t: f64, x: f64) -> usize {
        let f = self.field;
        let i = f.nearest_level(t);
        let (j, _) = f.locate_x(x);
        let a = f.u_index[f.idx(i, j)];
        let b = f.u_index[f.idx(i, j + 1)];
        if a == b {
            return a;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let w = f.value(t, x);
        let wx = f.value_x(t, x);
        let wxx = f.value_xx(t, x);
        let g = |k: usize| {
            algebra::g_value(self.coeffs, t, x, w, wx, wxx, f.controls[k], &self.cfg).map(|r| r.0)
        };
        match (g(lo), g(hi)) {
            (Ok(gl), Ok(gh)) => {
                if gh < gl {
                    hi
                } else {
                    lo
                }
            }
            _ => f.u_index[f.idx(i, if f.locate_x(x).1 > 0.5 { j + 1 } else { j })],
        }
    }
}

impl Policy for FieldPolicy<'_> {
    fn control(&self, _: usize, t: f64, x: f64) -> f64 {
        self.field.controls[self.control_index(t, x)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Feedback,
    Picard,
}

/// Simulated paths of `(X, Y, Z, u)`; arrays are row-major `paths × (steps + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBundle {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub increments: Increments,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Y recomputed backward along each path from `Y(T)` with the realized
    /// generator and martingale increments.
    pub y_pathwise: Vec<f64>,
    pub exit_fraction: f64,
    /// Mean over paths of `|y_pathwise(t) - Y(t)|`.
    pub consistency_residual: f64,
    /// Sample L² change of `(Y, Z)` per Picard sweep.
    pub sweep_changes: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn paths(&self) -> usize {
        self.increments.paths
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn seed(&self) -> u64 {
        self.increments.seed
    }

    pub fn dt(&self) -> f64 {
        self.increments.dt
    }

    pub fn at(&self, m: usize, k: usize) -> usize {
        m * self.times.len() + k
    }

    pub fn column(data: &[f64], n: usize, k: usize) -> Vec<f64> {
        data.chunks(n).map(|row| row[k]).collect()
    }

    pub fn x_col(&self, k: usize) -> Vec<f64> {
        Self::column(&self.x, self.times.len(), k)
    }

    /// CSV with header `path_id,t,X,Y,Z,u`, path-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path_id,t,X,Y,Z,u\n");
        for m in 0..self.paths() {
            for (k, t) in self.times.iter().enumerate() {
                let i = self.at(m, k);
                out.push_str(&format!(
                    "{m},{t},{},{},{},{}\n",
                    self.x[i], self.y[i], self.z[i], self.u[i]
                ));
            }
        }
        out
    }
}

impl TrajectoryBundle {
    /// Rebuild a bundle from exported columns. The Brownian increments are
    /// regenerated from the scenario's seed, so the columns must come from a
    /// run of the same scenario.
    pub fn from_columns(
        scenario: &Scenario,
        times: Vec<f64>,
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        u: Vec<f64>,
    ) -> Result<Self> {
        let expected = mc_times(scenario);
        let n = times.len();
        let paths = x.len() / n.max(1);
        if n != expected.len()
            || paths != scenario.montecarlo.paths
            || [&y, &z, &u].iter().any(|c| c.len() != x.len())
        {
            return Err(Error::Precondition(format!(
                "trajectories have {paths} paths × {n} times; scenario expects {} × {}",
                scenario.montecarlo.paths,
                expected.len()
            )));
        }
        if times
            .iter()
            .zip(&expected)
            .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs()))
        {
            return Err(Error::Precondition(
                "trajectory time grid differs from the scenario".into(),
            ));
        }
        let inc = increments(scenario, &expected);
        let y_pathwise = pathwise_backward(&scenario.coefficients, &expected, &inc, &x, &y, &z, &u);
        let consistency_residual = consistency(&y, &y_pathwise, n);
        Ok(TrajectoryBundle {
            mode: Mode::Feedback,
            times: expected,
            increments: inc,
            x,
            y,
            z,
            u,
            y_pathwise,
            exit_fraction: 0.0,
            consistency_residual,
            sweep_changes: Vec::new(),
        })
    }

    /// Inverse of [`TrajectoryBundle::to_csv`] for the given scenario.
    pub fn from_csv(scenario: &Scenario, text: &str) -> Result<Self> {
        let rows = crate::adjoint::parse_rows(text, "path_id,t,X,Y,Z,u", 6)?;
        let (_, times) = crate::adjoint::shape(&rows)?;
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        Self::from_columns(scenario, times, col(2), col(3), col(4), col(5))
    }
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn mc_times(scenario: &Scenario) -> Vec<f64> {
    uniform(scenario.t0, scenario.horizon, scenario.mc_steps() + 1)
}

fn increments(scenario: &Scenario, times: &[f64]) -> Increments {
    Increments::generate(
        scenario.montecarlo.seed,
        scenario.montecarlo.paths,
        times.len() - 1,
        times[1] - times[0],
    )
}

/// `Y_k = Y_{k+1} + g dt - Z_k ΔB_k` along every path, from `Y_N = y[N]`.
pub fn pathwise_backward(
    coeffs: &CoefficientSet,
    times: &[f64],
    inc: &Increments,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    u: &[f64],
) -> Vec<f64> {
    let n = times.len();
    let dt = inc.dt;
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(n).enumerate().for_each(|(m, row)| {
        let base = m * n;
        row[n - 1] = y[base + n - 1];
        for k in (0..n - 1).rev() {
            let i = base + k;
            let g = coeffs.g(&Point::new(times[k], x[i], y[i], z[i], u[i]));
            row[k] = row[k + 1] + g * dt - z[i] * inc.at(m, k);
        }
    });
    out
}

fn consistency(y: &[f64], ypw: &[f64], n: usize) -> f64 {
    let rows = y.len() / n;
    (0..rows)
        .map(|m| (y[m * n] - ypw[m * n]).abs())
        .sum::<f64>()
        / rows as f64
}

/// Simulate with `Y = W(s, X)` and `Z = V(s, X, W, W_x, u)` read off the field.
pub fn simulate_feedback(
    scenario: &Scenario,
    field: &ValueField,
    policy: &dyn Policy,
) -> Result<TrajectoryBundle> {
    let times = mc_times(scenario);
    let inc = increments(scenario, &times);
    simulate_feedback_with(scenario, field, policy, &times, inc)
}

pub fn simulate_feedback_with(
    scenario: &Scenario,
    field: &ValueField,
    policy: &dyn Policy,
    times: &[f64],
    inc: Increments,
) -> Result<TrajectoryBundle> {
    let coeffs = &scenario.coefficients;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let n = times.len();
    let dt = inc.dt;
    let x0 = scenario.x0;

    let per_path: Vec<Result<(Vec<[f64; 4]>, bool)>> = (0..inc.paths)
        .into_par_iter()
        .map(|m| {
            let db = inc.path(m);
            let mut rows = Vec::with_capacity(n);
            let mut exited = false;
            let mut x = x0;
            for (k, &t) in times.iter().enumerate() {
                if !field.contains(x) {
                    exited = true;
                }
                let u = policy.control(k, t, x);
                let (y, p) = if k + 1 == n {
                    (coeffs.phi(x), coeffs.phi_x(x))
                } else {
                    (field.value(t, x), field.value_x(t, x))
                };
                let z = algebra::solve_v(coeffs, t, x, y, p, u, &cfg)?.value;
                rows.push([x, y, z, u]);
                if k + 1 < n {
                    let pt = Point::new(t, x, y, z, u);
                    x = x + coeffs.b(&pt) * dt + coeffs.sigma(&pt) * db[k];
                    if !x.is_finite() {
                        return Err(Error::NonFinite {
                            oracle: "forward Euler step".into(),
                            t,
                            x,
                            y,
                            z,
                            u,
                        });
                    }
                }
            }
            Ok((rows, exited))
        })
        .collect();
    let per_path = first_error(per_path)?;

    let total = inc.paths * n;
    let (mut xs, mut ys, mut zs, mut us) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    let mut exits = 0usize;
    for (rows, exited) in &per_path {
        exits += usize::from(*exited);
        for r in rows {
            xs.push(r[0]);
            ys.push(r[1]);
            zs.push(r[2]);
            us.push(r[3]);
        }
    }
    let exit_fraction = exits as f64 / inc.paths as f64;
    if exit_fraction > scenario.montecarlo.exit_cap {
        return Err(Error::PathExit {
            fraction: exit_fraction,
            cap: scenario.montecarlo.exit_cap,
        });
    }
    let y_pathwise = pathwise_backward(coeffs, times, &inc, &xs, &ys, &zs, &us);
    let consistency_residual = consistency(&ys, &y_pathwise, n);
    Ok(TrajectoryBundle {
        mode: Mode::Feedback,
        times: times.to_vec(),
        increments: inc,
        x: xs,
        y: ys,
        z: zs,
        u: us,
        y_pathwise,
        exit_fraction,
        consistency_residual,
        sweep_changes: Vec::new(),
    })
}

/// Field-free simulation: alternate forward Euler for X given the current
/// `(Y, Z)` samples with a backward regression solve for `(Y, Z)` given X.
pub fn simulate_picard(scenario: &Scenario, policy: &dyn Policy) -> Result<TrajectoryBundle> {
    let times = mc_times(scenario);
    let inc = increments(scenario, &times);
    simulate_picard_with(scenario, policy, &times, inc)
}

pub fn simulate_picard_with(
    scenario: &Scenario,
    policy: &dyn Policy,
    times: &[f64],
    inc: Increments,
) -> Result<TrajectoryBundle> {
    let coeffs = &scenario.coefficients;
    let cfg = FixedPointConfig::from_scenario(scenario);
    let mc = &scenario.montecarlo;
    let n = times.len();
    let paths = inc.paths;
    let dt = inc.dt;
    let total = paths * n;

    let mut x = vec![scenario.x0; total];
    let mut u = vec![0.0; total];
    let mut y = vec![0.0; total];
    let mut z = vec![0.0; total];
    let mut changes: Vec<f64> = Vec::new();
    let mut growing = 0usize;

    for sweep in 1..=mc.max_sweeps {
        // forward pass
        let (y_old, z_old) = (&y, &z);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let base = m * n;
                let mut xr = vec![0.0; n];
                let mut ur = vec![0.0; n];
                let mut xv = scenario.x0;
                for (k, &t) in times.iter().enumerate() {
                    xr[k] = xv;
                    ur[k] = policy.control(k, t, xv);
                    if k + 1 < n {
                        let pt = Point::new(t, xv, y_old[base + k], z_old[base + k], ur[k]);
                        xv = xv + coeffs.b(&pt) * dt + coeffs.sigma(&pt) * inc.at(m, k);
                    }
                }
                (xr, ur)
            })
            .collect();
        for (m, (xr, ur)) in rows.into_iter().enumerate() {
            x[m * n..(m + 1) * n].copy_from_slice(&xr);
            u[m * n..(m + 1) * n].copy_from_slice(&ur);
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::PicardDivergence {
                sweeps: sweep,
                change: x[bad],
            });
        }

        // backward pass
        let mut y_new = vec![0.0; total];
        let mut z_new = vec![0.0; total];
        let terminal: Vec<Result<(f64, f64)>> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let i = m * n + n - 1;
                let (xv, uv) = (x[i], u[i]);
                let yv = coeffs.phi(xv);
                let zv =
                    algebra::solve_v(coeffs, times[n - 1], xv, yv, coeffs.phi_x(xv), uv, &cfg)?
                        .value;
                Ok((yv, zv))
            })
            .collect();
        for (m, r) in first_error(terminal)?.into_iter().enumerate() {
            y_new[m * n + n - 1] = r.0;
            z_new[m * n + n - 1] = r.1;
        }
        for k in (0..n - 1).rev() {
            let xk = TrajectoryBundle::column(&x, n, k);
            let next = TrajectoryBundle::column(&y_new, n, k + 1);
            let design = Design::new(&xk, mc.basis_degree, k)?;
            let (fitted, zk) = design.split(&next, &inc.step(k), dt, k)?;
            for m in 0..paths {
                let i = m * n + k;
                let g = coeffs.g(&Point::new(times[k], xk[m], fitted[m], zk[m], u[i]));
                y_new[i] = fitted[m] + g * dt;
                z_new[i] = zk[m];
            }
        }

        let ratio = match changes.as_slice() {
            [.., a, b] if *a > 0.0 => b / a,
            _ => 0.0,
        };
        if sweep > 2 && ratio > 0.9 {
            for m in 0..paths {
                for k in 0..n - 1 {
                    let i = m * n + k;
                    y_new[i] = 0.5 * (y_new[i] + y[i]);
                    z_new[i] = 0.5 * (z_new[i] + z[i]);
                }
            }
        }
        let dy: f64 = y_new.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let dz: f64 = z_new.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
        let change = ((dy + dz) / total as f64).sqrt();
        log::debug!("picard sweep {sweep}: change {change:.3e}");
        if let Some(&last) = changes.last() {
            growing = if change > last { growing + 1 } else { 0 };
        }
        changes.push(change);
        y = y_new;
        z = z_new;
        if !change.is_finite() || growing >= 3 {
            return Err(Error::PicardDivergence {
                sweeps: sweep,
                change,
            });
        }
        if sweep >= 2 && change <= mc.picard_tol {
            let y_pathwise = pathwise_backward(coeffs, times, &inc, &x, &y, &z, &u);
            let consistency_residual = consistency(&y, &y_pathwise, n);
            return Ok(TrajectoryBundle {
                mode: Mode::Picard,
                times: times.to_vec(),
                increments: inc,
                x,
                y,
                z,
                u,
                y_pathwise,
                exit_fraction: 0.0,
                consistency_residual,
                sweep_changes: changes,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: mc.max_sweeps,
        last_step: changes.last().copied().unwrap_or(f64::NAN),
    })
}

/// Estimate of `J = Y(t)` from the pathwise backward values.
pub fn cost(bundle: &TrajectoryBundle) -> Estimate {
    let n = bundle.times.len();
    Estimate::from_samples(&TrajectoryBundle::column(&bundle.y_pathwise, n, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppReport {
    pub time_index: usize,
    pub time: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Distribution of `|Y(s) - W(s, X(s))|` at simulation step `k`, with Y the
/// pathwise backward value.
pub fn dpp_consistency(
    scenario: &Scenario,
    field: &ValueField,
    bundle: &TrajectoryBundle,
    k: usize,
) -> Result<DppReport> {
    if k == 0 || k >= bundle.steps() {
        return Err(Error::Precondition(format!(
            "probe step {k} must lie strictly inside (0, {})",
            bundle.steps()
        )));
    }
    let t = bundle.times[k];
    let res: Vec<f64> = (0..bundle.paths())
        .map(|m| {
            let i = bundle.at(m, k);
            (bundle.y_pathwise[i] - field.value(t, bundle.x[i])).abs()
        })
        .collect();
    let med = median(&res);
    let tolerance = scenario.tolerances.field + scenario.tolerances.regression;
    Ok(DppReport {
        time_index: k,
        time: t,
        median: med,
        mean: res.iter().sum::<f64>() / res.len() as f64,
        max: res.iter().copied().fold(0.0, f64::max),
        tolerance,
        passed: med <= tolerance,
    })
}
