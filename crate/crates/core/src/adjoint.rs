//! First- and second-order adjoint equations and the linear adjoint system
//! of the local case, solved backward by regression along simulated paths.

use rayon::prelude::*;

use crate::algebra::{self, picard};
use crate::error::{Error, Result};
use crate::fbsde::TrajectoryBundle;
use crate::problem::{CoefficientSet, LocalData, Point, Scenario};
use crate::regression::Design;

/// Adjoint processes along every path; arrays are `paths × (steps + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointPath {
    pub times: Vec<f64>,
    pub paths: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub big_p: Vec<f64>,
    pub big_q: Vec<f64>,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    /// Largest per-path fixed-point iteration count at each step.
    pub iterations: Vec<usize>,
    /// Regression condition number at each step.
    pub conditions: Vec<f64>,
    pub max_abs_q: f64,
}

impl AdjointPath {
    pub fn at(&self, m: usize, k: usize) -> usize {
        m * self.times.len() + k
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// CSV with header `path_id,t,p,q,P,Q,K1,K2`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path_id,t,p,q,P,Q,K1,K2\n");
        for m in 0..self.paths {
            for (k, t) in self.times.iter().enumerate() {
                let i = self.at(m, k);
                out.push_str(&format!(
                    "{m},{t},{},{},{},{},{},{}\n",
                    self.p[i], self.q[i], self.big_p[i], self.big_q[i], self.k1[i], self.k2[i]
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_rows(text, "path_id,t,p,q,P,Q,K1,K2", 8)?;
        let (paths, times) = shape(&rows)?;
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        let q = col(3);
        Ok(AdjointPath {
            times,
            paths,
            p: col(2),
            max_abs_q: q.iter().fold(0.0, |a, b| a.max(b.abs())),
            q,
            big_p: col(4),
            big_q: col(5),
            k1: col(6),
            k2: col(7),
            iterations: Vec::new(),
            conditions: Vec::new(),
        })
    }
}

pub(crate) fn parse_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Parse(format!("expected header `{header}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("{header}: {e}")))?;
            if v.len() != width {
                return Err(Error::Parse(format!("{header}: row needs {width} columns")));
            }
            Ok(v)
        })
        .collect()
}

/// Number of paths and the time grid of a path-major table.
pub(crate) fn shape(rows: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::Parse("empty table".into()));
    }
    let n = rows.iter().take_while(|r| r[0] == rows[0][0]).count();
    if n < 2 || !rows.len().is_multiple_of(n) {
        return Err(Error::Parse("table is not a full path × time grid".into()));
    }
    Ok((rows.len() / n, rows[..n].iter().map(|r| r[1]).collect()))
}

/// The `(h, m, n)` processes of the local case.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAdjointPath {
    pub times: Vec<f64>,
    pub paths: usize,
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub n: Vec<f64>,
    pub sweep_changes: Vec<f64>,
}

impl LocalAdjointPath {
    pub fn at(&self, m: usize, k: usize) -> usize {
        m * self.times.len() + k
    }

    /// CSV with header `path_id,t,h,m,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path_id,t,h,m,n\n");
        for path in 0..self.paths {
            for (k, t) in self.times.iter().enumerate() {
                let i = self.at(path, k);
                out.push_str(&format!(
                    "{path},{t},{},{},{}\n",
                    self.h[i], self.m[i], self.n[i]
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_rows(text, "path_id,t,h,m,n", 5)?;
        let (paths, times) = shape(&rows)?;
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        Ok(LocalAdjointPath {
            times,
            paths,
            h: col(2),
            m: col(3),
            n: col(4),
            sweep_changes: Vec::new(),
        })
    }
}

fn local_at(coeffs: &CoefficientSet, bundle: &TrajectoryBundle, i: usize, k: usize) -> LocalData {
    coeffs.local(&Point::new(
        bundle.times[k],
        bundle.x[i],
        bundle.y[i],
        bundle.z[i],
        bundle.u[i],
    ))
}

/// Driver of the first-order adjoint equation.
pub fn first_driver(d: &LocalData, p: f64, q: f64, k1: f64) -> f64 {
    let [bx, by, bz] = d.db();
    let [sx, sy, sz] = d.dsigma();
    let [gx, gy, gz] = d.dg();
    gx + gy * p + gz * k1 + bx * p + by * p * p + bz * k1 * p + sx * q + sy * p * q + sz * k1 * q
}

/// Driver of the second-order adjoint equation.
#[allow(clippy::too_many_arguments)]
pub fn second_driver(
    d: &LocalData,
    p: f64,
    q: f64,
    k1: f64,
    big_p: f64,
    big_q: f64,
    k2: f64,
) -> f64 {
    let v = [1.0, p, k1];
    let dot = |g: [f64; 3]| g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
    let ds_v = dot(d.dsigma());
    let db_v = dot(d.db());
    let h_y = d.dg()[1] + p * d.db()[1] + q * d.dsigma()[1];
    let h_z = d.dg()[2] + p * d.db()[2] + q * d.dsigma()[2];
    let mut d2h = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d2h[i][j] = d.hess[2][i][j] + p * d.hess[0][i][j] + q * d.hess[1][i][j];
        }
    }
    big_p * (ds_v * ds_v + 2.0 * db_v + h_y)
        + 2.0 * big_q * ds_v
        + algebra::quadratic_form(v, &d2h)
        + h_z * k2
}

/// Picard with the damping rule used by the simulators: halve the update
/// whenever the step ratio exceeds 0.9.
fn damped_fixed_point(
    map: impl Fn(f64) -> f64,
    start: f64,
    tol: f64,
    max_iter: usize,
) -> Option<(f64, usize)> {
    let mut x = start;
    let mut last = f64::INFINITY;
    let mut damp = false;
    for it in 0..=max_iter {
        let fx = map(x);
        let step = (fx - x).abs();
        if !step.is_finite() {
            return None;
        }
        if step <= tol {
            return Some((x, it));
        }
        if step > 0.9 * last {
            damp = true;
        }
        last = step;
        x = if damp { 0.5 * (x + fx) } else { fx };
    }
    None
}

struct StepFit {
    fitted: Vec<f64>,
    integrand: Vec<f64>,
    condition: f64,
}

/// Conditional mean of `next` and the martingale integrand, both projected
/// on polynomials in `X_k`.
fn regress_step(
    bundle: &TrajectoryBundle,
    degree: usize,
    k: usize,
    next: &[f64],
) -> Result<StepFit> {
    let xk = bundle.x_col(k);
    let design = Design::new(&xk, degree, k)?;
    let (fitted, integrand) = design.split(next, &bundle.increments.step(k), bundle.dt(), k)?;
    Ok(StepFit {
        fitted,
        integrand,
        condition: design.condition,
    })
}

/// First-order adjoint `(p, q)` with `K1`, along a simulated trajectory.
pub fn solve_first_adjoint(scenario: &Scenario, bundle: &TrajectoryBundle) -> Result<AdjointPath> {
    let coeffs = &scenario.coefficients;
    let tol = scenario.tolerances.fixed_point;
    let max_iter = scenario.tolerances.max_iter;
    let n = bundle.times.len();
    let paths = bundle.paths();
    let dt = bundle.dt();
    let total = paths * n;
    let mut p = vec![0.0; total];
    let mut q = vec![0.0; total];
    let mut k1 = vec![0.0; total];
    let mut iterations = vec![0usize; n];
    let mut conditions = vec![1.0; n];

    for m in 0..paths {
        let i = bundle.at(m, n - 1);
        p[i] = coeffs.phi_x(bundle.x[i]);
    }
    for k in (0..n - 1).rev() {
        let next = TrajectoryBundle::column(&p, n, k + 1);
        let fit = regress_step(bundle, scenario.montecarlo.basis_degree, k, &next)?;
        conditions[k] = fit.condition;
        let solved: Vec<Result<(f64, f64, usize)>> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let i = bundle.at(m, k);
                let d = local_at(coeffs, bundle, i, k);
                let qk = fit.integrand[m];
                let map = |pk: f64| match algebra::k1(d.dsigma(), pk, qk) {
                    Ok(kk) => fit.fitted[m] + dt * first_driver(&d, pk, qk, kk),
                    Err(_) => f64::NAN,
                };
                let (pk, its) = damped_fixed_point(map, fit.fitted[m], tol, max_iter)
                    .ok_or(Error::StepDivergence { step: k })?;
                let kk = algebra::k1(d.dsigma(), pk, qk)?;
                Ok((pk, kk, its))
            })
            .collect();
        for (m, r) in solved.into_iter().enumerate() {
            let (pk, kk, its) = r?;
            let i = bundle.at(m, k);
            p[i] = pk;
            q[i] = fit.integrand[m];
            k1[i] = kk;
            iterations[k] = iterations[k].max(its);
        }
    }
    for m in 0..paths {
        let (i, j) = (bundle.at(m, n - 1), bundle.at(m, n - 2));
        q[i] = q[j];
        let d = local_at(coeffs, bundle, i, n - 1);
        k1[i] = algebra::k1(d.dsigma(), p[i], q[i])?;
    }
    let max_abs_q = q.iter().fold(0.0, |a: f64, b| a.max(b.abs()));
    Ok(AdjointPath {
        times: bundle.times.clone(),
        paths,
        p,
        q,
        big_p: vec![0.0; total],
        big_q: vec![0.0; total],
        k1,
        k2: vec![0.0; total],
        iterations,
        conditions,
        max_abs_q,
    })
}

/// Second-order adjoint `(P, Q)` with `K2`, given the first-order adjoint.
pub fn solve_second_adjoint(
    scenario: &Scenario,
    bundle: &TrajectoryBundle,
    first: &AdjointPath,
) -> Result<AdjointPath> {
    let coeffs = &scenario.coefficients;
    let tol = scenario.tolerances.fixed_point;
    let max_iter = scenario.tolerances.max_iter;
    let n = bundle.times.len();
    let paths = bundle.paths();
    let dt = bundle.dt();
    let total = paths * n;
    let mut out = first.clone();
    let mut big_p = vec![0.0; total];
    let mut big_q = vec![0.0; total];
    let mut k2 = vec![0.0; total];

    let k2_at = |d: &LocalData, i: usize, pp: f64, qq: f64| {
        algebra::k2(d.dsigma(), &d.hess[1], first.p[i], pp, qq, first.k1[i])
    };
    for m in 0..paths {
        let i = bundle.at(m, n - 1);
        big_p[i] = coeffs.phi_xx(bundle.x[i]);
    }
    for k in (0..n - 1).rev() {
        let next = TrajectoryBundle::column(&big_p, n, k + 1);
        let fit = regress_step(bundle, scenario.montecarlo.basis_degree, k, &next)?;
        out.conditions[k] = out.conditions[k].max(fit.condition);
        let solved: Vec<Result<(f64, f64, usize)>> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let i = bundle.at(m, k);
                let d = local_at(coeffs, bundle, i, k);
                let qq = fit.integrand[m];
                let map = |pp: f64| match k2_at(&d, i, pp, qq) {
                    Ok(kk) => {
                        fit.fitted[m]
                            + dt * second_driver(
                                &d,
                                first.p[i],
                                first.q[i],
                                first.k1[i],
                                pp,
                                qq,
                                kk,
                            )
                    }
                    Err(_) => f64::NAN,
                };
                let sol = picard(map, fit.fitted[m], tol, max_iter)
                    .map_err(|_| Error::StepDivergence { step: k })?;
                Ok((sol.value, k2_at(&d, i, sol.value, qq)?, sol.iterations))
            })
            .collect();
        for (m, r) in solved.into_iter().enumerate() {
            let (pp, kk, its) = r?;
            let i = bundle.at(m, k);
            big_p[i] = pp;
            big_q[i] = fit.integrand[m];
            k2[i] = kk;
            out.iterations[k] = out.iterations[k].max(its);
        }
    }
    for m in 0..paths {
        let (i, j) = (bundle.at(m, n - 1), bundle.at(m, n - 2));
        big_q[i] = big_q[j];
        let d = local_at(coeffs, bundle, i, n - 1);
        k2[i] = k2_at(&d, i, big_p[i], big_q[i])?;
    }
    out.big_p = big_p;
    out.big_q = big_q;
    out.k2 = k2;
    Ok(out)
}

/// `n = (1 - p σ_z)^{-1} [b_z p² + p g_z + q] h`.
pub fn local_relation_n(d: &LocalData, p: f64, q: f64, h: f64) -> Result<f64> {
    let gap = 1.0 - p * d.dsigma()[2];
    if gap.abs() < algebra::SINGULAR_GUARD {
        return Err(Error::SingularDenominator { value: gap });
    }
    Ok((d.db()[2] * p * p + p * d.dg()[2] + q) * h / gap)
}

/// Picard iteration on the linear adjoint system of the local case:
/// forward Euler for `h` given `(m, n)`, backward regression for `(m, n)`
/// given `h`. A sweep whose change exceeds 0.9 times the previous one is
/// averaged with the previous iterate.
pub fn solve_local_adjoint(
    scenario: &Scenario,
    bundle: &TrajectoryBundle,
) -> Result<LocalAdjointPath> {
    let coeffs = &scenario.coefficients;
    let mc = &scenario.montecarlo;
    let n = bundle.times.len();
    let paths = bundle.paths();
    let dt = bundle.dt();
    let total = paths * n;
    let data: Vec<LocalData> = (0..total)
        .into_par_iter()
        .map(|i| local_at(coeffs, bundle, i, i % n))
        .collect();

    let mut h = vec![1.0; total];
    let mut mm = vec![0.0; total];
    let mut nn = vec![0.0; total];
    let mut changes: Vec<f64> = Vec::new();
    let mut growing = 0usize;
    for sweep in 1..=mc.max_sweeps {
        let mut h_new = vec![0.0; total];
        h_new.par_chunks_mut(n).enumerate().for_each(|(path, row)| {
            row[0] = 1.0;
            for k in 0..n - 1 {
                let i = path * n + k;
                let d = &data[i];
                let drift = d.dg()[1] * row[k] + d.db()[1] * mm[i] + d.dsigma()[1] * nn[i];
                let vol = d.dg()[2] * row[k] + d.db()[2] * mm[i] + d.dsigma()[2] * nn[i];
                row[k + 1] = row[k] + drift * dt + vol * bundle.increments.at(path, k);
            }
        });
        if let Some(k) = h_new
            .iter()
            .position(|v| !(v.abs() > 1e-300) || !v.is_finite())
        {
            return Err(Error::StepDivergence { step: k % n });
        }

        let mut m_new = vec![0.0; total];
        let mut n_new = vec![0.0; total];
        for path in 0..paths {
            let i = path * n + n - 1;
            m_new[i] = coeffs.phi_x(bundle.x[i]) * h_new[i];
        }
        for k in (0..n - 1).rev() {
            let ratio: Vec<f64> = (0..paths)
                .map(|path| m_new[path * n + k + 1] / h_new[path * n + k])
                .collect();
            let fit = regress_step(bundle, mc.basis_degree, k, &ratio)?;
            for path in 0..paths {
                let i = path * n + k;
                let d = &data[i];
                let hk = h_new[i];
                let nk = hk * fit.integrand[path];
                n_new[i] = nk;
                m_new[i] = (hk * fit.fitted[path] + dt * (d.dg()[0] * hk + d.dsigma()[0] * nk))
                    / (1.0 - dt * d.db()[0]);
            }
        }
        for path in 0..paths {
            n_new[path * n + n - 1] = n_new[path * n + n - 2];
        }

        let sq =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut change =
            ((sq(&h_new, &h) + sq(&m_new, &mm) + sq(&n_new, &nn)) / total as f64).sqrt();
        if let Some(&last) = changes.last() {
            if change > 0.9 * last {
                for (new, old) in [(&mut h_new, &h), (&mut m_new, &mm), (&mut n_new, &nn)] {
                    new.iter_mut()
                        .zip(old.iter())
                        .for_each(|(a, b)| *a = 0.5 * (*a + b));
                }
                change *= 0.5;
            }
        }
        if let Some(&last) = changes.last() {
            growing = if change > last { growing + 1 } else { 0 };
        }
        changes.push(change);
        h = h_new;
        mm = m_new;
        nn = n_new;
        if !change.is_finite() || growing >= 3 {
            return Err(Error::PicardDivergence {
                sweeps: sweep,
                change,
            });
        }
        if sweep >= 2 && change <= mc.picard_tol {
            return Ok(LocalAdjointPath {
                times: bundle.times.clone(),
                paths,
                h,
                m: mm,
                n: nn,
                sweep_changes: changes,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: mc.max_sweeps,
        last_step: changes.last().copied().unwrap_or(f64::NAN),
    })
}
