//! Explicit finite-difference solver for the generalized HJB equation.

use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::{self, FixedPointConfig};
use crate::error::{Error, Result};
use crate::problem::{CoefficientSet, Scenario};

/// Grid solution `W(t_i, x_j)` with derivatives, minimizing controls and the
/// algebra solution at every node.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueField {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// Row-major `times.len() × xs.len()` arrays.
    pub w: Vec<f64>,
    pub wx: Vec<f64>,
    pub wxx: Vec<f64>,
    pub u_index: Vec<usize>,
    pub v: Vec<f64>,
    pub controls: Vec<f64>,
    /// Largest grid difference quotient of W over all time levels.
    pub lipschitz_bound: f64,
    pub max_algebra_residual: f64,
}

/// Per-node result of the minimization over controls.
#[derive(Clone, Copy, Debug)]
struct NodeMin {
    g: f64,
    index: usize,
    v: f64,
    residual: f64,
    sigma_sq: f64,
}

impl ValueField {
    pub fn nt(&self) -> usize {
        self.times.len()
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn dx(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.xs.len() + j
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.nx();
        &self.w[i * n..(i + 1) * n]
    }

    /// Minimizing control and algebra value stored at node `(i, j)`.
    pub fn policy_at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = self.idx(i, j);
        (self.controls[self.u_index[k]], self.v[k])
    }

    pub fn x_range(&self) -> [f64; 2] {
        [self.xs[0], self.xs[self.nx() - 1]]
    }

    pub fn contains(&self, x: f64) -> bool {
        let [a, b] = self.x_range();
        x >= a && x <= b
    }

    /// Bracketing index and weight along the state grid, clamped to the box.
    pub fn locate_x(&self, x: f64) -> (usize, f64) {
        locate(&self.xs, x)
    }

    pub fn locate_t(&self, t: f64) -> (usize, f64) {
        locate(&self.times, t)
    }

    fn bilinear(&self, data: &[f64], t: f64, x: f64) -> f64 {
        let (i, a) = self.locate_t(t);
        let (j, b) = self.locate_x(x);
        let at = |i: usize, j: usize| data[self.idx(i, j)];
        let lo = (1.0 - b) * at(i, j) + b * at(i, j + 1);
        if a == 0.0 {
            return lo;
        }
        let hi = (1.0 - b) * at(i + 1, j) + b * at(i + 1, j + 1);
        (1.0 - a) * lo + a * hi
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.w, t, x)
    }

    pub fn value_x(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.wx, t, x)
    }

    pub fn value_xx(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.wxx, t, x)
    }

    /// Nearest time level to `t`.
    pub fn nearest_level(&self, t: f64) -> usize {
        let (i, a) = self.locate_t(t);
        if a > 0.5 {
            i + 1
        } else {
            i
        }
    }

    /// CSV export with header `t,x,W,Wx,Wxx,u_star,V`, time-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,W,Wx,Wxx,u_star,V\n");
        for (i, t) in self.times.iter().enumerate() {
            for (j, x) in self.xs.iter().enumerate() {
                let k = self.idx(i, j);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    t,
                    x,
                    self.w[k],
                    self.wx[k],
                    self.wxx[k],
                    self.controls[self.u_index[k]],
                    self.v[k]
                ));
            }
        }
        out
    }

    /// Inverse of [`ValueField::to_csv`]; the control list is taken from
    /// the scenario.
    pub fn from_csv(text: &str, controls: &[f64]) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("t,x,W,Wx,Wxx,u_star,V") {
            return Err(Error::Parse("value field header mismatch".into()));
        }
        let mut rows: Vec<[f64; 7]> = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("value field: {e}")))?;
            if vals.len() != 7 {
                return Err(Error::Parse("value field row needs 7 columns".into()));
            }
            rows.push([
                vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6],
            ]);
        }
        let nx = rows.iter().take_while(|r| r[0] == rows[0][0]).count();
        if nx < 2 || !rows.len().is_multiple_of(nx) {
            return Err(Error::Parse("value field is not a full grid".into()));
        }
        let nt = rows.len() / nx;
        let times = (0..nt).map(|i| rows[i * nx][0]).collect();
        let xs = rows[..nx].iter().map(|r| r[1]).collect();
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        let u_index = rows
            .iter()
            .map(|r| {
                controls
                    .iter()
                    .position(|&u| u == r[5])
                    .ok_or_else(|| Error::Parse(format!("control {} not in control set", r[5])))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut field = ValueField {
            times,
            xs,
            w: col(2),
            wx: col(3),
            wxx: col(4),
            u_index,
            v: col(6),
            controls: controls.to_vec(),
            lipschitz_bound: 0.0,
            max_algebra_residual: 0.0,
        };
        field.lipschitz_bound = (0..nt)
            .map(|i| grid_lipschitz(field.row(i), field.dx()))
            .fold(0.0, f64::max);
        Ok(field)
    }
}

fn locate(grid: &[f64], v: f64) -> (usize, f64) {
    let n = grid.len();
    if v <= grid[0] {
        return (0, 0.0);
    }
    if v >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let step = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let mut i = (((v - grid[0]) / step).floor() as usize).min(n - 2);
    // guard against rounding in the uniform-grid guess
    while i > 0 && v < grid[i] {
        i -= 1;
    }
    while i + 2 < n && v >= grid[i + 1] {
        i += 1;
    }
    let w = (v - grid[i]) / (grid[i + 1] - grid[i]);
    (i, w)
}

pub(crate) fn uniform(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { b } else { a + step * i as f64 })
        .collect()
}

fn grid_lipschitz(row: &[f64], dx: f64) -> f64 {
    row.windows(2)
        .map(|w| (w[1] - w[0]).abs() / dx)
        .fold(0.0, f64::max)
}

/// Central differences inside, second-order one-sided first derivative and
/// three-point second derivative at the edges.
fn derivatives(row: &[f64], dx: f64) -> (Vec<f64>, Vec<f64>) {
    let n = row.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for j in 1..n - 1 {
        d1[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
        d2[j] = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (dx * dx);
    }
    d1[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx);
    d1[n - 1] = (3.0 * row[n - 1] - 4.0 * row[n - 2] + row[n - 3]) / (2.0 * dx);
    d2[0] = (row[0] - 2.0 * row[1] + row[2]) / (dx * dx);
    d2[n - 1] = (row[n - 1] - 2.0 * row[n - 2] + row[n - 3]) / (dx * dx);
    (d1, d2)
}

/// Minimize G over the controls at one node; ties keep the lowest index.
#[allow(clippy::too_many_arguments)]
fn minimize_node(
    coeffs: &CoefficientSet,
    controls: &[f64],
    t: f64,
    x: f64,
    w: f64,
    wx: f64,
    wxx: f64,
    warm: &[f64],
    cfg: &FixedPointConfig,
) -> Result<(NodeMin, Vec<f64>)> {
    let bound = 1.0 - cfg.beta0;
    let product = wx.abs() * coeffs.lipschitz.l3;
    if product > bound {
        return Err(Error::AlgebraMarginViolation {
            t,
            x,
            product,
            bound,
        });
    }
    let mut best = NodeMin {
        g: f64::INFINITY,
        index: 0,
        v: 0.0,
        residual: 0.0,
        sigma_sq: 0.0,
    };
    let mut vs = Vec::with_capacity(controls.len());
    for (k, &u) in controls.iter().enumerate() {
        let (g, sol) = algebra::g_value_from(coeffs, t, x, w, wx, wxx, u, warm[k], cfg)?;
        let sigma = coeffs.sigma(&crate::problem::Point::new(t, x, w, sol.value, u));
        best.sigma_sq = best.sigma_sq.max(sigma * sigma);
        best.residual = best.residual.max(sol.residual);
        vs.push(sol.value);
        if g < best.g {
            best.g = g;
            best.index = k;
            best.v = sol.value;
        }
    }
    Ok((best, vs))
}

/// Backward explicit Euler solve of the HJB equation on the scenario grid
/// over `[t0, T]`.
pub fn solve_hjb(scenario: &Scenario) -> Result<ValueField> {
    let g = &scenario.grid;
    solve_hjb_on(scenario, g.time_steps, g.state_nodes, g.x_min, g.x_max)
}

/// [`solve_hjb`] with an explicit grid.
pub fn solve_hjb_on(
    scenario: &Scenario,
    time_steps: usize,
    state_nodes: usize,
    x_min: f64,
    x_max: f64,
) -> Result<ValueField> {
    let coeffs = &scenario.coefficients;
    let controls = scenario.controls.points().to_vec();
    let cfg = FixedPointConfig::from_scenario(scenario);
    let times = uniform(scenario.t0, scenario.horizon, time_steps + 1);
    let xs = uniform(x_min, x_max, state_nodes);
    let nt = times.len();
    let nx = xs.len();
    let dt = times[1] - times[0];
    let dx = xs[1] - xs[0];
    let kc = controls.len();

    let mut w = vec![0.0; nt * nx];
    let mut wx = vec![0.0; nt * nx];
    let mut wxx = vec![0.0; nt * nx];
    let mut u_index = vec![0usize; nt * nx];
    let mut v = vec![0.0; nt * nx];
    let mut lipschitz_bound: f64 = 0.0;
    let mut max_residual: f64 = 0.0;

    let mut row: Vec<f64> = xs.iter().map(|&x| coeffs.phi(x)).collect();
    let mut warm = vec![0.0; nx * kc];
    for i in (0..nt).rev() {
        let t = times[i];
        let (d1, d2) = derivatives(&row, dx);
        let results: Vec<Result<(NodeMin, Vec<f64>)>> = (0..nx)
            .into_par_iter()
            .map(|j| {
                minimize_node(
                    coeffs,
                    &controls,
                    t,
                    xs[j],
                    row[j],
                    d1[j],
                    d2[j],
                    &warm[j * kc..(j + 1) * kc],
                    &cfg,
                )
            })
            .collect();
        let mut mins = Vec::with_capacity(nx);
        let mut sigma_sq: f64 = 0.0;
        for (j, r) in results.into_iter().enumerate() {
            let (m, vs) = r?;
            warm[j * kc..(j + 1) * kc].copy_from_slice(&vs);
            sigma_sq = sigma_sq.max(m.sigma_sq);
            max_residual = max_residual.max(m.residual);
            mins.push(m);
        }
        let base = i * nx;
        w[base..base + nx].copy_from_slice(&row);
        wx[base..base + nx].copy_from_slice(&d1);
        wxx[base..base + nx].copy_from_slice(&d2);
        for (j, m) in mins.iter().enumerate() {
            u_index[base + j] = m.index;
            v[base + j] = m.v;
        }
        lipschitz_bound = lipschitz_bound.max(grid_lipschitz(&row, dx));
        if i == 0 {
            break;
        }
        if sigma_sq > 0.0 {
            let required = scenario.grid.cfl * dx * dx / sigma_sq;
            if dt > required {
                return Err(Error::CflViolation { dt, required });
            }
        }
        for j in 1..nx - 1 {
            row[j] += dt * mins[j].g;
        }
        // the edge increments are extrapolated linearly from the interior
        row[0] += dt * (2.0 * mins[1].g - mins[2].g);
        row[nx - 1] += dt * (2.0 * mins[nx - 2].g - mins[nx - 3].g);
    }

    Ok(ValueField {
        times,
        xs,
        w,
        wx,
        wxx,
        u_index,
        v,
        controls,
        lipschitz_bound,
        max_algebra_residual: max_residual,
    })
}

/// Minimizing control and algebra value at every node.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackTable {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FeedbackTable {
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = i * self.xs.len() + j;
        (self.u[k], self.v[k])
    }
}

pub fn feedback_policy(field: &ValueField) -> FeedbackTable {
    FeedbackTable {
        times: field.times.clone(),
        xs: field.xs.clone(),
        u: field.u_index.iter().map(|&k| field.controls[k]).collect(),
        v: field.v.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub time_steps: usize,
    pub state_nodes: usize,
    pub value_at_x0: f64,
    /// Sup-norm change against the previous level on the coarse nodes at `t0`.
    pub change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderReport {
    pub levels: Vec<RefinementLevel>,
    /// Observed order in the time step (the time step shrinks fourfold
    /// per level).
    pub order_dt: Option<f64>,
    /// Observed order in the state step (halved per level).
    pub order_dx: Option<f64>,
    pub warnings: Vec<String>,
}

/// Solve on `levels` grids, each with half the state step and a quarter of
/// the time step of the previous one, and estimate the convergence order
/// from successive differences.
pub fn refine_and_estimate_order(scenario: &Scenario, levels: usize) -> Result<OrderReport> {
    if levels < 3 {
        return Err(Error::Precondition(
            "refinement needs at least 3 levels".into(),
        ));
    }
    let mut warnings = Vec::new();
    let g = &scenario.grid;
    let coarse = uniform(g.x_min, g.x_max, g.state_nodes);
    let slope = coarse
        .windows(2)
        .map(|w| {
            (scenario.coefficients.phi(w[1]) - scenario.coefficients.phi(w[0])).abs()
                / (w[1] - w[0])
        })
        .fold(0.0, f64::max);
    let l1 = scenario.coefficients.lipschitz.l1;
    if slope > l1 * (1.0 + 1e-9) + 1e-12 {
        let msg = format!(
            "terminal slope {slope:.4e} exceeds declared L1 = {l1:.4e}; order not asserted"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut out: Vec<RefinementLevel> = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    let mut nt = g.time_steps;
    let mut nx = g.state_nodes;
    let mut stride = 1usize;
    for _ in 0..levels {
        let field = solve_hjb_on(scenario, nt, nx, g.x_min, g.x_max)?;
        let on_coarse: Vec<f64> = (0..g.state_nodes).map(|j| field.w[j * stride]).collect();
        let change = previous.as_ref().map(|p| {
            p.iter()
                .zip(&on_coarse)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        out.push(RefinementLevel {
            time_steps: nt,
            state_nodes: nx,
            value_at_x0: field.value(scenario.t0, scenario.x0),
            change,
        });
        previous = Some(on_coarse);
        nt *= 4;
        nx = 2 * nx - 1;
        stride *= 2;
    }

    let changes: Vec<f64> = out.iter().filter_map(|l| l.change).collect();
    let ratio = changes[changes.len() - 2] / changes[changes.len() - 1];
    let floor = 1e-12
        * out
            .last()
            .map(|l| l.value_at_x0.abs().max(1.0))
            .unwrap_or(1.0);
    let estimable = warnings.is_empty() && changes.iter().all(|&c| c > floor) && ratio.is_finite();
    if !estimable && warnings.is_empty() {
        warnings.push("successive differences are at rounding level; order not estimable".into());
    }
    Ok(OrderReport {
        levels: out,
        order_dt: estimable.then(|| ratio.log(4.0)),
        order_dx: estimable.then(|| ratio.log2()),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_is_consistent() {
        let g = uniform(-1.0, 1.0, 11);
        assert_eq!(locate(&g, -2.0), (0, 0.0));
        assert_eq!(locate(&g, 1.0), (9, 1.0));
        let (i, w) = locate(&g, 0.1);
        assert_eq!(i, 5);
        assert!((w - 0.5).abs() < 1e-12);
        let (i, w) = locate(&g, g[3]);
        assert_eq!((i, w), (3, 0.0));
    }

    #[test]
    fn derivatives_of_quadratic_are_exact() {
        let xs = uniform(-1.0, 1.0, 21);
        let row: Vec<f64> = xs.iter().map(|x| 1.5 * x * x - x).collect();
        let (d1, d2) = derivatives(&row, xs[1] - xs[0]);
        for j in 0..xs.len() {
            assert!((d1[j] - (3.0 * xs[j] - 1.0)).abs() < 1e-10);
            assert!((d2[j] - 3.0).abs() < 1e-9);
        }
    }
}
