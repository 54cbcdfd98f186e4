//! Least-squares projection on polynomials of one standardized variable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number of the Gram matrix above which a basis is rejected.
pub const MAX_CONDITION: f64 = 1e13;

/// Fitted polynomial `sum_k c_k ((x - mean) / scale)^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub mean: f64,
    pub scale: f64,
    pub coef: Vec<f64>,
    pub condition: f64,
}

impl Fit {
    pub fn predict(&self, x: f64) -> f64 {
        let s = (x - self.mean) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    pub fn degree(&self) -> usize {
        self.coef.len() - 1
    }
}

/// Shared design for several regressions on the same regressor sample.
#[derive(Clone, Debug)]
pub struct Design {
    mean: f64,
    scale: f64,
    degree: usize,
    basis: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
}

fn distinct_at_most(xs: &[f64], limit: usize) -> usize {
    let mut seen: Vec<f64> = Vec::with_capacity(limit + 1);
    for &x in xs {
        if !seen.contains(&x) {
            seen.push(x);
            if seen.len() > limit {
                break;
            }
        }
    }
    seen.len()
}

impl Design {
    /// Build the design for regressor sample `xs`. The degree drops to what
    /// the number of distinct sample values supports; `step` is only used
    /// for error reporting.
    pub fn new(xs: &[f64], degree: usize, step: usize) -> Result<Self> {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let spread = var.sqrt();
        let distinct = distinct_at_most(xs, degree + 1);
        let (degree, scale) = if spread <= 1e-12 * (1.0 + mean.abs()) || distinct <= 1 {
            (0, 1.0)
        } else {
            (degree.min(distinct - 1), spread)
        };
        let cols = degree + 1;
        let mut basis = DMatrix::<f64>::zeros(n, cols);
        for (i, &x) in xs.iter().enumerate() {
            let s = (x - mean) / scale;
            let mut v = 1.0;
            for k in 0..cols {
                basis[(i, k)] = v;
                v *= s;
            }
        }
        let gram = basis.transpose() * &basis / n as f64;
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        let min = eig.eigenvalues.iter().copied().fold(f64::MAX, f64::min);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RegressionRankDeficiency { step, condition });
        }
        let chol = gram
            .cholesky()
            .ok_or(Error::RegressionRankDeficiency { step, condition })?;
        Ok(Design {
            mean,
            scale,
            degree,
            basis,
            chol,
            condition,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Least-squares coefficients for targets `ys`.
    pub fn fit(&self, ys: &[f64]) -> Fit {
        let n = ys.len() as f64;
        let rhs = self.basis.transpose() * DVector::from_column_slice(ys) / n;
        let coef = self.chol.solve(&rhs);
        Fit {
            mean: self.mean,
            scale: self.scale,
            coef: coef.iter().copied().collect(),
            condition: self.condition,
        }
    }

    /// Fitted values at the design points.
    pub fn project(&self, ys: &[f64]) -> Vec<f64> {
        let fit = self.fit(ys);
        let c = DVector::from_column_slice(&fit.coef);
        (&self.basis * c).iter().copied().collect()
    }

    /// Joint fit `ys ≈ a(x) + c(x) ΔB` with both coefficients in the design
    /// basis. Returns `a` and `c` at the design points. Regressing on the
    /// increment itself removes the `ΔB²` noise of the plain `ys ΔB / Δt`
    /// projection.
    pub fn split(
        &self,
        ys: &[f64],
        increments: &[f64],
        dt: f64,
        step: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c) = self.basis.shape();
        let sd = dt.sqrt();
        let mut aug = DMatrix::<f64>::zeros(n, 2 * c);
        for i in 0..n {
            let w = increments[i] / sd;
            for k in 0..c {
                aug[(i, k)] = self.basis[(i, k)];
                aug[(i, c + k)] = self.basis[(i, k)] * w;
            }
        }
        let gram = aug.transpose() * &aug / n as f64;
        let chol = gram.cholesky().ok_or(Error::RegressionRankDeficiency {
            step,
            condition: f64::INFINITY,
        })?;
        let rhs = aug.transpose() * DVector::from_column_slice(ys) / n as f64;
        let coef = chol.solve(&rhs);
        let mean = &self.basis * coef.rows(0, c);
        let slope = &self.basis * coef.rows(c, c) / sd;
        Ok((
            mean.iter().copied().collect(),
            slope.iter().copied().collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial() {
        let xs: Vec<f64> = (0..50).map(|i| -1.0 + 0.04 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x - 0.5 * x * x * x).collect();
        let d = Design::new(&xs, 4, 0).unwrap();
        let f = d.fit(&ys);
        for &x in &[-0.7, 0.1, 0.9] {
            assert!((f.predict(x) - (1.0 + 2.0 * x - 0.5 * x * x * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_regressor_gives_mean() {
        let xs = vec![0.3; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = Design::new(&xs, 4, 0).unwrap();
        assert_eq!(d.degree(), 0);
        assert!((d.fit(&ys).predict(0.3) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn few_distinct_values_lower_the_degree() {
        let xs: Vec<f64> = (0..30).map(|i| (i % 3) as f64).collect();
        let d = Design::new(&xs, 4, 0).unwrap();
        assert_eq!(d.degree(), 2);
    }

    #[test]
    fn split_recovers_mean_and_slope() {
        let n = 2000;
        let dt: f64 = 0.01;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        let dw: Vec<f64> = (0..n)
            .map(|i| dt.sqrt() * ((i * 7919 % 101) as f64 / 50.0 - 1.0))
            .collect();
        let ys: Vec<f64> = (0..n)
            .map(|i| 1.0 + xs[i] + (2.0 - xs[i] * xs[i]) * dw[i])
            .collect();
        let d = Design::new(&xs, 3, 0).unwrap();
        let (a, c) = d.split(&ys, &dw, dt, 0).unwrap();
        for i in (0..n).step_by(97) {
            assert!((a[i] - 1.0 - xs[i]).abs() < 1e-9);
            assert!((c[i] - 2.0 + xs[i] * xs[i]).abs() < 1e-9);
        }
    }
}
