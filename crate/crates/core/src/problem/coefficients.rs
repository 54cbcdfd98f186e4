use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Argument of the forward, diffusion and generator coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
}

impl Point {
    pub fn new(t: f64, x: f64, y: f64, z: f64, u: f64) -> Self {
        Point { t, x, y, z, u }
    }

    pub fn args(&self) -> [f64; 5] {
        [self.t, self.x, self.y, self.z, self.u]
    }

    pub fn with_z(self, z: f64) -> Self {
        Point { z, ..self }
    }

    pub fn with_u(self, u: f64) -> Self {
        Point { u, ..self }
    }

    /// Shift one of the (x, y, z) slots by `h`.
    pub fn shifted(self, slot: usize, h: f64) -> Self {
        let mut p = self;
        match slot {
            0 => p.x += h,
            1 => p.y += h,
            2 => p.z += h,
            _ => p.u += h,
        }
        p
    }
}

/// Which of b, sigma, g is being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coef {
    Drift,
    Diffusion,
    Generator,
}

impl Coef {
    pub const ALL: [Coef; 3] = [Coef::Drift, Coef::Diffusion, Coef::Generator];

    pub fn name(self) -> &'static str {
        match self {
            Coef::Drift => "b",
            Coef::Diffusion => "sigma",
            Coef::Generator => "g",
        }
    }
}

/// Problem data together with first and second derivative oracles.
///
/// Gradients and Hessians are taken in the `(x, y, z)` slots. Implementations
/// must be pure so they can be evaluated from many threads.
pub trait Coefficients: Send + Sync + Debug {
    fn value(&self, c: Coef, pt: &Point) -> f64;
    fn gradient(&self, c: Coef, pt: &Point) -> [f64; 3];
    fn hessian(&self, c: Coef, pt: &Point) -> [[f64; 3]; 3];

    /// Derivative in the control, if the model provides one.
    fn control_derivative(&self, _c: Coef, _pt: &Point) -> Option<f64> {
        None
    }

    fn terminal(&self, x: f64) -> f64;
    fn terminal_dx(&self, x: f64) -> f64;
    fn terminal_dxx(&self, x: f64) -> f64;
}

/// Declared Lipschitz constants.
///
/// `l1` bounds the x-dependence of every coefficient and every slot of g and
/// phi, `l2` the (y, z)-dependence of b and the y-dependence of sigma, `l3`
/// the z-dependence of sigma.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lipschitz {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Values and derivatives of b, sigma, g at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalData {
    pub value: [f64; 3],
    pub grad: [[f64; 3]; 3],
    pub hess: [[[f64; 3]; 3]; 3],
}

impl LocalData {
    pub fn b(&self) -> f64 {
        self.value[0]
    }
    pub fn sigma(&self) -> f64 {
        self.value[1]
    }
    pub fn g(&self) -> f64 {
        self.value[2]
    }
    pub fn db(&self) -> [f64; 3] {
        self.grad[0]
    }
    pub fn dsigma(&self) -> [f64; 3] {
        self.grad[1]
    }
    pub fn dg(&self) -> [f64; 3] {
        self.grad[2]
    }
}

/// A coefficient model with its Lipschitz constants.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub model: Arc<dyn Coefficients>,
    pub lipschitz: Lipschitz,
}

impl CoefficientSet {
    pub fn new(model: impl Coefficients + 'static, lipschitz: Lipschitz) -> Self {
        CoefficientSet {
            model: Arc::new(model),
            lipschitz,
        }
    }

    pub fn b(&self, pt: &Point) -> f64 {
        self.model.value(Coef::Drift, pt)
    }

    pub fn sigma(&self, pt: &Point) -> f64 {
        self.model.value(Coef::Diffusion, pt)
    }

    pub fn g(&self, pt: &Point) -> f64 {
        self.model.value(Coef::Generator, pt)
    }

    pub fn phi(&self, x: f64) -> f64 {
        self.model.terminal(x)
    }

    pub fn phi_x(&self, x: f64) -> f64 {
        self.model.terminal_dx(x)
    }

    pub fn phi_xx(&self, x: f64) -> f64 {
        self.model.terminal_dxx(x)
    }

    pub fn gradient(&self, c: Coef, pt: &Point) -> [f64; 3] {
        self.model.gradient(c, pt)
    }

    pub fn hessian(&self, c: Coef, pt: &Point) -> [[f64; 3]; 3] {
        self.model.hessian(c, pt)
    }

    pub fn local(&self, pt: &Point) -> LocalData {
        let mut out = LocalData::default();
        for (i, c) in Coef::ALL.into_iter().enumerate() {
            out.value[i] = self.model.value(c, pt);
            out.grad[i] = self.model.gradient(c, pt);
            out.hess[i] = self.model.hessian(c, pt);
        }
        out
    }

    /// Control derivatives of (b, sigma, g), or `None` if any is missing.
    pub fn control_gradient(&self, pt: &Point) -> Option<[f64; 3]> {
        Some([
            self.model.control_derivative(Coef::Drift, pt)?,
            self.model.control_derivative(Coef::Diffusion, pt)?,
            self.model.control_derivative(Coef::Generator, pt)?,
        ])
    }

    pub fn has_control_derivatives(&self) -> bool {
        self.control_gradient(&Point::new(0.0, 0.0, 0.0, 0.0, 0.0))
            .is_some()
    }
}

/// Opt-in wrapper that supplies derivatives by central finite differences.
///
/// Only `value` and `terminal` of the inner model are consulted.
#[derive(Debug)]
pub struct FiniteDifferenced<M> {
    pub inner: M,
    pub step: f64,
}

impl<M: Coefficients> Coefficients for FiniteDifferenced<M> {
    fn value(&self, c: Coef, pt: &Point) -> f64 {
        self.inner.value(c, pt)
    }

    fn gradient(&self, c: Coef, pt: &Point) -> [f64; 3] {
        let h = self.step;
        [0, 1, 2].map(|i| {
            (self.inner.value(c, &pt.shifted(i, h)) - self.inner.value(c, &pt.shifted(i, -h)))
                / (2.0 * h)
        })
    }

    fn hessian(&self, c: Coef, pt: &Point) -> [[f64; 3]; 3] {
        let h = self.step;
        let f = |p: Point| self.inner.value(c, &p);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v = if i == j {
                    (f(pt.shifted(i, h)) - 2.0 * f(*pt) + f(pt.shifted(i, -h))) / (h * h)
                } else {
                    (f(pt.shifted(i, h).shifted(j, h))
                        - f(pt.shifted(i, h).shifted(j, -h))
                        - f(pt.shifted(i, -h).shifted(j, h))
                        + f(pt.shifted(i, -h).shifted(j, -h)))
                        / (4.0 * h * h)
                };
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        out
    }

    fn control_derivative(&self, c: Coef, pt: &Point) -> Option<f64> {
        let h = self.step;
        Some(
            (self.inner.value(c, &pt.shifted(3, h)) - self.inner.value(c, &pt.shifted(3, -h)))
                / (2.0 * h),
        )
    }

    fn terminal(&self, x: f64) -> f64 {
        self.inner.terminal(x)
    }

    fn terminal_dx(&self, x: f64) -> f64 {
        let h = self.step;
        (self.inner.terminal(x + h) - self.inner.terminal(x - h)) / (2.0 * h)
    }

    fn terminal_dxx(&self, x: f64) -> f64 {
        let h = self.step;
        (self.inner.terminal(x + h) - 2.0 * self.inner.terminal(x) + self.inner.terminal(x - h))
            / (h * h)
    }
}
