//! Coefficient functions given as sums of monomial and sine terms.
//!
//! A term table supports exact first and second partial derivatives in every
//! argument, which is what the adjoint equations consume.

use serde::{Deserialize, Serialize};

use super::coefficients::{Coef, Coefficients, Point};

/// Argument slot of a coefficient function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Var {
    T,
    X,
    Y,
    Z,
    U,
}

impl Var {
    fn index(self) -> usize {
        match self {
            Var::T => 0,
            Var::X => 1,
            Var::Y => 2,
            Var::Z => 3,
            Var::U => 4,
        }
    }
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

/// `c * t^t * x^x * y^y * z^z * u^u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub c: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub t: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub x: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub y: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub z: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub u: u32,
}

impl Monomial {
    pub fn new(c: f64, powers: [u32; 5]) -> Self {
        Monomial {
            c,
            t: powers[0],
            x: powers[1],
            y: powers[2],
            z: powers[3],
            u: powers[4],
        }
    }

    fn powers(&self) -> [u32; 5] {
        [self.t, self.x, self.y, self.z, self.u]
    }
}

fn one() -> f64 {
    1.0
}

/// `c * sin(freq * v + phase)` for a single argument `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sine {
    pub c: f64,
    pub sin: Var,
    #[serde(default = "one")]
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Term {
    Sine(Sine),
    Monomial(Monomial),
}

impl Term {
    pub fn monomial(c: f64, powers: [u32; 5]) -> Self {
        Term::Monomial(Monomial::new(c, powers))
    }

    pub fn sine(c: f64, var: Var, freq: f64, phase: f64) -> Self {
        Term::Sine(Sine {
            c,
            sin: var,
            freq,
            phase,
        })
    }

    /// Partial derivative of the term in the listed slots (empty = value).
    pub fn partial(&self, args: &[f64; 5], wrt: &[Var]) -> f64 {
        match self {
            Term::Monomial(m) => {
                let mut powers = m.powers();
                let mut coef = m.c;
                for v in wrt {
                    let i = v.index();
                    if powers[i] == 0 {
                        return 0.0;
                    }
                    coef *= powers[i] as f64;
                    powers[i] -= 1;
                }
                let mut value = coef;
                for (a, &n) in args.iter().zip(powers.iter()) {
                    if n > 0 {
                        value *= a.powi(n as i32);
                    }
                }
                value
            }
            Term::Sine(s) => {
                if wrt.iter().any(|v| *v != s.sin) {
                    return 0.0;
                }
                let k = wrt.len() as i32;
                let arg = s.freq * args[s.sin.index()] + s.phase;
                let scale = s.c * s.freq.powi(k);
                // d^k/dv^k sin(a) = sin(a + k pi/2)
                match k.rem_euclid(4) {
                    0 => scale * arg.sin(),
                    1 => scale * arg.cos(),
                    2 => -scale * arg.sin(),
                    _ => -scale * arg.cos(),
                }
            }
        }
    }

    /// True if the term depends on anything other than `x`.
    fn depends_beyond_x(&self) -> bool {
        match self {
            Term::Monomial(m) => m.t + m.y + m.z + m.u > 0,
            Term::Sine(s) => s.sin != Var::X,
        }
    }
}

fn sum_partial(terms: &[Term], args: &[f64; 5], wrt: &[Var]) -> f64 {
    terms.iter().map(|t| t.partial(args, wrt)).sum()
}

/// Coefficient set defined by term tables for b, sigma, g and phi.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermModel {
    pub drift: Vec<Term>,
    pub diffusion: Vec<Term>,
    pub generator: Vec<Term>,
    pub terminal: Vec<Term>,
}

impl TermModel {
    fn table(&self, c: Coef) -> &[Term] {
        match c {
            Coef::Drift => &self.drift,
            Coef::Diffusion => &self.diffusion,
            Coef::Generator => &self.generator,
        }
    }

    /// The terminal table may only depend on `x`.
    pub fn terminal_is_state_only(&self) -> bool {
        !self.terminal.iter().any(Term::depends_beyond_x)
    }
}

const STATE: [Var; 3] = [Var::X, Var::Y, Var::Z];

impl Coefficients for TermModel {
    fn value(&self, c: Coef, pt: &Point) -> f64 {
        sum_partial(self.table(c), &pt.args(), &[])
    }

    fn gradient(&self, c: Coef, pt: &Point) -> [f64; 3] {
        let args = pt.args();
        let table = self.table(c);
        STATE.map(|v| sum_partial(table, &args, &[v]))
    }

    fn hessian(&self, c: Coef, pt: &Point) -> [[f64; 3]; 3] {
        let args = pt.args();
        let table = self.table(c);
        let mut h = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v = sum_partial(table, &args, &[STATE[i], STATE[j]]);
                h[i][j] = v;
                h[j][i] = v;
            }
        }
        h
    }

    fn control_derivative(&self, c: Coef, pt: &Point) -> Option<f64> {
        Some(sum_partial(self.table(c), &pt.args(), &[Var::U]))
    }

    fn terminal(&self, x: f64) -> f64 {
        sum_partial(&self.terminal, &[0.0, x, 0.0, 0.0, 0.0], &[])
    }

    fn terminal_dx(&self, x: f64) -> f64 {
        sum_partial(&self.terminal, &[0.0, x, 0.0, 0.0, 0.0], &[Var::X])
    }

    fn terminal_dxx(&self, x: f64) -> f64 {
        sum_partial(&self.terminal, &[0.0, x, 0.0, 0.0, 0.0], &[Var::X, Var::X])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_partials() {
        let t = Term::monomial(2.0, [0, 2, 1, 0, 0]); // 2 x^2 y
        let a = [0.0, 3.0, 5.0, 0.0, 0.0];
        assert_eq!(t.partial(&a, &[]), 90.0);
        assert_eq!(t.partial(&a, &[Var::X]), 60.0);
        assert_eq!(t.partial(&a, &[Var::X, Var::Y]), 12.0);
        assert_eq!(t.partial(&a, &[Var::Z]), 0.0);
        assert_eq!(t.partial(&a, &[Var::X, Var::X, Var::X]), 0.0);
    }

    #[test]
    fn sine_partials_cycle() {
        let t = Term::sine(0.3, Var::Z, 2.0, 0.1);
        let a = [0.0, 0.0, 0.0, 0.7, 0.0];
        let arg = 2.0 * 0.7 + 0.1;
        assert!((t.partial(&a, &[Var::Z]) - 0.6 * f64::cos(arg)).abs() < 1e-15);
        assert!((t.partial(&a, &[Var::Z, Var::Z]) + 1.2 * f64::sin(arg)).abs() < 1e-15);
        assert_eq!(t.partial(&a, &[Var::X]), 0.0);
    }

    #[test]
    fn terms_parse_from_toml() {
        #[derive(Deserialize)]
        struct Doc {
            b: Vec<Term>,
        }
        let doc: Doc =
            toml::from_str("b = [{ c = 0.5, z = 1 }, { c = 0.3, sin = \"z\" }]").unwrap();
        assert_eq!(doc.b[0], Term::monomial(0.5, [0, 0, 0, 1, 0]));
        assert_eq!(doc.b[1], Term::sine(0.3, Var::Z, 1.0, 0.0));
    }
}
