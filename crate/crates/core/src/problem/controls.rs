use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly spaced values `min, ..., max` (`count` of them).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl UniformGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i + 1 == self.count {
                    self.max
                } else {
                    self.min + step * i as f64
                }
            })
            .collect()
    }
}

/// Control values given either explicitly or as a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<UniformGrid>,
    #[serde(default)]
    pub convex: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
}

impl ControlSpec {
    pub fn values(&self, field: &str) -> Result<Vec<f64>> {
        match (&self.points, &self.grid) {
            (Some(p), None) => Ok(p.clone()),
            (None, Some(g)) => {
                if g.count == 0 || !(g.max >= g.min) {
                    return Err(Error::invariant(
                        field,
                        "grid needs count >= 1 and max >= min",
                    ));
                }
                Ok(g.values())
            }
            _ => Err(Error::invariant(
                field,
                "exactly one of `points` or `grid` is required",
            )),
        }
    }
}

/// Finite discretization of the compact control set.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    points: Vec<f64>,
    convex: bool,
    bounds: [f64; 2],
}

impl ControlSet {
    pub fn new(points: Vec<f64>, convex: bool, bounds: Option<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invariant("controls", "control set must be nonempty"));
        }
        if points.iter().any(|u| !u.is_finite()) {
            return Err(Error::invariant(
                "controls",
                "control values must be finite",
            ));
        }
        let lo = points.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bounds = bounds.unwrap_or([lo, hi]);
        if lo < bounds[0] || hi > bounds[1] {
            return Err(Error::invariant(
                "controls.bounds",
                format!("control values must lie in [{}, {}]", bounds[0], bounds[1]),
            ));
        }
        let mut sorted = points.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invariant("controls", "duplicate control values"));
        }
        Ok(ControlSet {
            points,
            convex,
            bounds,
        })
    }

    pub fn from_spec(spec: &ControlSpec) -> Result<Self> {
        ControlSet::new(spec.values("controls")?, spec.convex, spec.bounds)
    }

    pub fn singleton(u: f64) -> Self {
        ControlSet {
            points: vec![u],
            convex: false,
            bounds: [u, u],
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    pub fn bounds(&self) -> [f64; 2] {
        self.bounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_are_exact() {
        let v = UniformGrid {
            min: -2.0,
            max: 2.0,
            count: 9,
        }
        .values();
        assert_eq!(v.len(), 9);
        assert_eq!(v[0], -2.0);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[8], 2.0);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(ControlSet::new(vec![], false, None).is_err());
        assert!(ControlSet::new(vec![0.0, 1.0, 0.0], false, None).is_err());
        assert!(ControlSet::new(vec![0.0, 3.0], false, Some([0.0, 2.0])).is_err());
        let ok = ControlSet::new(vec![1.0, -1.0], true, Some([-2.0, 2.0])).unwrap();
        assert_eq!(ok.points(), &[1.0, -1.0]);
        assert!(ok.is_convex());
    }
}
