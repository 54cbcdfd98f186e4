//! Binary trajectory export.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `FBTR` |
//! | 4     | `u32` format version (1) |
//! | 8     | `u64` path count M |
//! | 8     | `u64` time count N+1 |
//! | 8(N+1)| `f64` time grid |
//! | 8M(N+1) × 4 | `f64` X, Y, Z, u, each row-major paths × times |

use crate::error::{Error, Result};
use crate::fbsde::TrajectoryBundle;
use crate::problem::Scenario;

pub const MAGIC: &[u8; 4] = b"FBTR";
pub const VERSION: u32 = 1;

pub fn trajectories_to_binary(bundle: &TrajectoryBundle) -> Vec<u8> {
    let n = bundle.times.len();
    let mut out = Vec::with_capacity(24 + 8 * n * (1 + 4 * bundle.paths()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.paths() as u64).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for column in [&bundle.times, &bundle.x, &bundle.y, &bundle.z, &bundle.u] {
        for v in column.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Parse("truncated trajectory file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Parse("trajectory dimensions overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decode a binary export and rebuild the bundle for `scenario`.
pub fn trajectories_from_binary(scenario: &Scenario, bytes: &[u8]) -> Result<TrajectoryBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a trajectory file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported trajectory format version {version}"
        )));
    }
    let paths = r.u64()? as usize;
    let n = r.u64()? as usize;
    let times = r.f64s(n)?;
    let cells = paths
        .checked_mul(n)
        .ok_or_else(|| Error::Parse("trajectory dimensions overflow".into()))?;
    let x = r.f64s(cells)?;
    let y = r.f64s(cells)?;
    let z = r.f64s(cells)?;
    let u = r.f64s(cells)?;
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after trajectory data".into()));
    }
    TrajectoryBundle::from_columns(scenario, times, x, y, z, u)
}
