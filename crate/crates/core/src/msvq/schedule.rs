use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ascending list of token-map resolutions sharing one codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Schedule("schedule needs at least one scale".into()));
        }
        if scales.len() > u8::MAX as usize {
            return Err(Error::Schedule(format!("{} scales exceed the u8 scale count", scales.len())));
        }
        for &(h, w) in &scales {
            if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
                return Err(Error::Schedule(format!("invalid resolution {h}x{w}")));
            }
        }
        for pair in scales.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.0 * a.1 >= b.0 * b.1 {
                return Err(Error::Schedule(format!(
                    "areas must strictly increase: {}x{} then {}x{}",
                    a.0, a.1, b.0, b.1
                )));
            }
        }
        Ok(ScaleSchedule { scales })
    }

    /// `[(1,1), (2,2), (4,4), (7,7), (14,14)]` for `p = 14`; other grids
    /// get the same ladder truncated below `p` plus `(p,p)`.
    pub fn default_for(grid: usize) -> Self {
        let mut scales: Vec<(usize, usize)> = [1, 2, 4, 7].into_iter().filter(|&s| s < grid).map(|s| (s, s)).collect();
        scales.push((grid, grid));
        ScaleSchedule { scales }
    }

    /// Single full-resolution scale, the plain patch-level quantizer.
    pub fn patch_only(grid: usize) -> Self {
        ScaleSchedule { scales: vec![(grid, grid)] }
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn last(&self) -> (usize, usize) {
        *self.scales.last().expect("non-empty schedule")
    }

    /// Indices per tile, `Σ H_k·W_k`.
    pub fn tokens_per_tile(&self) -> usize {
        self.scales.iter().map(|&(h, w)| h * w).sum()
    }

    /// Schedule must end at the full `p×p` grid.
    pub fn check_grid(&self, grid: usize) -> Result<()> {
        if self.last() != (grid, grid) {
            let (h, w) = self.last();
            return Err(Error::Schedule(format!("final scale {h}x{w} must equal the {grid}x{grid} grid")));
        }
        Ok(())
    }

    /// First `k` scales.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.scales.len() {
            return Err(Error::Schedule(format!("prefix {k} of a {}-scale schedule", self.scales.len())));
        }
        Ok(ScaleSchedule { scales: self.scales[..k].to_vec() })
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        ScaleSchedule::new(v)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(s: ScaleSchedule) -> Self {
        s.scales
    }
}

/// Parses `1,2,4,7,14` (square scales) or `1x1,2x3` entries.
impl FromStr for ScaleSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| -> Result<usize> {
            t.trim().parse().map_err(|_| Error::Schedule(format!("bad scale entry `{t}`")))
        };
        let scales = s
            .split(',')
            .map(|t| match t.split_once('x') {
                Some((h, w)) => Ok((parse(h)?, parse(w)?)),
                None => parse(t).map(|v| (v, v)),
            })
            .collect::<Result<Vec<_>>>()?;
        ScaleSchedule::new(scales)
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .scales
            .iter()
            .map(|&(h, w)| if h == w { h.to_string() } else { format!("{h}x{w}") })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}
