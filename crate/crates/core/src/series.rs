//! Scalar fields sampled on a 1D spatial trace times a uniform time grid, and
//! their columnar text representation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesField {
    /// Abscissae along the trace.
    pub positions: Vec<f64>,
    pub times: Vec<f64>,
    /// Row-major `[time][position]`.
    pub values: Vec<f64>,
}

impl TimeSeriesField {
    pub fn zeros(positions: Vec<f64>, times: Vec<f64>) -> Self {
        let values = vec![0.0; positions.len() * times.len()];
        Self {
            positions,
            times,
            values,
        }
    }

    pub fn from_fn(positions: Vec<f64>, times: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(positions.len() * times.len());
        for &t in &times {
            values.extend(positions.iter().map(|&x| f(x, t)));
        }
        Self {
            positions,
            times,
            values,
        }
    }

    pub fn n_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn get(&self, it: usize, ix: usize) -> f64 {
        self.values[it * self.positions.len() + ix]
    }

    #[inline]
    pub fn set(&mut self, it: usize, ix: usize, v: f64) {
        let n = self.positions.len();
        self.values[it * n + ix] = v;
    }

    pub fn row(&self, it: usize) -> &[f64] {
        let n = self.positions.len();
        &self.values[it * n..(it + 1) * n]
    }

    pub fn row_mut(&mut self, it: usize) -> &mut [f64] {
        let n = self.positions.len();
        &mut self.values[it * n..(it + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn same_grid(&self, other: &TimeSeriesField) -> bool {
        self.positions == other.positions && self.times == other.times
    }

    /// Bilinear interpolation; `None` outside the sampled rectangle.
    pub fn interpolate(&self, x: f64, t: f64) -> Option<f64> {
        let (ix, wx) = bracket(&self.positions, x)?;
        let (it, wt) = bracket(&self.times, t)?;
        let v = |i: usize, j: usize| self.get(i, j);
        let jx = (ix + 1).min(self.positions.len() - 1);
        let jt = (it + 1).min(self.times.len() - 1);
        let lo = (1.0 - wx) * v(it, ix) + wx * v(it, jx);
        let hi = (1.0 - wx) * v(jt, ix) + wx * v(jt, jx);
        Some((1.0 - wt) * lo + wt * hi)
    }

    /// Space-time trapezoidal quadrature of `values²`, restricted to `t <= t_max`.
    pub fn squared_norm(&self, t_max: f64) -> f64 {
        let wx = trapezoid_weights(&self.positions);
        let wt = window_weights(&self.times, t_max);
        let mut s = 0.0;
        for (it, w) in wt.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            s += w * self.row(it).iter().zip(&wx).map(|(v, a)| a * v * v).sum::<f64>();
        }
        s
    }

    /// Writes `t x value` rows after a `# key: value` metadata header.
    pub fn write_columnar(&self, path: &Path, meta: &[(&str, String)]) -> Result<()> {
        std::fs::write(path, self.to_columnar(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn to_columnar(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::new();
        for (k, v) in meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let _ = writeln!(s, "# columns: t x value");
        for (it, &t) in self.times.iter().enumerate() {
            for (ix, &x) in self.positions.iter().enumerate() {
                let _ = writeln!(s, "{t:?} {x:?} {:?}", self.get(it, ix));
            }
        }
        s
    }

    pub fn read_columnar(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_columnar(&text).map_err(|detail| Error::Parse {
            path: path.display().to_string(),
            detail,
        })
    }

    pub fn parse_columnar(text: &str) -> std::result::Result<(Self, Vec<(String, String)>), String> {
        let mut meta = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut positions: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once(':') {
                    let k = k.trim();
                    if k != "columns" {
                        meta.push((k.to_string(), v.trim().to_string()));
                    }
                }
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|c| c.parse::<f64>().map_err(|e| format!("line {}: {e}", ln + 1)))
                .collect::<std::result::Result<_, _>>()?;
            if cols.len() != 3 {
                return Err(format!("line {}: expected 3 columns, found {}", ln + 1, cols.len()));
            }
            let (t, x, v) = (cols[0], cols[1], cols[2]);
            if times.last() != Some(&t) {
                times.push(t);
            }
            if times.len() == 1 {
                positions.push(x);
            } else {
                let ix = values.len() % positions.len().max(1);
                if positions.get(ix) != Some(&x) {
                    return Err(format!("line {}: inconsistent position grid", ln + 1));
                }
            }
            values.push(v);
        }
        if values.len() != positions.len() * times.len() {
            return Err("ragged space-time grid".into());
        }
        Ok((
            Self {
                positions,
                times,
                values,
            },
            meta,
        ))
    }
}

/// Index of the left grid point and the interpolation weight.
pub(crate) fn bracket(grid: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = grid.len();
    if n == 0 {
        return None;
    }
    let tol = 1e-12 * (1.0 + grid[n - 1].abs().max(grid[0].abs()));
    if x < grid[0] - tol || x > grid[n - 1] + tol {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let j = grid.partition_point(|&g| g <= x).clamp(1, n - 1);
    let i = j - 1;
    let w = ((x - grid[i]) / (grid[j] - grid[i])).clamp(0.0, 1.0);
    Some((i, w))
}

/// Trapezoidal weights on a (possibly non-uniform) grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 1..n {
        let h = grid[k] - grid[k - 1];
        w[k - 1] += 0.5 * h;
        w[k] += 0.5 * h;
    }
    w
}

/// Trapezoidal weights restricted to the samples with `t <= t_max`.
pub fn window_weights(times: &[f64], t_max: f64) -> Vec<f64> {
    let tol = 1e-9 * (times.last().copied().unwrap_or(1.0).abs() + 1.0);
    let last = times.partition_point(|&t| t <= t_max + tol);
    let mut w = trapezoid_weights(&times[..last]);
    w.resize(times.len(), 0.0);
    w
}
