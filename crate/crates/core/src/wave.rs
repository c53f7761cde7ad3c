//! Explicit finite differences for `w_tt = c² Δw` on the rectangle
//! `(0, L) × (D, H)`: Dirichlet datum on the bottom edge, first-order Higdon
//! conditions `w_t + c ∂_n w = 0` on the other three edges.
//!
//! One step is the linear recurrence
//!
//! ```text
//! u^{n+1} = A₁ uⁿ + A₀ u^{n−1} + E f^{n+1},   u⁰ = u^{−1} = 0,
//! ```
//!
//! and the adjoint runs `λⁿ = Sᵀρⁿ + A₁ᵀλ^{n+1} + A₀ᵀλ^{n+2}` with the same
//! stencil enumeration, so it is the exact transpose of the forward map.

use serde::{Deserialize, Serialize};

use crate::error::WaveError;
use crate::series::{bracket, TimeSeriesField};

type Result<T> = std::result::Result<T, WaveError>;

/// Run-config section of the wave solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveConfig {
    pub hx: f64,
    pub hy: f64,
    pub dt: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveGrid {
    pub length: f64,
    /// Bottom edge height `D`.
    pub y0: f64,
    /// Top edge height `H`.
    pub y1: f64,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub c: f64,
}

impl WaveGrid {
    /// Builds the grid; spacings are adjusted to divide the rectangle exactly
    /// and `dt` must divide `t_end`.
    pub fn new(length: f64, y0: f64, y1: f64, cfg: &WaveConfig, t_end: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(length) && ok(y1 - y0) && ok(cfg.hx) && ok(cfg.hy) && ok(cfg.dt) && ok(cfg.c) && t_end >= 0.0) {
            return Err(WaveError::Grid(format!("non-positive extent or spacing: {cfg:?}, L = {length}, H − D = {}", y1 - y0)));
        }
        let nx = (length / cfg.hx).round().max(2.0) as usize;
        let ny = ((y1 - y0) / cfg.hy).round().max(2.0) as usize;
        let n_steps = (t_end / cfg.dt).round() as usize;
        if (n_steps as f64 * cfg.dt - t_end).abs() > 1e-9 * t_end.max(cfg.dt) {
            return Err(WaveError::Grid(format!("dt = {} does not divide T = {t_end}", cfg.dt)));
        }
        let g = Self {
            length,
            y0,
            y1,
            nx,
            ny,
            hx: length / nx as f64,
            hy: (y1 - y0) / ny as f64,
            dt: cfg.dt,
            n_steps,
            c: cfg.c,
        };
        let cfl = g.cfl_number();
        if cfl > 1.0 + 1e-12 {
            return Err(WaveError::Cfl(cfl));
        }
        Ok(g)
    }

    pub fn cfl_number(&self) -> f64 {
        self.c * self.dt * (1.0 / (self.hx * self.hx) + 1.0 / (self.hy * self.hy)).sqrt()
    }

    pub fn t_end(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn n_points(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx {
            self.length
        } else {
            i as f64 * self.hx
        }
    }

    pub fn y(&self, j: usize) -> f64 {
        if j == self.ny {
            self.y1
        } else {
            self.y0 + j as f64 * self.hy
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.nx).map(|i| self.x(i)).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| n as f64 * self.dt).collect()
    }

    /// Calls `f(src, coef)` for every entry of row `(i, j)` of `A₁`.
    #[inline]
    fn a1_row(&self, i: usize, j: usize, mut f: impl FnMut(usize, f64)) {
        let (nx, ny) = (self.nx, self.ny);
        if j == 0 {
            return;
        }
        let nux = self.c * self.dt / self.hx;
        let nuy = self.c * self.dt / self.hy;
        let id = |i, j| self.idx(i, j);
        if i > 0 && i < nx && j < ny {
            let (rx, ry) = (nux * nux, nuy * nuy);
            f(id(i, j), 2.0 - 2.0 * rx - 2.0 * ry);
            f(id(i - 1, j), rx);
            f(id(i + 1, j), rx);
            f(id(i, j - 1), ry);
            f(id(i, j + 1), ry);
            return;
        }
        // One-sided upwind updates; corners average the two edge updates.
        let top = j == ny;
        let side = i == 0 || i == nx;
        let w = if top && side { 0.5 } else { 1.0 };
        if top {
            f(id(i, j), w * (1.0 - nuy));
            f(id(i, j - 1), w * nuy);
        }
        if side {
            let inner = if i == 0 { 1 } else { nx - 1 };
            f(id(i, j), w * (1.0 - nux));
            f(id(inner, j), w * nux);
        }
    }

    #[inline]
    fn is_interior(&self, i: usize, j: usize) -> bool {
        i > 0 && i < self.nx && j > 0 && j < self.ny
    }

    /// `out = A₁ cur + A₀ prev + E f`.
    fn forward_step(&self, cur: &[f64], prev: &[f64], f: &[f64], out: &mut [f64]) {
        for j in 0..=self.ny {
            for i in 0..=self.nx {
                let k = self.idx(i, j);
                if j == 0 {
                    out[k] = f[i];
                    continue;
                }
                let mut s = 0.0;
                self.a1_row(i, j, |src, c| s += c * cur[src]);
                if self.is_interior(i, j) {
                    s -= prev[k];
                }
                out[k] = s;
            }
        }
    }

    /// `out = A₁ᵀ next + A₀ᵀ next2 + src`.
    fn adjoint_step(&self, next: &[f64], next2: &[f64], src: &[f64], out: &mut [f64]) {
        out.copy_from_slice(src);
        for j in 1..=self.ny {
            for i in 0..=self.nx {
                let k = self.idx(i, j);
                let l = next[k];
                if l != 0.0 {
                    self.a1_row(i, j, |s, c| out[s] += c * l);
                }
                if self.is_interior(i, j) {
                    out[k] -= next2[k];
                }
            }
        }
    }

    /// Leapfrog energy between levels `prev` and `cur` over the closed grid.
    pub fn discrete_energy(&self, prev: &[f64], cur: &[f64]) -> f64 {
        let (hx, hy, dt, c2) = (self.hx, self.hy, self.dt, self.c * self.c);
        let mut e = 0.0;
        for j in 0..=self.ny {
            for i in 0..=self.nx {
                let k = self.idx(i, j);
                let v = (cur[k] - prev[k]) / dt;
                e += v * v;
                if i < self.nx {
                    let k2 = self.idx(i + 1, j);
                    e += c2 * (cur[k2] - cur[k]) * (prev[k2] - prev[k]) / (hx * hx);
                }
                if j < self.ny {
                    let k2 = self.idx(i, j + 1);
                    e += c2 * (cur[k2] - cur[k]) * (prev[k2] - prev[k]) / (hy * hy);
                }
            }
        }
        0.5 * e * hx * hy
    }
}

/// Bottom-edge datum on the wave grid abscissae × wave time levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDatum(pub TimeSeriesField);

impl BoundaryDatum {
    pub fn zeros(grid: &WaveGrid) -> Self {
        Self(TimeSeriesField::zeros(grid.xs(), grid.times()))
    }

    pub fn from_fn(grid: &WaveGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut d = Self(TimeSeriesField::from_fn(grid.xs(), grid.times(), f));
        d.0.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        d
    }

    pub fn field(&self) -> &TimeSeriesField {
        &self.0
    }

    pub fn check(&self, grid: &WaveGrid) -> Result<()> {
        if self.0.n_positions() != grid.nx + 1 || self.0.n_times() != grid.n_steps + 1 {
            return Err(WaveError::Mismatch(format!(
                "datum is {}×{}, grid expects {}×{}",
                self.0.n_times(),
                self.0.n_positions(),
                grid.n_steps + 1,
                grid.nx + 1
            )));
        }
        let scale = self.0.max_abs().max(1.0);
        if self.0.row(0).iter().any(|v| v.abs() > 1e-12 * scale) {
            return Err(WaveError::Datum("datum must vanish at t = 0".into()));
        }
        Ok(())
    }

    /// Zeroes `t = 0` and every level with `t > t_keep`.
    pub fn project_admissible(&mut self, t_keep: f64) {
        let tol = 1e-9 * self.0.times.last().copied().unwrap_or(1.0).max(1.0);
        let times = self.0.times.clone();
        for (it, &t) in times.iter().enumerate() {
            if it == 0 || t > t_keep + tol {
                self.0.row_mut(it).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn inner(&self, other: &BoundaryDatum) -> f64 {
        self.0.values.iter().zip(&other.0.values).map(|(a, b)| a * b).sum()
    }
}

/// Bottom-edge samples at `t ≤ t_max`, relative L² misfit against `reference`.
pub fn relative_l2_error(est: &TimeSeriesField, reference: &TimeSeriesField, t_max: f64) -> f64 {
    let mut diff = est.clone();
    diff.values.iter_mut().zip(&reference.values).for_each(|(a, b)| *a -= b);
    (diff.squared_norm(t_max) / reference.squared_norm(t_max)).sqrt()
}

/// Linear interpolation weights from the top edge to measurement abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub segment: [f64; 2],
    pub positions: Vec<f64>,
    /// `(left grid index, weight of the right neighbour)` per position.
    stencil: Vec<(usize, f64)>,
}

impl Sampler {
    pub fn new(grid: &WaveGrid, segment: [f64; 2]) -> Result<Self> {
        let [a, b] = segment;
        let tol = 1e-9 * grid.length;
        if !(a >= -tol && b <= grid.length + tol && b > a) {
            return Err(WaveError::Grid(format!("measurement segment [{a}, {b}] outside the top edge")));
        }
        let (a, b) = (a.max(0.0), b.min(grid.length));
        let xs = grid.xs();
        let mut positions = vec![a];
        positions.extend(xs.iter().copied().filter(|&x| x > a + 0.5 * tol && x < b - 0.5 * tol));
        positions.push(b);
        // Snap ends that fall on grid points.
        for p in positions.iter_mut() {
            if let Some(&g) = xs.iter().find(|&&g| (g - *p).abs() <= tol) {
                *p = g;
            }
        }
        let stencil = positions
            .iter()
            .map(|&x| {
                let (i, w) = bracket(&xs, x).expect("segment within the grid");
                if w == 1.0 {
                    (i + 1, 0.0)
                } else {
                    (i, w)
                }
            })
            .collect();
        Ok(Self {
            segment: [a, b],
            positions,
            stencil,
        })
    }

    fn sample(&self, grid: &WaveGrid, u: &[f64], out: &mut [f64]) {
        let j = grid.ny;
        for (o, &(i, w)) in out.iter_mut().zip(&self.stencil) {
            let left = u[grid.idx(i, j)];
            *o = if w == 0.0 { left } else { (1.0 - w) * left + w * u[grid.idx(i + 1, j)] };
        }
    }

    fn sample_transpose(&self, grid: &WaveGrid, r: &[f64], out: &mut [f64]) {
        let j = grid.ny;
        for (&v, &(i, w)) in r.iter().zip(&self.stencil) {
            out[grid.idx(i, j)] += (1.0 - w) * v;
            if w != 0.0 {
                out[grid.idx(i + 1, j)] += w * v;
            }
        }
    }
}

/// Samples of `w` on `S_m × {H}` at every wave time level.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveMeasurements {
    pub segment: [f64; 2],
    pub field: TimeSeriesField,
}

/// Runs the forward scheme, calling `visit(n, uⁿ)` for `n = 0..=N`.
pub fn propagate_with(f: &BoundaryDatum, grid: &WaveGrid, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
    f.check(grid)?;
    let np = grid.n_points();
    let (mut prev, mut cur, mut next) = (vec![0.0; np], vec![0.0; np], vec![0.0; np]);
    visit(0, &cur);
    for n in 0..grid.n_steps {
        grid.forward_step(&cur, &prev, f.0.row(n + 1), &mut next);
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        visit(n + 1, &cur);
    }
    Ok(())
}

/// Forward solve streamed straight into top-edge measurements on `segment`.
pub fn propagate(f: &BoundaryDatum, grid: &WaveGrid, segment: [f64; 2]) -> Result<WaveMeasurements> {
    let s = Sampler::new(grid, segment)?;
    let mut field = TimeSeriesField::zeros(s.positions.clone(), grid.times());
    propagate_with(f, grid, |n, u| s.sample(grid, u, field.row_mut(n)))?;
    Ok(WaveMeasurements {
        segment: s.segment,
        field,
    })
}

/// Full-field snapshots every `every` steps (always including the last).
pub fn propagate_snapshots(f: &BoundaryDatum, grid: &WaveGrid, every: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let every = every.max(1);
    let mut out = Vec::new();
    propagate_with(f, grid, |n, u| {
        if n % every == 0 || n == grid.n_steps {
            out.push((n as f64 * grid.dt, u.to_vec()));
        }
    })?;
    Ok(out)
}

/// Restriction of a full-field history to `S_m`.
pub fn sample_measurements(history: &[(f64, Vec<f64>)], grid: &WaveGrid, segment: [f64; 2]) -> Result<WaveMeasurements> {
    let s = Sampler::new(grid, segment)?;
    let times = history.iter().map(|h| h.0).collect();
    let mut field = TimeSeriesField::zeros(s.positions.clone(), times);
    for (n, (_, u)) in history.iter().enumerate() {
        if u.len() != grid.n_points() {
            return Err(WaveError::Mismatch("snapshot size differs from grid".into()));
        }
        s.sample(grid, u, field.row_mut(n));
    }
    Ok(WaveMeasurements {
        segment: s.segment,
        field,
    })
}

/// Transpose of `f ↦ propagate(f)` applied to `residual` (one value per
/// measurement sample); entries for `t = 0` are zero.
pub fn adjoint_propagate(residual: &WaveMeasurements, grid: &WaveGrid) -> Result<BoundaryDatum> {
    let s = Sampler::new(grid, residual.segment)?;
    if residual.field.positions.len() != s.positions.len() || residual.field.n_times() != grid.n_steps + 1 {
        return Err(WaveError::Mismatch("residual does not match the measurement grid".into()));
    }
    let np = grid.n_points();
    let mut out = BoundaryDatum::zeros(grid);
    let (mut next2, mut next, mut cur) = (vec![0.0; np], vec![0.0; np], vec![0.0; np]);
    let mut src = vec![0.0; np];
    for n in (1..=grid.n_steps).rev() {
        src.iter_mut().for_each(|v| *v = 0.0);
        s.sample_transpose(grid, residual.field.row(n), &mut src);
        grid.adjoint_step(&next, &next2, &src, &mut cur);
        out.0.row_mut(n).copy_from_slice(&cur[..=grid.nx]);
        std::mem::swap(&mut next2, &mut next);
        std::mem::swap(&mut next, &mut cur);
    }
    Ok(out)
}

/// Interpolates a fluid stress trace onto the wave bottom-edge grid.
pub fn couple_stress_to_datum(stress: &TimeSeriesField, grid: &WaveGrid) -> Result<BoundaryDatum> {
    let t_tol = 1e-9 * grid.t_end().max(1.0);
    let x_tol = 1e-9 * grid.length;
    let (tp, xp) = (&stress.times, &stress.positions);
    if tp.is_empty() || xp.is_empty() {
        return Err(WaveError::Coupling("empty stress trace".into()));
    }
    if tp[0] > t_tol || tp[tp.len() - 1] < grid.t_end() - t_tol {
        return Err(WaveError::Coupling(format!(
            "stress covers t ∈ [{}, {}], wave run needs [0, {}]",
            tp[0],
            tp[tp.len() - 1],
            grid.t_end()
        )));
    }
    if xp[0] > x_tol || xp[xp.len() - 1] < grid.length - x_tol {
        return Err(WaveError::Coupling(format!(
            "stress covers x ∈ [{}, {}], bottom edge is [0, {}]",
            xp[0],
            xp[xp.len() - 1],
            grid.length
        )));
    }
    let xs = grid.xs();
    let times = grid.times();
    let mut out = TimeSeriesField::zeros(xs.clone(), times.clone());
    for (it, &t) in times.iter().enumerate() {
        let t = t.clamp(tp[0], tp[tp.len() - 1]);
        for (ix, &x) in xs.iter().enumerate() {
            let x = x.clamp(xp[0], xp[xp.len() - 1]);
            let v = stress.interpolate(x, t).expect("clamped into range");
            out.set(it, ix, v);
        }
    }
    Ok(BoundaryDatum(out))
}
