//! Recovery of the bottom-edge wave datum from top-edge measurements.
//!
//! `J₁(f) = ∫_{S_m×(0,T)} |w(f) − w_m|²` (trapezoidal in space and time) is a
//! convex quadratic in `f`. It is minimized over the admissible space `F_ad`
//! of data vanishing at `t = 0` and on `(T − t_c, T]` by projected gradient
//! descent with Barzilai–Borwein steps and a backtracking safeguard.

use serde::{Deserialize, Serialize};

use crate::error::InversionError;
use crate::geometry::{travel_time_cutoff, MeasurementGeometry, Segment};
use crate::series::{trapezoid_weights, TimeSeriesField};
use crate::wave::{adjoint_propagate, propagate, BoundaryDatum, WaveGrid, WaveMeasurements};

type Result<T> = std::result::Result<T, InversionError>;

/// Inversion section of the run-config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryOptions {
    pub max_iters: usize,
    /// Stops once `(J_k − J_{k+1}) / J_k` falls below this.
    pub tol: f64,
    /// Weight of `‖f‖²` added to `J₁`.
    pub tikhonov_weight: f64,
    /// Backtracking halvings before a step is declared stalled.
    pub max_backtracks: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-9,
            tikhonov_weight: 0.0,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryRecoveryProblem {
    pub measurements: WaveMeasurements,
    pub geometry: MeasurementGeometry,
    pub grid: WaveGrid,
    pub t_c: f64,
    pub options: RecoveryOptions,
    /// Trapezoid weights on `S_m` positions and on wave times.
    wx: Vec<f64>,
    wt: Vec<f64>,
    /// Trapezoid weights on the bottom edge, for the Tikhonov term.
    fx: Vec<f64>,
}

impl BoundaryRecoveryProblem {
    /// `t_c` is computed from `geometry` against the fluid's upper wall `y = D`.
    pub fn new(
        measurements: WaveMeasurements,
        geometry: MeasurementGeometry,
        grid: WaveGrid,
        options: RecoveryOptions,
    ) -> Result<Self> {
        let tol = 1e-9 * grid.length;
        if (geometry.height - grid.y1).abs() > tol {
            return Err(InversionError::Problem(format!(
                "measurement height {} differs from the wave box top {}",
                geometry.height, grid.y1
            )));
        }
        let [a, b] = geometry.wave_segment;
        if (a - measurements.segment[0]).abs() > tol || (b - measurements.segment[1]).abs() > tol {
            return Err(InversionError::Problem(format!(
                "measurements cover [{}, {}], geometry declares S_m = [{a}, {b}]",
                measurements.segment[0], measurements.segment[1]
            )));
        }
        if measurements.field.n_times() != grid.n_steps + 1 {
            return Err(InversionError::Problem(format!(
                "measurements have {} time levels, grid has {}",
                measurements.field.n_times(),
                grid.n_steps + 1
            )));
        }
        if !(options.tikhonov_weight >= 0.0) {
            return Err(InversionError::Problem("Tikhonov weight must be non-negative".into()));
        }
        let wall = Segment {
            a: [0.0, grid.y0],
            b: [grid.length, grid.y0],
        };
        let t_c = travel_time_cutoff(&geometry, wall)?;
        let wx = trapezoid_weights(&measurements.field.positions);
        let wt = trapezoid_weights(&measurements.field.times);
        let fx = trapezoid_weights(&grid.xs());
        Ok(Self {
            measurements,
            geometry,
            grid,
            t_c,
            options,
            wx,
            wt,
            fx,
        })
    }

    /// End of the recoverable window `T − t_c`.
    pub fn t_keep(&self) -> f64 {
        self.grid.t_end() - self.t_c
    }

    pub fn admissible_zero(&self) -> BoundaryDatum {
        BoundaryDatum::zeros(&self.grid)
    }

    /// `w(f) − w_m` on the measurement grid.
    fn residual(&self, f: &BoundaryDatum) -> Result<WaveMeasurements> {
        let mut w = propagate(f, &self.grid, self.measurements.segment)?;
        if w.field.positions.len() != self.measurements.field.positions.len() {
            return Err(InversionError::Problem("measurement abscissae differ from the sampler".into()));
        }
        w.field
            .values
            .iter_mut()
            .zip(&self.measurements.field.values)
            .for_each(|(a, b)| *a -= b);
        Ok(w)
    }

    fn weighted_square(&self, r: &TimeSeriesField) -> f64 {
        let mut s = 0.0;
        for (it, wt) in self.wt.iter().enumerate() {
            s += wt * r.row(it).iter().zip(&self.wx).map(|(v, w)| w * v * v).sum::<f64>();
        }
        s
    }

    fn tikhonov(&self, f: &BoundaryDatum) -> f64 {
        if self.options.tikhonov_weight == 0.0 {
            return 0.0;
        }
        let ft = trapezoid_weights(&f.0.times);
        let mut s = 0.0;
        for (it, wt) in ft.iter().enumerate() {
            s += wt * f.0.row(it).iter().zip(&self.fx).map(|(v, w)| w * v * v).sum::<f64>();
        }
        self.options.tikhonov_weight * s
    }

    pub fn eval_j1(&self, f: &BoundaryDatum) -> Result<f64> {
        let r = self.residual(f)?;
        Ok(self.weighted_square(&r.field) + self.tikhonov(f))
    }

    /// `J₁(f)` and the projected gradient `Π ∇J₁(f)`.
    pub fn eval_with_gradient(&self, f: &BoundaryDatum) -> Result<(f64, BoundaryDatum)> {
        let mut r = self.residual(f)?;
        let j = self.weighted_square(&r.field) + self.tikhonov(f);
        for (it, wt) in self.wt.iter().enumerate() {
            r.field
                .row_mut(it)
                .iter_mut()
                .zip(&self.wx)
                .for_each(|(v, wx)| *v *= 2.0 * wt * wx);
        }
        let mut g = adjoint_propagate(&r, &self.grid)?;
        let lambda = self.options.tikhonov_weight;
        if lambda != 0.0 {
            let ft = trapezoid_weights(&f.0.times);
            for (it, wt) in ft.iter().enumerate() {
                let src = f.0.row(it).to_vec();
                g.0.row_mut(it)
                    .iter_mut()
                    .zip(src.iter().zip(&self.fx))
                    .for_each(|(gv, (fv, wx))| *gv += 2.0 * lambda * wt * wx * fv);
            }
        }
        g.project_admissible(self.t_keep());
        Ok((j, g))
    }

    pub fn grad_j1(&self, f: &BoundaryDatum) -> Result<BoundaryDatum> {
        Ok(self.eval_with_gradient(f)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative decrease of `J₁` fell below the tolerance.
    Converged,
    /// The projected gradient vanished.
    Stationary,
    IterationCap,
    /// No decrease was found by backtracking.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub datum: BoundaryDatum,
    /// `J₁(f_k)` for `k = 0, 1, …`.
    pub j_history: Vec<f64>,
    pub iterations: usize,
    pub reason: StopReason,
}

fn axpy(a: f64, x: &BoundaryDatum, y: &BoundaryDatum) -> BoundaryDatum {
    let mut out = y.clone();
    out.0.values.iter_mut().zip(&x.0.values).for_each(|(o, v)| *o += a * v);
    out
}

fn dot(a: &BoundaryDatum, b: &BoundaryDatum) -> f64 {
    a.inner(b)
}

/// The 5-point stencil never reads the two bottom corner values, so the
/// forward map cannot see them; they are extrapolated linearly from the
/// neighbouring bottom-edge values of the (continuous) datum.
pub fn fill_corners(f: &mut BoundaryDatum) {
    let n = f.0.n_positions();
    if n < 3 {
        return;
    }
    let xs = f.0.positions.clone();
    for it in 0..f.0.n_times() {
        let row = f.0.row_mut(it);
        let l = (xs[1] - xs[0]) / (xs[2] - xs[1]);
        row[0] = row[1] + l * (row[1] - row[2]);
        let r = (xs[n - 1] - xs[n - 2]) / (xs[n - 2] - xs[n - 3]);
        row[n - 1] = row[n - 2] + r * (row[n - 2] - row[n - 3]);
    }
}

/// Projected Barzilai–Borwein iteration from `f₀` (zero when `None`).
pub fn recover_boundary_datum(problem: &BoundaryRecoveryProblem, f0: Option<&BoundaryDatum>) -> Result<RecoveryReport> {
    let opts = &problem.options;
    let t_keep = problem.t_keep();
    let mut f = match f0 {
        Some(f) => f.clone(),
        None => problem.admissible_zero(),
    };
    f.project_admissible(t_keep);
    let (mut j, mut g) = problem.eval_with_gradient(&f)?;
    let mut history = vec![j];
    let gnorm0 = dot(&g, &g).sqrt();
    if gnorm0 == 0.0 || j == 0.0 {
        fill_corners(&mut f);
        return Ok(RecoveryReport {
            datum: f,
            j_history: history,
            iterations: 0,
            reason: StopReason::Stationary,
        });
    }
    // First step: exact minimizer along −g of the quadratic.
    let mut eta = {
        let gg = dot(&g, &g);
        let probe = 1.0 / gnorm0;
        let jp = problem.eval_j1(&axpy(-probe, &g, &f))?;
        // J(f − s g) = J − s gg + s² q
        let q = (jp - j + probe * gg) / (probe * probe);
        if q > 0.0 {
            gg / (2.0 * q)
        } else {
            probe
        }
    };
    let mut reason = StopReason::IterationCap;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let gg = dot(&g, &g);
        let mut accepted = None;
        let mut step = eta;
        for _ in 0..=opts.max_backtracks {
            let mut trial = axpy(-step, &g, &f);
            trial.project_admissible(t_keep);
            let (jt, gt) = problem.eval_with_gradient(&trial)?;
            if jt <= j - 1e-4 * step * gg {
                accepted = Some((trial, jt, gt, step));
                break;
            }
            step *= 0.5;
        }
        let Some((f_new, j_new, g_new, step)) = accepted else {
            reason = StopReason::Stalled;
            iterations -= 1;
            break;
        };
        // BB1 step from s = f_new − f = −step g and y = g_new − g.
        let s_y = -step * (dot(&g_new, &g) - gg);
        let s_s = step * step * gg;
        eta = if s_y > 0.0 { s_s / s_y } else { 2.0 * step };
        let decrease = (j - j_new) / j;
        f = f_new;
        j = j_new;
        g = g_new;
        history.push(j);
        if dot(&g, &g).sqrt() <= 1e-14 * gnorm0 || j == 0.0 {
            reason = StopReason::Stationary;
            break;
        }
        if decrease < opts.tol {
            reason = StopReason::Converged;
            break;
        }
    }
    fill_corners(&mut f);
    if reason == StopReason::Stalled {
        log::warn!("boundary recovery stalled after {iterations} iterations at J₁ = {j:.3e}");
    }
    Ok(RecoveryReport {
        datum: f,
        j_history: history,
        iterations,
        reason,
    })
}
