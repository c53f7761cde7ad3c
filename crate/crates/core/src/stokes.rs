//! Symmetric Hermite collocation of the unsteady Stokes problem with slip
//! walls and Dirichlet inlet/outlet, and BDF time integration of the
//! resulting differential-algebraic system
//!
//! ```text
//! M_φ α'(t) + M_Lφ α(t) = f(t),     M_B α(t) = g(t).
//! ```
//!
//! The trial space is spanned by `B_lᶯ Φ(x − ξ)` at boundary centers and
//! `L_lᶯ Φ(x − ξ)` at interior centers, so every trial velocity field is
//! exactly divergence free. Columns are ordered
//! `[B₁ at boundary, B₂ at boundary, L₁ at interior, L₂ at interior]`, and rows
//! of each block follow the same component-major layout.
//!
//! The kernel expansion represents a uniform pressure gradient only through a
//! nearly velocity-free combination of momentum trial functions, which shows up
//! as a spurious growing mode of the semi-discrete system. The expansion is
//! therefore augmented by one exact trial function `(u, p) = (0, x − x̄)` with
//! amplitude `a`, and the kernel pressure is constrained to carry no mean
//! streamwise gradient over the interior nodes. Coefficient vectors have
//! `K + 1` entries `[α; a]`; `a` is algebraic.

use faer::linalg::solvers::PartialPivLu;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::geometry::{build_node_set, FluidDomain, NodeSet, NodeSpec};
use crate::kernels::{boundary_functionals, BasisField, Functional, HybridKernel, KernelConfig};
use crate::linalg;
use crate::series::TimeSeriesField;

type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BdfScheme {
    Bdf1,
    #[default]
    Bdf2,
}

/// How the additive pressure constant is fixed when pressure is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PressureGauge {
    /// Zero mean over the interior collocation nodes.
    #[default]
    InteriorNodeMean,
    /// Zero mean with respect to a fixed tensor quadrature of the fluid domain.
    DomainMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyOptions {
    pub gauge: PressureGauge,
    /// Assembly fails when the 1-norm condition estimate of `[M_φ; M_B]` exceeds this.
    pub max_condition: f64,
    /// Skips the condition estimate (and its extra factorization).
    pub check_condition: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            gauge: PressureGauge::InteriorNodeMean,
            max_condition: 1e18,
            check_condition: true,
        }
    }
}

/// A trial function of the expansion.
#[derive(Debug, Clone)]
pub struct Center {
    pub point: [f64; 2],
    pub basis: BasisField,
}

/// Which block and row a collocation functional lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowSlot {
    Mass(usize),
    Stiffness(usize),
    Boundary(usize),
}

#[derive(Debug, Clone)]
pub struct CollocationSystem {
    kernel: HybridKernel,
    domain: FluidDomain,
    nodes: NodeSet,
    centers: Vec<Center>,
    /// `2N_in × K`
    pub mass: Mat<f64>,
    /// `2N_in × K`
    pub stiffness: Mat<f64>,
    /// `2N_b × K`
    pub boundary: Mat<f64>,
    /// Mean of `∂ₓp` of the kernel part over interior nodes, scaled to the size of `M_B`.
    drop_row: Vec<f64>,
    /// Gauge functional on `[α; a]`.
    gauge: Vec<f64>,
    condition: Option<f64>,
}

impl CollocationSystem {
    pub fn assemble(domain: &FluidDomain, nodes: NodeSet, cfg: &KernelConfig) -> Result<Self> {
        Self::assemble_with(domain, nodes, cfg, &AssemblyOptions::default())
    }

    pub fn assemble_with(
        domain: &FluidDomain,
        nodes: NodeSet,
        cfg: &KernelConfig,
        opts: &AssemblyOptions,
    ) -> Result<Self> {
        let kernel = HybridKernel::new(*cfg)?;
        let (nin, nb) = (nodes.n_interior(), nodes.n_boundary());
        let k = 2 * nin + 2 * nb;

        let mut centers = Vec::with_capacity(k);
        let bfun: Vec<[Functional; 2]> = nodes.boundary.iter().map(|b| boundary_functionals(b, cfg.mu)).collect();
        for l in 0..2 {
            for (b, f) in nodes.boundary.iter().zip(&bfun) {
                centers.push(Center {
                    point: b.point,
                    basis: BasisField::from_center_functional(&f[l]),
                });
            }
        }
        let mom = [Functional::momentum(0, cfg.mu), Functional::momentum(1, cfg.mu)];
        for m in &mom {
            for &p in &nodes.interior {
                centers.push(Center {
                    point: p,
                    basis: BasisField::from_center_functional(m),
                });
            }
        }

        // Row functionals grouped by collocation point.
        struct RowPoint {
            x: [f64; 2],
            rows: Vec<(Functional, RowSlot)>,
        }
        let mut points = Vec::with_capacity(nin + nb);
        for (i, &x) in nodes.interior.iter().enumerate() {
            points.push(RowPoint {
                x,
                rows: vec![
                    (Functional::velocity(0), RowSlot::Mass(i)),
                    (Functional::velocity(1), RowSlot::Mass(nin + i)),
                    (mom[0].clone(), RowSlot::Stiffness(i)),
                    (mom[1].clone(), RowSlot::Stiffness(nin + i)),
                ],
            });
        }
        for (j, (b, f)) in nodes.boundary.iter().zip(&bfun).enumerate() {
            points.push(RowPoint {
                x: b.point,
                rows: vec![(f[0].clone(), RowSlot::Boundary(j)), (f[1].clone(), RowSlot::Boundary(nb + j))],
            });
        }

        let mut mass = Mat::<f64>::zeros(2 * nin, k);
        let mut stiffness = Mat::<f64>::zeros(2 * nin, k);
        let mut boundary = Mat::<f64>::zeros(2 * nb, k);
        for rp in &points {
            let row_u = rp.rows.iter().map(|(f, _)| f.u[0].order().max(f.u[1].order())).max().unwrap_or(0);
            let row_p = rp.rows.iter().map(|(f, _)| f.p.order()).max().unwrap_or(0);
            // Centers come in two component groups sharing a point; jets are shared.
            let half = k / 2;
            let nbc = nb;
            for c in 0..half {
                let (c0, c1) = if c < nbc { (c, nb + c) } else { (nb + c, nb + c + nin) };
                let xi = centers[c0].point;
                let col_u = centers[c0].basis.psi_order().max(centers[c1].basis.psi_order());
                let col_p = centers[c0].basis.pres.order().max(centers[c1].basis.pres.order());
                let delta = [rp.x[0] - xi[0], rp.x[1] - xi[1]];
                let psi = kernel.psi_jet(delta, row_u + col_u)?;
                let phi = kernel.phi_jet(delta, row_p + col_p)?;
                for col in [c0, c1] {
                    let basis = &centers[col].basis;
                    for (f, slot) in &rp.rows {
                        let v = kernel.entry_with(f, basis, &psi, &phi);
                        match *slot {
                            RowSlot::Mass(r) => mass[(r, col)] = v,
                            RowSlot::Stiffness(r) => stiffness[(r, col)] = v,
                            RowSlot::Boundary(r) => boundary[(r, col)] = v,
                        }
                    }
                }
            }
        }

        let mut sys = Self {
            kernel,
            domain: domain.clone(),
            nodes,
            centers,
            mass,
            stiffness,
            boundary,
            drop_row: Vec::new(),
            gauge: vec![0.0; k + 1],
            condition: None,
        };
        let w = 1.0 / nin.max(1) as f64;
        let pts = sys.nodes.interior.clone();
        let mut r = sys.weighted_raw_rows(&Functional::derivative(2, 1, 0), pts.iter().map(|&p| (p, w)))?;
        r.truncate(k);
        let bmax = sys.boundary.col_iter().flat_map(|c| c.iter().map(|v| v.abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
        let rmax = linalg::norm_inf(&r);
        if rmax > 0.0 {
            r.iter_mut().for_each(|v| *v *= bmax.max(1.0) / rmax);
        }
        sys.drop_row = r;
        sys.gauge = match opts.gauge {
            PressureGauge::InteriorNodeMean => {
                let pts = sys.nodes.interior.clone();
                let w = 1.0 / pts.len().max(1) as f64;
                sys.weighted_raw_rows(&Functional::pressure(), pts.iter().map(|&p| (p, w)))?
            }
            PressureGauge::DomainMean => {
                let q = domain_quadrature(domain, 64, 6);
                let area: f64 = q.iter().map(|(_, w)| w).sum();
                sys.weighted_raw_rows(&Functional::pressure(), q.iter().map(|&(p, w)| (p, w / area)))?
            }
        };
        if opts.check_condition {
            let a = sys.constraint_gram();
            let lu = a.partial_piv_lu();
            let cond = linalg::cond1_estimate(a.as_ref(), &lu);
            sys.condition = Some(cond);
            if !cond.is_finite() || cond > opts.max_condition {
                return Err(SolverError::RankDeficient { condition: cond });
            }
        }
        Ok(sys)
    }

    pub fn n_interior(&self) -> usize {
        self.nodes.n_interior()
    }

    pub fn n_boundary(&self) -> usize {
        self.nodes.n_boundary()
    }

    /// Number of kernel coefficients `K = 2N_b + 2N_in`.
    pub fn n_coeffs(&self) -> usize {
        self.centers.len()
    }

    /// Length `K + 1` of a coefficient vector `[α; a]`.
    pub fn n_unknowns(&self) -> usize {
        self.centers.len() + 1
    }

    /// `M_φ α` (interior velocities).
    pub fn apply_mass(&self, x: &[f64]) -> Vec<f64> {
        linalg::matvec(self.mass.as_ref(), &x[..self.n_coeffs()])
    }

    /// `M_Lφ α + a e₁` (momentum residual without the time derivative).
    pub fn apply_stiffness(&self, x: &[f64]) -> Vec<f64> {
        let k = self.n_coeffs();
        let mut y = linalg::matvec(self.stiffness.as_ref(), &x[..k]);
        y[..self.n_interior()].iter_mut().for_each(|v| *v += x[k]);
        y
    }

    /// `M_B α − g`, accumulated with compensated sums.
    pub fn boundary_residual(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut r = linalg::residual_compensated(self.boundary.as_ref(), &x[..self.n_coeffs()], g);
        r.iter_mut().for_each(|v| *v = -*v);
        r
    }

    /// `M_B α`.
    pub fn apply_boundary(&self, x: &[f64]) -> Vec<f64> {
        linalg::matvec(self.boundary.as_ref(), &x[..self.n_coeffs()])
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    pub fn domain(&self) -> &FluidDomain {
        &self.domain
    }

    pub fn kernel(&self) -> &HybridKernel {
        &self.kernel
    }

    pub fn centers(&self) -> &[Center] {
        &self.centers
    }

    /// 1-norm condition estimate of `[M_φ; M_B]` computed at assembly.
    pub fn condition_estimate(&self) -> Option<f64> {
        self.condition
    }

    /// The square matrix `[M_φ; M_B]`.
    pub fn constraint_gram(&self) -> Mat<f64> {
        stack(&self.mass, &self.boundary, 1.0)
    }

    /// `[M_φ/(βΔt) + M_Lφ, e₁; M_B, 0; R, 0]` acting on `[α; a]`.
    pub fn step_matrix(&self, beta_dt: f64) -> Mat<f64> {
        self.augmented(1.0 / beta_dt)
    }

    /// `[M_Lφ, e₁; M_B, 0; R, 0]`.
    pub fn steady_matrix(&self) -> Mat<f64> {
        self.augmented(0.0)
    }

    fn augmented(&self, mass_scale: f64) -> Mat<f64> {
        let (k, nin, nb) = (self.n_coeffs(), self.n_interior(), self.n_boundary());
        Mat::from_fn(k + 1, k + 1, |i, j| {
            if i < 2 * nin {
                if j == k {
                    if i < nin {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    mass_scale * self.mass[(i, j)] + self.stiffness[(i, j)]
                }
            } else if j == k {
                0.0
            } else if i < 2 * nin + 2 * nb {
                self.boundary[(i - 2 * nin, j)]
            } else {
                self.drop_row[j]
            }
        })
    }

    /// Column pairs `(B₁/L₁, B₂/L₂)` sharing a center point.
    fn center_pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let (nb, nin) = (self.n_boundary(), self.n_interior());
        (0..nb + nin).map(move |c| if c < nb { (c, nb + c) } else { (nb + c, nb + c + nin) })
    }

    /// Row vector `ℓ_k = A^x[col_k](x)` on `[α; a]` without gauge correction.
    fn raw_row(&self, f: &Functional, x: [f64; 2]) -> Result<Vec<f64>> {
        let f_u = f.u[0].order().max(f.u[1].order());
        let f_p = f.p.order();
        let mut row = vec![0.0; self.n_unknowns()];
        row[self.n_coeffs()] = f
            .p
            .terms()
            .iter()
            .map(|&(c, a, b)| match (a, b) {
                (0, 0) => c * x[0],
                (1, 0) => c,
                _ => 0.0,
            })
            .sum();
        for (c0, c1) in self.center_pairs() {
            let (b0, b1) = (&self.centers[c0].basis, &self.centers[c1].basis);
            let xi = self.centers[c0].point;
            let delta = [x[0] - xi[0], x[1] - xi[1]];
            let psi = self.kernel.psi_jet(delta, f_u + b0.psi_order().max(b1.psi_order()))?;
            let phi = self.kernel.phi_jet(delta, f_p + b0.pres.order().max(b1.pres.order()))?;
            row[c0] = self.kernel.entry_with(f, b0, &psi, &phi);
            row[c1] = self.kernel.entry_with(f, b1, &psi, &phi);
        }
        Ok(row)
    }

    fn weighted_raw_rows(&self, f: &Functional, pts: impl Iterator<Item = ([f64; 2], f64)>) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.n_unknowns()];
        for (p, w) in pts {
            let r = self.raw_row(f, p)?;
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += w * v);
        }
        Ok(acc)
    }

    /// Row vector mapping coefficients to `A(u, p̃)(x)` with the gauged pressure `p̃`.
    pub fn functional_row(&self, f: &Functional, x: [f64; 2]) -> Result<Vec<f64>> {
        if !self.domain.contains(x) {
            return Err(SolverError::OutsideDomain(x[0], x[1]));
        }
        let mut row = self.raw_row(f, x)?;
        let c0: f64 = f.p.terms().iter().filter(|t| t.1 == 0 && t.2 == 0).map(|t| t.0).sum();
        if c0 != 0.0 {
            row.iter_mut().zip(&self.gauge).for_each(|(r, g)| *r -= c0 * g);
        }
        Ok(row)
    }

    /// Evaluation matrix (`points × (K + 1)`) of a functional.
    pub fn functional_matrix(&self, f: &Functional, xs: &[[f64; 2]]) -> Result<Mat<f64>> {
        let mut m = Mat::<f64>::zeros(xs.len(), self.n_unknowns());
        for (i, &x) in xs.iter().enumerate() {
            let row = self.functional_row(f, x)?;
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn eval_functional(&self, f: &Functional, alpha: &[f64], x: [f64; 2]) -> Result<f64> {
        let row = self.functional_row(f, x)?;
        Ok(row.iter().zip(alpha).map(|(a, b)| a * b).sum())
    }

    pub fn velocity_at(&self, alpha: &[f64], x: [f64; 2]) -> Result<[f64; 2]> {
        Ok([
            self.eval_functional(&Functional::velocity(0), alpha, x)?,
            self.eval_functional(&Functional::velocity(1), alpha, x)?,
        ])
    }

    pub fn pressure_at(&self, alpha: &[f64], x: [f64; 2]) -> Result<f64> {
        self.eval_functional(&Functional::pressure(), alpha, x)
    }

    pub fn eval_velocity(&self, traj: &CoefficientTrajectory, x: [f64; 2], t: f64) -> Result<[f64; 2]> {
        self.velocity_at(&traj.at(t)?, x)
    }

    pub fn eval_pressure(&self, traj: &CoefficientTrajectory, x: [f64; 2], t: f64) -> Result<f64> {
        self.pressure_at(&traj.at(t)?, x)
    }

    /// Samples a functional on a set of points over a set of times.
    pub fn functional_trace(
        &self,
        traj: &CoefficientTrajectory,
        f: &Functional,
        points: &[[f64; 2]],
        positions: Vec<f64>,
        times: Vec<f64>,
    ) -> Result<TimeSeriesField> {
        let e = self.functional_matrix(f, points)?;
        let at_steps = &e * &traj.coeffs;
        let mut out = TimeSeriesField::zeros(positions, times.clone());
        for (it, &t) in times.iter().enumerate() {
            let (i0, w) = traj.bracket(t)?;
            let i1 = (i0 + 1).min(traj.times.len() - 1);
            let row = out.row_mut(it);
            for (ix, v) in row.iter_mut().enumerate() {
                *v = (1.0 - w) * at_steps[(ix, i0)] + w * at_steps[(ix, i1)];
            }
        }
        Ok(out)
    }

    /// `(σ(u, p)ν)·ν = 2μ ∂u₂/∂y − p` on the flat upper wall at abscissae `xs`.
    pub fn normal_stress_trace(&self, traj: &CoefficientTrajectory, xs: &[f64], times: &[f64]) -> Result<TimeSeriesField> {
        let d = self.domain.duct.diameter;
        let pts: Vec<[f64; 2]> = xs.iter().map(|&x| [x, d]).collect();
        let f = Functional::normal_stress([0.0, 1.0], self.kernel.config().mu);
        self.functional_trace(traj, &f, &pts, xs.to_vec(), times.to_vec())
    }

    /// `u·τ` with `τ = (1, 0)` on the flat upper wall.
    pub fn tangential_velocity_trace(
        &self,
        traj: &CoefficientTrajectory,
        xs: &[f64],
        times: &[f64],
    ) -> Result<TimeSeriesField> {
        let d = self.domain.duct.diameter;
        let pts: Vec<[f64; 2]> = xs.iter().map(|&x| [x, d]).collect();
        self.functional_trace(traj, &Functional::velocity(0), &pts, xs.to_vec(), times.to_vec())
    }

    /// Solves `M_Lφ α + a e₁ = f`, `M_B α = g`, `R α = 0`.
    pub fn steady_solve(&self, momentum: &[f64], boundary: &[f64]) -> Result<Vec<f64>> {
        let a = self.steady_matrix();
        let lu = a.partial_piv_lu();
        let rhs: Vec<f64> = momentum.iter().chain(boundary).copied().chain([0.0]).collect();
        let x = linalg::solve(&lu, &rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Step {
                step: 0,
                time: f64::INFINITY,
                detail: "steady solve produced non-finite coefficients".into(),
            });
        }
        Ok(x)
    }

    /// Orthonormal basis of `ker [M_B; R]` (`K × (2N_in − 1)`).
    pub fn boundary_null_space(&self) -> Result<Mat<f64>> {
        let nb2 = self.boundary.nrows();
        let c = Mat::from_fn(nb2 + 1, self.n_coeffs(), |i, j| {
            if i < nb2 {
                self.boundary[(i, j)]
            } else {
                self.drop_row[j]
            }
        });
        linalg::null_space(c.as_ref()).ok_or_else(|| SolverError::Eigen("SVD of the constraint rows failed".into()))
    }

    /// Eigenvalues of the propagation operator `−(QᵀM_φ Z)⁻¹ QᵀM_Lφ Z`, where
    /// `Z` spans the homogeneous constraints and `Q` spans `e₁^⊥`, which
    /// eliminates the algebraic amplitude `a`.
    pub fn reduced_propagation_eigenvalues(&self) -> Result<Vec<(f64, f64)>> {
        let z = self.boundary_null_space()?;
        let (nin, nin2) = (self.n_interior(), 2 * self.n_interior());
        let e = Mat::from_fn(1, nin2, |_, j| if j < nin { 1.0 } else { 0.0 });
        let q = linalg::null_space(e.as_ref()).ok_or_else(|| SolverError::Eigen("SVD of e₁ failed".into()))?;
        let qt = q.transpose().to_owned();
        let mz = &qt * (&self.mass * &z);
        let lz = &qt * (&self.stiffness * &z);
        let lu = mz.partial_piv_lu();
        let mut op = -lz;
        faer::linalg::solvers::Solve::solve_in_place(&lu, op.as_mut());
        if op.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(SolverError::Eigen("mass block singular on the boundary null space".into()));
        }
        let ev = op.eigenvalues().map_err(|e| SolverError::Eigen(format!("{e:?}")))?;
        Ok(ev.into_iter().map(|c| (c.re, c.im)).collect())
    }

    /// Tensor quadrature of `|u|²` over the fluid domain.
    pub fn energy_functional(&self, nx: usize, ny: usize) -> Result<EnergyFunctional> {
        let q = domain_quadrature(&self.domain, nx, ny);
        let pts: Vec<[f64; 2]> = q.iter().map(|p| p.0).collect();
        Ok(EnergyFunctional {
            weights: q.iter().map(|p| p.1).collect(),
            u1: self.functional_matrix(&Functional::velocity(0), &pts)?,
            u2: self.functional_matrix(&Functional::velocity(1), &pts)?,
        })
    }
}

fn stack(top: &Mat<f64>, bottom: &Mat<f64>, s: f64) -> Mat<f64> {
    let nt = top.nrows();
    Mat::from_fn(nt + bottom.nrows(), top.ncols(), |i, j| {
        if i < nt {
            top[(i, j)]
        } else {
            s * bottom[(i - nt, j)]
        }
    })
}

/// Gauss–Legendre tensor rule on the wall-bounded domain: `nx` panels of two
/// points in `x`, `ny` points across the gap.
pub fn domain_quadrature(domain: &FluidDomain, nx: usize, ny: usize) -> Vec<([f64; 2], f64)> {
    let (gx, wx) = gauss_legendre(2);
    let (gy, wy) = gauss_legendre(ny.max(1));
    let l = domain.duct.length;
    let h = l / nx as f64;
    let mut out = Vec::with_capacity(nx * 2 * ny);
    for p in 0..nx {
        let a = p as f64 * h;
        for (xg, wxg) in gx.iter().zip(&wx) {
            let x = a + 0.5 * h * (xg + 1.0);
            let (lo, hi) = (domain.lower_wall(x), domain.upper_wall(x));
            let gap = hi - lo;
            for (yg, wyg) in gy.iter().zip(&wy) {
                let y = lo + 0.5 * gap * (yg + 1.0);
                out.push(([x, y], 0.25 * h * gap * wxg * wyg));
            }
        }
    }
    out
}

/// Nodes and weights on `[−1, 1]` by Newton iteration on Legendre polynomials.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// `E(α) = ∫ |u|²` by a fixed quadrature.
#[derive(Debug, Clone)]
pub struct EnergyFunctional {
    weights: Vec<f64>,
    u1: Mat<f64>,
    u2: Mat<f64>,
}

impl EnergyFunctional {
    pub fn eval(&self, alpha: &[f64]) -> f64 {
        let a = linalg::matvec(self.u1.as_ref(), alpha);
        let b = linalg::matvec(self.u2.as_ref(), alpha);
        self.weights.iter().zip(a.iter().zip(&b)).map(|(w, (x, y))| w * (x * x + y * y)).sum()
    }
}

/// Right-hand sides of the collocated system at time `t`.
pub trait Sources {
    /// Momentum rows (length `2N_in`).
    fn momentum(&self, t: f64, out: &mut [f64]);
    /// Boundary rows (length `2N_b`).
    fn boundary(&self, t: f64, out: &mut [f64]);
}

/// Scalar inflow signal, applied as the uniform horizontal velocity `(g(t), 0)`
/// on inlet and outlet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InflowProfile {
    /// `g(t) = amplitude (cos(2π f t + π) + 1)`.
    Pulsatile { amplitude: f64, frequency: f64 },
    Constant { value: f64 },
    Zero,
}

impl Default for InflowProfile {
    fn default() -> Self {
        Self::Pulsatile {
            amplitude: 1.0,
            frequency: 1.0,
        }
    }
}

impl InflowProfile {
    pub fn g(&self, t: f64) -> f64 {
        match *self {
            Self::Pulsatile { amplitude, frequency } => {
                amplitude * ((2.0 * std::f64::consts::PI * frequency * t + std::f64::consts::PI).cos() + 1.0)
            }
            Self::Constant { value } => value,
            Self::Zero => 0.0,
        }
    }

    pub fn dg(&self, t: f64) -> f64 {
        match *self {
            Self::Pulsatile { amplitude, frequency } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                -amplitude * w * (w * t + std::f64::consts::PI).sin()
            }
            _ => 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match *self {
            Self::Pulsatile { amplitude, frequency } => Self::Pulsatile {
                amplitude: amplitude * s,
                frequency,
            },
            Self::Constant { value } => Self::Constant { value: value * s },
            Self::Zero => Self::Zero,
        }
    }

    /// Unforced flow driven by this signal on `sys`.
    pub fn sources<'a>(&'a self, sys: &'a CollocationSystem) -> InflowSources<'a> {
        InflowSources { profile: self, sys }
    }
}

pub struct InflowSources<'a> {
    profile: &'a InflowProfile,
    sys: &'a CollocationSystem,
}

impl Sources for InflowSources<'_> {
    fn momentum(&self, _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn boundary(&self, t: f64, out: &mut [f64]) {
        let g = self.profile.g(t);
        let nb = self.sys.n_boundary();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, b) in self.sys.nodes.boundary.iter().enumerate() {
            if b.tag.is_dirichlet() {
                out[j] = g;
                out[nb + j] = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub scheme: BdfScheme,
    /// Iterative-refinement sweeps per step, with compensated residuals.
    #[serde(default = "one")]
    pub refinement: usize,
}

fn one() -> usize {
    1
}

impl StepOptions {
    pub fn new(dt: f64, t_end: f64, scheme: BdfScheme) -> Self {
        Self {
            dt,
            t_end,
            scheme,
            refinement: 1,
        }
    }

    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || !self.dt.is_finite() || !self.t_end.is_finite() {
            return Err(SolverError::TimeGrid(format!("dt = {}, T = {}", self.dt, self.t_end)));
        }
        let n = (self.t_end / self.dt).round();
        if ((n * self.dt) - self.t_end).abs() > 1e-9 * self.t_end.max(self.dt) {
            return Err(SolverError::TimeGrid(format!("T = {} is not a multiple of dt = {}", self.t_end, self.dt)));
        }
        Ok(n as usize)
    }
}

/// Coefficients `α(t_k)` on the uniform grid `t_k = kΔt`.
#[derive(Debug, Clone)]
pub struct CoefficientTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    /// `(K + 1) × (n_steps + 1)`, one column per time level.
    pub coeffs: Mat<f64>,
    /// `max_k ‖M_B α(t_k) − g(t_k)‖∞`.
    pub max_boundary_residual: f64,
    /// `max_k ‖g(t_k)‖∞`.
    pub max_boundary_data: f64,
}

impl CoefficientTrajectory {
    pub fn n_levels(&self) -> usize {
        self.times.len()
    }

    pub fn level(&self, k: usize) -> &[f64] {
        self.coeffs.col_as_slice(k)
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        crate::series::bracket(&self.times, t)
            .ok_or_else(|| SolverError::TimeGrid(format!("t = {t} outside [0, {}]", self.t_end())))
    }

    /// Coefficients at `t`, linear between levels.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let (i, w) = self.bracket(t)?;
        let j = (i + 1).min(self.times.len() - 1);
        let (a, b) = (self.level(i), self.level(j));
        Ok(a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect())
    }
}

/// A factored, row-equilibrated step matrix for one value of `βΔt`.
pub struct Stepper<'a> {
    sys: &'a CollocationSystem,
    beta_dt: f64,
    /// `D A` with `D` scaling every row to unit max-norm.
    matrix: Mat<f64>,
    row_scale: Vec<f64>,
    lu: PartialPivLu<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a CollocationSystem, beta_dt: f64) -> Self {
        let mut matrix = sys.step_matrix(beta_dt);
        let n = matrix.nrows();
        let mut row_scale = vec![0.0f64; n];
        for j in 0..n {
            for (i, s) in row_scale.iter_mut().enumerate() {
                *s = s.max(matrix[(i, j)].abs());
            }
        }
        row_scale.iter_mut().for_each(|s| *s = if *s > 0.0 { 1.0 / *s } else { 1.0 });
        for j in 0..n {
            for (i, s) in row_scale.iter().enumerate() {
                matrix[(i, j)] *= s;
            }
        }
        let lu = matrix.partial_piv_lu();
        Self {
            sys,
            beta_dt,
            matrix,
            row_scale,
            lu,
        }
    }

    /// Solves for `α^{n+1}` given the extrapolant and sources at `t_{n+1}`.
    pub fn step(&self, extrapolant: &[f64], momentum: &[f64], boundary: &[f64], refinement: usize) -> Vec<f64> {
        let me = self.sys.apply_mass(extrapolant);
        let rhs: Vec<f64> = momentum
            .iter()
            .zip(&me)
            .map(|(f, m)| f + m / self.beta_dt)
            .chain(boundary.iter().copied())
            .chain([0.0])
            .zip(&self.row_scale)
            .map(|(b, s)| b * s)
            .collect();
        let mut x = linalg::solve(&self.lu, &rhs);
        for _ in 0..refinement {
            let r = linalg::residual_compensated(self.matrix.as_ref(), &x, &rhs);
            let dx = linalg::solve(&self.lu, &r);
            x.iter_mut().zip(dx).for_each(|(a, d)| *a += d);
        }
        x
    }
}

/// Integrates from `[α; a](0) = alpha0` (default zero) to `T`.
pub fn integrate(
    sys: &CollocationSystem,
    sources: &dyn Sources,
    opts: &StepOptions,
    alpha0: Option<&[f64]>,
) -> Result<CoefficientTrajectory> {
    let n = opts.n_steps()?;
    let k = sys.n_unknowns();
    let (nin2, nb2) = (2 * sys.n_interior(), 2 * sys.n_boundary());
    let mut coeffs = Mat::<f64>::zeros(k, n + 1);
    if let Some(a0) = alpha0 {
        if a0.len() != k {
            return Err(SolverError::TimeGrid(format!("initial coefficients have length {}, expected {k}", a0.len())));
        }
        coeffs.col_as_slice_mut(0).copy_from_slice(a0);
    }
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * opts.dt).collect();

    let bdf1 = Stepper::new(sys, opts.dt);
    let bdf2 = match opts.scheme {
        BdfScheme::Bdf2 if n > 1 => Some(Stepper::new(sys, 2.0 / 3.0 * opts.dt)),
        _ => None,
    };

    let mut f = vec![0.0; nin2];
    let mut g = vec![0.0; nb2];
    sources.boundary(0.0, &mut g);
    let mut max_res = linalg::norm_inf(&sys.boundary_residual(coeffs.col_as_slice(0), &g));
    let mut max_g = linalg::norm_inf(&g);
    let blowup = 1e6;
    for step in 0..n {
        let t1 = times[step + 1];
        sources.momentum(t1, &mut f);
        sources.boundary(t1, &mut g);
        max_g = max_g.max(linalg::norm_inf(&g));
        let next = match (&bdf2, step) {
            (Some(s2), s) if s >= 1 => {
                let a = coeffs.col_as_slice(step);
                let b = coeffs.col_as_slice(step - 1);
                let ext: Vec<f64> = a.iter().zip(b).map(|(x, y)| (4.0 * x - y) / 3.0).collect();
                s2.step(&ext, &f, &g, opts.refinement)
            }
            _ => bdf1.step(coeffs.col_as_slice(step), &f, &g, opts.refinement),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Step {
                step: step + 1,
                time: t1,
                detail: "non-finite coefficients".into(),
            });
        }
        let u = sys.apply_mass(&next);
        let unorm = linalg::norm_inf(&u);
        if unorm > blowup * (1.0 + max_g) {
            return Err(SolverError::Divergence { step: step + 1, norm: unorm });
        }
        let res = linalg::norm_inf(&sys.boundary_residual(&next, &g));
        max_res = max_res.max(res);
        coeffs.col_as_slice_mut(step + 1).copy_from_slice(&next);
    }
    Ok(CoefficientTrajectory {
        dt: opts.dt,
        times,
        coeffs,
        max_boundary_residual: max_res,
        max_boundary_data: max_g,
    })
}

/// Forward-solver section of the run-config: resolution, kernel, time grid and forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSolverConfig {
    pub nodes: NodeSpec,
    pub kernel: KernelConfig,
    pub assembly: AssemblyOptions,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: BdfScheme,
    pub refinement: usize,
    pub inflow: InflowProfile,
}

impl Default for FlowSolverConfig {
    fn default() -> Self {
        Self {
            nodes: NodeSpec::new(918),
            kernel: KernelConfig::default(),
            assembly: AssemblyOptions::default(),
            dt: 1.0 / 200.0,
            t_end: 5.0,
            scheme: BdfScheme::Bdf2,
            refinement: 1,
            inflow: InflowProfile::default(),
        }
    }
}

impl FlowSolverConfig {
    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            refinement: self.refinement,
            ..StepOptions::new(self.dt, self.t_end, self.scheme)
        }
    }
}

/// Builds nodes on `domain`, assembles and integrates from rest.
pub fn simulate(domain: &FluidDomain, cfg: &FlowSolverConfig) -> Result<(CollocationSystem, CoefficientTrajectory)> {
    let nodes = build_node_set(domain, &cfg.nodes)?;
    let sys = CollocationSystem::assemble_with(domain, nodes, &cfg.kernel, &cfg.assembly)?;
    let traj = integrate(&sys, &cfg.inflow.sources(&sys), &cfg.step_options(), None)?;
    Ok((sys, traj))
}
