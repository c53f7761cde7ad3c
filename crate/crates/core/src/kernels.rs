//! Divergence-free hybrid kernels and the action of linear differential
//! functionals on them.
//!
//! The velocity kernel is `Φ_Div = (−ΔI + ∇∇ᵀ) ψ` with the hybrid potential
//! `ψ(r) = exp(−c₁ r²) + γ₁ r^{2n+1}`; the pressure kernel is
//! `φ_p(r) = exp(−c₂ r) + γ₂ r^{2m+1}` (or its Gaussian variant). Both are
//! radial, so every derivative is computed from the profile `g(s)`, `s = r²`,
//! through the closed form
//!
//! ```text
//! ∂ₓᵃ ∂ᵧᵇ g(x² + y²) = Σᵢ Σⱼ C(a,i) C(b,j) (2x)^{a−2i} (2y)^{b−2j} g^{(a+b−i−j)}(s),
//! C(a,i) = a! / (i! (a − 2i)!).
//! ```
//!
//! Differential functionals are constant-coefficient polynomials in `∂ₓ, ∂ᵧ`
//! acting on `(u₁, u₂, p)`. Applying a functional `A` in `x` to a basis
//! function generated by a functional `B` acting on `ξ` reduces to evaluating
//! a polynomial in the derivatives of `ψ` and `φ_p` at `δ = x − ξ`.

use serde::{Deserialize, Serialize};

use crate::error::KernelError;

type Result<T> = std::result::Result<T, KernelError>;

/// Highest derivative order of the radial potentials the jets support.
pub const MAX_ORDER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PressureKernel {
    /// `exp(−c₂ r)`: not differentiable at `r = 0`.
    Exponential,
    /// `exp(−c₂ r²)`.
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub c1: f64,
    pub c2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Velocity polyharmonic exponent: term `r^{2n+1}`.
    pub n: u32,
    /// Pressure polyharmonic exponent: term `r^{2m+1}`.
    pub m: u32,
    pub mu: f64,
    #[serde(default)]
    pub pressure: PressureKernel,
    /// Weight `κ` of the pressure block: the combined kernel is `diag(Φ_Div, κ φ_p)`.
    /// Unset means `κ = μ²`, which keeps the pressure part of a momentum trial
    /// function on the physical scale `p ~ μ u`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure_weight: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            c1: 0.5,
            c2: 0.5,
            gamma1: 1e-4,
            gamma2: 1e-4,
            n: 3,
            m: 2,
            mu: 0.1,
            pressure: PressureKernel::Gaussian,
            pressure_weight: None,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KernelError::Config(msg));
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return bad(format!("shape parameters must be positive (c1 = {}, c2 = {})", self.c1, self.c2));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return bad("polyharmonic weights must be non-negative".into());
        }
        if self.n < 2 {
            return bad(format!("velocity exponent n = {} must be at least 2", self.n));
        }
        if self.m < 1 {
            return bad(format!("pressure exponent m = {} must be at least 1", self.m));
        }
        let kappa = self.pressure_weight();
        if !(kappa > 0.0 && kappa.is_finite()) {
            return bad(format!("pressure weight {kappa} must be positive"));
        }
        if !(self.mu > 0.0) {
            return bad(format!("viscosity {} must be positive", self.mu));
        }
        Ok(())
    }

    pub fn pressure_weight(&self) -> f64 {
        self.pressure_weight.unwrap_or(self.mu * self.mu)
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }
}

/// A radial profile written as a function of `s = r²`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Profile {
    /// `exp(−c s)`
    Gaussian { c: f64 },
    /// `s^q`, `q = k + 1/2`, i.e. the odd power `r^{2k+1}`.
    OddPower { k: u32 },
    /// `exp(−c √s)`
    ExpRadius { c: f64 },
}

impl Profile {
    /// `g^{(k)}(s)`.
    fn deriv(&self, s: f64, k: usize) -> f64 {
        match *self {
            Profile::Gaussian { c } => (-c).powi(k as i32) * (-c * s).exp(),
            Profile::OddPower { k: p } => {
                let q = p as f64 + 0.5;
                let mut coef = 1.0;
                for j in 0..k {
                    coef *= q - j as f64;
                }
                if s == 0.0 {
                    return if (k as f64) < q { 0.0 } else { f64::INFINITY };
                }
                coef * s.powf(q - k as f64)
            }
            Profile::ExpRadius { c } => {
                let r = s.sqrt();
                let e = (-c * r).exp();
                match k {
                    0 => e,
                    _ if r == 0.0 => f64::INFINITY,
                    1 => -c * e / (2.0 * r),
                    2 => c * e * (c * r + 1.0) / (4.0 * r.powi(3)),
                    3 => -c * e * (c * c * r * r + 3.0 * c * r + 3.0) / (8.0 * r.powi(5)),
                    _ => f64::NAN,
                }
            }
        }
    }
}

/// All partial derivatives `∂ₓᵃ ∂ᵧᵇ f` with `a + b ≤ order` at one point.
#[derive(Debug, Clone, Copy)]
pub struct Jet {
    order: usize,
    d: [[f64; MAX_ORDER + 1]; MAX_ORDER + 1],
}

impl Jet {
    fn zero(order: usize) -> Self {
        Self {
            order,
            d: [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        debug_assert!(a + b <= self.order);
        self.d[a][b]
    }

    fn accumulate(&mut self, weight: f64, profile: &Profile, x: f64, y: f64) {
        let order = self.order;
        let s = x * x + y * y;
        let mut g = [0.0; MAX_ORDER + 1];
        for (k, gk) in g.iter_mut().enumerate().take(order + 1) {
            *gk = profile.deriv(s, k);
        }
        let mut px = [1.0; MAX_ORDER + 1];
        let mut py = [1.0; MAX_ORDER + 1];
        for e in 1..=order {
            px[e] = px[e - 1] * 2.0 * x;
            py[e] = py[e - 1] * 2.0 * y;
        }
        for a in 0..=order {
            for b in 0..=(order - a) {
                let mut sum = 0.0;
                for i in 0..=a / 2 {
                    let ea = a - 2 * i;
                    if ea > 0 && x == 0.0 {
                        continue;
                    }
                    for j in 0..=b / 2 {
                        let eb = b - 2 * j;
                        if eb > 0 && y == 0.0 {
                            continue;
                        }
                        sum += HERMITE_COEF[a][i] * HERMITE_COEF[b][j] * px[ea] * py[eb] * g[a + b - i - j];
                    }
                }
                self.d[a][b] += weight * sum;
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        for a in 0..=self.order {
            for b in 0..=(self.order - a) {
                if !self.d[a][b].is_finite() {
                    return Err(KernelError::Singular { order: a + b });
                }
            }
        }
        Ok(())
    }
}

/// `C(a, i) = a! / (i! (a − 2i)!)`.
const HERMITE_COEF: [[f64; MAX_ORDER / 2 + 1]; MAX_ORDER + 1] = hermite_table();

const fn hermite_table() -> [[f64; MAX_ORDER / 2 + 1]; MAX_ORDER + 1] {
    let mut t = [[0.0; MAX_ORDER / 2 + 1]; MAX_ORDER + 1];
    let mut a = 0;
    while a <= MAX_ORDER {
        let mut i = 0;
        while 2 * i <= a {
            t[a][i] = (factorial(a) / (factorial(i) * factorial(a - 2 * i))) as f64;
            i += 1;
        }
        a += 1;
    }
    t
}

const fn factorial(n: usize) -> u64 {
    let mut f = 1u64;
    let mut k = 2;
    while k <= n {
        f *= k as u64;
        k += 1;
    }
    f
}

/// Constant-coefficient differential polynomial `Σ c ∂ₓᵃ ∂ᵧᵇ`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffPoly {
    terms: Vec<(f64, u8, u8)>,
}

impl DiffPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::monomial(c, 0, 0)
    }

    pub fn monomial(c: f64, a: u8, b: u8) -> Self {
        let mut p = Self::zero();
        p.push(c, a, b);
        p
    }

    /// `cx ∂ₓ + cy ∂ᵧ`
    pub fn directional(d: [f64; 2]) -> Self {
        let mut p = Self::zero();
        p.push(d[0], 1, 0);
        p.push(d[1], 0, 1);
        p
    }

    pub fn laplacian(scale: f64) -> Self {
        let mut p = Self::zero();
        p.push(scale, 2, 0);
        p.push(scale, 0, 2);
        p
    }

    fn push(&mut self, c: f64, a: u8, b: u8) {
        if c == 0.0 {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.1 == a && t.2 == b) {
            t.0 += c;
            if t.0 == 0.0 {
                self.terms.retain(|t| t.0 != 0.0);
            }
        } else {
            self.terms.push((c, a, b));
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[(f64, u8, u8)] {
        &self.terms
    }

    pub fn order(&self) -> usize {
        self.terms.iter().map(|t| (t.1 + t.2) as usize).max().unwrap_or(0)
    }

    pub fn add(&self, other: &DiffPoly) -> DiffPoly {
        let mut p = self.clone();
        for &(c, a, b) in &other.terms {
            p.push(c, a, b);
        }
        p
    }

    pub fn scale(&self, s: f64) -> DiffPoly {
        let mut p = Self::zero();
        for &(c, a, b) in &self.terms {
            p.push(c * s, a, b);
        }
        p
    }

    pub fn mul(&self, other: &DiffPoly) -> DiffPoly {
        let mut p = Self::zero();
        for &(c1, a1, b1) in &self.terms {
            for &(c2, a2, b2) in &other.terms {
                p.push(c1 * c2, a1 + a2, b1 + b2);
            }
        }
        p
    }

    /// The same operator acting on the second argument of `k(x − ξ)`.
    pub fn reflect(&self) -> DiffPoly {
        let mut p = Self::zero();
        for &(c, a, b) in &self.terms {
            let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
            p.push(sign * c, a, b);
        }
        p
    }

    #[inline]
    pub fn eval(&self, jet: &Jet) -> f64 {
        self.terms.iter().map(|&(c, a, b)| c * jet.get(a as usize, b as usize)).sum()
    }
}

/// A linear functional on fields `(u₁, u₂, p)` evaluated pointwise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Functional {
    pub u: [DiffPoly; 2],
    pub p: DiffPoly,
}

impl Functional {
    pub fn velocity(i: usize) -> Self {
        let mut f = Self::default();
        f.u[i] = DiffPoly::constant(1.0);
        f
    }

    pub fn pressure() -> Self {
        Self {
            p: DiffPoly::constant(1.0),
            ..Self::default()
        }
    }

    /// Momentum component `i` of `L(u, p) = −μΔu + ∇p`.
    pub fn momentum(i: usize, mu: f64) -> Self {
        let mut f = Self::default();
        f.u[i] = DiffPoly::laplacian(-mu);
        f.p = if i == 0 { DiffPoly::monomial(1.0, 1, 0) } else { DiffPoly::monomial(1.0, 0, 1) };
        f
    }

    /// `u · n`
    pub fn normal_velocity(n: [f64; 2]) -> Self {
        Self {
            u: [DiffPoly::constant(n[0]), DiffPoly::constant(n[1])],
            p: DiffPoly::zero(),
        }
    }

    /// `τ · (σ(u, p) n)` with `σ = 2μD(u) − pI`.
    pub fn tangential_traction(n: [f64; 2], tau: [f64; 2], mu: f64) -> Self {
        let dn = DiffPoly::directional(n);
        let dt = DiffPoly::directional(tau);
        let comp = |k: usize| dn.scale(mu * tau[k]).add(&dt.scale(mu * n[k]));
        Self {
            u: [comp(0), comp(1)],
            p: DiffPoly::constant(-(n[0] * tau[0] + n[1] * tau[1])),
        }
    }

    /// `ν · (σ(u, p) ν)`
    pub fn normal_stress(nu: [f64; 2], mu: f64) -> Self {
        let dn = DiffPoly::directional(nu);
        Self {
            u: [dn.scale(2.0 * mu * nu[0]), dn.scale(2.0 * mu * nu[1])],
            p: DiffPoly::constant(-1.0),
        }
    }

    pub fn divergence() -> Self {
        Self {
            u: [DiffPoly::monomial(1.0, 1, 0), DiffPoly::monomial(1.0, 0, 1)],
            p: DiffPoly::zero(),
        }
    }

    /// `∂ₓᵃ ∂ᵧᵇ` of component `comp` (0, 1: velocity, 2: pressure).
    pub fn derivative(comp: usize, a: u8, b: u8) -> Self {
        let mut f = Self::default();
        let d = DiffPoly::monomial(1.0, a, b);
        match comp {
            0 | 1 => f.u[comp] = d,
            _ => f.p = d,
        }
        f
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            u: [self.u[0].scale(s), self.u[1].scale(s)],
            p: self.p.scale(s),
        }
    }

    pub fn add(&self, other: &Functional) -> Self {
        Self {
            u: [self.u[0].add(&other.u[0]), self.u[1].add(&other.u[1])],
            p: self.p.add(&other.p),
        }
    }

    /// Applies the functional to a field given by its partial derivatives
    /// `field(component, a, b)`.
    pub fn apply_to(&self, field: impl Fn(usize, u8, u8) -> f64) -> f64 {
        let mut s = 0.0;
        for (k, poly) in self.u.iter().enumerate() {
            s += poly.terms().iter().map(|&(c, a, b)| c * field(k, a, b)).sum::<f64>();
        }
        s + self.p.terms().iter().map(|&(c, a, b)| c * field(2, a, b)).sum::<f64>()
    }
}

/// A trial function `x ↦ B^ξ Φ(x − ξ)`, stored as operators acting on `ψ`
/// (velocity components) and on `φ_p` (pressure).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BasisField {
    pub vel: [DiffPoly; 2],
    pub pres: DiffPoly,
}

impl BasisField {
    /// Applies `B` to each row of the combined kernel in its second argument.
    pub fn from_center_functional(b: &Functional) -> Self {
        let d = div_free_symbol();
        let bu = [b.u[0].reflect(), b.u[1].reflect()];
        let vel = [0, 1].map(|k| bu[0].mul(&d[k][0]).add(&bu[1].mul(&d[k][1])));
        Self {
            vel,
            pres: b.p.reflect(),
        }
    }

    /// Column `l` of the combined kernel (0, 1: velocity columns, 2: pressure column).
    pub fn kernel_column(l: usize) -> Self {
        if l < 2 {
            Self::from_center_functional(&Functional::velocity(l))
        } else {
            Self::from_center_functional(&Functional::pressure())
        }
    }

    pub fn psi_order(&self) -> usize {
        self.vel[0].order().max(self.vel[1].order())
    }
}

/// Symbol of `(−ΔI + ∇∇ᵀ)`: `[[−∂ᵧᵧ, ∂ₓᵧ], [∂ₓᵧ, −∂ₓₓ]]`.
fn div_free_symbol() -> [[DiffPoly; 2]; 2] {
    [
        [DiffPoly::monomial(-1.0, 0, 2), DiffPoly::monomial(1.0, 1, 1)],
        [DiffPoly::monomial(1.0, 1, 1), DiffPoly::monomial(-1.0, 2, 0)],
    ]
}

/// The combined divergence-free velocity / scalar pressure kernel.
#[derive(Debug, Clone)]
pub struct HybridKernel {
    cfg: KernelConfig,
    psi: Vec<(f64, Profile)>,
    phi: Vec<(f64, Profile)>,
}

impl HybridKernel {
    pub fn new(cfg: KernelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new_unchecked(cfg))
    }

    fn new_unchecked(cfg: KernelConfig) -> Self {
        let mut psi = vec![(1.0, Profile::Gaussian { c: cfg.c1 })];
        if cfg.gamma1 != 0.0 {
            psi.push((cfg.gamma1, Profile::OddPower { k: cfg.n }));
        }
        let lead = match cfg.pressure {
            PressureKernel::Exponential => Profile::ExpRadius { c: cfg.c2 },
            PressureKernel::Gaussian => Profile::Gaussian { c: cfg.c2 },
        };
        let kappa = cfg.pressure_weight();
        let mut phi = vec![(kappa, lead)];
        if cfg.gamma2 != 0.0 {
            phi.push((kappa * cfg.gamma2, Profile::OddPower { k: cfg.m }));
        }
        Self { cfg, psi, phi }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn psi_jet(&self, delta: [f64; 2], order: usize) -> Result<Jet> {
        radial_jet(&self.psi, delta, order)
    }

    pub fn phi_jet(&self, delta: [f64; 2], order: usize) -> Result<Jet> {
        radial_jet(&self.phi, delta, order)
    }

    /// `A^x [B^ξ Φ](x − ξ)` given precomputed jets at `δ = x − ξ`.
    #[inline]
    pub fn entry_with(&self, row: &Functional, col: &BasisField, psi: &Jet, phi: &Jet) -> f64 {
        let mut s = 0.0;
        for k in 0..2 {
            for &(c1, a1, b1) in row.u[k].terms() {
                for &(c2, a2, b2) in col.vel[k].terms() {
                    s += c1 * c2 * psi.get((a1 + a2) as usize, (b1 + b2) as usize);
                }
            }
        }
        for &(c1, a1, b1) in row.p.terms() {
            for &(c2, a2, b2) in col.pres.terms() {
                s += c1 * c2 * phi.get((a1 + a2) as usize, (b1 + b2) as usize);
            }
        }
        s
    }

    /// `A^x [B^ξ Φ](x − ξ)`.
    pub fn entry(&self, row: &Functional, col: &BasisField, x: [f64; 2], xi: [f64; 2]) -> Result<f64> {
        let delta = [x[0] - xi[0], x[1] - xi[1]];
        let po = (row.u[0].order() + col.vel[0].order()).max(row.u[1].order() + col.vel[1].order());
        let qo = row.p.order() + col.pres.order();
        let psi = self.psi_jet(delta, po)?;
        let phi = self.phi_jet(delta, qo)?;
        Ok(self.entry_with(row, col, &psi, &phi))
    }
}

fn radial_jet(parts: &[(f64, Profile)], delta: [f64; 2], order: usize) -> Result<Jet> {
    assert!(order <= MAX_ORDER, "jet order {order} exceeds {MAX_ORDER}");
    let mut jet = Jet::zero(order);
    for (w, p) in parts {
        jet.accumulate(*w, p, delta[0], delta[1]);
    }
    jet.check_finite()?;
    Ok(jet)
}

/// `Φ_Div(δ)`.
pub fn phi_div(delta: [f64; 2], cfg: &KernelConfig) -> Result<[[f64; 2]; 2]> {
    if cfg.n < 2 && delta == [0.0, 0.0] {
        return Err(KernelError::Singular { order: 2 });
    }
    let k = HybridKernel::new_unchecked(*cfg);
    let j = k.psi_jet(delta, 2)?;
    Ok([[-j.get(0, 2), j.get(1, 1)], [j.get(1, 1), -j.get(2, 0)]])
}

/// `φ_p(r)` for the configured pressure kernel.
pub fn phi_pressure(r: f64, cfg: &KernelConfig) -> f64 {
    let lead = match cfg.pressure {
        PressureKernel::Exponential => (-cfg.c2 * r).exp(),
        PressureKernel::Gaussian => (-cfg.c2 * r * r).exp(),
    };
    lead + cfg.gamma2 * r.powi(2 * cfg.m as i32 + 1)
}

/// The two momentum rows `L_i` applied in `x` to the kernel columns:
/// `[−μΔΦ_{i1}, −μΔΦ_{i2}, ∂ᵢφ_p]`.
pub fn apply_stokes_operator(xi: [f64; 2], x: [f64; 2], cfg: &KernelConfig) -> Result<[[f64; 3]; 2]> {
    let k = HybridKernel::new(*cfg)?;
    apply_rows(&k, &[Functional::momentum(0, cfg.mu), Functional::momentum(1, cfg.mu)], xi, x)
}

/// Boundary rows for a node: Dirichlet samples both velocity components;
/// wall-slip gives `u·n` and the tangential traction.
pub fn boundary_functionals(node: &crate::geometry::BoundaryNode, mu: f64) -> [Functional; 2] {
    if node.tag.is_dirichlet() {
        [Functional::velocity(0), Functional::velocity(1)]
    } else {
        [
            Functional::normal_velocity(node.normal),
            Functional::tangential_traction(node.normal, node.tangent, mu),
        ]
    }
}

/// Boundary operator rows applied in `x` (at `node`) to the kernel columns.
pub fn apply_boundary_operator(
    xi: [f64; 2],
    node: &crate::geometry::BoundaryNode,
    cfg: &KernelConfig,
) -> Result<[[f64; 3]; 2]> {
    let k = HybridKernel::new(*cfg)?;
    apply_rows(&k, &boundary_functionals(node, cfg.mu), xi, node.point)
}

fn apply_rows(k: &HybridKernel, rows: &[Functional; 2], xi: [f64; 2], x: [f64; 2]) -> Result<[[f64; 3]; 2]> {
    let mut out = [[0.0; 3]; 2];
    for (i, row) in rows.iter().enumerate() {
        for l in 0..3 {
            out[i][l] = k.entry(row, &BasisField::kernel_column(l), x, xi)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundaryNode, BoundaryTag};
    use proptest::prelude::*;

    fn cfg() -> KernelConfig {
        KernelConfig::default()
    }

    /// Direct evaluation of the printed closed form of `Φ_Div`.
    fn printed_phi_div(d: [f64; 2], c: &KernelConfig) -> [[f64; 2]; 2] {
        let (dx, dy) = (d[0], d[1]);
        let r2 = dx * dx + dy * dy;
        let r = r2.sqrt();
        let e = (-c.c1 * r2).exp();
        let c1 = c.c1;
        let n = c.n as f64;
        let g = [
            [-2.0 * c1 * e * (2.0 * c1 * dy * dy - 1.0), 4.0 * c1 * c1 * e * dx * dy],
            [4.0 * c1 * c1 * e * dx * dy, -2.0 * c1 * e * (2.0 * c1 * dx * dx - 1.0)],
        ];
        let w = c.gamma1 * (2.0 * n + 1.0) * r.powf(2.0 * n - 3.0);
        let p = [
            [-(dy * dy * (2.0 * n - 1.0) + r2), dx * dy * (2.0 * n - 1.0)],
            [dx * dy * (2.0 * n - 1.0), -(dx * dx * (2.0 * n - 1.0) + r2)],
        ];
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = g[i][j] + w * p[i][j];
            }
        }
        out
    }

    #[test]
    fn matches_printed_closed_form() {
        let c = cfg();
        for d in [[0.3, -0.7], [1.2, 0.4], [-0.05, 0.02], [2.0, 0.0]] {
            let a = phi_div(d, &c).unwrap();
            let b = printed_phi_div(d, &c);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-13 * (1.0 + b[i][j].abs()), "{d:?}");
                }
            }
        }
    }

    #[test]
    fn origin_value_is_identity() {
        let m = phi_div([0.0, 0.0], &cfg()).unwrap();
        assert_eq!(m, [[1.0, 0.0], [0.0, 1.0]]);
        let mut c = cfg();
        c.n = 1;
        assert!(matches!(phi_div([0.0, 0.0], &c), Err(KernelError::Singular { .. })));
    }

    #[test]
    fn pressure_kernel_values() {
        let mut c = cfg();
        c.pressure = PressureKernel::Exponential;
        assert_eq!(phi_pressure(0.0, &c), 1.0);
        assert!((phi_pressure(1.0, &c) - ((-0.5f64).exp() + 1e-4)).abs() < 1e-15);
        assert!((phi_pressure(1.0, &c) - 0.606631).abs() < 1e-6);
        assert!(phi_pressure(0.1, &c) < phi_pressure(0.0, &c));
        c.pressure = PressureKernel::Gaussian;
        assert!((phi_pressure(1.0, &c) - 0.606631).abs() < 1e-6);
        assert!(phi_pressure(0.1, &c) < phi_pressure(0.0, &c));
    }

    #[test]
    fn exponential_pressure_is_singular_in_second_derivatives_at_origin() {
        let mut c = cfg();
        c.pressure = PressureKernel::Exponential;
        let k = HybridKernel::new(c).unwrap();
        assert!(k.phi_jet([0.0, 0.0], 0).is_ok());
        assert!(matches!(k.phi_jet([0.0, 0.0], 2), Err(KernelError::Singular { .. })));
        assert!(k.phi_jet([0.1, 0.0], 2).is_ok());
    }

    #[test]
    fn jets_match_finite_differences() {
        // Each derivative is checked against a central difference of the
        // next-lower-order entry.
        let k = HybridKernel::new(cfg()).unwrap();
        let d = [0.37, -0.21];
        let h = 1e-5;
        let j = k.psi_jet(d, 6).unwrap();
        for a in 0..6usize {
            for b in 0..(6 - a) {
                let jp = k.psi_jet([d[0] + h, d[1]], 5).unwrap();
                let jm = k.psi_jet([d[0] - h, d[1]], 5).unwrap();
                let fd = (jp.get(a, b) - jm.get(a, b)) / (2.0 * h);
                let exact = j.get(a + 1, b);
                assert!((fd - exact).abs() < 1e-5 * (1.0 + exact.abs()), "a={a} b={b}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn traction_row_on_linear_shear() {
        // u = (y, 0): 2μ D(u) n · τ with n = (0, 1), τ = (1, 0) gives μ.
        let mu = 0.1;
        let f = Functional::tangential_traction([0.0, 1.0], [1.0, 0.0], mu);
        let v = f.apply_to(|c, a, b| if c == 0 && (a, b) == (0, 1) { 1.0 } else if c == 0 && (a, b) == (0, 0) { 0.5 } else { 0.0 });
        assert!((v - mu).abs() < 1e-15);
    }

    #[test]
    fn boundary_rows_examples() {
        let c = cfg();
        let apex = BoundaryNode {
            point: [4.5, 0.5],
            tag: BoundaryTag::WallSlip,
            normal: [0.0, -1.0],
            tangent: [1.0, 0.0],
        };
        let xi = [4.1, 0.3];
        let rows = apply_boundary_operator(xi, &apex, &c).unwrap();
        let phi = phi_div([0.4, 0.2], &c).unwrap();
        for l in 0..2 {
            assert!((rows[0][l] + phi[1][l]).abs() < 1e-14);
        }
        assert_eq!(rows[0][2], 0.0);
        let inlet = BoundaryNode {
            point: [0.0, 0.5],
            tag: BoundaryTag::Inlet,
            normal: [-1.0, 0.0],
            tangent: [0.0, 1.0],
        };
        let rows = apply_boundary_operator(xi, &inlet, &c).unwrap();
        let phi = phi_div([-4.1, 0.2], &c).unwrap();
        for i in 0..2 {
            for l in 0..2 {
                assert_eq!(rows[i][l], phi[i][l]);
            }
        }
    }

    #[test]
    fn stokes_rows_scale_with_viscosity() {
        // Fixed κ so that only the velocity block sees μ.
        let c = KernelConfig {
            pressure_weight: Some(1.0),
            ..cfg()
        };
        let xi = [0.2, 0.1];
        let x = [0.6, 0.5];
        let a = apply_stokes_operator(xi, x, &c).unwrap();
        let b = apply_stokes_operator(xi, x, &c.with_mu(2.0 * c.mu)).unwrap();
        for i in 0..2 {
            for l in 0..2 {
                assert!((b[i][l] - 2.0 * a[i][l]).abs() < 1e-14 * a[i][l].abs().max(1.0));
            }
            assert_eq!(a[i][2], b[i][2]);
        }
    }

    #[test]
    fn continuity_of_kernel_columns_vanishes() {
        let k = HybridKernel::new(cfg()).unwrap();
        for l in 0..2 {
            let col = BasisField::kernel_column(l);
            let div = k.entry(&Functional::divergence(), &col, [0.3, 0.8], [0.1, 0.2]).unwrap();
            assert!(div.abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_even(dx in -2.0f64..2.0, dy in -2.0f64..2.0) {
            let c = cfg();
            let a = phi_div([dx, dy], &c).unwrap();
            let b = phi_div([-dx, -dy], &c).unwrap();
            prop_assert_eq!(a[0][1], a[1][0]);
            for i in 0..2 { for j in 0..2 {
                prop_assert!((a[i][j] - b[i][j]).abs() <= 1e-15 * (1.0 + a[i][j].abs()));
            }}
        }

        #[test]
        fn translation_invariant(x in -1.0f64..1.0, y in -1.0f64..1.0, sx in -3.0f64..3.0, sy in -3.0f64..3.0) {
            let c = cfg();
            let a = apply_stokes_operator([0.0, 0.0], [x, y], &c).unwrap();
            let b = apply_stokes_operator([sx, sy], [x + sx, y + sy], &c).unwrap();
            for i in 0..2 { for l in 0..3 {
                prop_assert!((a[i][l] - b[i][l]).abs() <= 1e-9 * (1.0 + a[i][l].abs()));
            }}
        }
    }
}
