//! Duct geometry, obstruction shapes, collocation node generation and the
//! measurement-geometry travel-time cutoff.
//!
//! The fluid occupies `(0, L) x (0, D)` minus the obstruction, which is a
//! graph-like bump attached to one of the two walls. The exterior wave box
//! sits on top of the duct, `S = (0, L) x (D, H)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

type Result<T> = std::result::Result<T, GeometryError>;

/// Tolerance used to decide whether a point lies on a boundary segment.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WallSide {
    Up,
    #[default]
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuctConfig {
    /// Duct length `L`.
    pub length: f64,
    /// Duct diameter `D`.
    pub diameter: f64,
    /// Top of the wave box `H`.
    pub wave_top: f64,
    /// Wall hosting the obstruction.
    #[serde(default)]
    pub side: WallSide,
}

impl DuctConfig {
    pub fn new(length: f64, diameter: f64, wave_top: f64) -> Result<Self> {
        let duct = Self {
            length,
            diameter,
            wave_top,
            side: WallSide::Down,
        };
        duct.validate()?;
        Ok(duct)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(GeometryError::InvalidDuct(format!("length {} must be positive", self.length)));
        }
        if !(self.diameter > 0.0 && self.diameter < self.wave_top && self.wave_top.is_finite()) {
            return Err(GeometryError::InvalidDuct(format!(
                "need 0 < D < H, got D = {}, H = {}",
                self.diameter, self.wave_top
            )));
        }
        Ok(())
    }

    /// Flat top wall `[0, L] x {D}` as a segment.
    pub fn top_wall(&self) -> Segment {
        Segment {
            a: [0.0, self.diameter],
            b: [self.length, self.diameter],
        }
    }
}

/// Cosine-bump obstruction `(position, extent, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstructionParams {
    pub position: f64,
    pub extent: f64,
    pub height: f64,
}

impl ObstructionParams {
    pub fn new(position: f64, extent: f64, height: f64) -> Self {
        Self {
            position,
            extent,
            height,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.position, self.extent, self.height]
    }

    pub fn from_array(theta: [f64; 3]) -> Self {
        Self::new(theta[0], theta[1], theta[2])
    }

    pub fn validate(&self, duct: &DuctConfig) -> Result<()> {
        let [p, e, h] = self.as_array();
        if !(p.is_finite() && e.is_finite() && h.is_finite()) {
            return Err(GeometryError::Infeasible("non-finite obstruction parameter".into()));
        }
        if e <= 0.0 {
            return Err(GeometryError::Infeasible(format!("extent {e} must be positive")));
        }
        if h <= 0.0 || h >= duct.diameter {
            return Err(GeometryError::Infeasible(format!(
                "height {h} must lie in (0, D = {})",
                duct.diameter
            )));
        }
        if p <= 0.0 || p + e >= duct.length {
            return Err(GeometryError::Infeasible(format!(
                "support [{p}, {}] must stay strictly inside (0, {})",
                p + e,
                duct.length
            )));
        }
        Ok(())
    }

    /// Point on the obstruction boundary at arc parameter `s` in `[0, extent]`.
    pub fn boundary_point(&self, s: f64) -> Result<[f64; 2]> {
        if !(0.0..=self.extent).contains(&s) {
            return Err(GeometryError::ArcParameter { s, extent: self.extent });
        }
        Ok([
            self.position + s,
            0.5 * self.height * (1.0 - (2.0 * PI * s / self.extent).cos()),
        ])
    }

    pub fn height_at(&self, x: f64) -> f64 {
        let s = x - self.position;
        if s <= 0.0 || s >= self.extent {
            return 0.0;
        }
        0.5 * self.height * (1.0 - (2.0 * PI * s / self.extent).cos())
    }

    fn slope_at(&self, x: f64) -> f64 {
        let s = x - self.position;
        if s <= 0.0 || s >= self.extent {
            return 0.0;
        }
        self.height * PI / self.extent * (2.0 * PI * s / self.extent).sin()
    }
}

/// Obstruction boundary given by a natural cubic spline through control points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineSpec", into = "SplineSpec")]
pub struct SplineObstruction {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplineSpec {
    points: Vec<[f64; 2]>,
}

impl TryFrom<SplineSpec> for SplineObstruction {
    type Error = GeometryError;
    fn try_from(spec: SplineSpec) -> Result<Self> {
        SplineObstruction::new(&spec.points)
    }
}

impl From<SplineObstruction> for SplineSpec {
    fn from(s: SplineObstruction) -> Self {
        SplineSpec { points: s.control_points() }
    }
}

impl SplineObstruction {
    pub fn new(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() < 3 {
            return Err(GeometryError::Infeasible("spline needs at least 3 control points".into()));
        }
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GeometryError::Infeasible("spline abscissae must increase".into()));
        }
        if ys[0] != 0.0 || ys[ys.len() - 1] != 0.0 {
            return Err(GeometryError::Infeasible("spline endpoint heights must be zero".into()));
        }
        let m = natural_second_derivatives(&xs, &ys);
        Ok(Self { xs, ys, m })
    }

    pub fn control_points(&self) -> Vec<[f64; 2]> {
        self.xs.iter().zip(&self.ys).map(|(&x, &y)| [x, y]).collect()
    }

    pub fn support(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    fn segment(&self, x: f64) -> Option<usize> {
        let (a, b) = self.support();
        if x <= a || x >= b {
            return None;
        }
        let i = self.xs.partition_point(|&k| k <= x);
        Some(i.saturating_sub(1).min(self.xs.len() - 2))
    }

    pub fn height_at(&self, x: f64) -> f64 {
        let Some(i) = self.segment(x) else { return 0.0 };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn slope_at(&self, x: f64) -> f64 {
        let Some(i) = self.segment(x) else { return 0.0 };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        (self.ys[i + 1] - self.ys[i]) / h
            + h / 6.0 * (-(3.0 * a * a - 1.0) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1])
    }

    pub fn validate(&self, duct: &DuctConfig) -> Result<()> {
        let (a, b) = self.support();
        if a <= 0.0 || b >= duct.length {
            return Err(GeometryError::Infeasible(format!(
                "spline support [{a}, {b}] must stay strictly inside (0, {})",
                duct.length
            )));
        }
        let n = 4000;
        for k in 0..=n {
            let x = a + (b - a) * k as f64 / n as f64;
            let y = self.height_at(x);
            if y < -1e-12 || y >= duct.diameter {
                return Err(GeometryError::Infeasible(format!(
                    "spline height {y} at x = {x} leaves [0, D)"
                )));
            }
        }
        Ok(())
    }
}

/// Second derivatives of the natural cubic spline (zero curvature at both ends).
fn natural_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior knots.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for j in 0..k {
        let i = j + 1;
        let h0 = xs[i] - xs[i - 1];
        let h1 = xs[i + 1] - xs[i];
        diag[j] = 2.0 * (h0 + h1);
        upper[j] = h1;
        rhs[j] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    for j in 1..k {
        let lower = xs[j + 1] - xs[j];
        let w = lower / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        rhs[j] -= w * rhs[j - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for j in (0..k - 1).rev() {
        m[j + 1] = (rhs[j] - upper[j] * m[j + 2]) / diag[j];
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstruction {
    #[default]
    None,
    Cosine(ObstructionParams),
    Spline(SplineObstruction),
}

impl Obstruction {
    pub fn height_at(&self, x: f64) -> f64 {
        match self {
            Obstruction::None => 0.0,
            Obstruction::Cosine(p) => p.height_at(x),
            Obstruction::Spline(s) => s.height_at(x),
        }
    }

    pub fn slope_at(&self, x: f64) -> f64 {
        match self {
            Obstruction::None => 0.0,
            Obstruction::Cosine(p) => p.slope_at(x),
            Obstruction::Spline(s) => s.slope_at(x),
        }
    }

    pub fn validate(&self, duct: &DuctConfig) -> Result<()> {
        match self {
            Obstruction::None => Ok(()),
            Obstruction::Cosine(p) => p.validate(duct),
            Obstruction::Spline(s) => s.validate(duct),
        }
    }
}

/// The fluid region `Omega_O`: the duct minus the obstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidDomain {
    pub duct: DuctConfig,
    pub obstruction: Obstruction,
}

impl FluidDomain {
    pub fn new(duct: DuctConfig, obstruction: Obstruction) -> Result<Self> {
        duct.validate()?;
        obstruction.validate(&duct)?;
        Ok(Self { duct, obstruction })
    }

    /// Lower wall height at `x`.
    pub fn lower_wall(&self, x: f64) -> f64 {
        match self.duct.side {
            WallSide::Down => self.obstruction.height_at(x),
            WallSide::Up => 0.0,
        }
    }

    /// Upper wall height at `x`.
    pub fn upper_wall(&self, x: f64) -> f64 {
        match self.duct.side {
            WallSide::Down => self.duct.diameter,
            WallSide::Up => self.duct.diameter - self.obstruction.height_at(x),
        }
    }

    fn lower_slope(&self, x: f64) -> f64 {
        match self.duct.side {
            WallSide::Down => self.obstruction.slope_at(x),
            WallSide::Up => 0.0,
        }
    }

    fn upper_slope(&self, x: f64) -> f64 {
        match self.duct.side {
            WallSide::Down => 0.0,
            WallSide::Up => -self.obstruction.slope_at(x),
        }
    }

    /// Closed-domain membership with a small tolerance.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x, y] = p;
        let tol = BOUNDARY_TOL;
        x >= -tol
            && x <= self.duct.length + tol
            && y >= self.lower_wall(x) - tol
            && y <= self.upper_wall(x) + tol
    }

    /// Fluid area, by composite Simpson quadrature of the wall gap.
    pub fn area(&self) -> f64 {
        let n = 8000;
        let h = self.duct.length / n as f64;
        let gap = |x: f64| self.upper_wall(x) - self.lower_wall(x);
        let mut s = gap(0.0) + gap(self.duct.length);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * gap(k as f64 * h);
        }
        s * h / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    Inlet,
    Outlet,
    WallSlip,
}

impl BoundaryTag {
    pub fn is_dirichlet(self) -> bool {
        matches!(self, BoundaryTag::Inlet | BoundaryTag::Outlet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNode {
    pub point: [f64; 2],
    pub tag: BoundaryTag,
    /// Outward unit normal.
    pub normal: [f64; 2],
    /// Unit tangent, oriented towards increasing `x` on walls and `y` on the ends.
    pub tangent: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub interior: Vec<[f64; 2]>,
    pub boundary: Vec<BoundaryNode>,
}

impl NodeSet {
    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn total(&self) -> usize {
        self.interior.len() + self.boundary.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub n_interior: usize,
    /// Boundary spacing; defaults to the interior fill distance `sqrt(area / n_interior)`.
    #[serde(default)]
    pub boundary_spacing: Option<f64>,
    #[serde(default = "default_skip")]
    pub halton_skip: u64,
    /// Minimum distance of interior nodes from the boundary, as a fraction of the spacing.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    #[serde(default)]
    pub layout: NodeLayout,
}

/// How nodes are placed in an obstructed duct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeLayout {
    /// Halton points filtered to the fluid domain; boundary nodes equi-spaced in arc length.
    #[default]
    Scattered,
    /// A fixed layout on the unobstructed duct, mapped onto the fluid domain by a
    /// vertical stretch per abscissa. Node count and positions vary continuously
    /// with the obstruction, so misfits built on it do too.
    Mapped,
}

fn default_skip() -> u64 {
    20
}

fn default_clearance() -> f64 {
    0.3
}

impl NodeSpec {
    pub fn new(n_interior: usize) -> Self {
        Self {
            n_interior,
            boundary_spacing: None,
            halton_skip: default_skip(),
            clearance: default_clearance(),
            layout: NodeLayout::Scattered,
        }
    }
}

/// Radical-inverse Halton sequence in one prime base.
#[derive(Debug, Clone)]
pub struct Halton {
    base: u64,
    index: u64,
}

impl Halton {
    pub fn new(base: u64, skip: u64) -> Self {
        assert!(base > 1, "Halton base must exceed 1");
        Self { base, index: skip }
    }

    pub fn radical_inverse(base: u64, mut i: u64) -> f64 {
        let inv = 1.0 / base as f64;
        let mut f = inv;
        let mut r = 0.0;
        while i > 0 {
            r += f * (i % base) as f64;
            i /= base;
            f *= inv;
        }
        r
    }
}

impl Iterator for Halton {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        self.index += 1;
        Some(Self::radical_inverse(self.base, self.index))
    }
}

/// Generates the classified collocation nodes for `domain`.
pub fn build_node_set(domain: &FluidDomain, spec: &NodeSpec) -> Result<NodeSet> {
    if spec.n_interior == 0 {
        return Err(GeometryError::NodeRequest("n_interior must be positive".into()));
    }
    let duct = &domain.duct;
    let area = match spec.layout {
        NodeLayout::Scattered => domain.area(),
        NodeLayout::Mapped => duct.length * duct.diameter,
    };
    let spacing = match spec.boundary_spacing {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(GeometryError::NodeRequest(format!("boundary spacing {h} must be positive"))),
        None => (area / spec.n_interior as f64).sqrt(),
    };
    if spec.layout == NodeLayout::Mapped {
        return Ok(mapped_node_set(domain, spec, spacing));
    }
    let clearance = spec.clearance.max(0.0) * spacing;

    let mut interior = Vec::with_capacity(spec.n_interior);
    let hx = Halton::new(2, spec.halton_skip);
    let hy = Halton::new(3, spec.halton_skip);
    let max_draws = spec.n_interior.saturating_mul(1000).max(100_000);
    for (draws, (u, v)) in hx.zip(hy).enumerate() {
        if interior.len() == spec.n_interior {
            break;
        }
        if draws > max_draws {
            return Err(GeometryError::NodeRequest(format!(
                "only {} of {} interior nodes fit the domain",
                interior.len(),
                spec.n_interior
            )));
        }
        let x = u * duct.length;
        let y = v * duct.diameter;
        if x > clearance
            && x < duct.length - clearance
            && y > domain.lower_wall(x) + clearance
            && y < domain.upper_wall(x) - clearance
        {
            interior.push([x, y]);
        }
    }

    let mut boundary = Vec::new();
    // Inlet and outlet include the corners.
    for (x, tag, nx) in [(0.0, BoundaryTag::Inlet, -1.0), (duct.length, BoundaryTag::Outlet, 1.0)] {
        let (y0, y1) = (domain.lower_wall(x), domain.upper_wall(x));
        let n = ((y1 - y0) / spacing).round().max(1.0) as usize;
        for k in 0..=n {
            let y = y0 + (y1 - y0) * k as f64 / n as f64;
            boundary.push(BoundaryNode {
                point: [x, y],
                tag,
                normal: [nx, 0.0],
                tangent: [0.0, 1.0],
            });
        }
    }
    for upper in [false, true] {
        let wall = |x: f64| if upper { domain.upper_wall(x) } else { domain.lower_wall(x) };
        let slope = |x: f64| if upper { domain.upper_slope(x) } else { domain.lower_slope(x) };
        for x in arc_length_abscissae(duct.length, spacing, &slope) {
            let d = slope(x);
            let len = (1.0 + d * d).sqrt();
            let tangent = [1.0 / len, d / len];
            let normal = if upper { [-d / len, 1.0 / len] } else { [d / len, -1.0 / len] };
            boundary.push(BoundaryNode {
                point: [x, wall(x)],
                tag: BoundaryTag::WallSlip,
                normal,
                tangent,
            });
        }
    }
    Ok(NodeSet { interior, boundary })
}

/// Halton points and equi-spaced wall abscissae on `[0, L] × [0, D]`, with
/// each vertical `x = const` stretched onto `[lower_wall(x), upper_wall(x)]`.
fn mapped_node_set(domain: &FluidDomain, spec: &NodeSpec, spacing: f64) -> NodeSet {
    let duct = &domain.duct;
    let d = duct.diameter;
    let map = |x: f64, y: f64| {
        let (lo, hi) = (domain.lower_wall(x), domain.upper_wall(x));
        [x, lo + (hi - lo) * y / d]
    };
    let clearance = spec.clearance.max(0.0) * spacing;
    let interior = Halton::new(2, spec.halton_skip)
        .zip(Halton::new(3, spec.halton_skip))
        .map(|(u, v)| (u * duct.length, v * d))
        .filter(|&(x, y)| x > clearance && x < duct.length - clearance && y > clearance && y < d - clearance)
        .take(spec.n_interior)
        .map(|(x, y)| map(x, y))
        .collect();

    let mut boundary = Vec::new();
    let n_end = (d / spacing).round().max(1.0) as usize;
    for (x, tag, nx) in [(0.0, BoundaryTag::Inlet, -1.0), (duct.length, BoundaryTag::Outlet, 1.0)] {
        for k in 0..=n_end {
            boundary.push(BoundaryNode {
                point: map(x, d * k as f64 / n_end as f64),
                tag,
                normal: [nx, 0.0],
                tangent: [0.0, 1.0],
            });
        }
    }
    let n_wall = (duct.length / spacing).round().max(2.0) as usize;
    for upper in [false, true] {
        for k in 1..n_wall {
            let x = duct.length * k as f64 / n_wall as f64;
            let (y, slope) = if upper {
                (domain.upper_wall(x), domain.upper_slope(x))
            } else {
                (domain.lower_wall(x), domain.lower_slope(x))
            };
            let len = (1.0 + slope * slope).sqrt();
            let normal = if upper { [-slope / len, 1.0 / len] } else { [slope / len, -1.0 / len] };
            boundary.push(BoundaryNode {
                point: [x, y],
                tag: BoundaryTag::WallSlip,
                normal,
                tangent: [1.0 / len, slope / len],
            });
        }
    }
    NodeSet { interior, boundary }
}

/// Interior abscissae (corners excluded) equi-spaced in arc length along `y = w(x)`.
fn arc_length_abscissae(length: f64, spacing: f64, slope: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let m = 20_000;
    let dx = length / m as f64;
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    let speed = |x: f64| (1.0 + slope(x).powi(2)).sqrt();
    let mut prev = speed(0.0);
    for k in 1..=m {
        let cur = speed(k as f64 * dx);
        let last = cum[k - 1];
        cum.push(last + 0.5 * (prev + cur) * dx);
        prev = cur;
    }
    let total = cum[m];
    let n = (total / spacing).round().max(2.0) as usize;
    (1..n)
        .map(|k| {
            let target = total * k as f64 / n as f64;
            let j = cum.partition_point(|&c| c < target).clamp(1, m);
            let frac = (target - cum[j - 1]) / (cum[j] - cum[j - 1]);
            (j as f64 - 1.0 + frac) * dx
        })
        .collect()
}

/// Classifies a point on `∂Ω_O`; corners resolve to the Dirichlet ends.
pub fn classify_boundary(point: [f64; 2], domain: &FluidDomain) -> Result<BoundaryTag> {
    let [x, y] = point;
    let tol = BOUNDARY_TOL;
    let duct = &domain.duct;
    let within_ends = |xe: f64| y >= domain.lower_wall(xe) - tol && y <= domain.upper_wall(xe) + tol;
    if x.abs() <= tol && within_ends(0.0) {
        return Ok(BoundaryTag::Inlet);
    }
    if (x - duct.length).abs() <= tol && within_ends(duct.length) {
        return Ok(BoundaryTag::Outlet);
    }
    if x > 0.0 && x < duct.length && ((y - domain.lower_wall(x)).abs() <= tol || (y - domain.upper_wall(x)).abs() <= tol) {
        return Ok(BoundaryTag::WallSlip);
    }
    Err(GeometryError::OffBoundary(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        };
        let q = [self.a[0] + t * d[0], self.a[1] + t * d[1]];
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }
}

/// Wave measurement segment `S_m = [k1, k2] x {H}`, optional tangential-velocity
/// segment `Γ_m` on the top wall, and wave speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementGeometry {
    pub wave_segment: [f64; 2],
    pub height: f64,
    #[serde(default)]
    pub velocity_segment: Option<[f64; 2]>,
    pub wave_speed: f64,
}

impl MeasurementGeometry {
    pub fn new(
        duct: &DuctConfig,
        wave_segment: [f64; 2],
        velocity_segment: Option<[f64; 2]>,
        wave_speed: f64,
    ) -> Result<Self> {
        let g = Self {
            wave_segment,
            height: duct.wave_top,
            velocity_segment,
            wave_speed,
        };
        g.validate(duct)?;
        Ok(g)
    }

    pub fn validate(&self, duct: &DuctConfig) -> Result<()> {
        let [k1, k2] = self.wave_segment;
        if !(0.0 <= k1 && k1 < k2 && k2 <= duct.length) {
            return Err(GeometryError::Measurement(format!(
                "S_m = [{k1}, {k2}] must satisfy 0 <= k1 < k2 <= {}",
                duct.length
            )));
        }
        if let Some([a, b]) = self.velocity_segment {
            if !(0.0 <= a && a < b && b <= duct.length) {
                return Err(GeometryError::Measurement(format!("Γ_m = [{a}, {b}] is not on the top wall")));
            }
        }
        if !(self.wave_speed > 0.0) {
            return Err(GeometryError::Measurement(format!("wave speed {} must be positive", self.wave_speed)));
        }
        Ok(())
    }

    pub fn wave_segment_geometry(&self) -> Segment {
        Segment {
            a: [self.wave_segment[0], self.height],
            b: [self.wave_segment[1], self.height],
        }
    }
}

/// `t_c = sup_{x in wall} d(x, S_m) / c`.
///
/// The distance to a segment is convex along the straight wall, so the
/// supremum is attained at one of the wall endpoints.
pub fn travel_time_cutoff(geom: &MeasurementGeometry, wall: Segment) -> Result<f64> {
    let [k1, k2] = geom.wave_segment;
    if !(k1 < k2) {
        return Err(GeometryError::Measurement(format!("empty measurement segment [{k1}, {k2}]")));
    }
    if !(geom.wave_speed > 0.0) {
        return Err(GeometryError::Measurement("wave speed must be positive".into()));
    }
    let sm = geom.wave_segment_geometry();
    let d = sm.distance_to(wall.a).max(sm.distance_to(wall.b));
    Ok(d / geom.wave_speed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn duct() -> DuctConfig {
        DuctConfig::new(8.0, 1.0, 3.0).unwrap()
    }

    #[test]
    fn cosine_boundary_points() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        assert_eq!(th.boundary_point(0.0).unwrap(), [4.0, 0.0]);
        let mid = th.boundary_point(0.5).unwrap();
        assert!((mid[0] - 4.5).abs() < 1e-15 && (mid[1] - 0.5).abs() < 1e-15);
        let end = th.boundary_point(1.0).unwrap();
        assert!((end[0] - 5.0).abs() < 1e-15 && end[1].abs() < 1e-15);
        assert!(matches!(th.boundary_point(1.5), Err(GeometryError::ArcParameter { .. })));
        assert!(th.boundary_point(-0.1).is_err());
    }

    #[test]
    fn cosine_is_c1_at_support_ends() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        let h = 1e-6;
        for s in [0.0, 1.0] {
            let y = |s: f64| 0.5 * th.height * (1.0 - (2.0 * PI * s / th.extent).cos());
            let dy = (y(s + h) - y(s - h)) / (2.0 * h);
            assert!(dy.abs() < 1e-10, "slope {dy} at s = {s}");
            assert!(y(s).abs() < 1e-15);
        }
    }

    #[test]
    fn infeasible_heights_rejected() {
        let d = duct();
        assert!(ObstructionParams::new(4.0, 1.0, 1.0).validate(&d).is_err());
        assert!(ObstructionParams::new(4.0, 1.0, 1.2).validate(&d).is_err());
        assert!(ObstructionParams::new(0.0, 1.0, 0.5).validate(&d).is_err());
        assert!(ObstructionParams::new(7.5, 0.5, 0.5).validate(&d).is_err());
        assert!(ObstructionParams::new(4.0, 1.0, 0.5).validate(&d).is_ok());
        let r = build_node_set_for(Obstruction::Cosine(ObstructionParams::new(4.0, 1.0, 1.0)), 50);
        assert!(matches!(r, Err(GeometryError::Infeasible(_))));
    }

    fn build_node_set_for(obs: Obstruction, n: usize) -> Result<NodeSet> {
        let dom = FluidDomain::new(duct(), obs)?;
        build_node_set(&dom, &NodeSpec::new(n))
    }

    #[test]
    fn plain_duct_node_counts() {
        let nodes = build_node_set_for(Obstruction::None, 1119).unwrap();
        assert_eq!(nodes.n_interior(), 1119);
        for p in &nodes.interior {
            assert!(p[0] > 0.0 && p[0] < 8.0 && p[1] > 0.0 && p[1] < 1.0);
        }
    }

    #[test]
    fn interior_nodes_avoid_bump() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        let nodes = build_node_set_for(Obstruction::Cosine(th), 800).unwrap();
        for p in &nodes.interior {
            if (4.0..=5.0).contains(&p[0]) {
                assert!(p[1] > th.height_at(p[0]), "{p:?}");
            }
        }
    }

    #[test]
    fn apex_normal_points_down() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        let mut spec = NodeSpec::new(200);
        spec.boundary_spacing = Some(0.01);
        let dom = FluidDomain::new(duct(), Obstruction::Cosine(th)).unwrap();
        let nodes = build_node_set(&dom, &spec).unwrap();
        let apex = nodes
            .boundary
            .iter()
            .filter(|b| b.tag == BoundaryTag::WallSlip && b.point[1] < 0.9)
            .min_by(|a, b| (a.point[0] - 4.5).abs().total_cmp(&(b.point[0] - 4.5).abs()))
            .unwrap();
        assert!((apex.point[0] - 4.5).abs() < 0.01, "{:?}", apex.point);
        assert!(apex.normal[1] < -0.99, "{:?}", apex.normal);
        let slope = dom.obstruction.slope_at(apex.point[0]);
        assert!((apex.normal[0] * 1.0 + apex.normal[1] * slope).abs() < 1e-12);
    }

    #[test]
    fn boundary_nodes_on_parameterisation() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        let dom = FluidDomain::new(duct(), Obstruction::Cosine(th)).unwrap();
        let nodes = build_node_set(&dom, &NodeSpec::new(400)).unwrap();
        for b in &nodes.boundary {
            let tag = classify_boundary(b.point, &dom).unwrap();
            assert_eq!(tag, b.tag);
            if b.tag == BoundaryTag::WallSlip && b.point[1] < 0.99 {
                assert!((b.point[1] - th.height_at(b.point[0])).abs() < 1e-12);
            }
            let n = b.normal;
            let t = b.tangent;
            assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() < 1e-12);
            assert!((n[0] * t[0] + n[1] * t[1]).abs() < 1e-12);
        }
        let corners = nodes.boundary.iter().filter(|b| b.point == [0.0, 0.0] || b.point == [8.0, 1.0]);
        assert!(corners.clone().count() == 2);
        assert!(corners.into_iter().all(|b| b.tag.is_dirichlet()));
    }

    #[test]
    fn classify_examples() {
        let th = ObstructionParams::new(4.0, 1.0, 0.5);
        let dom = FluidDomain::new(duct(), Obstruction::Cosine(th)).unwrap();
        assert_eq!(classify_boundary([0.0, 0.5], &dom).unwrap(), BoundaryTag::Inlet);
        assert_eq!(classify_boundary([8.0, 0.5], &dom).unwrap(), BoundaryTag::Outlet);
        assert_eq!(classify_boundary([4.5, 0.5], &dom).unwrap(), BoundaryTag::WallSlip);
        assert_eq!(classify_boundary([0.0, 0.0], &dom).unwrap(), BoundaryTag::Inlet);
        assert_eq!(classify_boundary([8.0, 1.0], &dom).unwrap(), BoundaryTag::Outlet);
        assert!(classify_boundary([2.0, 0.5], &dom).is_err());
        assert!(classify_boundary([4.5, 0.0], &dom).is_err());
    }

    #[test]
    fn spline_natural_interpolation() {
        let s = SplineObstruction::new(&[[2.0, 0.0], [2.5, 0.3], [3.0, 0.4], [3.5, 0.0]]).unwrap();
        for p in s.control_points() {
            assert!((s.height_at(p[0]) - p[1]).abs() < 1e-12 || p[1] == 0.0);
        }
        assert!((s.height_at(2.5) - 0.3).abs() < 1e-12);
        // natural end conditions: central second difference vanishes near the ends
        let h = 1e-4;
        let x = 2.0 + h;
        let c2 = (s.height_at(x + h) - 2.0 * s.height_at(x) + s.height_at(x - h + 1e-12)) / (h * h);
        assert!(c2.abs() < 1e-2 * s.m.iter().fold(0.0_f64, |a, b| a.max(b.abs())), "{c2}");
        let fd = (s.height_at(2.7 + 1e-6) - s.height_at(2.7 - 1e-6)) / 2e-6;
        assert!((fd - s.slope_at(2.7)).abs() < 1e-6);
        assert!(s.validate(&duct()).is_ok());
        assert!(SplineObstruction::new(&[[2.0, 0.1], [2.5, 0.3], [3.0, 0.0]]).is_err());
    }

    #[test]
    fn cutoff_examples() {
        let d = duct();
        let g = MeasurementGeometry::new(&d, [0.0, 8.0], None, 1.0).unwrap();
        assert!((travel_time_cutoff(&g, d.top_wall()).unwrap() - 2.0).abs() < 1e-15);
        let mut g = g;
        g.wave_segment = [3.0, 3.0];
        assert!(travel_time_cutoff(&g, d.top_wall()).is_err());
    }

    #[test]
    fn halton_base_two() {
        let v: Vec<f64> = Halton::new(2, 0).take(4).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125]);
        let w: Vec<f64> = Halton::new(3, 0).take(3).collect();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[2] - 1.0 / 9.0).abs() < 1e-15);
    }
}
