//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure not listed in `KNOWN_FAILURES`.
//!
//! Run a subset with `cargo test --test acceptance -- 1 6 10`.

use std::time::{Duration, Instant};

use ductprobe::geometry::{
    build_node_set, travel_time_cutoff, DuctConfig, FluidDomain, MeasurementGeometry, NodeSpec, Obstruction,
    ObstructionParams, Segment,
};
use ductprobe::harness::{run_experiment, ExperimentConfig, CHAIN_FILE};
use ductprobe::inverse_boundary::{recover_boundary_datum, BoundaryRecoveryProblem, RecoveryOptions};
use ductprobe::kernels::{apply_stokes_operator, phi_div, phi_pressure, BasisField, Functional, HybridKernel, KernelConfig};
use ductprobe::stokes::{integrate, BdfScheme, CollocationSystem, InflowProfile, StepOptions};
use ductprobe::wave::{
    adjoint_propagate, couple_stress_to_datum, propagate, propagate_with, relative_l2_error, BoundaryDatum,
    WaveConfig, WaveGrid, WaveMeasurements,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Criteria that fail at desk scale for reasons analysed in the README; they
/// are still run and reported, but do not fail the suite.
const KNOWN_FAILURES: &[u32] = &[];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

// 1. Divergence of a random divergence-free field, analytically and by central differences.
fn kernel_exactness() -> Outcome {
    let cfg = KernelConfig::default();
    let k = HybridKernel::new(cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let centers: Vec<([f64; 2], [f64; 2])> = (0..30)
        .map(|_| {
            let xi = [uniform(&mut rng, 0.0, 8.0), uniform(&mut rng, 0.0, 1.0)];
            let c = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
            (xi, c)
        })
        .collect();
    let cols = [BasisField::kernel_column(0), BasisField::kernel_column(1)];
    let div = Functional::divergence();
    let u = |x: [f64; 2]| {
        let mut out = [0.0; 2];
        for (xi, c) in &centers {
            let m = phi_div([x[0] - xi[0], x[1] - xi[1]], &cfg).unwrap();
            for i in 0..2 {
                out[i] += m[i][0] * c[0] + m[i][1] * c[1];
            }
        }
        out
    };
    let h = 1e-4;
    let (mut analytic, mut fd, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = [uniform(&mut rng, 0.0, 8.0), uniform(&mut rng, 0.0, 1.0)];
        let d: f64 = centers
            .iter()
            .map(|(xi, c)| c[0] * k.entry(&div, &cols[0], x, *xi).unwrap() + c[1] * k.entry(&div, &cols[1], x, *xi).unwrap())
            .sum();
        analytic = analytic.max(d.abs());
        let dx = (u([x[0] + h, x[1]])[0] - u([x[0] - h, x[1]])[0]) / (2.0 * h);
        let dy = (u([x[0], x[1] + h])[1] - u([x[0], x[1] - h])[1]) / (2.0 * h);
        fd = fd.max((dx + dy).abs());
        scale = scale.max(dx.abs()).max(dy.abs());
    }
    outcome(
        analytic < 1e-10 && fd < 1e-6,
        format!("max |div| analytic {analytic:.2e} (< 1e-10), central differences {fd:.2e} (< 1e-6), |∂u| up to {scale:.2}"),
    )
}

// 2. Momentum rows against fourth-order finite differences of the kernel.
fn operator_consistency() -> Outcome {
    let cfg = KernelConfig::default();
    let kappa = cfg.pressure_weight();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let h = 1e-2;
    let d2 = |f: &dyn Fn(f64) -> f64| (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h);
    let d1 = |f: &dyn Fn(f64) -> f64| (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let xi = [uniform(&mut rng, 0.0, 8.0), uniform(&mut rng, 0.0, 1.0)];
        let x = [xi[0] + uniform(&mut rng, -1.5, 1.5), xi[1] + uniform(&mut rng, -1.0, 1.0)];
        let a = apply_stokes_operator(xi, x, &cfg).unwrap();
        let phi = |p: [f64; 2]| phi_div([p[0] - xi[0], p[1] - xi[1]], &cfg).unwrap();
        let pres = |p: [f64; 2]| kappa * phi_pressure(((p[0] - xi[0]).powi(2) + (p[1] - xi[1]).powi(2)).sqrt(), &cfg);
        let mut b = [[0.0; 3]; 2];
        for i in 0..2 {
            for l in 0..2 {
                let lap = d2(&|s| phi([x[0] + s, x[1]])[i][l]) + d2(&|s| phi([x[0], x[1] + s])[i][l]);
                b[i][l] = -cfg.mu * lap;
            }
            b[i][2] = if i == 0 { d1(&|s| pres([x[0] + s, x[1]])) } else { d1(&|s| pres([x[0], x[1] + s])) };
        }
        let (fa, fb): (Vec<f64>, Vec<f64>) = (a.iter().flatten().copied().collect(), b.iter().flatten().copied().collect());
        worst = worst.max(rel(&fb, &fa));
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} over 100 pairs (< 1e-5)"))
}

// 3. Self-convergence of the unobstructed duct under the pulsatile forcing.
fn stokes_self_convergence() -> Outcome {
    let duct = DuctConfig::new(8.0, 1.0, 5.0).unwrap();
    let dom = FluidDomain::new(duct, Obstruction::None).unwrap();
    // g(5) = 0, so the comparison is made at the last forcing peak.
    let t_end = 4.5;
    let pts: Vec<[f64; 2]> = (0..40)
        .map(|k| [0.2 + 7.6 * (k as f64 * 0.618034).fract(), 0.05 + 0.9 * (k as f64 * 0.414214).fract()])
        .collect();
    let profile = InflowProfile::default();
    let run = |n: usize| {
        let nodes = build_node_set(&dom, &NodeSpec::new(n)).unwrap();
        let total = nodes.total();
        let sys = CollocationSystem::assemble(&dom, nodes, &KernelConfig::default()).unwrap();
        let opts = StepOptions { refinement: 1, ..StepOptions::new(1.0 / 200.0, t_end, BdfScheme::Bdf2) };
        let traj = integrate(&sys, &profile.sources(&sys), &opts, None).unwrap();
        let v: Vec<f64> = pts.iter().flat_map(|&x| sys.eval_velocity(&traj, x, t_end).unwrap()).collect();
        (total, v)
    };
    let levels: Vec<(usize, Vec<f64>)> = [125, 250, 500, 1000].into_iter().map(run).collect();
    let errs: Vec<(usize, f64)> = levels.windows(2).map(|w| (w[1].0, rel(&w[0].1, &w[1].1))).collect();
    let decreasing = errs.windows(2).all(|w| w[1].1 < w[0].1);
    let (total, last) = errs[errs.len() - 1];
    let text: Vec<String> = errs.iter().map(|(n, e)| format!("{n} nodes {e:.2e}")).collect();
    outcome(
        decreasing && last <= 1e-3 && (900..=1300).contains(&total),
        format!("error against the next-coarser level: {} (decreasing, ≤ 1e-3 at ~1000)", text.join(", ")),
    )
}

// 4. Reduced propagation operator spectrum at small node counts.
fn stability() -> Outcome {
    let duct = DuctConfig::new(8.0, 1.0, 3.0).unwrap();
    let dom = FluidDomain::new(duct, Obstruction::Cosine(ObstructionParams::new(4.0, 1.0, 0.5))).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for mu in [0.1, 1.0 / 500.0] {
        for n in [100, 150] {
            let nodes = build_node_set(&dom, &NodeSpec::new(n)).unwrap();
            let total = nodes.total();
            let sys = CollocationSystem::assemble(&dom, nodes, &KernelConfig::default().with_mu(mu)).unwrap();
            let ev = sys.reduced_propagation_eigenvalues().unwrap();
            let top = ev.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
            pass &= total <= 300 && top <= 1e-8;
            lines.push(format!("μ={mu} {total} nodes max Re λ = {top:.3e}"));
        }
    }
    outcome(pass, format!("{} (≤ 1e-8)", lines.join("; ")))
}

// 5. Condition estimate at 1119 nodes with the default configuration.
fn condition_order() -> Outcome {
    let duct = DuctConfig::new(8.0, 1.0, 5.0).unwrap();
    let dom = FluidDomain::new(duct, Obstruction::Cosine(ObstructionParams::new(4.0, 1.0, 0.5))).unwrap();
    let nodes = build_node_set(&dom, &NodeSpec::new(918)).unwrap();
    let total = nodes.total();
    let sys = CollocationSystem::assemble(&dom, nodes, &KernelConfig::default()).unwrap();
    let cond = sys.condition_estimate().unwrap();
    outcome(
        total == 1119 && (1e12..=1e16).contains(&cond),
        format!("{total} nodes, condition estimate {cond:.3e} (within [1e12, 1e16])"),
    )
}

// 6. Wave propagator: zero datum, finite speed, top reflection, adjoint identity.
fn wave_propagator() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let cfg = WaveConfig { hx: 0.02, hy: 0.02, dt: 0.01, c: 1.0 };
    let g = WaveGrid::new(8.0, 1.0, 5.0, &cfg, 2.0).unwrap();
    let mut zero = true;
    propagate_with(&BoundaryDatum::zeros(&g), &g, |_, u| zero &= u.iter().all(|v| *v == 0.0)).unwrap();
    pass &= zero;
    notes.push(format!("zero datum gives zero field: {zero}"));

    // Compact source on |x − 4| < 0.3 active for t < 0.2.
    let bump = |x: f64, t: f64| {
        let s = (x - 4.0) / 0.3;
        if s.abs() >= 1.0 || t >= 0.2 {
            0.0
        } else {
            (0.5 * std::f64::consts::PI * s).cos().powi(2) * (std::f64::consts::PI * t / 0.2).sin().powi(2)
        }
    };
    let f = BoundaryDatum::from_fn(&g, bump);
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    let margin = 0.1;
    propagate_with(&f, &g, |n, u| {
        let t = n as f64 * g.dt;
        for j in 0..=g.ny {
            for i in 0..=g.nx {
                let dx = ((g.x(i) - 4.0).abs() - 0.3).max(0.0);
                let r = (dx * dx + (g.y(j) - 1.0).powi(2)).sqrt();
                let v = u[g.idx(i, j)].abs();
                if r > g.c * t + margin {
                    outside = outside.max(v);
                } else {
                    inside = inside.max(v);
                }
            }
        }
    })
    .unwrap();
    let leak = outside / inside;
    pass &= leak < 1e-3;
    notes.push(format!("leakage beyond c·t + {margin} {leak:.2e} (< 1e-3)"));

    // Normally incident plane pulse against the top edge, observed mid-height at the centre.
    let g2 = WaveGrid::new(8.0, 1.0, 3.0, &cfg, 3.8).unwrap();
    let pulse = BoundaryDatum::from_fn(&g2, |_, t| if t < 0.4 { (std::f64::consts::PI * t / 0.4).sin().powi(2) } else { 0.0 });
    let probe = g2.idx(g2.nx / 2, g2.ny / 2);
    let (mut incident, mut reflected) = (0.0f64, 0.0f64);
    propagate_with(&pulse, &g2, |n, u| {
        let t = n as f64 * g2.dt;
        if t < 2.0 {
            incident = incident.max(u[probe].abs());
        } else {
            reflected = reflected.max(u[probe].abs());
        }
    })
    .unwrap();
    let refl = reflected / incident;
    pass &= refl < 0.05;
    notes.push(format!("normal-incidence reflection {refl:.2e} (< 5%)"));

    // ⟨S f, r⟩ = ⟨f, Sᵀ r⟩ for random f and r.
    let g3 = WaveGrid::new(4.0, 1.0, 2.0, &WaveConfig { hx: 0.1, hy: 0.1, dt: 0.02, c: 2.0 }, 1.0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut f = BoundaryDatum::from_fn(&g3, |_, _| 0.0);
    for it in 1..f.0.n_times() {
        f.0.row_mut(it).iter_mut().for_each(|v| *v = uniform(&mut rng, -1.0, 1.0));
    }
    let sf = propagate(&f, &g3, [0.5, 3.5]).unwrap();
    let mut r = sf.clone();
    r.field.values.iter_mut().for_each(|v| *v = uniform(&mut rng, -1.0, 1.0));
    let lhs: f64 = sf.field.values.iter().zip(&r.field.values).map(|(a, b)| a * b).sum();
    let rhs = f.inner(&adjoint_propagate(&r, &g3).unwrap());
    let adj = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
    pass &= adj < 1e-10;
    notes.push(format!("adjoint identity {adj:.2e} (< 1e-10)"));
    outcome(pass, notes.join("; "))
}

// 7. Gradient of J₁ against central differences.
fn gradient_correctness() -> Outcome {
    let duct = DuctConfig::new(4.0, 1.0, 2.0).unwrap();
    let grid = WaveGrid::new(4.0, 1.0, 2.0, &WaveConfig { hx: 0.1, hy: 0.1, dt: 0.02, c: 2.0 }, 1.5).unwrap();
    let geom = MeasurementGeometry::new(&duct, [0.0, 4.0], None, 2.0).unwrap();
    let truth = BoundaryDatum::from_fn(&grid, |x, t| (1.3 * x).sin() * (3.0 * t).sin());
    let data = propagate(&truth, &grid, [0.0, 4.0]).unwrap();
    let p = BoundaryRecoveryProblem::new(data, geom, grid.clone(), RecoveryOptions::default()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let random = |rng: &mut ChaCha20Rng| {
        let mut d = BoundaryDatum::zeros(&grid);
        for it in 1..d.0.n_times() {
            d.0.row_mut(it).iter_mut().for_each(|v| *v = uniform(rng, -1.0, 1.0));
        }
        d
    };
    let f = random(&mut rng);
    let grad = p.grad_j1(&f).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut d = random(&mut rng);
        d.project_admissible(p.t_keep());
        let eps = 1e-3;
        let shifted = |s: f64| {
            let mut g = f.clone();
            g.0.values.iter_mut().zip(&d.0.values).for_each(|(a, b)| *a += s * b);
            p.eval_j1(&g).unwrap()
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let an = grad.inner(&d);
        worst = worst.max((fd - an).abs() / an.abs());
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} in 20 directions (< 1e-5)"))
}

// 8. Boundary recovery in the inverse regime on a grid of twice the spacing
// of the synthesis grid.
fn boundary_recovery() -> Outcome {
    let c = 30f64.sqrt();
    let duct = DuctConfig::new(8.0, 1.0, 3.0).unwrap();
    let fine = WaveGrid::new(8.0, 1.0, 3.0, &WaveConfig { hx: 0.05, hy: 0.05, dt: 0.002, c }, 1.0).unwrap();
    let coarse = WaveGrid::new(8.0, 1.0, 3.0, &WaveConfig { hx: 0.1, hy: 0.1, dt: 0.002, c }, 1.0).unwrap();
    let t_keep = 1.0 - 2.0 / c;
    let pi = std::f64::consts::PI;
    let truth = |x: f64, t: f64| {
        if t >= t_keep {
            0.0
        } else {
            (pi * t / t_keep).sin().powi(2) * (1.0 + 0.5 * (pi * x / 8.0).sin() + 0.3 * (pi * x / 4.0).cos())
        }
    };
    let (f_fine, f_coarse) = (BoundaryDatum::from_fn(&fine, truth), BoundaryDatum::from_fn(&coarse, truth));
    let recover = |fine_datum: &BoundaryDatum, seg: [f64; 2]| {
        let m = propagate(fine_datum, &fine, seg).unwrap();
        let template = propagate(&BoundaryDatum::zeros(&coarse), &coarse, seg).unwrap();
        // Coarse abscissae are every other fine one.
        let mut field = template.field.clone();
        for it in 0..field.n_times() {
            for ix in 0..field.n_positions() {
                field.set(it, ix, m.field.get(it, 2 * ix));
            }
        }
        let geom = MeasurementGeometry::new(&duct, seg, None, c).unwrap();
        let p = BoundaryRecoveryProblem::new(WaveMeasurements { segment: seg, field }, geom, coarse.clone(), RecoveryOptions::default()).unwrap();
        let rep = recover_boundary_datum(&p, None).unwrap();
        (p.t_keep(), rep.datum)
    };
    let (tk_full, est_full) = recover(&f_fine, [0.0, 8.0]);
    let err_full = relative_l2_error(&est_full.0, &f_coarse.0, tk_full);
    let (tk_part, est_part) = recover(&f_fine, [0.0, 3.0]);
    let err_part = relative_l2_error(&est_part.0, &f_coarse.0, tk_full);
    let err_part_own = relative_l2_error(&est_part.0, &f_coarse.0, tk_part);

    // For information: the coupled fluid stress as the datum, which has energy
    // after T − t_c and obstruction-scale structure that is evanescent across S.
    let dom = FluidDomain::new(duct, Obstruction::Cosine(ObstructionParams::new(4.0, 1.0, 0.5))).unwrap();
    let sys = CollocationSystem::assemble(&dom, build_node_set(&dom, &NodeSpec::new(150)).unwrap(), &KernelConfig::default().with_mu(1.0 / 500.0)).unwrap();
    let traj = integrate(&sys, &InflowProfile::default().sources(&sys), &StepOptions::new(0.002, 1.0, BdfScheme::Bdf2), None).unwrap();
    let stress_fine = couple_stress_to_datum(&sys.normal_stress_trace(&traj, &fine.xs(), &traj.times).unwrap(), &fine).unwrap();
    let stress_coarse = couple_stress_to_datum(&sys.normal_stress_trace(&traj, &coarse.xs(), &traj.times).unwrap(), &coarse).unwrap();
    let (_, est_fluid) = recover(&stress_fine, [0.0, 8.0]);
    let err_fluid = relative_l2_error(&est_fluid.0, &stress_coarse.0, tk_full);

    outcome(
        err_full <= 0.10 && err_part >= err_full,
        format!(
            "full S_m error {err_full:.4} (≤ 0.10); S_m = [0,3] error {err_part:.4} (not better; \
             {err_part_own:.4} on its own window t ≤ {tk_part:.4}); \
             [info] coupled fluid-stress datum {err_fluid:.4}"
        ),
    )
}

// 9 and 11. Experiment-2 analogue at desk scale over three seeds, then one
// seed rerun into a fresh directory.
fn obstacle_runs() -> ((Outcome, Duration), (Outcome, Duration)) {
    let truth = [4.0, 1.0, 0.5];
    let root = tempfile::tempdir().unwrap();
    let config = |seed: u64| {
        let mut c = ExperimentConfig::preset(2).unwrap().with_seed(seed);
        c.chain.sampler.length = 2000;
        c
    };
    let mut pass = true;
    let mut lines = Vec::new();
    let all = Instant::now();
    for seed in 1..=3 {
        let c = config(seed);
        let dir = root.path().join(format!("seed-{seed}"));
        let start = Instant::now();
        let (art, _) = run_experiment(&c, &dir).unwrap();
        let text = std::fs::read_to_string(art.path(ductprobe::harness::SUMMARY_FILE)).unwrap();
        let s: ductprobe::harness::ExperimentSummary = serde_json::from_str(&text).unwrap();
        let m = s.chain.mean;
        let sd = s.chain.sd;
        let within = (0..3).all(|i| (m[i] - truth[i]).abs() <= 3.0 * sd[i]);
        let dist = s.misfit.value();
        // Posterior SD over the SD of the uniform prior; near 1 means the data barely inform θ.
        let (lo, hi) = (c.chain.prior.lower, c.chain.prior.upper);
        let ratio: Vec<String> = (0..3).map(|i| format!("{:.2}", sd[i] * 12f64.sqrt() / (hi[i] - lo[i]))).collect();
        pass &= within && dist <= 0.5;
        lines.push(format!(
            "seed {seed}: mean ({:.4}, {:.4}, {:.4}) sd ({:.4}, {:.4}, {:.4}) ‖θ̄−θ*‖ {dist:.4} within-3sd {within} acc {:.2} [info] sd/prior sd ({}) [{:.0?}]",
            m[0], m[1], m[2], sd[0], sd[1], sd[2], s.chain.acceptance_rate, ratio.join(", "), start.elapsed()
        ));
    }
    let c9 = (outcome(pass, format!("{} (all seeds: within 3 S.D., ‖θ̄−θ*‖₂ ≤ 0.5)", lines.join("; "))), all.elapsed());
    let rerun = Instant::now();

    let c = config(1);
    let again = root.path().join("seed-1-rerun");
    run_experiment(&c, &again).unwrap();
    let a = std::fs::read(root.path().join("seed-1").join(CHAIN_FILE)).unwrap();
    let b = std::fs::read(again.join(CHAIN_FILE)).unwrap();
    let c11 = (outcome(a == b, format!("seed-1 chain rerun: {} bytes, identical {}", a.len(), a == b)), rerun.elapsed());
    (c9, c11)
}

// 10. Travel-time cutoffs against dense sampling of the wall.
fn cutoffs() -> Outcome {
    let c = 30f64.sqrt();
    let duct = DuctConfig::new(8.0, 1.0, 3.0).unwrap();
    let wall = Segment { a: [0.0, 1.0], b: [8.0, 1.0] };
    let mut notes = Vec::new();
    let mut pass = true;
    for (seg, expect) in [([0.0, 8.0], 2.0 / c), ([0.0, 3.0], 29f64.sqrt() / c)] {
        let geom = MeasurementGeometry::new(&duct, seg, None, c).unwrap();
        let tc = travel_time_cutoff(&geom, wall).unwrap();
        let n = 100_000;
        let dense = (0..=n)
            .map(|k| {
                let x = 8.0 * k as f64 / n as f64;
                let gap = (seg[0] - x).max(x - seg[1]).max(0.0);
                (gap * gap + 4.0).sqrt() / c
            })
            .fold(0.0, f64::max);
        let err = (tc - dense).abs().max((tc - expect).abs());
        pass &= err <= 1e-12;
        notes.push(format!("S_m {seg:?}: t_c {tc:.15} error {err:.1e}"));
    }
    outcome(pass, format!("{} (≤ 1e-12)", notes.join("; ")))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<Row> = Vec::new();
    timed(&mut results, &run, 1, "kernel exactness", 1, &kernel_exactness);
    timed(&mut results, &run, 2, "operator consistency", 5, &operator_consistency);
    timed(&mut results, &run, 3, "Stokes self-convergence", 300, &stokes_self_convergence);
    timed(&mut results, &run, 4, "stability", 60, &stability);
    timed(&mut results, &run, 5, "condition-number order", 120, &condition_order);
    timed(&mut results, &run, 6, "wave propagator", 60, &wave_propagator);
    timed(&mut results, &run, 7, "gradient correctness", 120, &gradient_correctness);
    timed(&mut results, &run, 8, "boundary recovery", 600, &boundary_recovery);
    if run(9) || run(11) {
        let ((c9, t9), (c11, t11)) = obstacle_runs();
        for (n, name, o, t, budget) in [(9, "obstacle inversion", c9, t9, 7200), (11, "reproducibility", c11, t11, 7200)] {
            report(n, name, &o, t, Duration::from_secs(budget));
            results.push((n, name, o, t, Duration::from_secs(budget)));
        }
    }
    timed(&mut results, &run, 10, "t_c values", 1, &cutoffs);

    println!("\nacceptance summary");
    let mut failed = false;
    results.sort_by_key(|r| r.0);
    for (n, name, o, took, budget) in &results {
        let ok = o.pass && took <= budget;
        let tag = if ok { "PASS" } else if KNOWN_FAILURES.contains(n) { "FAIL (known)" } else { "FAIL" };
        println!("  {n:>2} {tag:<12} {name}");
        failed |= !ok && !KNOWN_FAILURES.contains(n);
    }
    if failed {
        std::process::exit(1);
    }
}

type Row = (u32, &'static str, Outcome, Duration, Duration);

fn timed(results: &mut Vec<Row>, run: &dyn Fn(u32) -> bool, n: u32, name: &'static str, budget: u64, f: &dyn Fn() -> Outcome) {
    if run(n) {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        report(n, name, &o, took, Duration::from_secs(budget));
        results.push((n, name, o, took, Duration::from_secs(budget)));
    }
}

fn report(n: u32, name: &str, o: &Outcome, took: Duration, budget: Duration) {
    let ok = o.pass && took <= budget;
    println!(
        "criterion {n:>2} {}: {name}: {} [{:.1?}, budget {:?}]",
        if ok { "PASS" } else { "FAIL" },
        o.detail,
        took,
        budget
    );
}
