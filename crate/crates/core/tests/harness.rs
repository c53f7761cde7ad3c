use ductprobe::geometry::{FluidDomain, NodeLayout, NodeSpec, Obstruction};
use ductprobe::harness::*;
use ductprobe::inverse_obstacle::ChainSummary;
use ductprobe::stokes::{simulate, InflowProfile};
use ductprobe::wave::{couple_stress_to_datum, propagate};
use ductprobe::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Preset `id` shrunk to run in about a second.
fn tiny(id: u32) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(id).unwrap();
    for (flow, n, layout) in [
        (&mut c.synthesis.flow, 60, NodeLayout::Scattered),
        (&mut c.inversion.flow, 40, NodeLayout::Mapped),
    ] {
        flow.nodes = NodeSpec { layout, ..NodeSpec::new(n) };
        flow.dt = 0.01;
        flow.t_end = 0.5;
    }
    c.synthesis.wave.hx = 0.25;
    c.synthesis.wave.hy = 0.25;
    c.inversion.wave.hx = 0.5;
    c.inversion.wave.hy = 0.5;
    c.synthesis.wave.dt = 0.01;
    c.inversion.wave.dt = 0.01;
    c.inversion.recovery.max_iters = 20;
    c.chain.sampler.length = 30;
    c
}

fn tiny_forward(scale: f64) -> ForwardConfig {
    let mut f = ForwardConfig::default();
    f.flow.nodes = NodeSpec::new(40);
    f.flow.t_end = 1.2;
    f.flow.dt = 0.02;
    f.flow.assembly.check_condition = false;
    f.flow.inflow = InflowProfile::default().scaled(scale);
    f.wave.hx = 0.25;
    f.wave.hy = 0.25;
    f.wave.dt = 0.02;
    f.snapshot_every = 20;
    f.fluid_grid = [9, 3];
    f
}

#[test]
fn presets_roundtrip_through_toml() {
    for id in 1..=8 {
        let c = ExperimentConfig::preset(id).unwrap();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c, "preset {id}");
    }
    assert!(ExperimentConfig::preset(9).unwrap_err().is_config());
}

#[test]
fn partial_toml_fills_defaults() {
    let c = ExperimentConfig::from_toml(
        r#"
        id = 4
        [measurement]
        wave_segment = [0.0, 8.0]
        [chain.sampler]
        length = 100
        "#,
    )
    .unwrap();
    assert_eq!(c.measurement.velocity_segment, None);
    assert_eq!(c.chain.sampler.length, 100);
    assert_eq!(c.chain.sampler.adapt_interval, 100);
    assert_eq!(c.inversion, ExperimentConfig::preset(2).unwrap().inversion);
    assert!(ExperimentConfig::from_toml("[chain]\nsampler = 3").unwrap_err().is_config());
}

#[test]
fn inverse_crime_guard() {
    let mut c = ExperimentConfig::preset(2).unwrap();
    c.inversion.flow.nodes.n_interior = c.synthesis.flow.nodes.n_interior;
    let e = c.validate().unwrap_err();
    assert!(e.is_config() && e.to_string().contains("inverse crime"), "{e}");
    let mut c = ExperimentConfig::preset(2).unwrap();
    c.synthesis.wave.hx = 0.2;
    assert!(c.validate().unwrap_err().is_config());
}

#[test]
fn seed_and_resolution_overrides() {
    let c = ExperimentConfig::preset(2).unwrap().with_seed(9).with_resolution(0.5).unwrap();
    assert_eq!((c.synthesis.seed, c.chain.sampler.seed), (9, 10));
    assert_eq!(c.synthesis.flow.nodes.n_interior, 200);
    assert_eq!(c.inversion.flow.nodes.n_interior, 75);
    assert!(ExperimentConfig::preset(2).unwrap().with_resolution(0.0).is_err());
}

#[test]
fn spline_truth_is_feasible() {
    let c = ExperimentConfig::preset(7).unwrap();
    let Obstruction::Spline(s) = &c.truth else { panic!("spline truth expected") };
    FluidDomain::new(c.duct, c.truth.clone()).unwrap();
    assert!((s.height_at(2.75) - 0.4).abs() < 1e-12);
    assert_eq!(c.chain.prior.upper[1], 2.5);
}

#[test]
fn noise_sample_statistics() {
    let xs: Vec<f64> = (0..200).map(|k| k as f64).collect();
    let ts: Vec<f64> = (0..100).map(|k| k as f64).collect();
    let clean = ductprobe::series::TimeSeriesField::from_fn(xs, ts, |x, t| (x * 0.1).sin() * t);
    let mut noisy = clean.clone();
    add_noise(&mut noisy, 1e-5, &mut ChaCha20Rng::seed_from_u64(4));
    let d: Vec<f64> = noisy.values.iter().zip(&clean.values).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(d.len() >= 10_000);
    assert!((sd / 1e-5 - 1.0).abs() < 0.1, "{sd}");
    assert!(mean.abs() < 4.0 * 1e-5 / n.sqrt());
}

#[test]
fn noiseless_synthesis_equals_forward_traces() {
    let mut c = tiny(2);
    c.synthesis.noise.level = 0.0;
    let syn = synthesize(&c).unwrap();
    assert_eq!(syn.wave, syn.clean_wave);
    assert_eq!(syn.velocity, syn.clean_velocity);

    let dom = FluidDomain::new(c.duct, c.truth.clone()).unwrap();
    let grid = c.synthesis_grid().unwrap();
    let (sys, traj) = simulate(&dom, &c.synthesis.flow).unwrap();
    let stress = sys.normal_stress_trace(&traj, &grid.xs(), &traj.times).unwrap();
    let w = propagate(&couple_stress_to_datum(&stress, &grid).unwrap(), &grid, [0.0, 8.0]).unwrap();
    assert_eq!(syn.wave, w);
    let v = sys.tangential_velocity_trace(&traj, &grid.xs(), &traj.times).unwrap();
    assert_eq!(syn.velocity.unwrap(), v);
}

#[test]
fn noisy_synthesis_differs_by_the_noise() {
    let syn = synthesize(&tiny(2)).unwrap();
    let diff: Vec<f64> = syn
        .wave
        .field
        .values
        .iter()
        .zip(&syn.clean_wave.field.values)
        .chain(syn.velocity.as_ref().unwrap().values.iter().zip(&syn.clean_velocity.as_ref().unwrap().values))
        .map(|(a, b)| a - b)
        .collect();
    let rms = (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt();
    assert!((rms / 1e-5 - 1.0).abs() < 0.1, "{rms} over {} samples", diff.len());
}

#[test]
fn experiment_one_measures_only_the_left_segment() {
    let syn = synthesize(&tiny(1)).unwrap();
    let xs = &syn.wave.field.positions;
    assert_eq!((xs[0], *xs.last().unwrap()), (0.0, 3.0));
    assert_eq!(syn.wave.segment, [0.0, 3.0]);
    let v = syn.velocity.unwrap();
    assert_eq!((v.positions[0], *v.positions.last().unwrap()), (0.0, 2.0));
}

#[test]
fn stages_demand_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(2);
    let e = run_invert_wave(&c, dir.path()).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact(ref m) if m.contains(WAVE_MEASUREMENTS)), "{e}");
    let art = RunArtifacts::open(dir.path()).unwrap();
    assert_eq!(art.manifest.stages["invert-wave"].status, StageStatus::Failed);
    assert!(matches!(run_report(dir.path()).unwrap_err(), Error::MissingArtifact(_)));

    run_synthesis(&c, dir.path()).unwrap();
    let art = RunArtifacts::open(dir.path()).unwrap();
    art.verify().unwrap();
    // A modified artifact no longer satisfies the manifest.
    let p = art.path(WAVE_MEASUREMENTS);
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push_str("# edited\n");
    std::fs::write(&p, text).unwrap();
    assert!(matches!(art.verify().unwrap_err(), Error::MissingArtifact(_)));
    assert!(matches!(run_invert_wave(&c, dir.path()).unwrap_err(), Error::MissingArtifact(_)));
}

#[test]
fn pipeline_is_byte_reproducible() {
    let c = tiny(2).with_seed(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (art_a, report) = run_experiment(&c, a.path()).unwrap();
    let (art_b, _) = run_experiment(&c, b.path()).unwrap();
    art_a.verify().unwrap();
    for name in [WAVE_MEASUREMENTS, VELOCITY_MEASUREMENTS, RECOVERED_DATUM, CHAIN_FILE, SUMMARY_FILE, DENSITY_FILE, SHAPE_FILE, REPORT_CSV] {
        let x = std::fs::read(art_a.path(name)).unwrap();
        let y = std::fs::read(art_b.path(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert_eq!(
        std::fs::read(art_a.path(MANIFEST_FILE)).unwrap(),
        std::fs::read(art_b.path(MANIFEST_FILE)).unwrap()
    );
    assert!(report.csv.starts_with("parameter,original,mean,sd\ntheta1,4,"));
    assert!(report.csv.contains("parameter_distance,,"));
    let chain = load_chain(&art_a.path(CHAIN_FILE)).unwrap();
    assert_eq!(chain.len(), 30);

    // A rerun in place reuses the measurements and reproduces the chain.
    let before = std::fs::read(art_a.path(CHAIN_FILE)).unwrap();
    run_experiment(&c, a.path()).unwrap();
    assert_eq!(std::fs::read(art_a.path(CHAIN_FILE)).unwrap(), before);
}

#[test]
fn experiment_four_has_no_velocity_term() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(4);
    run_synthesis(&c, dir.path()).unwrap();
    run_invert_wave(&c, dir.path()).unwrap();
    let art = RunArtifacts::open(dir.path()).unwrap();
    assert!(!art.path(VELOCITY_MEASUREMENTS).exists());
    let p = load_obstacle_problem(&c, &art).unwrap();
    assert!(p.velocity.is_none());
    assert_eq!(p.data_energy_terms().velocity, 0.0);
    assert_eq!(p.j2_terms([3.0, 0.6, 0.1]).unwrap().velocity, 0.0);
}

#[test]
fn spline_experiment_reports_trace_misfit() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = run_experiment(&tiny(8), dir.path()).unwrap();
    assert!(report.csv.contains("theta1,n/a,"));
    assert!(report.csv.contains("trace_misfit,,"));
    assert!(report.markdown.contains("| θ2 | n/a |"));
}

fn known_summary() -> ExperimentSummary {
    ExperimentSummary {
        id: Some(2),
        original: Some([4.0, 1.0, 0.5]),
        chain: ChainSummary {
            n_used: 4000,
            burn_in: 1000,
            mean: [3.9652, 1.0879, 0.4841],
            sd: [0.3207, 0.2567, 0.0593],
            acceptance_rate: 0.25,
            density: [Vec::new(), Vec::new(), Vec::new()],
            distance: Some(0.0959),
            truth: Some([4.0, 1.0, 0.5]),
        },
        mc_error: Some([0.01; 3]),
        misfit: Misfit::ParameterDistance { value: 0.0959 },
        shape_misfit: 0.01,
        sigma_lik: 1e-5,
        data_energy: 1.0,
        forward_evaluations: 5000,
        warnings: Vec::new(),
    }
}

#[test]
fn report_reproduces_summary_numbers() {
    let r = emit_report(&known_summary()).unwrap();
    assert_eq!(
        r.csv,
        "parameter,original,mean,sd\ntheta1,4,3.9652,0.3207\ntheta2,1,1.0879,0.2567\ntheta3,0.5,0.4841,0.0593\nparameter_distance,,0.0959,\n"
    );
    assert!(r.markdown.contains("| θ1 | 4 | 3.9652 | 0.3207 |"));

    let mut s = known_summary();
    s.original = None;
    s.misfit = Misfit::TraceMisfit { value: 0.1251 };
    let r = emit_report(&s).unwrap();
    assert!(r.csv.contains("theta3,n/a,0.4841,0.0593\ntrace_misfit,,0.1251,"));

    s.chain.n_used = 0;
    assert!(emit_report(&s).is_err());
}

#[test]
fn forward_pipeline_is_linear_in_the_forcing() {
    let one = forward_fields(&tiny_forward(1.0)).unwrap();
    let two = forward_fields(&tiny_forward(2.0)).unwrap();
    let zero = forward_fields(&tiny_forward(0.0)).unwrap();
    assert!(zero.stress.values.iter().chain(&zero.velocity.values).all(|v| *v == 0.0));
    assert!(zero.wave_snapshots.iter().all(|(_, u)| u.iter().all(|v| *v == 0.0)));
    assert!(zero.energy.iter().all(|e| e.1 == 0.0));

    let close = |a: &[f64], b: &[f64]| {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).all(|(x, y)| (2.0 * x - y).abs() <= 1e-9 * scale)
    };
    assert!(close(&one.stress.values, &two.stress.values));
    assert!(close(&one.velocity.values, &two.velocity.values));
    for ((_, u1), (_, u2)) in one.wave_snapshots.iter().zip(&two.wave_snapshots) {
        assert!(close(u1, u2));
    }
    assert!(one.energy.iter().filter(|e| e.0 > 1.0).all(|e| e.1 > 0.0));
}

#[test]
fn forward_stage_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let art = run_forward(&tiny_forward(1.0), dir.path()).unwrap();
    art.verify().unwrap();
    for name in FORWARD_FILES {
        assert!(art.path(name).exists(), "{name}");
    }
    let snaps = std::fs::read_to_string(art.path("fluid_snapshots.txt")).unwrap();
    // 4 snapshot times of a 9 × 3 grid plus the header.
    assert_eq!(snaps.lines().count(), 4 * 27 + 1);
}
