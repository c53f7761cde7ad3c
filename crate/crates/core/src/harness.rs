//! Experiment configuration, the staged forward / synthesis / inversion
//! pipeline, and the artifact manifest that links the stages.
//!
//! Every stage reads its inputs from files recorded in `manifest.json` (and
//! checks their hashes), so an inversion never sees in-memory state of the
//! run that produced its data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::geometry::{
    DuctConfig, FluidDomain, MeasurementGeometry, NodeLayout, NodeSpec, Obstruction, ObstructionParams,
    SplineObstruction,
};
use crate::inverse_boundary::{recover_boundary_datum, BoundaryRecoveryProblem, RecoveryOptions};
use crate::inverse_obstacle::{
    batch_means_error, dram_sample, summarize_chain, ChainOptions, ChainSummary, ObstacleInverseProblem,
    PosteriorChain, PriorBox,
};
use crate::kernels::KernelConfig;
use crate::series::TimeSeriesField;
use crate::stokes::{simulate, FlowSolverConfig};
use crate::wave::{
    couple_stress_to_datum, propagate, propagate_with, relative_l2_error, Sampler, WaveConfig,
    WaveGrid, WaveMeasurements,
};
use crate::Result;

/// How the configured noise level is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseInterpretation {
    #[default]
    Std,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub level: f64,
    pub interpretation: NoiseInterpretation,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            level: 1e-5,
            interpretation: NoiseInterpretation::Std,
        }
    }
}

impl NoiseConfig {
    pub fn std(&self) -> f64 {
        match self.interpretation {
            NoiseInterpretation::Std => self.level,
            NoiseInterpretation::Variance => self.level.sqrt(),
        }
    }
}

/// Rule that fixes `σ_lik` in `exp(−J₂ / 2σ_lik²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum LikelihoodScale {
    /// The synthetic measurement-noise std.
    Noise,
    Fixed { sigma: f64 },
    /// `σ_lik² = fraction · E`, with `E` the energy of the data entering `J₂`.
    Relative { fraction: f64 },
}

impl Default for LikelihoodScale {
    fn default() -> Self {
        Self::Relative { fraction: 0.01 }
    }
}

impl LikelihoodScale {
    pub fn sigma(&self, noise_std: f64, data_energy: f64) -> Result<f64> {
        let s = match *self {
            Self::Noise => noise_std,
            Self::Fixed { sigma } => sigma,
            Self::Relative { fraction } => (fraction * data_energy).sqrt(),
        };
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(Error::Config(format!("likelihood rule {self:?} gives σ_lik = {s}")))
        }
    }
}

/// Measurement sets: `S_m × {H}` for the wave and `Γ_m` on the upper wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub wave_segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_segment: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub flow: FlowSolverConfig,
    pub wave: WaveConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub flow: FlowSolverConfig,
    pub wave: WaveConfig,
    #[serde(default)]
    pub recovery: RecoveryOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(default)]
    pub sampler: ChainOptions,
    #[serde(default = "default_theta0")]
    pub theta0: [f64; 3],
    #[serde(default = "PriorBox::standard")]
    pub prior: PriorBox,
    #[serde(default)]
    pub likelihood: LikelihoodScale,
}

fn default_theta0() -> [f64; 3] {
    [3.0, 0.6, 0.1]
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            sampler: ChainOptions::default(),
            theta0: default_theta0(),
            prior: PriorBox::standard(),
            likelihood: LikelihoodScale::default(),
        }
    }
}

/// The `forward` subcommand: one coupled simulation with plot output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardConfig {
    pub duct: DuctConfig,
    pub obstruction: Obstruction,
    pub flow: FlowSolverConfig,
    pub wave: WaveConfig,
    /// Wave time steps between snapshots.
    pub snapshot_every: usize,
    /// Evaluation grid `[nx, ny]` for fluid snapshots.
    pub fluid_grid: [usize; 2],
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            duct: DuctConfig {
                length: 8.0,
                diameter: 1.0,
                wave_top: 5.0,
                side: Default::default(),
            },
            obstruction: Obstruction::Cosine(ObstructionParams::new(4.0, 1.0, 0.5)),
            flow: FlowSolverConfig::default(),
            wave: WaveConfig {
                hx: 0.05,
                hy: 0.05,
                dt: 1.0 / 200.0,
                c: 1.0,
            },
            snapshot_every: 100,
            fluid_grid: [81, 11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub id: Option<u32>,
    pub duct: DuctConfig,
    pub truth: Obstruction,
    pub measurement: MeasurementConfig,
    pub synthesis: SynthesisConfig,
    pub inversion: InversionConfig,
    pub chain: ChainConfig,
    pub forward: ForwardConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(2).expect("preset 2 exists")
    }
}

/// Knots of the spline truth used by the experiments with a mismatched shape class.
pub fn default_spline_truth() -> SplineObstruction {
    SplineObstruction::new(&[[2.0, 0.0], [2.4, 0.25], [2.75, 0.4], [3.1, 0.25], [3.5, 0.0]])
        .expect("default spline knots are valid")
}

impl ExperimentConfig {
    /// Experiments 1–8 in the inverse regime `Ω = [0,8]×[0,1]`, `S = [0,8]×[1,3]`,
    /// `T = 1`, `Δt = 1/500`, `c = √30`, `μ = 1/500`, at desk-scale resolution.
    pub fn preset(id: u32) -> Result<Self> {
        let cosine = |t: [f64; 3]| Obstruction::Cosine(ObstructionParams::from_array(t));
        let spline = Obstruction::Spline(default_spline_truth());
        let centre = cosine([4.0, 1.0, 0.5]);
        let (wave_segment, velocity_segment, truth, prior) = match id {
            1 => ([0.0, 3.0], Some([0.0, 2.0]), centre, PriorBox::standard()),
            2 => ([0.0, 8.0], Some([0.0, 8.0]), centre, PriorBox::standard()),
            3 => ([5.0, 8.0], Some([6.0, 8.0]), centre, PriorBox::standard()),
            4 => ([0.0, 8.0], None, centre, PriorBox::standard()),
            5 => ([0.0, 8.0], Some([0.0, 8.0]), cosine([2.5, 1.0, 0.5]), PriorBox::standard()),
            6 => ([0.0, 8.0], Some([0.0, 8.0]), cosine([5.5, 1.0, 0.5]), PriorBox::standard()),
            7 => ([0.0, 8.0], Some([0.0, 8.0]), spline, PriorBox::wide()),
            8 => ([0.0, 8.0], None, spline, PriorBox::wide()),
            _ => return Err(Error::Config(format!("no experiment {id}; presets are 1 to 8"))),
        };
        let (dt, t_end, mu, c) = (1.0 / 500.0, 1.0, 1.0 / 500.0, 30f64.sqrt());
        let flow = |n: usize, layout: NodeLayout, refinement: usize| {
            let mut f = FlowSolverConfig {
                nodes: NodeSpec {
                    layout,
                    ..NodeSpec::new(n)
                },
                kernel: KernelConfig::default().with_mu(mu),
                dt,
                t_end,
                refinement,
                ..Default::default()
            };
            f.assembly.check_condition = false;
            f
        };
        let wave = |h: f64| WaveConfig { hx: h, hy: h, dt, c };
        Ok(Self {
            id: Some(id),
            duct: DuctConfig {
                length: 8.0,
                diameter: 1.0,
                wave_top: 3.0,
                side: Default::default(),
            },
            truth,
            measurement: MeasurementConfig {
                wave_segment,
                velocity_segment,
            },
            synthesis: SynthesisConfig {
                flow: flow(400, NodeLayout::Scattered, 1),
                wave: wave(0.05),
                noise: NoiseConfig::default(),
                seed: 0,
            },
            inversion: InversionConfig {
                flow: flow(150, NodeLayout::Mapped, 0),
                wave: wave(0.1),
                recovery: RecoveryOptions::default(),
            },
            chain: ChainConfig {
                prior,
                ..Default::default()
            },
            forward: ForwardConfig::default(),
            output_dir: Some(PathBuf::from(format!("runs/experiment-{id}"))),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the noise seed to `seed` and the chain seed to `seed + 1`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthesis.seed = seed;
        self.chain.sampler.seed = seed.wrapping_add(1);
        self
    }

    /// Multiplies every fluid node count by `scale`.
    pub fn with_resolution(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("resolution scale {scale} must be positive")));
        }
        for nodes in [
            &mut self.synthesis.flow.nodes,
            &mut self.inversion.flow.nodes,
            &mut self.forward.flow.nodes,
        ] {
            nodes.n_interior = ((nodes.n_interior as f64 * scale).round() as usize).max(4);
        }
        Ok(self)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/custom"))
    }

    pub fn truth_theta(&self) -> Option<[f64; 3]> {
        match &self.truth {
            Obstruction::Cosine(p) => Some(p.as_array()),
            _ => None,
        }
    }

    pub fn measurement_geometry(&self) -> Result<MeasurementGeometry> {
        Ok(MeasurementGeometry::new(
            &self.duct,
            self.measurement.wave_segment,
            self.measurement.velocity_segment,
            self.inversion.wave.c,
        )?)
    }

    pub fn synthesis_grid(&self) -> Result<WaveGrid> {
        wave_grid(&self.duct, &self.synthesis.wave, self.synthesis.flow.t_end)
    }

    pub fn inversion_grid(&self) -> Result<WaveGrid> {
        wave_grid(&self.duct, &self.inversion.wave, self.inversion.flow.t_end)
    }

    /// Validates every section, including the inverse-crime guard: the
    /// synthesis fluid resolution must strictly exceed the inversion's, and
    /// its wave grid must be no coarser.
    pub fn validate(&self) -> Result<()> {
        self.duct.validate()?;
        FluidDomain::new(self.duct, self.truth.clone())?;
        self.measurement_geometry()?;
        for flow in [&self.synthesis.flow, &self.inversion.flow] {
            flow.kernel.validate()?;
            flow.step_options().n_steps()?;
        }
        if (self.synthesis.flow.t_end - self.inversion.flow.t_end).abs() > 1e-12 {
            return Err(Error::Config("synthesis and inversion must share the final time T".into()));
        }
        if (self.synthesis.wave.c - self.inversion.wave.c).abs() > 0.0 {
            return Err(Error::Config("synthesis and inversion must share the wave speed".into()));
        }
        self.synthesis_grid()?;
        self.inversion_grid()?;
        let (ns, ni) = (self.synthesis.flow.nodes.n_interior, self.inversion.flow.nodes.n_interior);
        if ns <= ni {
            return Err(Error::Config(format!(
                "inverse crime: synthesis uses {ns} interior nodes, inversion {ni}; synthesis must be finer"
            )));
        }
        if self.synthesis.wave.hx > self.inversion.wave.hx || self.synthesis.wave.hy > self.inversion.wave.hy {
            return Err(Error::Config("synthesis wave grid is coarser than the inversion grid".into()));
        }
        let noise = self.synthesis.noise;
        if !(noise.level >= 0.0 && noise.level.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be non-negative", noise.level)));
        }
        self.chain.prior.validate()?;
        self.chain.sampler.validate()?;
        if !self.chain.prior.contains(self.chain.theta0) {
            return Err(Error::Config(format!("θ₀ = {:?} lies outside the prior box", self.chain.theta0)));
        }
        if self.chain.likelihood == LikelihoodScale::Noise && noise.std() == 0.0 {
            return Err(Error::Config("σ_lik from the noise level needs a positive noise level".into()));
        }
        Ok(())
    }
}

fn wave_grid(duct: &DuctConfig, cfg: &WaveConfig, t_end: f64) -> Result<WaveGrid> {
    Ok(WaveGrid::new(duct.length, duct.diameter, duct.wave_top, cfg, t_end)?)
}

// Artifact manifest.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub files: Vec<FileRecord>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// A run directory together with its manifest.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunArtifacts {
    /// Opens (creating if needed) `dir` and loads its manifest, if any.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?
        } else {
            Manifest::default()
        };
        Ok(Self { dir, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Records `files` (already written) as the outputs of a successful `stage`.
    pub fn commit(&mut self, stage: &str, files: &[&str], diagnostics: Vec<String>) -> Result<()> {
        let mut records = Vec::with_capacity(files.len());
        for name in files {
            let (sha256, bytes) = sha256_file(&self.path(name))?;
            records.push(FileRecord {
                path: name.to_string(),
                sha256,
                bytes,
            });
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                status: StageStatus::Ok,
                files: records,
                diagnostics,
            },
        );
        self.save()
    }

    pub fn fail(&mut self, stage: &str, error: &Error) -> Result<()> {
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                status: StageStatus::Failed,
                files: Vec::new(),
                diagnostics: vec![error.to_string()],
            },
        );
        self.save()
    }

    /// Path of `name` produced by `stage`, after checking that the stage
    /// succeeded and the file still matches its recorded hash.
    pub fn require(&self, stage: &str, name: &str) -> Result<PathBuf> {
        let missing = |why: &str| Error::MissingArtifact(format!("{name} from stage `{stage}` ({why})"));
        let rec = self.manifest.stages.get(stage).ok_or_else(|| missing("stage has not run"))?;
        if rec.status != StageStatus::Ok {
            return Err(missing("stage failed"));
        }
        let file = rec.files.iter().find(|f| f.path == name).ok_or_else(|| missing("not produced"))?;
        let path = self.path(name);
        if !path.exists() {
            return Err(missing("file deleted"));
        }
        if sha256_file(&path)?.0 != file.sha256 {
            return Err(missing("content changed since the stage ran"));
        }
        Ok(path)
    }

    pub fn has(&self, stage: &str, name: &str) -> bool {
        self.require(stage, name).is_ok()
    }

    /// Checks every file of every successful stage against its hash.
    pub fn verify(&self) -> Result<()> {
        for (stage, rec) in &self.manifest.stages {
            if rec.status == StageStatus::Ok {
                for f in &rec.files {
                    self.require(stage, &f.path)?;
                }
            }
        }
        Ok(())
    }

    pub fn diagnostics(&self, stage: &str) -> &[String] {
        self.manifest.stages.get(stage).map(|r| r.diagnostics.as_slice()).unwrap_or(&[])
    }
}

/// Runs `body` as `stage` of `art`: outputs are committed on success, the
/// stage is marked failed with the error text otherwise.
fn run_stage<T>(
    art: &mut RunArtifacts,
    stage: &str,
    body: impl FnOnce(&mut RunArtifacts) -> Result<(T, Vec<&'static str>, Vec<String>)>,
) -> Result<T> {
    match body(art) {
        Ok((value, files, diagnostics)) => {
            art.commit(stage, &files, diagnostics)?;
            Ok(value)
        }
        Err(e) => {
            art.fail(stage, &e)?;
            Err(e)
        }
    }
}

fn write_text(art: &RunArtifacts, name: &str, text: &str) -> Result<()> {
    let path = art.path(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        detail: format!("missing `{key}` header"),
    })
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse().map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("{s:?}: {e}"),
    })
}

// Forward stage.

/// Fields of one coupled forward simulation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub grid: WaveGrid,
    /// Normal stress on the upper wall at the wave abscissae and fluid times.
    pub stress: TimeSeriesField,
    pub velocity: TimeSeriesField,
    /// `(t, discrete wave energy)` at every wave step.
    pub energy: Vec<(f64, f64)>,
    pub wave_snapshots: Vec<(f64, Vec<f64>)>,
    /// `(t, [x, y, u, v, p] per fluid grid point)`.
    pub fluid_snapshots: Vec<(f64, Vec<[f64; 5]>)>,
}

pub fn forward_fields(cfg: &ForwardConfig) -> Result<ForwardOutput> {
    let domain = FluidDomain::new(cfg.duct, cfg.obstruction.clone())?;
    let grid = wave_grid(&cfg.duct, &cfg.wave, cfg.flow.t_end)?;
    let (sys, traj) = simulate(&domain, &cfg.flow)?;
    let xs = grid.xs();
    let stress = sys.normal_stress_trace(&traj, &xs, &traj.times)?;
    let velocity = sys.tangential_velocity_trace(&traj, &xs, &traj.times)?;
    let datum = couple_stress_to_datum(&stress, &grid)?;

    let every = cfg.snapshot_every.max(1);
    let mut energy = Vec::with_capacity(grid.n_steps + 1);
    let mut wave_snapshots = Vec::new();
    let mut prev = vec![0.0; grid.n_points()];
    propagate_with(&datum, &grid, |n, u| {
        let t = n as f64 * grid.dt;
        energy.push((t, if n == 0 { 0.0 } else { grid.discrete_energy(&prev, u) }));
        if n % every == 0 || n == grid.n_steps {
            wave_snapshots.push((t, u.to_vec()));
        }
        prev.copy_from_slice(u);
    })?;

    let [nx, ny] = cfg.fluid_grid;
    let (nx, ny) = (nx.max(2), ny.max(2));
    let mut fluid_snapshots = Vec::with_capacity(wave_snapshots.len());
    for &(t, _) in &wave_snapshots {
        let alpha = traj.at(t)?;
        let mut pts = Vec::new();
        for i in 0..nx {
            let x = cfg.duct.length * i as f64 / (nx - 1) as f64;
            let (lo, hi) = (domain.lower_wall(x), domain.upper_wall(x));
            for j in 0..ny {
                let y = lo + (hi - lo) * j as f64 / (ny - 1) as f64;
                let [u, v] = sys.velocity_at(&alpha, [x, y])?;
                let p = sys.pressure_at(&alpha, [x, y])?;
                pts.push([x, y, u, v, p]);
            }
        }
        fluid_snapshots.push((t, pts));
    }
    Ok(ForwardOutput {
        grid,
        stress,
        velocity,
        energy,
        wave_snapshots,
        fluid_snapshots,
    })
}

pub const FORWARD_FILES: [&str; 5] = [
    "forward_stress.txt",
    "forward_velocity.txt",
    "wave_energy.txt",
    "wave_snapshots.txt",
    "fluid_snapshots.txt",
];

/// Runs [`forward_fields`] and writes its traces and plot data into `dir`.
pub fn run_forward(cfg: &ForwardConfig, dir: &Path) -> Result<RunArtifacts> {
    let mut art = RunArtifacts::open(dir)?;
    run_stage(&mut art, "forward", |art| {
        let out = forward_fields(cfg)?;
        out.stress.write_columnar(&art.path(FORWARD_FILES[0]), &[("quantity", "normal stress".into())])?;
        out.velocity.write_columnar(&art.path(FORWARD_FILES[1]), &[("quantity", "tangential velocity".into())])?;
        let mut s = String::from("# columns: t energy\n");
        for (t, e) in &out.energy {
            let _ = writeln!(s, "{t:?} {e:?}");
        }
        write_text(art, FORWARD_FILES[2], &s)?;
        let g = &out.grid;
        let mut s = String::from("# columns: t x y w\n");
        for (t, u) in &out.wave_snapshots {
            for j in 0..=g.ny {
                for i in 0..=g.nx {
                    let _ = writeln!(s, "{t:?} {:?} {:?} {:?}", g.x(i), g.y(j), u[g.idx(i, j)]);
                }
            }
        }
        write_text(art, FORWARD_FILES[3], &s)?;
        let mut s = String::from("# columns: t x y u v p\n");
        for (t, pts) in &out.fluid_snapshots {
            for [x, y, u, v, p] in pts {
                let _ = writeln!(s, "{t:?} {x:?} {y:?} {u:?} {v:?} {p:?}");
            }
        }
        write_text(art, FORWARD_FILES[4], &s)?;
        let peak = out.energy.iter().map(|e| e.1).fold(0.0, f64::max);
        let diagnostics = vec![format!("peak wave energy {peak:.6e}")];
        Ok(((), FORWARD_FILES.to_vec(), diagnostics))
    })?;
    Ok(art)
}

// Synthesis stage.

/// Noise-free and noisy synthetic measurements of the truth.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub wave: WaveMeasurements,
    pub velocity: Option<TimeSeriesField>,
    pub clean_wave: WaveMeasurements,
    pub clean_velocity: Option<TimeSeriesField>,
    /// The coupled datum that generated `clean_wave`, on the synthesis grid.
    pub truth_datum: TimeSeriesField,
}

/// Adds i.i.d. `N(0, std²)` to every value, in storage order.
pub fn add_noise(field: &mut TimeSeriesField, std: f64, rng: &mut ChaCha20Rng) {
    if std == 0.0 {
        return;
    }
    for v in field.values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += std * z;
    }
}

/// Simulates the truth at the synthesis resolution and samples the
/// measurements; noise is drawn from `synthesis.seed`, wave first.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<Synthesis> {
    let domain = FluidDomain::new(cfg.duct, cfg.truth.clone())?;
    let geom = cfg.measurement_geometry()?;
    let grid = cfg.synthesis_grid()?;
    let (sys, traj) = simulate(&domain, &cfg.synthesis.flow)?;
    let stress = sys.normal_stress_trace(&traj, &grid.xs(), &traj.times)?;
    let datum = couple_stress_to_datum(&stress, &grid)?;
    let clean_wave = propagate(&datum, &grid, geom.wave_segment)?;
    let clean_velocity = match geom.velocity_segment {
        Some(seg) => {
            let xs = Sampler::new(&grid, seg)?.positions;
            Some(sys.tangential_velocity_trace(&traj, &xs, &traj.times)?)
        }
        None => None,
    };
    let std = cfg.synthesis.noise.std();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.synthesis.seed);
    let mut wave = clean_wave.clone();
    add_noise(&mut wave.field, std, &mut rng);
    let velocity = clean_velocity.clone().map(|mut v| {
        add_noise(&mut v, std, &mut rng);
        v
    });
    Ok(Synthesis {
        wave,
        velocity,
        clean_wave,
        clean_velocity,
        truth_datum: datum.0,
    })
}

pub const WAVE_MEASUREMENTS: &str = "measurements_wave.txt";
pub const VELOCITY_MEASUREMENTS: &str = "measurements_velocity.txt";
pub const TRUTH_DATUM: &str = "truth_datum.txt";
pub const CONFIG_FILE: &str = "config.toml";

pub fn run_synthesis(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let mut art = RunArtifacts::open(dir)?;
    run_stage(&mut art, "synth", |art| {
        cfg.validate()?;
        write_text(art, CONFIG_FILE, &cfg.to_toml()?)?;
        let syn = synthesize(cfg)?;
        let [a, b] = syn.wave.segment;
        let std = cfg.synthesis.noise.std();
        syn.wave.field.write_columnar(
            &art.path(WAVE_MEASUREMENTS),
            &[("segment", format!("{a:?} {b:?}")), ("noise_std", format!("{std:?}"))],
        )?;
        let mut files = vec![CONFIG_FILE, WAVE_MEASUREMENTS, TRUTH_DATUM];
        if let Some(v) = &syn.velocity {
            v.write_columnar(&art.path(VELOCITY_MEASUREMENTS), &[("noise_std", format!("{std:?}"))])?;
            files.push(VELOCITY_MEASUREMENTS);
        }
        syn.truth_datum.write_columnar(&art.path(TRUTH_DATUM), &[("quantity", "coupled datum".into())])?;
        let diagnostics = vec![format!(
            "{} wave samples, {} velocity samples, noise std {std:e}",
            syn.wave.field.values.len(),
            syn.velocity.as_ref().map_or(0, |v| v.values.len())
        )];
        Ok(((), files, diagnostics))
    })?;
    Ok(art)
}

/// Bilinear resampling of `field` onto `positions × times`.
pub fn resample(field: &TimeSeriesField, positions: &[f64], times: &[f64]) -> Result<TimeSeriesField> {
    let mut out = TimeSeriesField::zeros(positions.to_vec(), times.to_vec());
    for (it, &t) in times.iter().enumerate() {
        for (ix, &x) in positions.iter().enumerate() {
            let v = field.interpolate(x, t).ok_or_else(|| {
                Error::Config(format!("cannot resample measurements at (x, t) = ({x}, {t}): outside their grid"))
            })?;
            out.set(it, ix, v);
        }
    }
    Ok(out)
}

// Stage 1: boundary recovery.

pub const RECOVERED_DATUM: &str = "recovered_datum.txt";
pub const RECOVERY_HISTORY: &str = "recovery_history.txt";

pub fn run_invert_wave(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let mut art = RunArtifacts::open(dir)?;
    run_stage(&mut art, "invert-wave", |art| {
        cfg.validate()?;
        let path = art.require("synth", WAVE_MEASUREMENTS)?;
        let (measured, _) = TimeSeriesField::read_columnar(&path)?;
        let grid = cfg.inversion_grid()?;
        let geom = cfg.measurement_geometry()?;
        let positions = Sampler::new(&grid, geom.wave_segment)?.positions;
        let field = resample(&measured, &positions, &grid.times())?;
        let measurements = WaveMeasurements {
            segment: geom.wave_segment,
            field,
        };
        let problem = BoundaryRecoveryProblem::new(measurements, geom, grid, cfg.inversion.recovery)?;
        let report = recover_boundary_datum(&problem, None)?;
        let t_keep = problem.t_keep();
        report.datum.0.write_columnar(
            &art.path(RECOVERED_DATUM),
            &[
                ("t_keep", format!("{t_keep:?}")),
                ("t_c", format!("{:?}", problem.t_c)),
                ("iterations", report.iterations.to_string()),
                ("stop", format!("{:?}", report.reason)),
            ],
        )?;
        let mut s = String::from("# columns: iteration J1\n");
        for (k, j) in report.j_history.iter().enumerate() {
            let _ = writeln!(s, "{k} {j:?}");
        }
        write_text(art, RECOVERY_HISTORY, &s)?;
        let mut diagnostics = vec![format!(
            "t_c = {:.6}, {} iterations, stop {:?}, J1 {:.6e}",
            problem.t_c,
            report.iterations,
            report.reason,
            report.j_history.last().copied().unwrap_or(f64::NAN)
        )];
        if let Ok(p) = art.require("synth", TRUTH_DATUM) {
            let (truth, _) = TimeSeriesField::read_columnar(&p)?;
            let truth = resample(&truth, &report.datum.0.positions, &report.datum.0.times)?;
            let err = relative_l2_error(&report.datum.0, &truth, t_keep);
            diagnostics.push(format!("relative L2 error against the coupled truth on (0, T - t_c): {err:.6}"));
        }
        Ok(((), vec![RECOVERED_DATUM, RECOVERY_HISTORY], diagnostics))
    })?;
    Ok(art)
}

// Stage 2: obstacle sampling.

pub const CHAIN_FILE: &str = "chain.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DENSITY_FILE: &str = "density.txt";
pub const SHAPE_FILE: &str = "shape_overlay.txt";

/// Misfit row of the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Misfit {
    /// `‖θ̄ − θ*‖₂`.
    ParameterDistance { value: f64 },
    /// `‖f̂ − f(θ̄)‖ / ‖f̂‖` over the stress window, for truths outside the search class.
    TraceMisfit { value: f64 },
}

impl Misfit {
    pub fn value(&self) -> f64 {
        match *self {
            Self::ParameterDistance { value } | Self::TraceMisfit { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub id: Option<u32>,
    pub original: Option<[f64; 3]>,
    pub chain: ChainSummary,
    /// Batch-means standard error of each posterior mean; `None` for chains too short to batch.
    pub mc_error: Option<[f64; 3]>,
    pub misfit: Misfit,
    /// `‖h_truth − h(θ̄)‖_{L²(0,L)}` of the obstruction heights.
    pub shape_misfit: f64,
    pub sigma_lik: f64,
    pub data_energy: f64,
    pub forward_evaluations: usize,
    pub warnings: Vec<String>,
}

fn shape_misfit(truth: &Obstruction, theta: [f64; 3], length: f64) -> f64 {
    let est = ObstructionParams::from_array(theta);
    let n = 800;
    let h = length / n as f64;
    let s: f64 = (0..=n)
        .map(|k| {
            let x = k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            w * (truth.height_at(x) - est.height_at(x)).powi(2)
        })
        .sum();
    (s * h).sqrt()
}

/// Builds the posterior problem from persisted stage-1 output and measurements.
pub fn load_obstacle_problem(cfg: &ExperimentConfig, art: &RunArtifacts) -> Result<ObstacleInverseProblem> {
    let path = art.require("invert-wave", RECOVERED_DATUM)?;
    let (datum, meta) = TimeSeriesField::read_columnar(&path)?;
    let t_keep = parse_f64(meta_value(&meta, "t_keep", &path)?, &path)?;
    let velocity = match cfg.measurement.velocity_segment {
        Some(seg) => {
            let path = art.require("synth", VELOCITY_MEASUREMENTS)?;
            let (v, _) = TimeSeriesField::read_columnar(&path)?;
            let grid = cfg.inversion_grid()?;
            let xs = Sampler::new(&grid, seg)?.positions;
            Some(resample(&v, &xs, &grid.times())?)
        }
        None => None,
    };
    let flow = cfg.inversion.flow;
    let build = |sigma| {
        ObstacleInverseProblem::new(cfg.duct, datum.clone(), t_keep, velocity.clone(), cfg.chain.prior, sigma, flow)
    };
    let energy = build(1.0)?.data_energy();
    let sigma = cfg.chain.likelihood.sigma(cfg.synthesis.noise.std(), energy)?;
    Ok(build(sigma)?)
}

pub fn run_invert_obstacle(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let mut art = RunArtifacts::open(dir)?;
    run_stage(&mut art, "invert-obstacle", |art| {
        cfg.validate()?;
        let problem = load_obstacle_problem(cfg, art)?;
        let chain = dram_sample(&problem, cfg.chain.theta0, &cfg.chain.sampler)?;
        write_text(art, CHAIN_FILE, &chain.to_columnar())?;
        let summary = summarize_experiment(cfg, &problem, &chain)?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_text(art, SUMMARY_FILE, &(json + "\n"))?;

        let mut s = String::from("# columns: parameter value density\n");
        for (i, d) in summary.chain.density.iter().enumerate() {
            for [x, y] in d {
                let _ = writeln!(s, "{} {x:?} {y:?}", i + 1);
            }
        }
        write_text(art, DENSITY_FILE, &s)?;

        let est = ObstructionParams::from_array(summary.chain.mean);
        let mut s = String::from("# columns: x truth_height reconstructed_height\n");
        let n = 400;
        for k in 0..=n {
            let x = cfg.duct.length * k as f64 / n as f64;
            let _ = writeln!(s, "{x:?} {:?} {:?}", cfg.truth.height_at(x), est.height_at(x));
        }
        write_text(art, SHAPE_FILE, &s)?;

        let mut diagnostics = vec![format!(
            "acceptance {:.3}, σ_lik {:.6e}, {} forward solves",
            summary.chain.acceptance_rate, summary.sigma_lik, summary.forward_evaluations
        )];
        diagnostics.extend(summary.warnings.iter().cloned());
        Ok(((), vec![CHAIN_FILE, SUMMARY_FILE, DENSITY_FILE, SHAPE_FILE], diagnostics))
    })?;
    Ok(art)
}

/// Posterior summary plus the misfit row appropriate to the truth.
pub fn summarize_experiment(
    cfg: &ExperimentConfig,
    problem: &ObstacleInverseProblem,
    chain: &PosteriorChain,
) -> Result<ExperimentSummary> {
    let original = cfg.truth_theta();
    let cs = summarize_chain(chain, cfg.chain.sampler.burn_in, original)?;
    let misfit = match cs.distance {
        Some(value) => Misfit::ParameterDistance { value },
        None => {
            let stress = problem.j2_terms(cs.mean)?.stress;
            let norm = problem.data_energy_terms().stress;
            Misfit::TraceMisfit {
                value: (stress / norm).sqrt(),
            }
        }
    };
    // At least five samples per batch.
    let n_batches = (cs.n_used / 5).min(20);
    let mc_error = (n_batches >= 2).then(|| batch_means_error(&chain.samples[cs.burn_in..], n_batches));
    Ok(ExperimentSummary {
        id: cfg.id,
        original,
        shape_misfit: shape_misfit(&cfg.truth, cs.mean, cfg.duct.length),
        chain: cs,
        mc_error,
        misfit,
        sigma_lik: problem.sigma_lik,
        data_energy: problem.data_energy(),
        forward_evaluations: problem.cached_evaluations(),
        warnings: chain.warnings.clone(),
    })
}

// Report.

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub markdown: String,
    pub csv: String,
}

/// One row per parameter (Original, Mean, S.D) plus the misfit row.
pub fn emit_report(summary: &ExperimentSummary) -> Result<Report> {
    if summary.chain.n_used == 0 {
        return Err(Error::Config("cannot report an empty chain".into()));
    }
    let original = |i: usize| summary.original.map_or_else(|| "n/a".to_string(), |t| t[i].to_string());
    let (misfit_label, misfit_csv) = match summary.misfit {
        Misfit::ParameterDistance { .. } => ("‖θ̄ − θ*‖₂", "parameter_distance"),
        Misfit::TraceMisfit { .. } => ("‖f − f(θ̄)‖ / ‖f‖", "trace_misfit"),
    };
    let mut md = String::new();
    match summary.id {
        Some(id) => {
            let _ = writeln!(md, "# Experiment {id}\n");
        }
        None => md.push_str("# Custom experiment\n\n"),
    }
    md.push_str("| Parameter | Original | Mean | S.D |\n|---|---|---|---|\n");
    let mut csv = String::from("parameter,original,mean,sd\n");
    for i in 0..3 {
        let (m, s) = (summary.chain.mean[i], summary.chain.sd[i]);
        let _ = writeln!(md, "| θ{} | {} | {m} | {s} |", i + 1, original(i));
        let _ = writeln!(csv, "theta{},{},{m},{s}", i + 1, original(i));
    }
    let v = summary.misfit.value();
    let _ = writeln!(md, "| {misfit_label} | | {v} | |");
    let _ = writeln!(csv, "{misfit_csv},,{v},");
    let _ = writeln!(
        md,
        "\n{} samples after a burn-in of {}, acceptance rate {:.3}, σ_lik = {:.4e}.",
        summary.chain.n_used, summary.chain.burn_in, summary.chain.acceptance_rate, summary.sigma_lik
    );
    let _ = writeln!(md, "Obstruction height misfit ‖h − h(θ̄)‖ = {:.4}.", summary.shape_misfit);
    for w in &summary.warnings {
        let _ = writeln!(md, "\n**Warning:** {w}");
    }
    Ok(Report { markdown: md, csv })
}

pub fn run_report(dir: &Path) -> Result<(RunArtifacts, Report)> {
    let mut art = RunArtifacts::open(dir)?;
    let report = run_stage(&mut art, "report", |art| {
        let path = art.require("invert-obstacle", SUMMARY_FILE)?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: ExperimentSummary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let report = emit_report(&summary)?;
        write_text(art, REPORT_MD, &report.markdown)?;
        write_text(art, REPORT_CSV, &report.csv)?;
        Ok((report, vec![REPORT_MD, REPORT_CSV], Vec::new()))
    })?;
    Ok((art, report))
}

/// Full pipeline; measurements are synthesized unless the run directory
/// already holds intact ones made from the same config.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunArtifacts, Report)> {
    cfg.validate()?;
    let art = RunArtifacts::open(dir)?;
    let same_config = art
        .require("synth", CONFIG_FILE)
        .ok()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .is_some_and(|text| cfg.to_toml().is_ok_and(|ours| ours == text));
    let have_velocity = cfg.measurement.velocity_segment.is_none() || art.has("synth", VELOCITY_MEASUREMENTS);
    if !(same_config && art.has("synth", WAVE_MEASUREMENTS) && have_velocity) {
        run_synthesis(cfg, dir)?;
    }
    run_invert_wave(cfg, dir)?;
    run_invert_obstacle(cfg, dir)?;
    run_report(dir)
}

/// Reads a persisted chain file.
pub fn load_chain(path: &Path) -> Result<PosteriorChain> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PosteriorChain::parse_columnar(&text).map_err(|detail| Error::Parse {
        path: path.display().to_string(),
        detail,
    })
}
