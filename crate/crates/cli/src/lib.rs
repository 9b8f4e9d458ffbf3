//! Command-line pipelines over `lanembed`: scene generation, fitting,
//! clustering, evaluation, benchmarking and rendering.
//!
//! Every command is a pure function of its input files and config, apart
//! from the `elapsed_ms` field of the manifest it writes.

pub mod error;
pub mod manifest;
pub mod render;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lanembed::cluster::{ClusterParams, DbscanParams};
use lanembed::metrics::{bench_clustering, evaluate_scene, ideal_fields, BenchConfig, EvalParams, EvalReport, TimingReport};
use lanembed::optimize::{fit, FieldState, FitConfig};
use lanembed::synth::{generate_scene, LaneScene, SynthConfig, LABELS_FILE, SIDECAR_FILE};
use lanembed::{io, InstanceLabeling, LossReport};

pub use error::{CliError, CliResult};
pub use manifest::{read_json, write_json, RunManifest, MANIFEST_FILE};

pub const PRED_FILE: &str = "pred.lel";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "lanembed", version, about = "Spatial-embedding lane instance segmentation pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fast,
    Dbscan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Color every pixel by its instance id.
    Labels,
    /// Scatter foreground embeddings into image space, colored by scene instance.
    Embedding,
}

/// Image size given as `WIDTHxHEIGHT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
        Ok(Size {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lane scene (labels.lel + scene.json).
    Synth {
        /// SynthConfig JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit offset, bandwidth and seed fields to a scene.
    Fit {
        scene: PathBuf,
        /// FitConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster fitted fields into instances.
    Cluster {
        checkpoint: PathBuf,
        scene: PathBuf,
        /// JSON with optional `fast` (ClusterParams) and `dbscan` (DbscanParams) sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Fast)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted labeling against a scene; prints an EvalReport.
    Eval {
        pred: PathBuf,
        scene: PathBuf,
        /// EvalParams JSON; defaults scale the point tolerance to the scene width.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write report.json, report.csv and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time fast clustering against DBSCAN; prints timing reports.
    Bench {
        /// Comma-separated WIDTHxHEIGHT list.
        #[arg(long, value_delimiter = ',', default_value = "256x128")]
        sizes: Vec<Size>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a labeling or a checkpoint's embedding as a binary PPM.
    Render {
        /// A .lel labeling or a fit checkpoint directory.
        input: PathBuf,
        /// Scene directory; required for embedding mode.
        scene: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RenderMode::Labels)]
        mode: RenderMode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub fast: ClusterParams,
    pub dbscan: DbscanParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchCommandConfig {
    pub lanes: usize,
    pub scenes_per_size: usize,
    /// Half-width of the uniform jitter around each lane center.
    pub jitter: f64,
    pub sigma: f64,
    pub rng_seed: u64,
    pub cluster: ClusterConfig,
    pub timing: BenchConfig,
}

impl Default for BenchCommandConfig {
    fn default() -> Self {
        Self {
            lanes: 5,
            scenes_per_size: 5,
            jitter: 0.5,
            sigma: 2.0,
            rng_seed: 0,
            cluster: ClusterConfig::default(),
            timing: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTiming {
    pub width: usize,
    pub height: usize,
    pub report: TimingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub sizes: Vec<SizeTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub steps: usize,
    /// SHA-256 of the FitConfig's JSON serialization.
    pub config_sha256: String,
    pub final_report: Option<LossReport>,
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable config")
}

pub fn config_hash(cfg: &FitConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("serializable config");
    hex::encode(Sha256::digest(bytes))
}

fn load_scene(dir: &Path) -> CliResult<LaneScene> {
    Ok(LaneScene::load(dir)?)
}

pub fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<RunManifest> {
    let started = Instant::now();
    let mut cfg: SynthConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let scene = generate_scene(&cfg)?;
    create_dir(out)?;
    scene.save(out)?;
    let mut m = RunManifest::new("synth", to_value(&cfg));
    m.inputs.extend(config.map(Path::to_path_buf));
    m.outputs = vec![out.join(LABELS_FILE), out.join(SIDECAR_FILE)];
    m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

pub fn cmd_fit(scene_dir: &Path, config: Option<&Path>, out: &Path) -> CliResult<RunManifest> {
    let started = Instant::now();
    let cfg: FitConfig = load_config(config)?;
    cfg.validate()?;
    let scene = load_scene(scene_dir)?;
    let (state, trajectory) = fit(&scene.labeling, &cfg)?;

    create_dir(out)?;
    state.save(out)?;
    let mut lines = String::new();
    for r in &trajectory {
        lines.push_str(&serde_json::to_string(r).expect("serializable report"));
        lines.push('\n');
    }
    let traj_path = out.join(TRAJECTORY_FILE);
    std::fs::write(&traj_path, lines).map_err(|source| CliError::Write {
        path: traj_path.clone(),
        source,
    })?;
    write_json(
        &out.join(CHECKPOINT_FILE),
        &Checkpoint {
            steps: trajectory.len(),
            config_sha256: config_hash(&cfg),
            final_report: trajectory.last().copied(),
        },
    )?;

    let mut m = RunManifest::new("fit", to_value(&cfg));
    m.inputs.push(scene_dir.to_path_buf());
    m.inputs.extend(config.map(Path::to_path_buf));
    m.outputs = [
        lanembed::optimize::OFFSETS_FILE,
        lanembed::optimize::SIGMA_FILE,
        lanembed::optimize::SEED_FILE,
        CHECKPOINT_FILE,
        TRAJECTORY_FILE,
    ]
    .iter()
    .map(|f| out.join(f))
    .collect();
    m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

pub fn cluster_state(state: &FieldState, scene: &LaneScene, cfg: &ClusterConfig, method: Method) -> CliResult<InstanceLabeling> {
    let (h, w) = (scene.labeling.height(), scene.labeling.width());
    if state.height() != h || state.width() != w {
        return Err(lanembed::Error::Shape(format!(
            "checkpoint is {}x{}, scene is {h}x{w}",
            state.height(),
            state.width()
        ))
        .into());
    }
    let embedding = state.embedding();
    Ok(match method {
        Method::Fast => lanembed::cluster::fast_cluster(&embedding, &state.sigma(), &state.seed(), &scene.fg_mask, &cfg.fast)?,
        Method::Dbscan => lanembed::cluster::dbscan(&embedding, &scene.fg_mask, &cfg.dbscan)?,
    })
}

pub fn cmd_cluster(
    checkpoint: &Path,
    scene_dir: &Path,
    config: Option<&Path>,
    method: Method,
    out: &Path,
) -> CliResult<RunManifest> {
    let started = Instant::now();
    let cfg: ClusterConfig = load_config(config)?;
    let state = FieldState::load(checkpoint)?;
    let scene = load_scene(scene_dir)?;
    let pred = cluster_state(&state, &scene, &cfg, method)?;
    create_dir(out)?;
    io::save_labeling(out.join(PRED_FILE), &pred)?;

    let mut m = RunManifest::new(
        "cluster",
        serde_json::json!({ "method": method, "params": to_value(&cfg) }),
    );
    m.inputs = vec![checkpoint.to_path_buf(), scene_dir.to_path_buf()];
    m.inputs.extend(config.map(Path::to_path_buf));
    m.outputs = vec![out.join(PRED_FILE)];
    m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

pub fn cmd_eval(pred: &Path, scene_dir: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult<(EvalReport, RunManifest)> {
    let started = Instant::now();
    let labeling = io::load_labeling(pred)?;
    let scene = load_scene(scene_dir)?;
    let params: EvalParams = match config {
        Some(p) => read_json(p)?,
        None => EvalParams::for_width(scene.config.width),
    };
    let name = scene_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = EvalReport::from_scenes(vec![evaluate_scene(&name, &labeling, &scene, &params)?]);

    let mut m = RunManifest::new("eval", to_value(&params));
    m.inputs = vec![pred.to_path_buf(), scene_dir.to_path_buf()];
    m.inputs.extend(config.map(Path::to_path_buf));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        let csv_path = dir.join(REPORT_CSV_FILE);
        let file = std::fs::File::create(&csv_path).map_err(|source| CliError::Write {
            path: csv_path.clone(),
            source,
        })?;
        report.write_csv(file)?;
        m.outputs = vec![dir.join(REPORT_FILE), csv_path];
        m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        m.write(&dir.join(MANIFEST_FILE))?;
    } else {
        m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    }
    Ok((report, m))
}

/// Scenes the bench runs on: `lanes` lanes per scene with the fields a
/// converged fit produces.
pub fn bench_inputs(size: Size, cfg: &BenchCommandConfig) -> CliResult<Vec<lanembed::metrics::ClusterInput>> {
    (0..cfg.scenes_per_size as u64)
        .map(|i| {
            let scene = generate_scene(&SynthConfig {
                width: size.width,
                height: size.height,
                num_lanes: cfg.lanes,
                rng_seed: cfg.rng_seed.wrapping_add(i),
                ..SynthConfig::default()
            })?;
            Ok(ideal_fields(&scene, cfg.jitter, cfg.sigma, cfg.rng_seed.wrapping_add(i))?)
        })
        .collect()
}

pub fn cmd_bench(sizes: &[Size], config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CliResult<(BenchOutput, RunManifest)> {
    let started = Instant::now();
    let mut cfg: BenchCommandConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if sizes.is_empty() {
        return Err(CliError::Usage("--sizes needs at least one WIDTHxHEIGHT".into()));
    }
    let mut results = Vec::new();
    for &size in sizes {
        let inputs = bench_inputs(size, &cfg)?;
        let report = bench_clustering(&inputs, &cfg.cluster.fast, &cfg.cluster.dbscan, &cfg.timing)?;
        results.push(SizeTiming {
            width: size.width,
            height: size.height,
            report,
        });
    }
    let output = BenchOutput { sizes: results };
    let mut m = RunManifest::new("bench", serde_json::json!({ "sizes": sizes, "params": to_value(&cfg) }));
    m.inputs.extend(config.map(Path::to_path_buf));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(REPORT_FILE), &output)?;
        m.outputs = vec![dir.join(REPORT_FILE)];
        m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        m.write(&dir.join(MANIFEST_FILE))?;
    } else {
        m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    }
    Ok((output, m))
}

pub fn cmd_render(input: &Path, scene: Option<&Path>, mode: RenderMode, out: &Path) -> CliResult<RunManifest> {
    let started = Instant::now();
    let image = match mode {
        RenderMode::Labels if input.is_dir() => {
            return Err(CliError::Usage("labels mode renders a .lel labeling, not a checkpoint".into()))
        }
        RenderMode::Labels => render::render_labels(&io::load_labeling(input)?),
        RenderMode::Embedding => {
            let scene_dir = scene.ok_or_else(|| CliError::Usage("embedding mode needs a scene directory".into()))?;
            let scene = load_scene(scene_dir)?;
            let state = FieldState::load(input)?;
            if state.height() != scene.labeling.height() || state.width() != scene.labeling.width() {
                return Err(lanembed::Error::Shape("checkpoint and scene sizes differ".into()).into());
            }
            render::render_embedding(&state.embedding(), &scene.labeling)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(out, image.to_ppm()).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })?;
    let mut m = RunManifest::new("render", serde_json::json!({ "mode": mode }));
    m.inputs.push(input.to_path_buf());
    m.inputs.extend(scene.map(Path::to_path_buf));
    m.outputs = vec![out.to_path_buf()];
    m.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    m.write(&out.with_extension("manifest.json"))?;
    Ok(m)
}

fn print_json<T: Serialize>(stdout: &mut dyn Write, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    writeln!(stdout, "{text}").map_err(|source| CliError::Write {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

/// Runs a parsed command. Reports go to `stdout`; commands without an output
/// directory send their manifest there as a trailing JSON line on stderr.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out).map(drop),
        Command::Fit { scene, config, out } => cmd_fit(&scene, config.as_deref(), &out).map(drop),
        Command::Cluster {
            checkpoint,
            scene,
            config,
            method,
            out,
        } => cmd_cluster(&checkpoint, &scene, config.as_deref(), method, &out).map(drop),
        Command::Eval {
            pred,
            scene,
            config,
            out,
        } => {
            let (report, m) = cmd_eval(&pred, &scene, config.as_deref(), out.as_deref())?;
            print_json(stdout, &report)?;
            if out.is_none() {
                eprintln!("{}", serde_json::to_string(&m).expect("serializable manifest"));
            }
            Ok(())
        }
        Command::Bench {
            sizes,
            config,
            seed,
            out,
        } => {
            let (report, m) = cmd_bench(&sizes, config.as_deref(), seed, out.as_deref())?;
            print_json(stdout, &report)?;
            if out.is_none() {
                eprintln!("{}", serde_json::to_string(&m).expect("serializable manifest"));
            }
            Ok(())
        }
        Command::Render {
            input,
            scene,
            mode,
            out,
        } => cmd_render(&input, scene.as_deref(), mode, &out).map(drop),
    }
}
