//! Command-line entry point: argument parsing, config merging and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::costvolume::CascadeConfig;
use crate::dataset::{load_dataset, save_dataset, write_pfm, SceneDataset};
use crate::error::Error;
use crate::eval::{benchmark_sampling, default_bench_cases, evaluate};
use crate::geometry::{Camera, Vec3};
use crate::renderer::{render_image, RenderConfig, SamplingMode};
use crate::scenegen::{generate_scene, SceneSpec};
use crate::server::{self, RenderService};
use crate::trainer::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "enerf", version, about = "Depth-guided radiance fields on synthetic scenes")]
pub struct Cli {
    /// Worker threads for rendering and training (1 keeps runs bit-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON file with defaults; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    GenScene {
        /// Scene preset: plane-sphere (alias plane+sphere) or micro.
        #[arg(long, default_value = "plane-sphere")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimize the networks on a dataset.
    Train(TrainArgs),
    /// Render one pose to rgb.png, depth PFMs and stats.json.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// `view:<id>` or `orbit:<azimuth_deg>,<elevation_deg>,<radius>`.
        #[arg(long, default_value = "view:0")]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Score held-out views; writes an EvalReport as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Time the sampling strategies; writes a JSON report.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Stream renders over WebSocket.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Listen address [default: 127.0.0.1:9090].
        #[arg(long)]
        addr: Option<String>,
        #[command(flatten)]
        render: RenderArgs,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.enrf and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint (fine-tuning).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// [default: 5000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Rays per batch [default: 512].
    #[arg(long)]
    pub rays: Option<usize>,
    /// [default: 5e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations between learning-rate halvings [default: iters/4].
    #[arg(long)]
    pub halve_every: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Source views per target [default: 3].
    #[arg(long)]
    pub views: Option<usize>,
    /// Samples per ray [default: 2].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Coarse depth planes [default: 64].
    #[arg(long)]
    pub planes: Option<usize>,
    /// Fine depth planes [default: 8].
    #[arg(long)]
    pub planes_fine: Option<usize>,
    /// Jitter samples within their sub-interval.
    #[arg(long)]
    pub jitter: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// guided or uniform [default: guided].
    #[arg(long)]
    pub mode: Option<String>,
    /// Samples per ray [default: 2].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Source views [default: 3].
    #[arg(long)]
    pub views: Option<usize>,
    /// Use a single full-range volume instead of the cascade.
    #[arg(long)]
    pub no_cascade: bool,
}

/// Contents of `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub render: Option<RenderFileConfig>,
    #[serde(default)]
    pub addr: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderFileConfig {
    pub mode: Option<SamplingMode>,
    pub n_samples: Option<usize>,
    pub n_views: Option<usize>,
    pub cascade: Option<bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

impl TrainArgs {
    pub fn merged(&self, base: TrainConfig) -> TrainConfig {
        let mut c = base;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(iters => iters, rays => rays_per_batch, lr => lr, halve_every => halve_every, seed => seed,
             views => views_per_target, samples => n_samples, planes => planes_coarse, planes_fine => planes_fine);
        c.jitter |= self.jitter;
        c
    }
}

impl RenderArgs {
    pub fn merged(&self, file: Option<&RenderFileConfig>) -> CliResult<RenderConfig> {
        let mut c = RenderConfig::default();
        if let Some(f) = file {
            c.mode = f.mode.unwrap_or(c.mode);
            c.n_samples = f.n_samples.unwrap_or(c.n_samples);
            c.n_views = f.n_views.unwrap_or(c.n_views);
            c.cascade.cascade = f.cascade.unwrap_or(c.cascade.cascade);
        }
        if let Some(m) = &self.mode {
            c.mode = m.parse().map_err(|e: Error| CliError::Usage(format!("--mode: {e}")))?;
        }
        c.n_samples = self.samples.unwrap_or(c.n_samples);
        c.n_views = self.views.unwrap_or(c.n_views);
        if self.no_cascade {
            c.cascade = CascadeConfig {
                cascade: false,
                ..c.cascade
            };
        }
        if c.n_samples == 0 {
            return Err(CliError::Usage("--samples must be positive".into()));
        }
        if c.n_views < 2 {
            return Err(CliError::Usage("--views must be at least 2".into()));
        }
        Ok(c)
    }
}

fn usage(field: &str, spec: &str, why: &str) -> CliError {
    CliError::Usage(format!("invalid pose '{spec}': {field}: {why}"))
}

/// Parses `view:<id>` or `orbit:<azimuth_deg>,<elevation_deg>,<radius>`. Orbit
/// cameras look at the dataset centroid from a z-up sphere and reuse view 0's
/// intrinsics and image size.
pub fn parse_pose(ds: &SceneDataset, spec: &str) -> CliResult<Camera> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| usage("kind", spec, "expected view:<id> or orbit:<az>,<el>,<r>"))?;
    match kind {
        "view" => {
            let id: usize = rest.trim().parse().map_err(|_| usage("id", spec, "not a view index"))?;
            let view = ds.view(id).map_err(|_| usage("id", spec, "no such view"))?;
            let mut cam = view.camera.clone();
            cam.near = ds.near;
            cam.far = ds.far;
            Ok(cam)
        }
        "orbit" => {
            let parts: Vec<&str> = rest.split(',').collect();
            let names = ["azimuth", "elevation", "radius"];
            if parts.len() != 3 {
                return Err(usage("orbit", spec, "expected three comma-separated numbers"));
            }
            let mut vals = [0.0f64; 3];
            for ((v, p), name) in vals.iter_mut().zip(&parts).zip(names) {
                *v = p
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| usage(name, spec, "not a number"))?;
            }
            let [az, el, r] = vals;
            if r <= 0.0 {
                return Err(usage("radius", spec, "must be positive"));
            }
            if el.abs() >= 90.0 {
                return Err(usage("elevation", spec, "must be strictly between -90 and 90"));
            }
            let (az, el) = (az.to_radians(), el.to_radians());
            let center = ds.centroid();
            let eye = center + r * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let reference = &ds.views.first().ok_or_else(|| usage("orbit", spec, "dataset has no views"))?.camera;
            Ok(Camera::look_at(
                eye,
                center,
                Vec3::z(),
                reference.k,
                reference.width,
                reference.height,
                ds.near,
                ds.far,
            )?)
        }
        _ => Err(usage("kind", spec, "expected view or orbit")),
    }
}

fn read_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // A pool may already exist when called repeatedly in-process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    let file = read_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenScene { preset, out, seed } => {
            let spec = SceneSpec::preset(&preset, seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let ds = generate_scene(&spec)?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {} views to {}", ds.views.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.merged(file.train.unwrap_or_default());
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let ds = load_dataset(&args.data)?;
            let init = args.init.as_deref().map(checkpoint::load).transpose()?;
            let every = (cfg.iters / 20).max(1);
            let result = train(&ds, &cfg, init, &args.out, |i, r| {
                if i % every == 0 || i == 1 {
                    log::info!("iter {i} loss {:.6}", r.loss);
                }
            })?;
            eprintln!(
                "final loss {:.6}; checkpoint {}",
                result.losses.last().copied().unwrap_or(f32::NAN),
                result.checkpoint.display()
            );
        }
        Command::Render {
            data,
            ckpt,
            pose,
            out,
            render,
        } => {
            let cfg = render.merged(file.render.as_ref())?;
            let ds = load_dataset(&data)?;
            let cam = parse_pose(&ds, &pose)?;
            let w = checkpoint::load(&ckpt)?;
            let result = render_image(&ds, &w, &cam, &cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            result.image.save_png(&out.join("rgb.png"))?;
            write_pfm(&out.join("depth_mvs.pfm"), cam.width, cam.height, &result.depth_mvs)?;
            write_pfm(&out.join("depth_nerf.pfm"), cam.width, cam.height, &result.depth_nerf)?;
            write_json(&result.stats, Some(&out.join("stats.json")))?;
            eprintln!("rendered {pose} in {:.1} ms", result.stats.total_ms());
        }
        Command::Eval {
            data,
            ckpt,
            out,
            render,
        } => {
            let cfg = render.merged(file.render.as_ref())?;
            let ds = load_dataset(&data)?;
            let w = checkpoint::load(&ckpt)?;
            write_json(&evaluate(&ds, &w, &cfg)?, out.as_deref())?;
        }
        Command::Bench {
            data,
            ckpt,
            out,
            warmups,
            repeats,
        } => {
            let cfg = RenderArgs {
                mode: None,
                samples: None,
                views: None,
                no_cascade: false,
            }
            .merged(file.render.as_ref())?;
            let ds = load_dataset(&data)?;
            let w = checkpoint::load(&ckpt)?;
            let report = benchmark_sampling(&ds, &w, &cfg, &default_bench_cases(), warmups, repeats)
                .map_err(|e| match e {
                    Error::InvalidArgument(m) => CliError::Usage(m),
                    other => CliError::Runtime(other),
                })?;
            if report.noisy {
                eprintln!("warning: timing coefficient of variation above 15%, run flagged noisy");
            }
            write_json(&report, out.as_deref())?;
        }
        Command::Serve {
            data,
            ckpt,
            addr,
            render,
        } => {
            let cfg = render.merged(file.render.as_ref())?;
            let ds = load_dataset(&data)?;
            let w = checkpoint::load(&ckpt)?;
            let addr = addr.or(file.addr).unwrap_or_else(|| server::DEFAULT_ADDR.to_string());
            server::run(RenderService::new(ds, w, cfg)?, &addr)?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
