use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wetsam_core::checkpoint::Checkpoint;
use wetsam_core::config::Config;
use wetsam_core::data::{read_points, LabelMap, SparsePointSet, TimeSeriesCube};
use wetsam_core::grow::{grow, seeds_from_points};
use wetsam_core::metrics::{evaluate, Truth};
use wetsam_core::synth::generate_scene;
use wetsam_core::train::{predict, train};
use wetsam_core::Error;

#[derive(Parser)]
#[command(name = "wetsam", version, about = "Weakly-supervised wetland segmentation from sparse points")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Command,
}

/// Flags that override keys of the configuration file.
#[derive(Args)]
struct Overrides {
    /// TOML configuration with [train], [grow], [model] and [scene] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for both the scene generator and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long = "lambda-a", global = true)]
    lambda_a: Option<f64>,
    #[arg(long = "refresh-k", global = true)]
    refresh_k: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    patch: Option<usize>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: cube.wstc, truth.wstc, points.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model: model.wsck, manifest.json, pseudo.wstc.
    Train {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// Dense truth map used only for validation scores.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow a pseudo-label map from the points.
    Grow {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a label map and class probabilities: labels.wstc, probs.wstc.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        /// Optional point prompts.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted map: <out>.txt and <out>.json.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Dense truth map.
        #[arg(long, conflicts_with = "truth_points", required_unless_present = "truth_points")]
        truth: Option<PathBuf>,
        /// Sparse truth points; only those pixels are scored.
        #[arg(long)]
        truth_points: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::DuplicatePoint { .. } | Error::Dimension { .. } => 2,
            Error::Divergence(_) | Error::Evaluation(_) | Error::EmptyStack | Error::NoValidObservation(_) => 3,
            Error::Io { .. } | Error::Format(_) | Error::Length { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

/// Missing inputs are reported as usage errors before any work starts.
fn require(paths: &[&Path]) -> Outcome {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(usage(format!("input file {} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn out_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

impl Overrides {
    fn resolve(&self) -> std::result::Result<Config, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                require(&[p])?;
                Config::load(p)?
            }
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.scene.seed = s;
        }
        if let Some(v) = self.tau {
            cfg.grow.tau = v;
        }
        if let Some(v) = self.lambda_a {
            cfg.train.lambda_a = v;
        }
        if let Some(v) = self.refresh_k {
            cfg.train.refresh_k = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.patch {
            cfg.train.patch_size = v;
        }
        if let Some(v) = self.threads {
            cfg.train.threads = v;
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        Ok(cfg)
    }
}

fn load_points(path: &Path, cube: &TimeSeriesCube, cfg: &Config) -> std::result::Result<SparsePointSet, Failure> {
    Ok(read_points(path, cube.height(), cube.width(), cfg.model.num_classes)?)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = cli.opts.resolve()?;
    match cli.cmd {
        Command::Synth { out } => {
            cfg.scene.validate()?;
            let scene = generate_scene(&cfg.scene)?;
            out_dir(&out)?;
            scene.cube.write(out.join("cube.wstc"))?;
            scene.truth.write(out.join("truth.wstc"), 0)?;
            scene.points.write(out.join("points.csv"))?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!(
                "wrote {}x{} scene with {} dates and {} points to {}",
                cfg.scene.height,
                cfg.scene.width,
                cfg.scene.timesteps,
                scene.points.len(),
                out.display()
            );
        }
        Command::Train { cube, points, truth, out } => {
            let mut inputs = vec![cube.as_path(), points.as_path()];
            inputs.extend(truth.as_deref());
            require(&inputs)?;
            cfg.validate()?;
            let data = TimeSeriesCube::read(&cube)?;
            if cfg.model.channels != data.channels() {
                log::info!("model channels set to {} from the cube", data.channels());
                cfg.model.channels = data.channels();
            }
            let pts = load_points(&points, &data, &cfg)?;
            let truth_map = truth.map(|p| LabelMap::read(p).map(|(m, _)| m)).transpose()?;
            let result = train(&cfg, &data, &pts, truth_map.as_ref())?;
            out_dir(&out)?;
            Checkpoint::from_model(&result.model, &cfg, data.len_t()).write(out.join("model.wsck"))?;
            write_text(&out.join("manifest.json"), &result.manifest.to_json())?;
            let last = result.manifest.refreshes.last().map_or(0, |r| r.iteration);
            result.pseudo_labels.write(out.join("pseudo.wstc"), last as i32)?;
            if let Some(v) = &result.manifest.validation {
                println!("validation macro F1 {:.4}", v.macro_f1);
            }
        }
        Command::Grow { cube, points, out } => {
            require(&[&cube, &points])?;
            cfg.grow.validate()?;
            let data = TimeSeriesCube::read(&cube)?;
            let pts = load_points(&points, &data, &cfg)?;
            let map = grow(&seeds_from_points(&pts, &data)?, &data, cfg.grow.tau)?;
            map.write(&out, 0)?;
            println!("labeled fraction {:.4}", map.labeled_fraction());
        }
        Command::Predict { checkpoint, cube, points, out } => {
            let mut inputs = vec![checkpoint.as_path(), cube.as_path()];
            inputs.extend(points.as_deref());
            require(&inputs)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let model = ck.to_model()?;
            let data = TimeSeriesCube::read(&cube)?;
            if data.len_t() != ck.t_len {
                return Err(usage(format!(
                    "cube has {} dates, model was trained on {}",
                    data.len_t(),
                    ck.t_len
                )));
            }
            let prompts = match &points {
                Some(p) => load_points(p, &data, &ck.config)?.points().to_vec(),
                None => Vec::new(),
            };
            let patch = cli.opts.patch.unwrap_or(ck.config.train.patch_size);
            let (labels, probs) = predict(&model, &data, &prompts, patch)?;
            out_dir(&out)?;
            labels.write(out.join("labels.wstc"), 0)?;
            let k = model.cfg.num_classes;
            TimeSeriesCube::new(vec![0], data.height(), data.width(), k, probs)?.write(out.join("probs.wstc"))?;
        }
        Command::Eval { pred, truth, truth_points, out } => {
            let mut inputs = vec![pred.as_path()];
            inputs.extend(truth.as_deref());
            inputs.extend(truth_points.as_deref());
            require(&inputs)?;
            let (map, _) = LabelMap::read(&pred)?;
            let k = cfg.model.num_classes;
            let report = match (truth, truth_points) {
                (Some(t), _) => evaluate(&map, Truth::Dense(&LabelMap::read(t)?.0), k)?,
                (None, Some(p)) => {
                    let pts = read_points(p, map.height(), map.width(), k)?;
                    evaluate(&map, Truth::Points(&pts), k)?
                }
                (None, None) => return Err(usage("eval needs --truth or --truth-points".into())),
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                out_dir(dir)?;
            }
            report.write(&out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.opts.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
