use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cycreg::energy::{LossWeights, Mode};
use cycreg::engine::RegistrationConfig;
use cycreg::io::{self, Overlay, RegisterInputs};
use cycreg::metrics::{self, EvalInputs};
use cycreg::phantom::{gen_pair, PhantomSpec};
use cycreg::suite::run_suite;
use cycreg::transforms::warp;
use cycreg::{Error, ErrorClass};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "cycreg", version, about = "Cyclic diffeomorphic registration of liver segmentation masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal phantom pair.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Volume file format: nii or json.
        #[arg(long, default_value = "nii")]
        format: String,
    },
    /// Register a moving mask onto a fixed mask.
    Register {
        #[arg(long)]
        moving_mask: PathBuf,
        #[arg(long)]
        fixed_mask: PathBuf,
        #[arg(long)]
        moving_image: Option<PathBuf>,
        #[arg(long)]
        fixed_image: Option<PathBuf>,
        /// Full configuration as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// alpha,beta,gamma,mu
        #[arg(long, value_parser = parse_weights)]
        weights: Option<LossWeights>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        learn_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run the affine pre-alignment first.
        #[arg(long)]
        affine: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a volume through a displacement field.
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a registration run directory.
    Metrics {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        tumors_moving: Option<PathBuf>,
        #[arg(long)]
        tumors_fixed: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register phantom pairs under several modes and tabulate the metrics.
    Suite {
        /// JSON array of phantom specs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "direct,diffeo,diffeo_inc2,diffeocyc_inc1,diffeocyc_inc2")]
        modes: Vec<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        affine: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a slice with colored mask overlays as a PPM image.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        /// mask path, optionally followed by :color (name or #rrggbb)
        #[arg(long)]
        overlay: Vec<String>,
        /// x, y or z
        #[arg(long, default_value = "z")]
        axis: String,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a register manifest and compare every output byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}, expected one of {}", names.join(", "))
    })
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("weight {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, g, m] => LossWeights::new(a, b, g, m).map_err(|e| e.to_string()),
        _ => Err(format!("expected four comma-separated weights, got {}", parts.len())),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RegistrationConfig> {
    match path {
        Some(p) => Ok(io::read_json(p)?),
        None => Ok(RegistrationConfig::default()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Core(Error::Io {
        path: dir.into(),
        source: e,
    }))
}

fn phantom(spec: &Path, out: &Path, format: &str) -> CliResult<()> {
    if format != "nii" && format != "json" {
        return Err(Failure::Usage(format!("--format must be nii or json, got {format}")));
    }
    let spec: PhantomSpec = io::read_json(spec)?;
    let pair = gen_pair(&spec)?;
    create_dir(out)?;
    let file = |name: &str| out.join(format!("{name}.{format}"));
    io::write_scalar(&file("image_a"), &pair.image_a)?;
    io::write_scalar(&file("image_b"), &pair.image_b)?;
    io::write_scalar(&file("mask_a"), &pair.mask_a)?;
    io::write_scalar(&file("mask_b"), &pair.mask_b)?;
    io::write_scalar(&file("tumors_a"), &pair.tumors_a)?;
    io::write_scalar(&file("tumors_b"), &pair.tumors_b)?;
    io::write_field(&file("gt_field"), &pair.gt)?;
    io::write_json(&out.join("spec.json"), &pair.spec)?;
    io::write_json(&out.join("tumors.json"), &pair.tumors)?;
    println!("phantom written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn register(
    inputs: RegisterInputs,
    config: Option<&Path>,
    mode: Option<Mode>,
    weights: Option<LossWeights>,
    max_iters: Option<usize>,
    learn_rate: Option<f64>,
    seed: Option<u64>,
    affine: bool,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    cfg.mode = mode.unwrap_or(cfg.mode);
    cfg.weights = weights.unwrap_or(cfg.weights);
    cfg.max_iters = max_iters.unwrap_or(cfg.max_iters);
    cfg.learn_rate = learn_rate.unwrap_or(cfg.learn_rate);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.affine |= affine;
    let run = io::run_register(&inputs, &cfg, out)?;
    let fixed = io::read_scalar(&run.manifest.inputs.fixed_mask)?;
    let summary = serde_json::json!({
        "mode": cfg.mode,
        "dsc": metrics::dsc(&run.result.warped_mask, &fixed)?,
        "iterations_run": run.result.iterations_run,
        "best_iteration": run.result.best_iteration,
        "best_loss": run.result.best_loss(),
    });
    io::write_json(&out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn warp_cmd(input: &Path, field: &Path, out: &Path) -> CliResult<()> {
    let vol = io::read_scalar(input)?;
    let phi = io::read_field(field)?;
    io::write_scalar(out, &warp(&vol, &phi)?)?;
    Ok(())
}

fn metrics_cmd(result: &Path, tumors_moving: Option<&Path>, tumors_fixed: Option<&Path>, out: &Path) -> CliResult<()> {
    let (res, manifest) = io::load_run(result)?;
    let moving_mask = io::read_scalar(&manifest.inputs.moving_mask)?;
    let fixed_mask = io::read_scalar(&manifest.inputs.fixed_mask)?;
    let image = |p: &Option<PathBuf>, fallback: &cycreg::grid::Volume3| -> CliResult<cycreg::grid::Volume3> {
        match p {
            Some(p) => Ok(io::read_scalar(p)?),
            None => Ok(fallback.clone()),
        }
    };
    let moving_image = image(&manifest.inputs.moving_image, &moving_mask)?;
    let fixed_image = image(&manifest.inputs.fixed_image, &fixed_mask)?;
    let tm = tumors_moving.map(io::read_scalar).transpose()?;
    let tf = tumors_fixed.map(io::read_scalar).transpose()?;
    let inputs = EvalInputs {
        moving_image: &moving_image,
        fixed_image: &fixed_image,
        moving_mask: &moving_mask,
        fixed_mask: &fixed_mask,
        moving_tumors: tm.as_ref(),
        fixed_tumors: tf.as_ref(),
    };
    let report = metrics::report(&inputs, &res)?;
    io::write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn suite(pairs: &Path, modes: &[Mode], config: Option<&Path>, max_iters: Option<usize>, affine: bool, out: &Path) -> CliResult<()> {
    let specs: Vec<PhantomSpec> = io::read_json(pairs)?;
    let mut cfg = load_config(config)?;
    cfg.max_iters = max_iters.unwrap_or(cfg.max_iters);
    cfg.affine |= affine;
    let table = run_suite(&specs, modes, &cfg, |row| {
        eprintln!(
            "pair {} {}: dsc {:.4} -> {:.4}, folds {}, {} iters",
            row.pair,
            row.mode.name(),
            row.initial_dsc,
            row.metrics.dsc,
            row.metrics.folds,
            row.iterations
        );
    })?;
    io::write_json(out, &table)?;
    Ok(())
}

fn render(input: &Path, overlays: &[String], axis: &str, index: usize, out: &Path) -> CliResult<()> {
    let axis = match axis {
        "x" => 0,
        "y" => 1,
        "z" => 2,
        other => return Err(Failure::Usage(format!("--axis must be x, y or z, got {other}"))),
    };
    let vol = io::read_scalar(input)?;
    const PALETTE: [[u8; 3]; 3] = [[0, 0, 255], [255, 0, 0], [0, 255, 0]];
    let mut masks = Vec::new();
    for (i, spec) in overlays.iter().enumerate() {
        let (path, color) = match spec.rsplit_once(':') {
            Some((p, c)) if io::parse_color(c).is_some() => (p, io::parse_color(c).expect("checked")),
            Some((_, c)) if !c.contains(['/', '\\', '.']) => {
                return Err(Failure::Usage(format!("unknown overlay color {c:?}")))
            }
            _ => (spec.as_str(), PALETTE[i % PALETTE.len()]),
        };
        masks.push((io::read_scalar(Path::new(path))?, color));
    }
    let overlays: Vec<Overlay> = masks.iter().map(|(m, c)| Overlay { mask: m, color: *c }).collect();
    let bytes = io::render_slice(&vol, &overlays, axis, index)?;
    std::fs::write(out, bytes).map_err(|e| Failure::Core(Error::Io {
        path: out.into(),
        source: e,
    }))
}

fn replay(manifest: &Path, out: &Path) -> CliResult<()> {
    let differ = io::replay(manifest, out)?;
    if differ.is_empty() {
        println!("replay identical");
        Ok(())
    } else {
        Err(Failure::Core(Error::InconsistentState(format!(
            "replay differs in {}",
            differ.join(", ")
        ))))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom { spec, out, format } => phantom(&spec, &out, &format),
        Command::Register {
            moving_mask,
            fixed_mask,
            moving_image,
            fixed_image,
            config,
            mode,
            weights,
            max_iters,
            learn_rate,
            seed,
            affine,
            out,
        } => register(
            RegisterInputs {
                moving_mask,
                fixed_mask,
                moving_image,
                fixed_image,
            },
            config.as_deref(),
            mode,
            weights,
            max_iters,
            learn_rate,
            seed,
            affine,
            &out,
        ),
        Command::Warp { input, field, out } => warp_cmd(&input, &field, &out),
        Command::Metrics {
            result,
            tumors_moving,
            tumors_fixed,
            out,
        } => metrics_cmd(&result, tumors_moving.as_deref(), tumors_fixed.as_deref(), &out),
        Command::Suite {
            pairs,
            modes,
            config,
            max_iters,
            affine,
            out,
        } => suite(&pairs, &modes, config.as_deref(), max_iters, affine, &out),
        Command::Render {
            input,
            overlay,
            axis,
            index,
            out,
        } => render(&input, &overlay, &axis, index, &out),
        Command::Replay { manifest, out } => replay(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            })
        }
    }
}
