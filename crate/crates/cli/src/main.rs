//! `dyndistill` command-line driver: dataset synthesis, training, evaluation
//! and ablation reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyndistill::config::RunConfig;
use dyndistill::data::{Sample, Split};
use dyndistill::eval::write_detections;
use dyndistill::experiment::{self, Grid, CHECKPOINT_FILE};
use dyndistill::model::Detector;
use dyndistill::trainer::load_checkpoint;
use dyndistill::{synth, Error};

#[derive(Parser)]
#[command(name = "dyndistill", version, about = "Dynamic-teacher distillation for fault detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fault-detection dataset.
    Synth(SynthArgs),
    /// Train a detector, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run an ablation grid and write a markdown report with plots.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Default,
    /// 64 px images and narrow stages for CPU runs.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Dotted override, e.g. `distill.batch_size=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn explicit(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }

    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => match self.preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            },
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Seed for initialisation and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Total training iterations.
    #[arg(long)]
    iters: Option<u64>,
    /// Distillation weight; 0 turns the distillation term off.
    #[arg(long)]
    lambda: Option<f64>,
    /// Distillation temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Channel segments of the permute encoder.
    #[arg(long)]
    segments: Option<usize>,
    /// Pyramid width.
    #[arg(long)]
    fpn_channels: Option<usize>,
    /// Train the student alone, without the teacher branch.
    #[arg(long)]
    no_teacher: bool,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.distill.seed = s;
            cfg.model.init_seed = s;
        }
        if let Some(n) = self.iters {
            cfg.distill.total_iters = n;
        }
        if let Some(l) = self.lambda {
            cfg.distill.lambda = l;
        }
        if let Some(t) = self.tau {
            cfg.distill.tau = t;
        }
        if let Some(s) = self.segments {
            cfg.model.segments = s;
        }
        if let Some(c) = self.fpn_channels {
            cfg.model.fpn_channels = c;
        }
        if self.no_teacher {
            cfg.distill.teacher = false;
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Dataset directory (defaults to `paths.data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (defaults to `paths.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run in `--out`.
    #[arg(long)]
    overwrite: bool,
    /// Continue the run in `--out` from its checkpoint.
    #[arg(long, conflicts_with = "overwrite")]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file (defaults to `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory holding the checkpoint (defaults to `paths.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (defaults to `paths.data`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write detections as JSON lines.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Dataset directory (defaults to `paths.data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Grid axis as `name=v1,v2,...`; names are tau, lambda, fpn_channels, seed.
    #[arg(long = "sweep", value_name = "AXIS=VALUES")]
    sweep: Vec<String>,
    /// Keep the teacher enabled in lambda = 0 cells.
    #[arg(long)]
    baseline_with_teacher: bool,
    /// Replace an existing report in `--out`.
    #[arg(long)]
    overwrite: bool,
}

fn parse_list<T: std::str::FromStr>(axis: &str, values: &str) -> anyhow::Result<Vec<T>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad value `{v}` for sweep axis {axis}")).into())
        })
        .collect()
}

fn parse_grid(sweeps: &[String], baseline_with_teacher: bool) -> anyhow::Result<Grid> {
    let mut grid = Grid {
        baseline_without_teacher: !baseline_with_teacher,
        ..Grid::default()
    };
    for s in sweeps {
        let Some((axis, values)) = s.split_once('=') else {
            return Err(Error::Input(format!("sweep `{s}` is not axis=values")).into());
        };
        match axis.trim() {
            "tau" => grid.tau = parse_list(axis, values)?,
            "lambda" => grid.lambda = parse_list(axis, values)?,
            "fpn_channels" => grid.fpn_channels = parse_list(axis, values)?,
            "seed" => grid.seeds = parse_list(axis, values)?,
            other => return Err(Error::Input(format!("unknown sweep axis `{other}`")).into()),
        }
    }
    Ok(grid)
}

fn load_split(dir: &Path, split: Split, cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let meta = synth::read_meta(dir)?;
    if meta.config.image_size != cfg.model.image_size {
        return Err(Error::Input(format!(
            "dataset {} has {} px images, model expects {}",
            dir.display(),
            meta.config.image_size,
            cfg.model.image_size
        ))
        .into());
    }
    if meta.config.num_classes != cfg.model.num_classes {
        return Err(Error::Input(format!(
            "dataset {} has {} classes, model expects {}",
            dir.display(),
            meta.config.num_classes,
            cfg.model.num_classes
        ))
        .into());
    }
    let samples = synth::load(dir, split)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} split of {} is empty", split.as_str(), dir.display())).into());
    }
    Ok(samples)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(s) = args.seed {
        cfg.synth.seed = s;
    }
    let summary = synth::generate(&cfg.synth, &args.out, args.overwrite)?;
    println!(
        "images {}  objects {}  normal {}  fault {}",
        summary.images, summary.objects, summary.normal, summary.fault
    );
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    args.flags.apply(&mut cfg);
    cfg.validate()?;
    let data = args.data.unwrap_or_else(|| cfg.paths.data.clone().into());
    let out = args.out.unwrap_or_else(|| cfg.paths.out.clone().into());
    let log_path = out.join(experiment::LOG_FILE);
    if log_path.exists() && !args.overwrite && !args.resume {
        return Err(Error::Input(format!(
            "{} already holds a run; pass --overwrite or --resume",
            out.display()
        ))
        .into());
    }
    let train = load_split(&data, Split::Train, &cfg)?;
    log::info!(
        "training {} iterations on {} images into {}",
        cfg.distill.total_iters,
        train.len(),
        out.display()
    );
    let every = (cfg.distill.total_iters / 20).max(1);
    let trainer = experiment::train_in_dir(&cfg, &train, &out, args.resume, |r| {
        if r.iter % every == 0 {
            log::info!(
                "iter {} L_det_S {:.4} L_det_T {:.4} L_distill {:.4} L_total {:.4} lr {:.2e}",
                r.iter,
                r.loss.det_student,
                r.loss.det_teacher,
                r.loss.distill,
                r.loss.total,
                r.lr
            );
        }
    })?;
    println!(
        "trained to iteration {}; student params {}, total params {}",
        trainer.state.iteration,
        trainer.model.num_student_params(),
        trainer.model.num_params()
    );
    println!("run log: {}", log_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = args.config.load()?;
    let out = args.out.unwrap_or_else(|| cfg.paths.out.clone().into());
    let ckpt_path = args.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ck = load_checkpoint(&ckpt_path)?;
    if args.config.explicit() && cfg.model.hash() != ck.config_hash {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model configuration than the one given",
            ckpt_path.display()
        ))
        .into());
    }
    let model: Detector = ck.model;
    let mut run_cfg = cfg.clone();
    run_cfg.model = model.cfg.clone();
    let data = args.data.unwrap_or_else(|| cfg.paths.data.clone().into());
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = load_split(&data, split, &run_cfg)?;
    let (result, dets) = experiment::evaluate_model(&model, &samples)?;
    if let Some(path) = &args.detections {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_detections(std::io::BufWriter::new(file), &dets)?;
    }
    println!("| split | images | mAP | AP50 | AP75 | AR1 | AR10 |");
    println!("|---|---|---|---|---|---|---|");
    println!(
        "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        split.as_str(),
        samples.len(),
        result.map,
        result.ap50,
        result.ap75,
        result.ar1,
        result.ar10
    );
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    args.flags.apply(&mut cfg);
    cfg.validate()?;
    let grid = parse_grid(&args.sweep, args.baseline_with_teacher)?;
    if args.out.join("report.md").exists() && !args.overwrite {
        return Err(Error::Input(format!(
            "{} already holds a report; pass --overwrite to replace it",
            args.out.display()
        ))
        .into());
    }
    if args.overwrite {
        let cells = args.out.join("cells");
        if cells.exists() {
            std::fs::remove_dir_all(&cells).with_context(|| format!("clearing {}", cells.display()))?;
        }
    }
    let data = args.data.unwrap_or_else(|| cfg.paths.data.clone().into());
    let train = load_split(&data, Split::Train, &cfg)?;
    let test = load_split(&data, Split::Test, &cfg)?;
    let n = grid.cells(&cfg).len();
    log::info!("running {n} grid cells into {}", args.out.display());
    let (results, paths) = experiment::run_grid(&cfg, &grid, &train, &test, &args.out, |r| {
        log::info!("{}: mAP {:.4}", r.cell.name, r.eval.map);
    })?;
    print!("{}", experiment::render_markdown(&results));
    println!("report: {}", paths.markdown.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => 3,
        Some(
            Error::Config(_)
            | Error::Input(_)
            | Error::Annotation(_)
            | Error::Record { .. }
            | Error::FormatVersion { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
