//! Training runs on disk and ablation grids with a markdown report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Detection, EvalResult, GroundTruth};
use crate::model::Detector;
use crate::plot::{self, Series, PALETTE};
use crate::trainer::{read_log, LogRow, RunLog, Trainer};

pub const LOG_FILE: &str = "run.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PLOT_FILE: &str = "loss.png";
pub const CONFIG_FILE: &str = "config.toml";

/// Detections and metrics of a model over a sample set.
pub fn evaluate_model(model: &Detector, samples: &[Sample]) -> Result<(EvalResult, Vec<Detection>)> {
    let mut dets = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    for s in samples {
        dets.extend(model.infer(s)?);
        gts.extend(s.ground_truth());
    }
    Ok((evaluate(&dets, &gts, model.cfg.num_classes), dets))
}

/// Trains into `out` (run log, checkpoint, loss plot, config echo). With
/// `resume`, continues from the checkpoint already in `out`.
pub fn train_in_dir<'d>(
    cfg: &RunConfig,
    train: &'d [Sample],
    out: &Path,
    resume: bool,
    mut progress: impl FnMut(&LogRow),
) -> Result<Trainer<'d>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let (mut trainer, mut log) = if resume {
        let stored = crate::trainer::checkpoint_hash(&ckpt)?;
        if stored != cfg.model.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                ckpt.display()
            )));
        }
        let t = Trainer::resume(&ckpt, Some(cfg.distill.clone()), train)?;
        let log = RunLog::resume(&log_path, t.state.iteration)?;
        (t, log)
    } else {
        let model = Detector::new(&cfg.model)?;
        (
            Trainer::new(model, cfg.distill.clone(), train)?,
            RunLog::create(&log_path)?,
        )
    };
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string())
        .map_err(|e| Error::io(format!("writing {}", out.join(CONFIG_FILE).display()), e))?;
    let result = trainer.run(cfg.distill.total_iters, &mut log, Some(&ckpt), &mut progress);
    drop(log);
    let rows = read_log(&log_path)?;
    plot_losses(&out.join(PLOT_FILE), &rows)?;
    result?;
    Ok(trainer)
}

/// Smoothed loss components against iteration.
pub fn plot_losses(path: &Path, rows: &[LogRow]) -> Result<()> {
    let window = (rows.len() / 20).max(1);
    let pick = |f: fn(&LogRow) -> f64| -> Vec<(f64, f64)> {
        let ys: Vec<f64> = rows.iter().map(f).collect();
        rows.iter()
            .zip(plot::smooth(&ys, window))
            .map(|(r, y)| (r.iter as f64, y))
            .collect()
    };
    let series = [
        Series {
            color: PALETTE[0],
            points: pick(|r| r.loss.total),
        },
        Series {
            color: PALETTE[1],
            points: pick(|r| r.loss.det_student),
        },
        Series {
            color: PALETTE[2],
            points: pick(|r| r.loss.det_teacher),
        },
        Series {
            color: PALETTE[3],
            points: pick(|r| r.loss.distill),
        },
    ];
    plot::line_chart(path, &series, 640, 400)
}

/// Axes of an ablation grid; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
    pub fpn_channels: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Cells with `lambda = 0` also switch the teacher off (plain student).
    pub baseline_without_teacher: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub tau: f64,
    pub lambda: f64,
    pub fpn_channels: usize,
    pub seed: u64,
}

impl Grid {
    pub fn cells(&self, base: &RunConfig) -> Vec<Cell> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let taus = or(&self.tau, base.distill.tau);
        let lambdas = or(&self.lambda, base.distill.lambda);
        let chans = if self.fpn_channels.is_empty() {
            vec![base.model.fpn_channels]
        } else {
            self.fpn_channels.clone()
        };
        let seeds = if self.seeds.is_empty() {
            vec![base.distill.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for &tau in &taus {
            for &lambda in &lambdas {
                for &c in &chans {
                    for &seed in &seeds {
                        out.push(Cell {
                            name: format!("tau{tau}_lambda{lambda}_c{c}_seed{seed}"),
                            tau,
                            lambda,
                            fpn_channels: c,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, base: &RunConfig, cell: &Cell) -> RunConfig {
        let mut cfg = base.clone();
        cfg.distill.tau = cell.tau;
        cfg.distill.lambda = cell.lambda;
        cfg.distill.seed = cell.seed;
        cfg.model.init_seed = cell.seed;
        cfg.model.fpn_channels = cell.fpn_channels;
        if self.baseline_without_teacher && cell.lambda == 0.0 {
            cfg.distill.teacher = false;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub teacher: bool,
    pub iterations: u64,
    pub total_params: usize,
    pub student_params: usize,
    pub mean_total_loss: f64,
    /// Mean `L_total` over the last tenth of the run.
    pub final_total_loss: f64,
    pub mean_distill_loss: f64,
    pub eval: EvalResult,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregates a finished cell from its on-disk run log.
pub fn summarize(cell: &Cell, cfg: &RunConfig, model: &Detector, rows: &[LogRow], eval: EvalResult) -> CellResult {
    let tail = (rows.len() / 10).max(1).min(rows.len());
    CellResult {
        cell: cell.clone(),
        teacher: cfg.distill.teacher,
        iterations: rows.last().map_or(0, |r| r.iter),
        total_params: model.num_params(),
        student_params: model.num_student_params(),
        mean_total_loss: mean(rows.iter().map(|r| r.loss.total)),
        final_total_loss: mean(rows[rows.len() - tail..].iter().map(|r| r.loss.total)),
        mean_distill_loss: mean(rows.iter().map(|r| r.loss.distill)),
        eval,
    }
}

pub struct ReportPaths {
    pub markdown: PathBuf,
    pub json: PathBuf,
}

/// Trains and evaluates every grid cell in order, then writes
/// `report.md`, `report.json` and comparison plots into `out`.
pub fn run_grid(
    base: &RunConfig,
    grid: &Grid,
    train: &[Sample],
    test: &[Sample],
    out: &Path,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<(Vec<CellResult>, ReportPaths)> {
    if test.is_empty() {
        return Err(Error::Input("test split is empty".into()));
    }
    let mut results = Vec::new();
    for cell in grid.cells(base) {
        let cfg = grid.config_for(base, &cell);
        let dir = out.join("cells").join(&cell.name);
        let trainer = train_in_dir(&cfg, train, &dir, false, |_| {})?;
        let rows = read_log(&dir.join(LOG_FILE))?;
        let (eval, _) = evaluate_model(&trainer.model, test)?;
        let r = summarize(&cell, &cfg, &trainer.model, &rows, eval);
        on_cell(&r);
        results.push(r);
    }
    let paths = write_report(out, &results)?;
    plot_cells(out, &results)?;
    Ok((results, paths))
}

/// Paired distilled-vs-baseline outcomes: for each distilled cell, the
/// baseline cell that differs only in lambda.
pub fn paired_wins(results: &[CellResult]) -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    for r in results.iter().filter(|r| r.cell.lambda > 0.0) {
        let base = results.iter().find(|b| {
            b.cell.lambda == 0.0
                && b.cell.seed == r.cell.seed
                && b.cell.tau == r.cell.tau
                && b.cell.fpn_channels == r.cell.fpn_channels
        });
        if let Some(b) = base {
            out.push((r.cell.name.clone(), r.eval.map, b.eval.map));
        }
    }
    out
}

pub fn render_markdown(results: &[CellResult]) -> String {
    let mut md = String::from("# Ablation report\n\n");
    md.push_str(
        "| cell | tau | lambda | C_fpn | seed | teacher | iters | student params | total params | mean L_total | final L_total | mAP | AP50 | AP75 | AR1 | AR10 |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.cell.name,
            r.cell.tau,
            r.cell.lambda,
            r.cell.fpn_channels,
            r.cell.seed,
            if r.teacher { "on" } else { "off" },
            r.iterations,
            r.student_params,
            r.total_params,
            r.mean_total_loss,
            r.final_total_loss,
            r.eval.map,
            r.eval.ap50,
            r.eval.ap75,
            r.eval.ar1,
            r.eval.ar10
        );
    }
    let pairs = paired_wins(results);
    if !pairs.is_empty() {
        let wins = pairs.iter().filter(|(_, d, b)| d >= b).count();
        let _ = writeln!(
            md,
            "\n## Distilled vs baseline\n\nDistilled mAP >= baseline mAP in {wins} of {} paired runs.\n",
            pairs.len()
        );
        md.push_str("| distilled cell | distilled mAP | baseline mAP | difference |\n|---|---|---|---|\n");
        for (name, d, b) in &pairs {
            let _ = writeln!(md, "| {name} | {d:.4} | {b:.4} | {:+.4} |", d - b);
        }
    }
    md
}

pub fn write_report(out: &Path, results: &[CellResult]) -> Result<ReportPaths> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let paths = ReportPaths {
        markdown: out.join("report.md"),
        json: out.join("report.json"),
    };
    fs::write(&paths.markdown, render_markdown(results))
        .map_err(|e| Error::io(format!("writing {}", paths.markdown.display()), e))?;
    let json = serde_json::to_string_pretty(results).expect("results serialize");
    fs::write(&paths.json, json).map_err(|e| Error::io(format!("writing {}", paths.json.display()), e))?;
    Ok(paths)
}

fn plot_cells(out: &Path, results: &[CellResult]) -> Result<()> {
    let mut curves = Vec::new();
    for (k, r) in results.iter().enumerate() {
        let rows = read_log(&out.join("cells").join(&r.cell.name).join(LOG_FILE))?;
        let ys: Vec<f64> = rows.iter().map(|x| x.loss.total).collect();
        let window = (rows.len() / 20).max(1);
        curves.push(Series {
            color: PALETTE[k % PALETTE.len()],
            points: rows
                .iter()
                .zip(plot::smooth(&ys, window))
                .map(|(r, y)| (r.iter as f64, y))
                .collect(),
        });
    }
    plot::line_chart(&out.join("loss_curves.png"), &curves, 800, 480)?;
    let by = |key: fn(&Cell) -> f64| -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = results.iter().map(|r| (key(&r.cell), r.eval.map)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    };
    plot::line_chart(
        &out.join("map_vs_tau.png"),
        &[Series {
            color: PALETTE[0],
            points: by(|c| c.tau),
        }],
        480,
        320,
    )?;
    plot::line_chart(
        &out.join("map_vs_channels.png"),
        &[Series {
            color: PALETTE[1],
            points: by(|c| c.fpn_channels as f64),
        }],
        480,
        320,
    )
}
