//! Command-line surface tying the toolkit together. Outputs live under a
//! run directory: `config.resolved`, `train_log.csv`, `checkpoints/`,
//! `scores/`, `eval.txt`, `bench.txt`, `plots/`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::bench::run_bench;
use crate::config::{load_config, ExperimentConfig, ScoreStrategy};
use crate::data::toy::{generate_toy_dataset, ToyParams};
use crate::data::{load_dataset, load_event_bank, VideoSequence};
use crate::eval::{evaluate, report, EvalResult};
use crate::infer::{localize, score_video, series_to_csv, ScoreSeries};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::plot::{plot_overlay, plot_score_curve};
use crate::train::{distill_student_logged, train_teacher_logged};

#[derive(Parser)]
#[command(
    name = "sdmae",
    version,
    about = "Self-distilled masked auto-encoder for video anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config resolution: optional file plus `key=value` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set preset=toy --set seed=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(load_config(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic toy dataset
    MakeToy {
        /// Output directory for the dataset tree
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        train_videos: usize,
        #[arg(long, default_value_t = 4)]
        test_videos: usize,
        #[arg(long, default_value_t = 120)]
        frames: usize,
        /// Frame height and width (square)
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Stage 1: train the teacher (shared encoder + teacher decoder)
    TrainTeacher {
        /// Dataset root (train/, test/, bank/)
        #[arg(long)]
        data: PathBuf,
        /// Run directory for logs and checkpoints
        #[arg(long)]
        run: PathBuf,
        /// Also save a checkpoint every K epochs
        #[arg(long, value_name = "K")]
        checkpoint_every: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 2: distill the student decoder from a trained teacher
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Teacher checkpoint base path (default: <run>/checkpoints/teacher)
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score the test split; writes per-video CSVs under <run>/scores/
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint base path (default: <run>/checkpoints/student)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate micro/macro AUC from score CSVs and test labels
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Measure FPS and report parameter/FLOP counts
    Bench {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint base path; a fresh model is initialized when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the ablation grid (score strategies and augmentation
    /// proportions) on the toy preset and emit a combined report
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Emit score-vs-frame curves and overlay images with localization
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint base path (default: <run>/checkpoints/student)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only plot this video
        #[arg(long)]
        video: Option<String>,
        /// Overlay images for the top-N scoring frames per video
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Patch-mean threshold for localization (default: adaptive)
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Parse and run; returns the process exit code (2 for usage errors).
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeToy {
            out,
            seed,
            train_videos,
            test_videos,
            frames,
            size,
        } => {
            let params = ToyParams {
                train_videos,
                test_videos,
                frames_per_video: frames,
                height: size,
                width: size,
                ..ToyParams::default()
            };
            let manifest = generate_toy_dataset(&out, &params, seed)?;
            print!("{}", manifest.to_text());
            Ok(())
        }
        Command::TrainTeacher {
            data,
            run,
            checkpoint_every,
            config,
        } => cmd_train_teacher(&data, &run, checkpoint_every, &config),
        Command::Distill {
            data,
            run,
            teacher,
            config,
        } => cmd_distill(&data, &run, teacher.as_deref(), &config),
        Command::Score {
            data,
            run,
            checkpoint,
            config,
        } => cmd_score(&data, &run, checkpoint.as_deref(), &config),
        Command::Eval { data, run, config } => {
            let result = cmd_eval(&data, &run, &config)?;
            print!("{}", report(&result));
            Ok(())
        }
        Command::Bench {
            run,
            checkpoint,
            frames,
            batch,
            config,
        } => cmd_bench(&run, checkpoint.as_deref(), frames, batch, &config),
        Command::Ablate { data, run, config } => cmd_ablate(&data, &run, &config),
        Command::Plot {
            data,
            run,
            checkpoint,
            video,
            top,
            threshold,
            config,
        } => cmd_plot(
            &data,
            &run,
            checkpoint.as_deref(),
            video.as_deref(),
            top,
            threshold,
            &config,
        ),
    }
}

fn prepare_run_dir(run: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(run.join("checkpoints"))
        .with_context(|| format!("creating run directory {}", run.display()))?;
    std::fs::write(run.join("config.resolved"), cfg.to_file_string())?;
    Ok(())
}

fn write_log(path: &Path, history: &[f64]) -> Result<()> {
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{loss:.12}\n", i + 1));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_train_teacher(
    data: &Path,
    run: &Path,
    checkpoint_every: Option<usize>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.resolve()?;
    prepare_run_dir(run, &cfg)?;
    let (train, _) = load_dataset(data, &cfg)?;
    let bank = load_event_bank(&data.join("bank"))?;
    let ckpt_dir = run.join("checkpoints");
    let (params, state) = train_teacher_logged(&train, &bank, &cfg, cfg.seed, |epoch, loss, p| {
        println!("teacher epoch {epoch}: mean loss {loss:.6}");
        if let Some(k) = checkpoint_every {
            if k > 0 && epoch % k == 0 {
                let _ = save_checkpoint(p, &ckpt_dir.join(format!("teacher_epoch_{epoch}")), "teacher", cfg.seed);
            }
        }
    })?;
    save_checkpoint(&params, &ckpt_dir.join("teacher"), "teacher", cfg.seed)?;
    write_log(&run.join("train_log.csv"), &state.loss_history)?;
    Ok(())
}

fn cmd_distill(
    data: &Path,
    run: &Path,
    teacher: Option<&Path>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.resolve()?;
    prepare_run_dir(run, &cfg)?;
    let base = teacher
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("checkpoints").join("teacher"));
    let (params, stage, _) = load_checkpoint(&base, &cfg)?;
    if stage != "teacher" && stage != "student" {
        bail!("checkpoint {} is not a trained teacher (stage `{stage}`)", base.display());
    }
    let (train, _) = load_dataset(data, &cfg)?;
    let bank = load_event_bank(&data.join("bank"))?;
    let (params, state) =
        distill_student_logged(&train, &bank, &cfg, params, cfg.seed, |epoch, loss, _| {
            println!("student epoch {epoch}: mean loss {loss:.6}");
        })?;
    save_checkpoint(&params, &run.join("checkpoints").join("student"), "student", cfg.seed)?;
    write_log(&run.join("train_log_student.csv"), &state.loss_history)?;
    Ok(())
}

fn load_scoring_params(
    run: &Path,
    checkpoint: Option<&Path>,
    cfg: &ExperimentConfig,
) -> Result<ModelParams> {
    let base = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("checkpoints").join("student"));
    let (params, stage, _) = load_checkpoint(&base, cfg)?;
    if cfg.score_strategy.needs_student() && stage != "student" {
        bail!(
            "strategy {} needs a distilled student, but checkpoint {} has stage `{stage}`",
            cfg.score_strategy,
            base.display()
        );
    }
    Ok(params)
}

fn cmd_score(
    data: &Path,
    run: &Path,
    checkpoint: Option<&Path>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.resolve()?;
    prepare_run_dir(run, &cfg)?;
    let params = load_scoring_params(run, checkpoint, &cfg)?;
    let (_, test) = load_dataset(data, &cfg)?;
    let scores_dir = run.join("scores");
    std::fs::create_dir_all(&scores_dir)?;
    for video in &test {
        let (series, _) = score_video(&params, video, &cfg)?;
        std::fs::write(
            scores_dir.join(format!("{}.csv", video.video_id)),
            series_to_csv(&series),
        )?;
        println!("scored {} ({} frames)", video.video_id, series.raw.len());
    }
    Ok(())
}

/// Read back a score CSV written by `cmd_score`.
fn read_series_csv(path: &Path, video_id: &str) -> Result<ScoreSeries> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut raw = Vec::new();
    let mut smoothed = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let _t = parts.next();
        let r: f64 = parts
            .next()
            .with_context(|| format!("malformed score line `{line}`"))?
            .parse()?;
        let s: f64 = parts
            .next()
            .with_context(|| format!("malformed score line `{line}`"))?
            .parse()?;
        raw.push(r);
        smoothed.push(s);
    }
    Ok(ScoreSeries {
        video_id: video_id.to_string(),
        raw,
        smoothed,
    })
}

fn cmd_eval(data: &Path, run: &Path, config: &ConfigArgs) -> Result<EvalResult> {
    let cfg = config.resolve()?;
    let (_, test) = load_dataset(data, &cfg)?;
    let mut pairs = Vec::new();
    for video in &test {
        let labels = video
            .labels
            .clone()
            .with_context(|| format!("video {} has no labels", video.video_id))?;
        let csv = run.join("scores").join(format!("{}.csv", video.video_id));
        let series = read_series_csv(&csv, &video.video_id)?;
        pairs.push((series, labels));
    }
    let result = evaluate(&pairs)?;
    std::fs::write(run.join("eval.txt"), report(&result))?;
    Ok(result)
}

fn cmd_bench(
    run: &Path,
    checkpoint: Option<&Path>,
    frames: usize,
    batch: usize,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.resolve()?;
    prepare_run_dir(run, &cfg)?;
    let params = match checkpoint {
        Some(base) => load_checkpoint(base, &cfg)?.0,
        None => crate::model::init_model(&cfg, cfg.seed),
    };
    let bench = run_bench(&params, &cfg, frames, batch)?;
    let mut text = bench.to_text();
    // reference values reported side by side for comparison
    text.push_str(&format!(
        "reference_param_count = 3000000\nreference_gflops_per_frame = 0.8\n\
         measured_gflops_per_frame = {:.4}\n",
        bench.flops_per_frame / 1e9
    ));
    std::fs::write(run.join("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval_with_strategy(
    params: &ModelParams,
    test: &[VideoSequence],
    cfg: &ExperimentConfig,
) -> Result<EvalResult> {
    let mut pairs = Vec::new();
    for video in test {
        let labels = video
            .labels
            .clone()
            .with_context(|| format!("video {} has no labels", video.video_id))?;
        let (series, _) = score_video(params, video, cfg)?;
        pairs.push((series, labels));
    }
    Ok(evaluate(&pairs)?)
}

fn cmd_ablate(data: &Path, run: &Path, config: &ConfigArgs) -> Result<()> {
    // base the grid on the toy preset unless overridden
    let mut config_args = ConfigArgs {
        config: config.config.clone(),
        sets: vec!["preset=toy".to_string()],
    };
    config_args.sets.extend(config.sets.iter().cloned());
    let cfg = config_args.resolve()?;
    prepare_run_dir(run, &cfg)?;
    let (train, test) = load_dataset(data, &cfg)?;
    let bank = load_event_bank(&data.join("bank"))?;
    let mut out = String::from("section,setting,micro_auc,macro_auc\n");

    // score-strategy rows: one training at the configured augmentation
    let (teacher, _) = train_teacher_logged(&train, &bank, &cfg, cfg.seed, |e, l, _| {
        println!("[strategies] teacher epoch {e}: {l:.6}");
    })?;
    let (params, _) =
        distill_student_logged(&train, &bank, &cfg, teacher, cfg.seed, |e, l, _| {
            println!("[strategies] student epoch {e}: {l:.6}");
        })?;
    for strategy in [
        ScoreStrategy::T,
        ScoreStrategy::TS,
        ScoreStrategy::TTsd,
        ScoreStrategy::TSTsd,
    ] {
        let mut scfg = cfg.clone();
        scfg.score_strategy = strategy;
        let result = eval_with_strategy(&params, &test, &scfg)?;
        out.push_str(&format!(
            "strategy,{},{:.6},{:.6}\n",
            strategy.as_str(),
            result.micro_auc,
            result.macro_auc
        ));
    }

    // augmentation-proportion rows: retrain per proportion
    for pct in [0usize, 25, 50, 75] {
        let mut acfg = cfg.clone();
        acfg.augment_probability = pct as f64 / 100.0;
        let (teacher, _) = train_teacher_logged(&train, &bank, &acfg, acfg.seed, |e, l, _| {
            println!("[augment {pct}%] teacher epoch {e}: {l:.6}");
        })?;
        let (params, _) =
            distill_student_logged(&train, &bank, &acfg, teacher, acfg.seed, |e, l, _| {
                println!("[augment {pct}%] student epoch {e}: {l:.6}");
            })?;
        let result = eval_with_strategy(&params, &test, &acfg)?;
        out.push_str(&format!(
            "augment,{pct}%,{:.6},{:.6}\n",
            result.micro_auc, result.macro_auc
        ));
    }
    std::fs::write(run.join("ablate.txt"), &out)?;
    print!("{out}");
    Ok(())
}

fn cmd_plot(
    data: &Path,
    run: &Path,
    checkpoint: Option<&Path>,
    only_video: Option<&str>,
    top: usize,
    threshold: Option<f64>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.resolve()?;
    let params = load_scoring_params(run, checkpoint, &cfg)?;
    let (_, test) = load_dataset(data, &cfg)?;
    let plots_dir = run.join("plots");
    std::fs::create_dir_all(&plots_dir)?;
    for video in &test {
        if let Some(only) = only_video {
            if video.video_id != only {
                continue;
            }
        }
        let (series, maps) = score_video(&params, video, &cfg)?;
        plot_score_curve(
            &series,
            video.labels.as_deref(),
            &plots_dir.join(format!("{}_scores.png", video.video_id)),
        )?;
        // overlays for the top-scoring frames
        let mut order: Vec<usize> = (0..series.smoothed.len()).collect();
        order.sort_by(|&a, &b| series.smoothed[b].partial_cmp(&series.smoothed[a]).unwrap());
        for &t in order.iter().take(top) {
            let map = &maps[t];
            let thr = threshold.unwrap_or_else(|| {
                // adaptive: mean plus three standard deviations of the map
                let mean = map.values.mean().unwrap_or(0.0);
                let var = map.values.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
                mean + 3.0 * var.sqrt()
            });
            let regions = localize(map, cfg.patch_size, thr);
            plot_overlay(
                &video.frames[t],
                &regions,
                &plots_dir.join(format!("{}_frame_{t:06}.png", video.video_id)),
            )?;
        }
        println!("plotted {}", video.video_id);
    }
    Ok(())
}
