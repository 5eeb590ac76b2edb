mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ttrack_core::bbox::BoundingBox;
use ttrack_core::gradcheck::{standard_suite, DEFAULT_TOLERANCE};
use ttrack_core::model::Model;
use ttrack_core::online::{LatencyProfile, Scheduling};
use ttrack_core::report::{eval_offline, eval_online, EvalReport};
use ttrack_core::selftest::run_selftest;
use ttrack_core::sequence::{Sequence, DEFAULT_FPS};
use ttrack_core::synthetic::{dataset, moving_square};
use ttrack_core::tracker::track_offline;
use ttrack_core::training::Trainer;

use crate::config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "ttrack", version, about = "Temporal single-object tracker")]
struct Cli {
    /// TOML file with optional [model], [tracker], [train] and [synth] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight initialisation and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct SeqArgs {
    /// Sequence directory with img/ and groundtruth.txt.
    #[arg(long)]
    seq_dir: PathBuf,
    /// Nominal frame rate of the sequence.
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    /// Parameter archive written by `train`; random weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchedulingArg {
    Latest,
    Fifo,
}

impl From<SchedulingArg> for Scheduling {
    fn from(s: SchedulingArg) -> Self {
        match s {
            SchedulingArg::Latest => Scheduling::LatestWithSkip,
            SchedulingArg::Fifo => Scheduling::Fifo,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track a sequence and print one top-left `x,y,w,h` box per frame.
    Track {
        #[command(flatten)]
        seq: SeqArgs,
        /// Write the boxes here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Offline one-pass evaluation.
    EvalOffline {
        #[command(flatten)]
        seq: SeqArgs,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Latency-aware online evaluation.
    EvalOnline {
        #[command(flatten)]
        seq: SeqArgs,
        /// constant:<ms>, trace:<file> or measured.
        #[arg(long)]
        latency: String,
        #[arg(long, value_enum, default_value_t = SchedulingArg::Latest)]
        scheduling: SchedulingArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exit 0 iff all pass.
    Gradcheck,
    /// Quick oracle fixtures as a pass/fail table.
    Selftest,
    /// Write a synthetic moving-square sequence directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a parameter archive.
    Train {
        /// Training sequences; synthetic squares when omitted.
        #[arg(long)]
        seq_dir: Vec<PathBuf>,
        /// Number of synthetic sequences.
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_model(cfg: &CliConfig, seed: u64, checkpoint: Option<&Path>) -> Result<Model> {
    let mut m = Model::init(&cfg.model, seed)?;
    if let Some(path) = checkpoint {
        m.load_params(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
    }
    Ok(m)
}

fn load_sequence(a: &SeqArgs) -> Result<Sequence> {
    Ok(Sequence::load(&a.seq_dir, a.fps)?)
}

fn print_summary(r: &EvalReport) -> std::io::Result<()> {
    let m = &r.metrics;
    let mut out = std::io::stdout().lock();
    writeln!(out, "sequence       {}", r.sequence)?;
    writeln!(out, "frames         {}", m.frames)?;
    writeln!(out, "precision@20   {:.4}", m.precision_20)?;
    writeln!(out, "norm precision {:.4}", m.norm_precision)?;
    writeln!(out, "success AUC    {:.4}", m.success_auc)?;
    writeln!(out, "AO             {:.4}", m.ao)?;
    writeln!(out, "SR0.5 / SR0.75 {:.4} / {:.4}", m.sr_50, m.sr_75)?;
    writeln!(out, "mean FPS       {:.2}", m.mean_fps)
}

fn finish_report(r: &EvalReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        r.write(p)
            .with_context(|| format!("writing report {}", p.display()))?;
    }
    print_summary(r)?;
    Ok(())
}

fn top_left(b: &BoundingBox) -> String {
    format!("{},{},{},{}", b.left(), b.top(), b.w, b.h)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Command::Track { seq, output } => {
            let model = load_model(&cfg, cli.seed, seq.checkpoint.as_deref())?;
            let s = load_sequence(&seq)?;
            let out = track_offline(&model, &s, &cfg.tracker)?;
            let mut text = String::new();
            for b in &out.boxes {
                text.push_str(&top_left(b));
                text.push('\n');
            }
            match output {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::EvalOffline { seq, report } => {
            let model = load_model(&cfg, cli.seed, seq.checkpoint.as_deref())?;
            let s = load_sequence(&seq)?;
            finish_report(&eval_offline(&model, &s, &cfg.tracker)?, report.as_deref())?;
        }
        Command::EvalOnline {
            seq,
            latency,
            scheduling,
            report,
        } => {
            let profile = LatencyProfile::parse(&latency)?;
            let model = load_model(&cfg, cli.seed, seq.checkpoint.as_deref())?;
            let s = load_sequence(&seq)?;
            let r = eval_online(&model, &s, &cfg.tracker, &profile, scheduling.into())?;
            finish_report(&r, report.as_deref())?;
        }
        Command::Gradcheck => {
            let mut all_ok = true;
            for c in standard_suite() {
                let ok = c.passed(DEFAULT_TOLERANCE);
                all_ok &= ok;
                println!(
                    "{:<4} {:<22} rel err {:.2e} over {} coords",
                    if ok { "ok" } else { "FAIL" },
                    c.name,
                    c.rel_error,
                    c.coords
                );
            }
            return Ok(all_ok);
        }
        Command::Selftest => {
            let rows = run_selftest(cli.seed);
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &rows {
                println!(
                    "{:<4} {:<width$}  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            return Ok(rows.iter().all(|r| r.passed));
        }
        Command::Synth { out } => {
            let s = moving_square(&cfg.synth, cli.seed)?;
            s.write(&out)?;
            println!("wrote {} frames to {}", s.len(), out.display());
        }
        Command::Train {
            seq_dir,
            clips,
            out,
        } => {
            let data = if seq_dir.is_empty() {
                dataset(&cfg.synth, clips, cli.seed)?
            } else {
                seq_dir
                    .iter()
                    .map(|d| Sequence::load(d, DEFAULT_FPS))
                    .collect::<ttrack_core::Result<Vec<_>>>()?
            };
            if data.is_empty() {
                bail!("no training sequences");
            }
            let mut trainer = Trainer::new(Model::init(&cfg.model, cli.seed)?, cfg.train.clone())?;
            for epoch in 1..=cfg.train.epochs {
                for r in trainer.train_epoch(&data, epoch)? {
                    println!(
                        "epoch {epoch:>4}  len {}  lr {:.2e}  loss {:.5}  |g| {:.3}",
                        r.video_length, r.lr, r.loss, r.grad_norm
                    );
                }
            }
            trainer.model.save(&out)?;
            println!("saved {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
