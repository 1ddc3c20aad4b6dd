//! Command-line workflows: synth, train, track, eval and verify.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

pub use config::{CliConfig, EvalConfig};

use crate::dataio::{load_sequence, save_sequence, synth_sequence, Domain, SequenceRecord, SynthSpec};
use crate::error::{Error, Result};
use crate::evalkit::{vot_lite, write_report, MetricReport, Protocol, SequenceMetrics};
use crate::network::Model;
use crate::tracker::{track_sequence, SessionRunner, TemplateMode, Trajectory};
use crate::trainer::{load_checkpoint, train, Datasets, Strategy, TrainOutputs};
use crate::verify::{format_table, Suite, Verifier};

/// Version string with the source revision when built from a git checkout.
pub const VERSION: &str = match option_env!("MMNET_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Generation(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Checkpoint { .. } => EXIT_CHECKPOINT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmnet", version = VERSION, about = "Thermal-infrared tracking with a multi-task matching network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence directory.
    Synth(SynthArgs),
    /// Train a model under one of the data strategies.
    Train(TrainArgs),
    /// Track one sequence and write its trajectory.
    Track(TrackArgs),
    /// Score trajectories or rerun the tracker under a reset protocol.
    Eval(EvalArgs),
    /// Run acceptance suites and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "tir")]
    pub domain: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `strategy` from the config file.
    #[arg(long)]
    pub strategy: Option<String>,
    /// A sequence directory or a folder of them.
    #[arg(long)]
    pub data_gray: Option<PathBuf>,
    #[arg(long)]
    pub data_tir: Option<PathBuf>,
    /// Checkpoint path; the loss log goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub template_mode: Option<String>,
    /// Weight of the discriminative response in [0, 1].
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trajectory CSVs, one per ground-truth directory (ptb).
    #[arg(long, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to rerun under the reset protocol (vot-lite).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parallel sequences; 0 means one per logical core.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// grad, oracle, shape, overfit, track-synth, strategy, metrics, persistence or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the table and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        None => CliConfig::parse(""),
        Some(p) => CliConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

/// Config echo, seed and version; no timestamps, so identical runs write
/// identical manifests.
pub fn manifest(command: &str, seed: u64, cfg: &CliConfig, extra: &[(&str, String)]) -> String {
    let mut s = format!("# mmnet {VERSION}\ncommand = {command}\nseed = {seed}\n");
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str(&cfg.echo());
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        frames: a.frames,
        size: a.size,
        n_distractors: a.distractors,
        domain: a.domain.parse::<Domain>()?,
        ..Default::default()
    };
    let seq = synth_sequence(&spec, a.seed)?.record;
    save_sequence(&seq, &a.out)?;
    let extra = [
        ("frames", a.frames.to_string()),
        ("size", a.size.to_string()),
        ("distractors", a.distractors.to_string()),
        ("domain", spec.domain.to_string()),
    ];
    write(&a.out.join("manifest.txt"), &manifest("synth", a.seed, &CliConfig::default(), &extra))?;
    println!("wrote {} frames to {}", seq.len(), a.out.display());
    Ok(EXIT_OK)
}

/// A sequence directory, or every sequence directory directly inside `dir`
/// in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    if dir.join("groundtruth.txt").exists() {
        return Ok(vec![load_sequence(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!("{} holds no sequence directories", dir.display())));
    }
    subdirs.iter().map(|d| load_sequence(d)).collect()
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = &a.strategy {
        cfg.train.strategy = s.parse()?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = Some(e);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let strategy = cfg.train.strategy;
    let (needs_gray, needs_tir) = match strategy {
        Strategy::VidOnly => (true, false),
        Strategy::TirOnly => (false, true),
        Strategy::Retrain | Strategy::Finetune | Strategy::Mix => (true, true),
    };
    for (needed, given, flag) in [(needs_gray, &a.data_gray, "--data-gray"), (needs_tir, &a.data_tir, "--data-tir")] {
        match (needed, given) {
            (true, None) => return Err(Error::Config(format!("strategy {strategy} requires {flag}"))),
            (false, Some(_)) => log::warn!("strategy {strategy} ignores {flag}"),
            _ => {}
        }
    }
    let load = |needed: bool, dir: &Option<PathBuf>| -> Result<Option<Arc<Vec<SequenceRecord>>>> {
        match (needed, dir) {
            (true, Some(d)) => Ok(Some(Arc::new(load_dataset(d)?))),
            _ => Ok(None),
        }
    };
    let data = Datasets {
        grayscale: load(needs_gray, &a.data_gray)?,
        tir: load(needs_tir, &a.data_tir)?,
    };
    let loss_log = sibling(&a.out, ".loss.csv");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        loss_log: Some(loss_log.clone()),
    };
    write(
        &sibling(&a.out, ".manifest.txt"),
        &manifest("train", cfg.train.seed, &cfg, &[]),
    )?;
    let r = train(&cfg.train, &cfg.model, &data, None, &outputs)?;
    if let Some(last) = r.log.last() {
        println!(
            "trained {strategy}: {} batches, final loss {:.4}",
            r.log.len(),
            last.loss.total
        );
    }
    println!("checkpoint {}  loss log {}", a.out.display(), loss_log.display());
    Ok(EXIT_OK)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    load_checkpoint(path)?.model()
}

fn cmd_track(a: &TrackArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = &a.template_mode {
        cfg.tracker.template_mode = m.parse::<TemplateMode>()?;
    }
    if let Some(b) = a.beta {
        cfg.tracker.branch_mix = b;
    }
    cfg.tracker.validate()?;
    let model = load_model(&a.model)?;
    let seq = load_sequence(&a.sequence)?;
    let run = track_sequence(&model, &seq, &cfg.tracker)?;
    run.trajectory.save(&a.out)?;
    let extra = [
        ("model", a.model.display().to_string()),
        ("sequence", a.sequence.display().to_string()),
    ];
    write(&sibling(&a.out, ".manifest.txt"), &manifest("track", 0, &cfg, &extra))?;
    println!("{}: {} frames, {:.1} fps", seq.name, seq.len(), run.fps);
    Ok(EXIT_OK)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = &a.protocol {
        cfg.eval.protocol = p.parse::<Protocol>()?;
    }
    if let Some(w) = a.workers {
        cfg.eval.workers = w;
    }
    let protocol = cfg.eval.protocol;
    let pool = pool(cfg.eval.workers)?;
    let sequences: Vec<SequenceMetrics> = match protocol {
        Protocol::Ptb => {
            if a.model.is_some() {
                return Err(Error::Config("ptb scores precomputed trajectories; use --pred, not --model".into()));
            }
            if a.pred.len() != a.gt.len() {
                return Err(Error::Config(format!(
                    "{} --pred files for {} --gt directories",
                    a.pred.len(),
                    a.gt.len()
                )));
            }
            pool.install(|| {
                a.pred
                    .par_iter()
                    .zip(&a.gt)
                    .map(|(p, g)| {
                        let seq = load_sequence(g)?;
                        let t = Trajectory::load(p)?;
                        SequenceMetrics::one_pass(&seq.name, &t.boxes, &seq.boxes)
                    })
                    .collect::<Result<_>>()
            })?
        }
        Protocol::VotLite => {
            if !a.pred.is_empty() {
                return Err(Error::Config(
                    "vot-lite reruns the tracker; give --model instead of --pred".into(),
                ));
            }
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| Error::Config("vot-lite needs --model".into()))?;
            let model = load_model(path)?;
            let (tracker, params) = (cfg.tracker.clone(), cfg.eval.vot);
            pool.install(|| {
                a.gt.par_iter()
                    .map(|g| {
                        let seq = load_sequence(g)?;
                        let mut runner = SessionRunner::new(&model, tracker.clone());
                        let r = vot_lite(&mut runner, &seq, params)?;
                        Ok(SequenceMetrics::reset_based(&seq.name, &r))
                    })
                    .collect::<Result<_>>()
            })?
        }
    };
    let report = MetricReport { protocol, sequences };
    write_report(&report, &a.out)?;
    let extra = [("sequences", report.sequences.len().to_string())];
    write(&a.out.join("manifest.txt"), &manifest("eval", 0, &cfg, &extra))?;
    let agg = report.aggregate();
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{protocol}: {} sequences  pre20 {}  auc {}  accuracy {}  robustness {}  eao_lite {}",
        report.sequences.len(),
        show(agg.pre20),
        show(agg.auc),
        show(agg.accuracy),
        show(agg.robustness),
        show(agg.eao_lite)
    );
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let suites = Suite::select(&a.suite)?;
    let mut v = Verifier::new(a.seed);
    let mut reports = Vec::new();
    for s in suites {
        let r = v.run(s)?;
        print!("{}", format_table(std::slice::from_ref(&r)));
        reports.push(r);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} suites, {failed} failed", reports.len());
    if let Some(out) = &a.out {
        write(&out.join("verify.txt"), &format_table(&reports))?;
        let extra = [("suite", a.suite.clone())];
        write(&out.join("manifest.txt"), &manifest("verify", a.seed, &CliConfig::default(), &extra))?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let r = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    };
    r.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Parses `args` (program name first) and runs; clap usage errors exit 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
