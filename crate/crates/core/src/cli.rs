//! Command-line front end: `gen`, `train`, `eval` and `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, read_csv, render_summary, report_row, run_suite, summarize, write_csv, write_summary_csv, EvalConfig,
    ReportRow, SuiteId, SuiteSpec,
};
use crate::model::Model;
use crate::taskgen::{generate, read_dataset, swap_locations, write_dataset, GenSpec, PadKind, Task, WorldConfig};
use crate::training::{load_model, LossWeights, StepReport, Trainer};
use crate::vocab::Vocab;

#[derive(Debug, Parser)]
#[command(name = "memreasoner", version, about = "Latent episodic memory reasoner: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a JSON Lines dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset or a suite.
    Eval(EvalArgs),
    /// Summarize report CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    task: Task,
    /// Hop count (VT only; hop1/hop2 imply it).
    #[arg(long)]
    hops: Option<usize>,
    /// VT chain counts, cycled over samples.
    #[arg(long, value_delimiter = ',')]
    chains: Option<Vec<usize>>,
    #[arg(long)]
    n: usize,
    /// Target context length in tokens; 0 leaves samples unpadded.
    #[arg(long, default_value_t = 0)]
    pad: usize,
    /// Padding kind; defaults to hard when --pad > 0.
    #[arg(long)]
    pad_kind: Option<PadKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_lines: Option<usize>,
    #[arg(long)]
    max_lines: Option<usize>,
    /// Replace training locations with held-out ones.
    #[arg(long)]
    swap: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    sf_fraction: Option<f64>,
    /// Add the supporting-fact reconstruction and autoencoding terms.
    #[arg(long)]
    sf_star: bool,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Config override, e.g. `train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["data", "suite"]))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    suite: Option<SuiteId>,
    /// Task the checkpoint was trained on (suites only).
    #[arg(long, default_value = "hop1")]
    task: Task,
    /// Padding grid in tokens (suites only).
    #[arg(long, value_delimiter = ',')]
    pads: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Samples per grid point (suites only).
    #[arg(long)]
    n: Option<usize>,
    /// VT hop count for the vt_lengths suite.
    #[arg(long)]
    vt_hops: Option<usize>,
    /// Tag copied into the report's supervision column.
    #[arg(long, default_value = "-")]
    supervision: String,
    #[arg(long)]
    iu: Option<OnOff>,
    #[arg(long)]
    iu_keep: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_hops: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Write 0 wall times so reports are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
    /// JSON config whose `eval` section provides defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample predictions as JSON Lines (`--data` only).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report CSVs; later rows replace earlier ones with the same key.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Merged report rows.
    #[arg(long)]
    merged: Option<PathBuf>,
    /// Seed-averaged summary CSV (plot data).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let out = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match out {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = GenSpec::new(a.task);
    if let Some(h) = a.hops {
        if a.task != Task::Vt && h != spec.hops {
            return Err(Error::Config(format!("{} has {} hops", a.task.as_str(), spec.hops)));
        }
        spec.hops = h;
    }
    if let Some(c) = a.chains {
        spec.chains = c;
    }
    if let Some(m) = a.min_lines {
        spec.min_lines = m;
    }
    if let Some(m) = a.max_lines {
        spec.max_lines = m;
    }
    spec.pad_tokens = a.pad;
    spec.pad_kind = a
        .pad_kind
        .unwrap_or(if a.pad > 0 { PadKind::Hard } else { PadKind::None });
    let mut samples = generate(&spec, &WorldConfig::default(), a.n, a.seed)?;
    if a.swap {
        samples = samples.iter().map(swap_locations).collect();
    }
    write_dataset(&samples, &a.out)
}

fn train(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.mrck");
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || !a.overrides.is_empty() || a.sf_fraction.is_some() || a.sf_star {
                return Err(Error::Config(
                    "--resume continues the saved configuration; only --steps may change".into(),
                ));
            }
            Trainer::resume(path, &data, a.steps)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            }
            .with_overrides(&a.overrides)?;
            if let Some(f) = a.sf_fraction {
                cfg.train.sf_fraction = f;
            }
            if a.sf_star {
                let star = LossWeights::sf_star();
                cfg.train.weights.alpha_sf = star.alpha_sf;
                cfg.train.weights.beta_sf = star.beta_sf;
            }
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            let vocab = Vocab::standard();
            if cfg.model.vocab_size == 0 {
                cfg.model.vocab_size = vocab.len();
            }
            cfg.train.validate()?;
            cfg.save(&a.out_dir.join("config.json"))?;
            Trainer::new(Model::new(cfg.model.clone())?, vocab, cfg.train, &data)?
        }
    };
    let log_path = a.out_dir.join("train_log.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)?;
    if a.resume.is_none() {
        writeln!(log, "step,total,answer,ordering,recon,autoenc,corpus,grad_norm")?;
    }
    let every = trainer.cfg.log_every;
    let mut io_err = None;
    let quiet = a.quiet;
    trainer.run(Some(&ckpt), |r: &StepReport| {
        if every > 0 && r.step % every == 0 {
            let t = &r.terms;
            let line = format!(
                "{},{},{},{},{},{},{},{}",
                r.step, t.total, t.answer, t.ordering, t.recon, t.autoenc, t.corpus, r.grad_norm
            );
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
            if !quiet {
                eprintln!("step {:>6}  loss {:.4}  answer {:.4}", r.step, t.total, t.answer);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, vocab, _) = load_model(&a.checkpoint)?;
    let base = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    }
    .with_overrides(&a.overrides)?;
    let mut cfg: EvalConfig = base.eval;
    if let Some(iu) = a.iu {
        cfg.iu = iu == OnOff::On;
    }
    if let Some(k) = a.iu_keep {
        cfg.iu_keep = k;
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if let Some(x) = a.tau {
        cfg.tau = x;
    }
    if a.max_hops.is_some() {
        cfg.max_hops = a.max_hops;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    if a.no_timing {
        cfg.timing = false;
    }

    let rows = if let Some(suite) = a.suite {
        if a.predictions.is_some() {
            return Err(Error::Config("--predictions needs --data".into()));
        }
        let mut spec = SuiteSpec::new(suite, a.task);
        if let Some(p) = a.pads {
            spec.pads = p;
        }
        if let Some(s) = a.seeds {
            spec.seeds = s;
        }
        if let Some(n) = a.n {
            spec.n = n;
        }
        if let Some(h) = a.vt_hops {
            spec.vt_hops = h;
        }
        spec.supervision = a.supervision.clone();
        run_suite(&spec, &model, &vocab, &cfg)?
    } else {
        let path = a.data.as_ref().expect("clap enforces --data or --suite");
        let samples = read_dataset(path)?;
        let r = evaluate(&model, &vocab, &samples, &cfg)?;
        if let Some(p) = &a.predictions {
            write_predictions(p, &r.records)?;
        }
        let task = samples[0].task;
        let pad = samples.iter().map(|s| s.meta.target_tokens).max().unwrap_or(0);
        let seed = a.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(0);
        vec![report_row("data", task, pad, &a.supervision, seed, cfg.iu, &r)]
    };
    print!("{}", render_summary(&summarize(&rows)));
    if let Some(out) = &a.out {
        write_csv(&rows, out)?;
    }
    Ok(())
}

fn write_predictions(path: &Path, records: &[crate::eval::SampleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Key identifying one grid point of one run.
fn row_key(r: &ReportRow) -> (String, String, usize, String, u64, bool) {
    (r.suite.clone(), r.task.clone(), r.pad_tokens, r.supervision.clone(), r.seed, r.iu_enabled)
}

/// Concatenates reports; a later row replaces an earlier one with the same
/// key, keeping the position of the first.
pub fn merge_rows(reports: &[Vec<ReportRow>]) -> Vec<ReportRow> {
    let mut out: Vec<ReportRow> = Vec::new();
    for r in reports.iter().flatten() {
        match out.iter_mut().find(|x| row_key(x) == row_key(r)) {
            Some(slot) => *slot = r.clone(),
            None => out.push(r.clone()),
        }
    }
    out
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a.input.iter().map(|p| read_csv(p)).collect::<Result<Vec<_>>>()?;
    let rows = merge_rows(&reports);
    let summary = summarize(&rows);
    print!("{}", render_summary(&summary));
    if let Some(p) = &a.merged {
        write_csv(&rows, p)?;
    }
    if let Some(p) = &a.out {
        write_summary_csv(&summary, p)?;
    }
    Ok(())
}
