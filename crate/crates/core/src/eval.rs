//! Exact-match evaluation, the generalization suites and CSV reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::reasoner::{HopConfig, IuConfig, Reasoner};
use crate::taskgen::{generate, swap_locations, GenSpec, PadKind, Sample, Task, WorldConfig};
use crate::vocab::{split_words, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Hop budget; `None` uses each sample's own hop count.
    pub max_hops: Option<usize>,
    pub iu: bool,
    pub iu_keep: usize,
    pub threads: usize,
    /// Record wall time; off gives byte-identical reports across runs.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 8.0,
            tau: 1e-3,
            max_hops: None,
            iu: false,
            iu_keep: IuConfig::default().keep,
            threads: 1,
            timing: true,
        }
    }
}

impl EvalConfig {
    pub fn hop_config(&self, sample: &Sample) -> HopConfig {
        HopConfig {
            alpha: self.alpha,
            tau: self.tau,
            max_hops: self.max_hops.unwrap_or(sample.meta.hops).max(1),
        }
    }

    pub fn iu_config(&self) -> IuConfig {
        IuConfig {
            enabled: self.iu,
            keep: self.iu_keep,
        }
    }
}

fn normalize(word: &str) -> String {
    split_words(word)
        .into_iter()
        .find(|w| w.chars().any(char::is_alphanumeric))
        .unwrap_or_default()
        .to_lowercase()
}

/// Exact match on the first normalized word, or set equality for VT.
pub fn is_correct(sample: &Sample, predicted: &[String]) -> bool {
    match sample.task {
        Task::Vt => {
            let gold: std::collections::BTreeSet<String> = sample.answer.items().iter().map(|a| normalize(a)).collect();
            let got: std::collections::BTreeSet<String> = predicted.iter().map(|p| normalize(p)).collect();
            gold == got
        }
        Task::Hop1 | Task::Hop2 => match predicted.first() {
            Some(p) => normalize(p) == normalize(sample.answer.items()[0]),
            None => false,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub correct: bool,
    pub prediction: Vec<String>,
    pub gold: Vec<String>,
    /// Reads made by the hop loop.
    pub hops: usize,
    pub iu_applied: bool,
    /// Why the sample could not be answered (scored incorrect).
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_hops: f64,
    pub wall_time_ms: f64,
    pub records: Vec<SampleRecord>,
}

fn eval_one(r: &Reasoner, sample: &Sample, index: usize, cfg: &EvalConfig) -> Result<SampleRecord> {
    let gold = sample.answer.items().iter().map(|s| s.to_string()).collect();
    let outcome = r
        .pass(sample, &cfg.hop_config(sample), &cfg.iu_config())
        .and_then(|pass| Ok((r.answers_from_pass(sample, &pass)?, pass)));
    match outcome {
        Ok((prediction, pass)) => Ok(SampleRecord {
            index,
            correct: is_correct(sample, &prediction),
            prediction,
            gold,
            hops: pass.trace.readouts.len(),
            iu_applied: pass.trace.iu_applied,
            error: None,
        }),
        // Episodes that do not fit the memory without IU count as failures.
        Err(e @ Error::EpisodeTooLong { .. }) => Ok(SampleRecord {
            index,
            correct: false,
            prediction: Vec::new(),
            gold,
            hops: 0,
            iu_applied: false,
            error: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Scores `samples`; records come back in dataset order regardless of
/// `cfg.threads`.
pub fn evaluate(model: &Model, vocab: &Vocab, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = Reasoner::new(model, vocab)?;
    let start = Instant::now();
    let threads = cfg.threads.max(1).min(samples.len());
    let records: Vec<SampleRecord> = if threads == 1 {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| eval_one(&r, s, i, cfg))
            .collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        let parts: Vec<Result<Vec<SampleRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    let r = &r;
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(k, s)| eval_one(r, s, c * chunk + k, cfg))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalResult {
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        mean_hops: records.iter().map(|r| r.hops as f64).sum::<f64>() / n as f64,
        wall_time_ms: if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteId {
    InDist,
    LengthHard,
    LengthSoft,
    LocationSwap,
    Transfer2to1,
    VtLengths,
}

impl SuiteId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteId::InDist => "in_dist",
            SuiteId::LengthHard => "length_hard",
            SuiteId::LengthSoft => "length_soft",
            SuiteId::LocationSwap => "location_swap",
            SuiteId::Transfer2to1 => "transfer_2to1",
            SuiteId::VtLengths => "vt_lengths",
        }
    }
}

impl std::str::FromStr for SuiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            SuiteId::InDist,
            SuiteId::LengthHard,
            SuiteId::LengthSoft,
            SuiteId::LocationSwap,
            SuiteId::Transfer2to1,
            SuiteId::VtLengths,
        ];
        all.into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Padding grid used by the length suites.
pub const DEFAULT_PADS: [usize; 5] = [0, 256, 1000, 2000, 4000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub suite: SuiteId,
    /// Task of the evaluated model; the suite decides the data task.
    pub task: Task,
    pub pads: Vec<usize>,
    /// Free-form tag copied to the report (e.g. the SF fraction).
    pub supervision: String,
    pub seeds: Vec<u64>,
    /// Samples per (pad, seed).
    pub n: usize,
    /// VT hop count for `vt_lengths`.
    pub vt_hops: usize,
}

impl SuiteSpec {
    pub fn new(suite: SuiteId, task: Task) -> Self {
        let pads = match suite {
            SuiteId::InDist | SuiteId::LocationSwap => vec![0],
            _ => DEFAULT_PADS.to_vec(),
        };
        SuiteSpec {
            suite,
            task,
            pads,
            supervision: "-".into(),
            seeds: vec![0, 1, 2],
            n: 200,
            vt_hops: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.n == 0 || self.pads.is_empty() {
            return Err(Error::Config("suite needs >= 1 seed, >= 1 pad and n > 0".into()));
        }
        if self.pads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("suite pads must be strictly ascending: {:?}", self.pads)));
        }
        Ok(())
    }

    fn data_task(&self) -> Task {
        match self.suite {
            SuiteId::Transfer2to1 => Task::Hop1,
            SuiteId::VtLengths => Task::Vt,
            _ => self.task,
        }
    }

    /// The evaluation set for one grid point.
    pub fn dataset(&self, pad: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut g = GenSpec::new(self.data_task());
        if g.task == Task::Vt {
            g.hops = self.vt_hops;
        }
        if pad > 0 {
            g.pad_tokens = pad;
            g.pad_kind = match self.suite {
                SuiteId::LengthSoft => PadKind::Soft,
                _ => PadKind::Hard,
            };
        }
        // Evaluation data seeds never coincide with small training seeds.
        let data_seed = seed.wrapping_mul(1_000_003).wrapping_add(0xe7a1_0000 + pad as u64);
        let samples = generate(&g, &WorldConfig::default(), self.n, data_seed)?;
        Ok(if self.suite == SuiteId::LocationSwap {
            samples.iter().map(swap_locations).collect()
        } else {
            samples
        })
    }

    pub fn eval_config(&self, base: &EvalConfig) -> EvalConfig {
        let mut c = base.clone();
        if self.suite == SuiteId::Transfer2to1 {
            c.max_hops = Some(2);
        }
        c
    }
}

/// One line of the CSV report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub suite: String,
    pub task: String,
    pub pad_tokens: usize,
    pub supervision: String,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub mean_hops: f64,
    pub iu_enabled: bool,
    pub wall_time_ms: f64,
}

pub fn report_row(suite: &str, task: Task, pad: usize, supervision: &str, seed: u64, iu: bool, r: &EvalResult) -> ReportRow {
    ReportRow {
        suite: suite.to_string(),
        task: task.as_str().to_string(),
        pad_tokens: pad,
        supervision: supervision.to_string(),
        seed,
        n: r.n,
        accuracy: r.accuracy,
        mean_hops: r.mean_hops,
        iu_enabled: iu,
        wall_time_ms: r.wall_time_ms,
    }
}

/// Evaluates every (pad, seed) point of `spec`.
pub fn run_suite(spec: &SuiteSpec, model: &Model, vocab: &Vocab, base: &EvalConfig) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let cfg = spec.eval_config(base);
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        for &pad in &spec.pads {
            let data = spec.dataset(pad, seed)?;
            let r = evaluate(model, vocab, &data, &cfg)?;
            rows.push(report_row(
                spec.suite.as_str(),
                spec.data_task(),
                pad,
                &spec.supervision,
                seed,
                cfg.iu,
                &r,
            ));
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("CSV: {e}"))
}

/// Seed-averaged accuracy of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub task: String,
    pub pad_tokens: usize,
    pub supervision: String,
    pub iu_enabled: bool,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_hops: f64,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, bool, usize), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.suite.clone(), r.task.clone(), r.supervision.clone(), r.iu_enabled, r.pad_tokens))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((suite, task, supervision, iu, pad), g)| {
            let k = g.len() as f64;
            let mean = g.iter().map(|r| r.accuracy).sum::<f64>() / k;
            let var = g.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / k;
            SummaryRow {
                suite,
                task,
                pad_tokens: pad,
                supervision,
                iu_enabled: iu,
                seeds: g.len(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                mean_hops: g.iter().map(|r| r.mean_hops).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Fixed-width text table of a summary.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<14} {:<5} {:<12} {:>3} {:>7} {:>5} {:>9} {:>7} {:>5}\n",
        "suite", "task", "supervision", "iu", "pad", "seeds", "accuracy", "std", "hops"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:<5} {:<12} {:>3} {:>7} {:>5} {:>9.4} {:>7.4} {:>5.2}\n",
            r.suite,
            r.task,
            r.supervision,
            if r.iu_enabled { "on" } else { "off" },
            r.pad_tokens,
            r.seeds,
            r.mean_accuracy,
            r.std_accuracy,
            r.mean_hops
        ));
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
