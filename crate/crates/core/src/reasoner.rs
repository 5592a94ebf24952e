//! Inference pipeline: encode, order, write, iterative read with query
//! updates, optional inference-time update (IU), selection and decoding.

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encdec::{decode_tokens, encode_lines};
use crate::error::{Error, Result};
use crate::linalg::{argmin, row_distances, Mat};
use crate::memory::{project_query, MemoryState, NoiseConfig, ProjectionParams};
use crate::model::{Model, TemporalKind};
use crate::taskgen::{Sample, Task};
use crate::temporal::{encode_order, encode_order_sinusoidal, BiGruParams};
use crate::vocab::{Vocab, BOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopConfig {
    pub alpha: f64,
    pub tau: f64,
    pub max_hops: usize,
}

impl HopConfig {
    /// Evaluation defaults for a task with `hops` hops.
    pub fn eval(hops: usize) -> Self {
        HopConfig {
            alpha: 8.0,
            tau: 1e-3,
            max_hops: hops.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_hops == 0 || !(self.tau >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "hop config needs max_hops >= 1, tau >= 0 and finite alpha (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IuConfig {
    pub enabled: bool,
    pub keep: usize,
}

impl Default for IuConfig {
    fn default() -> Self {
        IuConfig {
            enabled: false,
            keep: 125,
        }
    }
}

impl IuConfig {
    pub fn on() -> Self {
        IuConfig {
            enabled: true,
            ..Self::default()
        }
    }
}

/// Readouts of one query-update loop plus the selections they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct HopTrace {
    /// Ordered readouts `z̃_r` in hop order.
    pub readouts: Vec<Mat>,
    /// Selected row per readout, in the ORIGINAL episode numbering.
    pub selected: Vec<usize>,
    /// Unordered latent of the last selection (the decoder input).
    pub latent: Mat,
    /// Whether an IU pass produced this trace.
    pub iu_applied: bool,
}

/// `(lowest argmin_j ||z̃_r − z̃_j||, z_j)`.
pub fn select_unordered(z_r: &Mat, ordered: &Mat, unordered: &Mat) -> (usize, Mat) {
    let d = row_distances(&ordered.view(), z_r.row(0).as_slice().expect("contiguous readout"));
    let i = argmin(&d);
    (i, unordered.row(i).insert_axis(Axis(0)).to_owned())
}

/// Iterative read: `z̃_r ← read(W_q z_q)`, then repeatedly
/// `z_q ← z_q + α z̃_r` and re-read until the readout moves by at most `τ`
/// or `max_hops` reads have been made.
pub fn query_update_loop(
    mem: &MemoryState,
    z_q: &Mat,
    cfg: &HopConfig,
    wq: &ProjectionParams,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Mat>> {
    cfg.validate()?;
    let mut zq = z_q.clone();
    let mut zr = mem.read(&project_query(wq, &zq)?, noise, rng)?;
    let mut out = vec![zr.clone()];
    while out.len() < cfg.max_hops {
        zq = &zq + &(&zr * cfg.alpha);
        let next = mem.read(&project_query(wq, &zq)?, noise, rng)?;
        let delta = (&next - &zr).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(next.clone());
        if delta <= cfg.tau {
            break;
        }
        zr = next;
    }
    Ok(out)
}

/// Token rows of one episode: each context line contributes one row per
/// 64-token chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTokens {
    pub rows: Vec<Vec<u32>>,
    /// Context line of every row.
    pub row_line: Vec<usize>,
    pub query: Vec<u32>,
}

impl EpisodeTokens {
    pub fn new(sample: &Sample, vocab: &Vocab) -> Result<Self> {
        if sample.query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        if sample.context.is_empty() {
            return Err(Error::EmptyEpisode);
        }
        let mut rows = Vec::new();
        let mut row_line = Vec::new();
        for (i, line) in sample.context.iter().enumerate() {
            for chunk in vocab.tokenize(line) {
                rows.push(chunk);
                row_line.push(i);
            }
        }
        let mut query = vocab.tokenize_flat(&sample.query);
        query.truncate(crate::vocab::MAX_LINE_TOKENS);
        Ok(EpisodeTokens { rows, row_line, query })
    }

    /// First row of each context line.
    pub fn line_row(&self, line: usize) -> Option<usize> {
        self.row_line.iter().position(|&l| l == line)
    }
}

/// A model prepared for repeated inference.
pub struct Reasoner<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    memory: MemoryState,
    temporal: BiGruParams,
    wq: ProjectionParams,
    pub noise: NoiseConfig,
}

/// Everything computed for one sample before decoding.
#[derive(Clone, Debug)]
pub struct Pass {
    pub unordered: Mat,
    pub ordered: Mat,
    pub query: Mat,
    pub trace: HopTrace,
    pub row_line: Vec<usize>,
}

impl<'a> Reasoner<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "model expects {} tokens, vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Reasoner {
            model,
            vocab,
            memory: MemoryState::new(model.params.get("mem.prior").clone(), model.config.ridge)?,
            temporal: BiGruParams::from_store(&model.params),
            wq: ProjectionParams {
                w_q: model.params.get("mem.wq").clone(),
            },
            noise: NoiseConfig::none(),
        })
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    pub fn order(&self, unordered: &Mat) -> Result<Mat> {
        match self.model.config.temporal {
            TemporalKind::Gru => encode_order(unordered, &self.temporal),
            TemporalKind::Sinusoidal => encode_order_sinusoidal(unordered),
            TemporalKind::None => Ok(unordered.clone()),
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.noise.seed)
    }

    /// Write + hop loop + selection over given latents. `index` maps rows of
    /// `unordered` to original rows.
    fn run_hops(
        &self,
        unordered: &Mat,
        ordered: &Mat,
        query: &Mat,
        cfg: &HopConfig,
        index: &[usize],
        bounded: bool,
    ) -> Result<HopTrace> {
        let mut rng = self.rng();
        let mem = if bounded {
            self.memory.write(ordered, &self.noise, &mut rng)?
        } else {
            self.memory.write_unbounded(ordered, &self.noise, &mut rng)?
        };
        let readouts = query_update_loop(&mem, query, cfg, &self.wq, &self.noise, &mut rng)?;
        let mut selected = Vec::with_capacity(readouts.len());
        let mut latent = Mat::zeros((1, unordered.ncols()));
        for r in &readouts {
            let (i, z) = select_unordered(r, ordered, unordered);
            selected.push(index[i]);
            latent = z;
        }
        Ok(HopTrace {
            readouts,
            selected,
            latent,
            iu_applied: false,
        })
    }

    /// Keeps the `iu.keep` rows closest to the first-pass readout (original
    /// order), re-orders and re-writes them and re-runs the hop loop.
    pub fn inference_time_update(
        &self,
        first: &HopTrace,
        unordered: &Mat,
        ordered: &Mat,
        query: &Mat,
        cfg: &HopConfig,
        iu: &IuConfig,
    ) -> Result<(HopTrace, Vec<usize>)> {
        let e = unordered.nrows();
        if iu.keep == 0 {
            return Err(Error::Config("IU keep must be >= 1".into()));
        }
        if e <= iu.keep {
            return Ok((first.clone(), (0..e).collect()));
        }
        let last = first.readouts.last().ok_or(Error::UninitializedMemory)?;
        let d = row_distances(&ordered.view(), last.row(0).as_slice().expect("contiguous readout"));
        let mut rank: Vec<usize> = (0..e).collect();
        rank.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = rank[..iu.keep].to_vec();
        kept.sort_unstable();
        let sub = unordered.select(Axis(0), &kept);
        let sub_ordered = self.order(&sub)?;
        let mut trace = self.run_hops(&sub, &sub_ordered, query, cfg, &kept, true)?;
        trace.iu_applied = true;
        Ok((trace, kept))
    }

    /// Full pipeline up to (not including) decoding.
    pub fn pass(&self, sample: &Sample, cfg: &HopConfig, iu: &IuConfig) -> Result<Pass> {
        cfg.validate()?;
        let ep = EpisodeTokens::new(sample, self.vocab)?;
        let mut lines: Vec<&[u32]> = ep.rows.iter().map(Vec::as_slice).collect();
        lines.push(&ep.query);
        let latents = encode_lines(self.model, &lines)?;
        let e = ep.rows.len();
        let unordered = latents.slice(ndarray::s![0..e, ..]).to_owned();
        let query = latents.slice(ndarray::s![e..e + 1, ..]).to_owned();
        let ordered = self.order(&unordered)?;
        let index: Vec<usize> = (0..e).collect();
        let bounded = !iu.enabled;
        let first = self.run_hops(&unordered, &ordered, &query, cfg, &index, bounded)?;
        let trace = if iu.enabled {
            self.inference_time_update(&first, &unordered, &ordered, &query, cfg, iu)?.0
        } else {
            first
        };
        Ok(Pass {
            unordered,
            ordered,
            query,
            trace,
            row_line: ep.row_line,
        })
    }

    fn prompt(&self, sample: &Sample) -> Vec<u32> {
        let mut p = vec![BOS];
        p.extend(self.vocab.tokenize_flat(&sample.answer_prompt()));
        p
    }

    fn decode(&self, latent: &Mat, prompt: &[u32]) -> Result<String> {
        let ids = decode_tokens(self.model, latent, prompt, 4)?;
        Ok(self.vocab.detokenize(&ids))
    }

    /// Decoded answer for an entity-location sample.
    pub fn answer(&self, sample: &Sample, cfg: &HopConfig, iu: &IuConfig) -> Result<String> {
        let pass = self.pass(sample, cfg, iu)?;
        self.decode(&pass.trace.latent, &self.prompt(sample))
    }

    /// One decoded answer per hop readout, de-duplicated in hop order.
    pub fn answer_multi(&self, sample: &Sample, cfg: &HopConfig, iu: &IuConfig) -> Result<Vec<String>> {
        let pass = self.pass(sample, cfg, iu)?;
        self.answers_from_pass(sample, &pass)
    }

    pub fn answers_from_pass(&self, sample: &Sample, pass: &Pass) -> Result<Vec<String>> {
        let prompt = self.prompt(sample);
        let mut out: Vec<String> = Vec::new();
        if sample.task == Task::Vt {
            for &row in &pass.trace.selected {
                let z = pass.unordered.row(row).insert_axis(Axis(0)).to_owned();
                let a = self.decode(&z, &prompt)?;
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        } else {
            out.push(self.decode(&pass.trace.latent, &prompt)?);
        }
        Ok(out)
    }
}
