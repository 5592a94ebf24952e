//! Training objective, supervision sampling, Adam, the training loop,
//! checkpointing and finite-difference gradient checks.
//!
//! The loss is built on one tape per step. All episodes of a batch share a
//! single encoder pass and a single packed decoder pass; the memory solve is
//! done per episode in Gram form (see [`crate::memory::graph_write`]).

use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::encdec::{graph_decoder_logits, graph_encode_lines, teacher_forcing, DecodeSeq};
use crate::error::{Error, Result};
use crate::linalg::{argmin, Mat};
use crate::memory::{gaussian, graph_prior, graph_read, graph_write};
use crate::model::{Bound, Model, ModelConfig, ParamStore, TemporalKind};
use crate::reasoner::EpisodeTokens;
use crate::taskgen::{pretrain_corpus, Sample, Task, WorldConfig};
use crate::temporal::{graph_encode_order, graph_encode_sinusoidal, GruVars};
use crate::vocab::{Vocab, MAX_LINE_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Autoencoding of the pretraining corpus.
    pub rho: f64,
    /// Ordering loss.
    pub delta: f64,
    /// Supporting-fact reconstruction.
    pub alpha_sf: f64,
    /// Supporting-fact autoencoding.
    pub beta_sf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rho: 1.0,
            delta: 1.0,
            alpha_sf: 0.0,
            beta_sf: 0.0,
        }
    }
}

impl LossWeights {
    /// Weights with both supporting-fact terms switched on.
    pub fn sf_star() -> Self {
        LossWeights {
            alpha_sf: 1.0,
            beta_sf: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rho, self.delta, self.alpha_sf, self.beta_sf];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// How the argmin-selected latent passes gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Forward uses the hard selection; backward also flows through the
    /// distance softmax `softmax(−d)·Z` so retrieval gets a signal from the
    /// answer loss.
    #[default]
    StraightThrough,
    /// The index is a constant; only the selected row receives gradient.
    Detached,
}

/// Which training samples expose their supporting facts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPlan {
    pub fraction: f64,
    pub seed: u64,
}

impl SupervisionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("supervision fraction {} not in [0, 1]", self.fraction)));
        }
        Ok(())
    }

    /// `⌈f·N⌉`, robust to the representation error of `f`.
    pub fn count(&self, n: usize) -> usize {
        let c = (self.fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
        c.min(n)
    }

    /// Supervision flag per sample; exactly [`Self::count`] are set.
    pub fn select(&self, n: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5f5f));
        let mut out = vec![false; n];
        for &i in &idx[..self.count(n)] {
            out[i] = true;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Query-update step size during training hops.
    pub alpha: f64,
    pub sigma_xi: f64,
    pub sigma_eta: f64,
    pub weights: LossWeights,
    pub selection: Selection,
    /// Share of samples with visible supporting facts.
    pub sf_fraction: f64,
    /// Pretraining corpus size for the ρ term.
    pub corpus_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            alpha: 1.0,
            sigma_xi: 1e-4,
            sigma_eta: 1e-4,
            weights: LossWeights::default(),
            selection: Selection::StraightThrough,
            sf_fraction: 0.0,
            corpus_size: 5000,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.plan().validate()?;
        let ok = self.batch > 0
            && self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0
            && self.alpha.is_finite()
            && self.sigma_xi >= 0.0
            && self.sigma_eta >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training config: {self:?}")));
        }
        if self.weights.rho > 0.0 && self.corpus_size == 0 {
            return Err(Error::Config("rho > 0 needs a non-empty pretraining corpus".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> SupervisionPlan {
        SupervisionPlan {
            fraction: self.sf_fraction,
            seed: self.seed,
        }
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            alpha: self.alpha,
            selection: self.selection,
        }
    }
}

/// The parts of the configuration that shape the loss graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub alpha: f64,
    pub selection: Selection,
}

impl Default for LossSettings {
    fn default() -> Self {
        TrainConfig::default().settings()
    }
}

/// `−ln softmax(−d)_s` with `d_j = ||ordered_j − z_r||`.
pub fn ordering_loss(z_r: &Mat, ordered: &Mat, s: usize) -> Result<f64> {
    let e = ordered.nrows();
    if s >= e {
        return Err(Error::SupportOutOfRange { index: s, lines: e });
    }
    if z_r.dim() != (1, ordered.ncols()) {
        return Err(crate::error::shape_err(
            "ordering_loss",
            format!("readout {:?} vs latents {:?}", z_r.dim(), ordered.dim()),
        ));
    }
    let d = crate::linalg::row_distances(&ordered.view(), z_r.row(0).as_slice().expect("contiguous readout"));
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let lse = -m + d.iter().map(|x| (m - x).exp()).sum::<f64>().ln();
    Ok(lse + d[s])
}

/// One teacher-forced decoding target.
#[derive(Clone, Debug, PartialEq)]
struct AnswerTarget {
    hop: usize,
    input: Vec<u32>,
    pairs: Vec<(usize, u32)>,
}

/// A sample tokenized for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub ep: EpisodeTokens,
    pub hops: usize,
    pub supervised: bool,
    /// Row of every supporting line, in hop order.
    pub support_rows: Vec<usize>,
    answers: Vec<AnswerTarget>,
}

impl Prepared {
    pub fn new(sample: &Sample, vocab: &Vocab, supervised: bool, id: impl Into<String>) -> Result<Self> {
        let ep = EpisodeTokens::new(sample, vocab)?;
        let hops = sample.meta.hops.max(1);
        let mut support_rows = Vec::with_capacity(sample.supporting.len());
        for &s in &sample.supporting {
            let row = ep.line_row(s).ok_or(Error::SupportOutOfRange {
                index: s,
                lines: sample.context.len(),
            })?;
            support_rows.push(row);
        }
        if supervised && support_rows.len() > hops {
            return Err(Error::TooFewHops {
                hops,
                needed: support_rows.len(),
            });
        }
        let mut prompt = vocab.tokenize_flat(&sample.answer_prompt());
        prompt.truncate(MAX_LINE_TOKENS);
        let items = sample.answer.items();
        if items.is_empty() {
            return Err(Error::UnsupportedSample(format!("sample {} has no answer", sample.meta.seed)));
        }
        let answers = items
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let hop = if sample.task == Task::Vt { i.min(hops - 1) } else { hops - 1 };
                let mut target = vocab.tokenize_flat(a);
                target.truncate(4);
                let (input, pairs) = teacher_forcing(&prompt, &target);
                AnswerTarget { hop, input, pairs }
            })
            .collect::<Vec<_>>();
        let answers = if sample.task == Task::Vt { answers } else { answers[..1].to_vec() };
        Ok(Prepared {
            id: id.into(),
            ep,
            hops,
            supervised,
            support_rows,
            answers,
        })
    }
}

/// Pre-drawn noise for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeNoise {
    pub xi: Option<Mat>,
    pub eta: Vec<Option<Mat>>,
}

impl EpisodeNoise {
    pub fn draw(p: &Prepared, cfg: &ModelConfig, sigma_xi: f64, sigma_eta: f64, rng: &mut impl Rng) -> Self {
        let xi = (sigma_xi > 0.0).then(|| gaussian(p.ep.rows.len(), cfg.d_latent, sigma_xi, rng));
        let eta = (0..p.hops)
            .map(|_| (sigma_eta > 0.0).then(|| gaussian(1, cfg.slots, sigma_eta, rng)))
            .collect();
        EpisodeNoise { xi, eta }
    }

    pub fn none(p: &Prepared) -> Self {
        EpisodeNoise {
            xi: None,
            eta: vec![None; p.hops],
        }
    }
}

/// Everything one loss evaluation needs; fully determines the loss value.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<Prepared>,
    pub noise: Vec<EpisodeNoise>,
    /// Tokenized pretraining sentences for the ρ term.
    pub corpus: Vec<Vec<u32>>,
}

impl Batch {
    pub fn without_noise(samples: Vec<Prepared>, corpus: Vec<Vec<u32>>) -> Self {
        let noise = samples.iter().map(EpisodeNoise::none).collect();
        Batch { samples, noise, corpus }
    }
}

/// Values of the individual loss terms (batch means, unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub answer: f64,
    pub ordering: f64,
    pub recon: f64,
    pub autoenc: f64,
    pub corpus: f64,
}

/// Which terms to put on the tape.
#[derive(Clone, Copy, Debug)]
struct Include {
    ordering: bool,
    recon: bool,
    autoenc: bool,
    corpus: bool,
}

impl Include {
    fn from_weights(w: &LossWeights) -> Self {
        Include {
            ordering: w.delta != 0.0,
            recon: w.alpha_sf != 0.0,
            autoenc: w.beta_sf != 0.0,
            corpus: w.rho != 0.0,
        }
    }
}

struct LossGraph {
    total: Var,
    terms: [(Var, f64); 5],
    /// Selected row per sample per hop.
    selected: Vec<Vec<usize>>,
}

fn weighted_term(tape: &mut Tape, logits: Var, targets: &[(usize, usize, f64)]) -> Var {
    if targets.is_empty() {
        tape.constant(Mat::zeros((1, 1)))
    } else {
        tape.weighted_cross_entropy(logits, targets)
    }
}

fn build(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, batch: &Batch, s: &LossSettings, inc: Include) -> LossGraph {
    let b = batch.samples.len();
    assert!(b > 0, "empty batch");
    let bf = b as f64;
    let w = s.weights;

    let mut lines: Vec<&[u32]> = Vec::new();
    let mut row_start = Vec::with_capacity(b);
    for p in &batch.samples {
        row_start.push(lines.len());
        lines.extend(p.ep.rows.iter().map(Vec::as_slice));
        lines.push(&p.ep.query);
    }
    let corpus_start = lines.len();
    if inc.corpus {
        lines.extend(batch.corpus.iter().map(Vec::as_slice));
    }
    let z_all = graph_encode_lines(tape, bound, &lines);

    let mut unordered = Vec::with_capacity(b);
    let mut queries = Vec::with_capacity(b);
    for (p, &start) in batch.samples.iter().zip(&row_start) {
        let e = p.ep.rows.len();
        let idx: Vec<usize> = (start..start + e).collect();
        unordered.push(tape.gather_rows(z_all, &idx));
        queries.push(tape.row(z_all, start + e));
    }
    let ordered: Vec<Var> = match cfg.temporal {
        TemporalKind::Gru => {
            let fwd = GruVars::bind(bound, "tmp.fwd");
            let bwd = GruVars::bind(bound, "tmp.bwd");
            graph_encode_order(tape, &unordered, &fwd, &bwd)
        }
        TemporalKind::Sinusoidal => unordered.iter().map(|z| graph_encode_sinusoidal(tape, *z)).collect(),
        TemporalKind::None => unordered.clone(),
    };

    let prior = graph_prior(tape, bound.get("mem.prior"), cfg.ridge);
    let wqt = tape.t(bound.get("mem.wq"));

    let mut conds: Vec<Var> = Vec::new();
    let mut seqs: Vec<DecodeSeq> = Vec::new();
    let mut answer_t: Vec<(usize, usize, f64)> = Vec::new();
    let mut recon_t: Vec<(usize, usize, f64)> = Vec::new();
    let mut auto_t: Vec<(usize, usize, f64)> = Vec::new();
    let mut corpus_t: Vec<(usize, usize, f64)> = Vec::new();
    let mut offset = 0usize;
    let mut push_seq = |conds: &mut Vec<Var>,
                        seqs: &mut Vec<DecodeSeq>,
                        out: &mut Vec<(usize, usize, f64)>,
                        cond: Var,
                        input: Vec<u32>,
                        pairs: &[(usize, u32)],
                        weight: f64| {
        for &(pos, tok) in pairs {
            out.push((offset + pos, tok as usize, weight));
        }
        offset += input.len();
        seqs.push(DecodeSeq {
            tokens: input,
            cond: conds.len(),
        });
        conds.push(cond);
    };

    let mut ordering_parts = Vec::new();
    let mut selected = Vec::with_capacity(b);
    for (i, p) in batch.samples.iter().enumerate() {
        let noise = &batch.noise[i];
        let ep = graph_write(tape, &prior, ordered[i], noise.xi.as_ref());
        let mut zq = queries[i];
        let mut picks = Vec::with_capacity(p.hops);
        let mut latents = Vec::with_capacity(p.hops);
        for h in 0..p.hops {
            let q = tape.matmul(zq, wqt);
            let zr = graph_read(tape, &prior, &ep, q, noise.eta[h].as_ref());
            let d = tape.row_dist(ordered[i], zr);
            let j = argmin(tape.value(d).column(0).as_slice().expect("contiguous distances"));
            let dt = tape.t(d);
            let neg = tape.neg(dt);
            if inc.ordering && p.supervised {
                if let Some(&target) = p.support_rows.get(h) {
                    ordering_parts.push(tape.cross_entropy(neg, &[(0, target)]));
                }
            }
            let hard = tape.gather_rows(unordered[i], &[j]);
            let latent = match s.selection {
                Selection::Detached => hard,
                Selection::StraightThrough => {
                    let v = tape.softmax_rows(neg);
                    let soft = tape.matmul(v, unordered[i]);
                    tape.straight_through(hard, soft)
                }
            };
            picks.push(j);
            latents.push(latent);
            if h + 1 < p.hops {
                let step = tape.scale(zr, s.alpha);
                zq = tape.add(zq, step);
            }
        }
        let n_answer: usize = p.answers.iter().map(|a| a.pairs.len()).sum();
        for a in &p.answers {
            let wgt = 1.0 / (bf * n_answer as f64);
            push_seq(&mut conds, &mut seqs, &mut answer_t, latents[a.hop], a.input.clone(), &a.pairs, wgt);
        }
        if p.supervised && (inc.recon || inc.autoenc) {
            for (h, &row) in p.support_rows.iter().enumerate() {
                let (input, pairs) = teacher_forcing(&[], &p.ep.rows[row]);
                let wgt = 1.0 / (bf * pairs.len() as f64);
                if inc.recon {
                    push_seq(&mut conds, &mut seqs, &mut recon_t, latents[h], input.clone(), &pairs, wgt);
                }
                if inc.autoenc {
                    let z = tape.row(unordered[i], row);
                    push_seq(&mut conds, &mut seqs, &mut auto_t, z, input, &pairs, wgt);
                }
            }
        }
        selected.push(picks);
    }
    if inc.corpus {
        let bc = batch.corpus.len() as f64;
        for (k, line) in batch.corpus.iter().enumerate() {
            let (input, pairs) = teacher_forcing(&[], line);
            let wgt = 1.0 / (bc * pairs.len() as f64);
            let z = tape.row(z_all, corpus_start + k);
            push_seq(&mut conds, &mut seqs, &mut corpus_t, z, input, &pairs, wgt);
        }
    }

    let cond = tape.concat_rows(&conds);
    let logits = graph_decoder_logits(tape, bound, cfg, cond, &seqs);
    let answer = weighted_term(tape, logits, &answer_t);
    let recon = weighted_term(tape, logits, &recon_t);
    let autoenc = weighted_term(tape, logits, &auto_t);
    let corpus = weighted_term(tape, logits, &corpus_t);
    let ordering_sum = tape.sum_scalars(&ordering_parts);
    let ordering = tape.scale(ordering_sum, 1.0 / bf);

    let terms = [
        (answer, 1.0),
        (ordering, w.delta),
        (recon, w.alpha_sf),
        (autoenc, w.beta_sf),
        (corpus, w.rho),
    ];
    let weighted: Vec<Var> = terms
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|&(v, c)| if c == 1.0 { v } else { tape.scale(v, c) })
        .collect();
    let total = tape.sum_scalars(&weighted);
    LossGraph { total, terms, selected }
}

fn terms_of(tape: &Tape, g: &LossGraph) -> LossTerms {
    let v = |k: usize| tape.scalar(g.terms[k].0);
    LossTerms {
        total: tape.scalar(g.total),
        answer: v(0),
        ordering: v(1),
        recon: v(2),
        autoenc: v(3),
        corpus: v(4),
    }
}

/// Loss value only (no gradient).
pub fn loss_value(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, s: &LossSettings) -> LossTerms {
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, params);
    let g = build(&mut tape, &bound, cfg, batch, s, Include::from_weights(&s.weights));
    terms_of(&tape, &g)
}

/// Loss terms and the gradient of the total w.r.t. every parameter (in
/// parameter order).
pub fn loss_and_grad(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, s: &LossSettings) -> (LossTerms, Vec<Mat>) {
    let mut tape = Tape::new();
    let bound = Bound::params(&mut tape, params);
    let g = build(&mut tape, &bound, cfg, batch, s, Include::from_weights(&s.weights));
    let terms = terms_of(&tape, &g);
    let mut grads = tape.backward(g.total);
    let out = bound
        .vars()
        .iter()
        .zip(params.values())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Mat::zeros(p.dim())))
        .collect();
    (terms, out)
}

/// Gradient of a single term (index into answer, ordering, recon, autoenc,
/// corpus) with every term built; used to test gradient routing.
pub fn term_grad(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, s: &LossSettings, term: usize) -> Vec<Mat> {
    let mut tape = Tape::new();
    let bound = Bound::params(&mut tape, params);
    let inc = Include {
        ordering: true,
        recon: true,
        autoenc: true,
        corpus: !batch.corpus.is_empty(),
    };
    let g = build(&mut tape, &bound, cfg, batch, s, inc);
    let mut grads = tape.backward(g.terms[term].0);
    bound
        .vars()
        .iter()
        .zip(params.values())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Mat::zeros(p.dim())))
        .collect()
}

/// Per-sample loss terms for one sample, without noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLosses {
    pub answer: f64,
    pub ordering: f64,
    pub recon: f64,
    pub autoenc: f64,
    /// Selected row at the final hop.
    pub selected: usize,
}

pub fn sample_losses(model: &Model, p: &Prepared, selection: Selection, alpha: f64) -> SampleLosses {
    let s = LossSettings {
        weights: LossWeights {
            rho: 0.0,
            delta: 1.0,
            alpha_sf: 1.0,
            beta_sf: 1.0,
        },
        alpha,
        selection,
    };
    let batch = Batch::without_noise(vec![p.clone()], Vec::new());
    let mut tape = Tape::new();
    let bound = Bound::constants(&mut tape, &model.params);
    let inc = Include {
        ordering: true,
        recon: true,
        autoenc: true,
        corpus: false,
    };
    let g = build(&mut tape, &bound, &model.config, &batch, &s, inc);
    let t = terms_of(&tape, &g);
    SampleLosses {
        answer: t.answer,
        ordering: t.ordering,
        recon: t.recon,
        autoenc: t.autoenc,
        selected: *g.selected[0].last().expect("at least one hop"),
    }
}

/// Per-token answer loss of one sample.
pub fn answer_loss(model: &Model, p: &Prepared, alpha: f64) -> f64 {
    sample_losses(model, p, Selection::Detached, alpha).answer
}

/// `(recon, autoenc)` for a supervised sample.
pub fn sf_losses(model: &Model, p: &Prepared, alpha: f64) -> Result<(f64, f64)> {
    if !p.supervised {
        return Err(Error::Unsupervised(p.id.clone()));
    }
    if p.support_rows.len() > p.hops {
        return Err(Error::TooFewHops {
            hops: p.hops,
            needed: p.support_rows.len(),
        });
    }
    if p.support_rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let l = sample_losses(model, p, Selection::Detached, alpha);
    Ok((l.recon, l.autoenc))
}

/// Adam with first/second moments kept in `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update; parameters and moments are rounded to `f32` afterwards so
    /// a checkpoint captures the state exactly.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Mat], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = (cfg.beta1 * *m + (1.0 - cfg.beta1) * g) as f32 as f64;
                *v = (cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g) as f32 as f64;
                let step = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p = (*p - step) as f32 as f64;
            });
        }
    }
}

fn clip(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tokenized pretraining corpus for the ρ term.
pub fn tokenized_corpus(n: usize, seed: u64, vocab: &Vocab) -> Vec<Vec<u32>> {
    pretrain_corpus(n, mix(seed, 0xc0_2905), &WorldConfig::default())
        .iter()
        .map(|s| {
            let mut t = vocab.tokenize_flat(s);
            t.truncate(MAX_LINE_TOKENS);
            t
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub terms: LossTerms,
    pub grad_norm: f64,
}

/// Training state: model, optimizer and the prepared dataset.
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocab,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    data: Vec<Prepared>,
    corpus: Vec<Vec<u32>>,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocab, cfg: TrainConfig, samples: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        model.config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "model expects {} tokens, vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let flags = cfg.plan().select(samples.len());
        let data = samples
            .iter()
            .zip(flags)
            .enumerate()
            .map(|(i, (s, f))| Prepared::new(s, &vocab, f, format!("#{i}")))
            .collect::<Result<Vec<_>>>()?;
        for p in &data {
            if p.ep.rows.len() > model.config.slots {
                return Err(Error::EpisodeTooLong {
                    lines: p.ep.rows.len(),
                    slots: model.config.slots,
                });
            }
        }
        let corpus = if cfg.weights.rho > 0.0 {
            tokenized_corpus(cfg.corpus_size, cfg.seed, &vocab)
        } else {
            Vec::new()
        };
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            model,
            vocab,
            cfg,
            adam,
            step: 0,
            data,
            corpus,
            perm: None,
        })
    }

    pub fn prepared(&self) -> &[Prepared] {
        &self.data
    }

    fn indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(self.cfg.batch);
        for k in 0..self.cfg.batch {
            let pos = step * self.cfg.batch + k;
            let epoch = pos / n;
            if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 0xe90c_0000 + epoch as u64)));
                self.perm = Some((epoch, p));
            }
            out.push(self.perm.as_ref().unwrap().1[pos % n]);
        }
        out
    }

    /// The exact batch used at `step`.
    pub fn batch_at(&mut self, step: usize) -> Batch {
        let idx = self.indices(step);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, step as u64));
        let samples: Vec<Prepared> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let noise = samples
            .iter()
            .map(|p| EpisodeNoise::draw(p, &self.model.config, self.cfg.sigma_xi, self.cfg.sigma_eta, &mut rng))
            .collect();
        let corpus = if self.corpus.is_empty() {
            Vec::new()
        } else {
            (0..samples.len())
                .map(|_| self.corpus[rng.random_range(0..self.corpus.len())].clone())
                .collect()
        };
        Batch { samples, noise, corpus }
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.batch_at(self.step);
        let (terms, mut grads) = loss_and_grad(&self.model.params, &self.model.config, &batch, &self.cfg.settings());
        let finite = terms.total.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                samples: batch.samples.iter().map(|p| p.id.clone()).collect(),
            });
        }
        let grad_norm = clip(&mut grads, self.cfg.clip_norm);
        self.adam.update(&mut self.model.params, &grads, &self.cfg);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            terms,
            grad_norm,
        })
    }

    /// Runs until `cfg.steps`, calling `on_step` after every step and saving
    /// to `checkpoint` every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, checkpoint: Option<&Path>, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let r = self.train_step()?;
            on_step(&r);
            out.push(r);
            if let Some(path) = checkpoint {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.params.clone();
        for (i, name) in self.model.params.names().iter().enumerate() {
            tensors.insert(&format!("adam.m.{name}"), self.adam.m[i].clone());
            tensors.insert(&format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            rng: RngState {
                seed: self.cfg.seed,
                step: self.step as u64,
            },
            vocab: self.vocab.tokens().to_vec(),
        };
        checkpoint::save(path, &tensors, &serde_json::to_value(&meta)?)
    }

    /// Restores a trainer saved by [`Trainer::save`]; `samples` must be the
    /// dataset of the original run. `steps` optionally extends the run.
    pub fn resume(path: &Path, samples: &[Sample], steps: Option<usize>) -> Result<Self> {
        let (model, vocab, meta, tensors) = load_parts(path)?;
        let mut cfg = meta
            .train
            .clone()
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "no training state".into(),
            })?;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let mut t = Trainer::new(model, vocab, cfg, samples)?;
        let missing = |name: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing optimizer tensor {name}"),
        };
        for (i, name) in t.model.params.names().to_vec().iter().enumerate() {
            let m = format!("adam.m.{name}");
            let v = format!("adam.v.{name}");
            t.adam.m[i] = tensors.position(&m).map(|_| tensors.get(&m).clone()).ok_or_else(|| missing(&m))?;
            t.adam.v[i] = tensors.position(&v).map(|_| tensors.get(&v).clone()).ok_or_else(|| missing(&v))?;
        }
        t.adam.t = meta.step as u64;
        t.step = meta.step;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

/// JSON blob stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub rng: RngState,
    pub vocab: Vec<String>,
}

fn load_parts(path: &Path) -> Result<(Model, Vocab, CheckpointMeta, ParamStore)> {
    let (tensors, json) = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(json).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("config blob: {e}"),
    })?;
    let template = Model::zeros(meta.model.clone())?;
    let mut params = ParamStore::new();
    for name in template.params.names() {
        if tensors.position(name).is_none() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name}"),
            });
        }
        params.insert(name, tensors.get(name).clone());
    }
    let model = Model::from_params(meta.model.clone(), params)?;
    let vocab = Vocab::from_token_list(meta.vocab.clone());
    if vocab.len() != model.config.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "checkpoint vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab, meta, tensors))
}

/// Saves a model (no optimizer state).
pub fn save_model(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        train: None,
        step: 0,
        rng: RngState { seed: 0, step: 0 },
        vocab: vocab.tokens().to_vec(),
    };
    checkpoint::save(path, &model.params, &serde_json::to_value(&meta)?)
}

/// Loads the model, vocabulary and metadata of any checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, Vocab, CheckpointMeta)> {
    let (model, vocab, meta, _) = load_parts(path)?;
    Ok((model, vocab, meta))
}

/// Finite-difference comparison report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `(tensor, max relative error over its probes)`.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `probes`
/// random entries of every tensor.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &[Mat],
    mut f: impl FnMut(&ParamStore) -> f64,
    eps: f64,
    probes: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut total = 0;
    for (k, name) in params.names().iter().enumerate() {
        let n = params.values()[k].len();
        let mut worst: f64 = 0.0;
        let mut picks: Vec<usize> = (0..n).collect();
        picks.shuffle(&mut rng);
        for &flat in picks.iter().take(probes) {
            let cols = params.values()[k].ncols();
            let (r, c) = (flat / cols, flat % cols);
            let orig = work.values()[k][[r, c]];
            work.values_mut()[k][[r, c]] = orig + eps;
            let up = f(&work);
            work.values_mut()[k][[r, c]] = orig - eps;
            let down = f(&work);
            work.values_mut()[k][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k][[r, c]], numeric));
            total += 1;
        }
        per_tensor.push((name.clone(), worst));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradCheckReport {
        per_tensor,
        max_rel_error,
        probes: total,
    }
}

/// Gradient check of the full training loss on `batch`.
pub fn grad_check(model: &Model, batch: &Batch, s: &LossSettings, eps: f64, probes: usize, seed: u64) -> GradCheckReport {
    let (_, analytic) = loss_and_grad(&model.params, &model.config, batch, s);
    let cfg = model.config.clone();
    check_gradients(
        &model.params,
        &analytic,
        |p| loss_value(p, &cfg, batch, s).total,
        eps,
        probes,
        seed,
    )
}

/// Rows of `unordered` that received a non-zero gradient (testing aid for
/// gradient routing through the selection).
pub fn rows_with_gradient(g: &Mat) -> Vec<usize> {
    g.axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, r)| r.iter().any(|x| *x != 0.0))
        .map(|(i, _)| i)
        .collect()
}
