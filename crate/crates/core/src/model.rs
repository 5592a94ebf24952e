//! Model configuration and the named parameter store.
//!
//! Parameter names:
//! `enc.embed`, `enc.gru.{wx,wh,whn,b}`, `enc.proj.{w,b}`,
//! `tmp.{fwd,bwd}.{wx,wh,whn,b}`, `mem.prior`, `mem.wq`,
//! `dec.tok`, `dec.pos`, `dec.wm`,
//! `dec.l{i}.{ln1.g,ln1.b,wq,wk,wv,wo,ln2.g,ln2.b,ff1.w,ff1.b,ff2.w,ff2.b}`,
//! `dec.lnf.{g,b}`, `dec.out`.
//!
//! Parameter values are kept representable in `f32` (rounded after
//! initialization and after every optimizer step) while all arithmetic runs
//! in `f64`; checkpoints therefore round-trip bit-exactly.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Mat, DEFAULT_RIDGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    #[default]
    Gru,
    Sinusoidal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token embedding width of the line encoder.
    pub d_embed: usize,
    /// Latent dimension D.
    pub d_latent: usize,
    /// Decoder width.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Memory slots m.
    pub slots: usize,
    /// Longest decoder sequence (positions).
    pub max_pos: usize,
    pub temporal: TemporalKind,
    pub ridge: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_embed: 64,
            d_latent: 64,
            d_model: 64,
            layers: 2,
            heads: 2,
            ff_mult: 4,
            slots: 512,
            max_pos: 72,
            temporal: TemporalKind::Gru,
            ridge: DEFAULT_RIDGE,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.d_latent == 0 || self.d_latent % 2 != 0 {
            return bad(format!("d_latent must be even and positive, got {}", self.d_latent));
        }
        if self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "decoder needs layers >= 1 and d_model divisible by heads ({} / {})",
                self.d_model, self.heads
            ));
        }
        if self.d_embed == 0 || self.slots == 0 || self.max_pos < 2 || self.ff_mult == 0 {
            return bad("d_embed, slots, ff_mult must be positive and max_pos >= 2".into());
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return bad(format!("ridge must be a finite non-negative number, got {}", self.ridge));
        }
        Ok(())
    }
}

/// Ordered, named collection of parameter matrices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        match self.index.get(name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.values.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index[name];
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Binds every parameter as a gradient-carrying leaf.
    pub fn params(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, true)
    }

    /// Binds every parameter as a constant (inference).
    pub fn constants(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, false)
    }

    fn bind(tape: &mut Tape, store: &ParamStore, grad: bool) -> Self {
        let vars = store
            .values
            .iter()
            .map(|v| if grad { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound {
            vars,
            index: store.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const GRU_PARTS: [&str; 4] = ["wx", "wh", "whn", "b"];

impl Model {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let c = &config;
        let (v, de, d, dm) = (c.vocab_size, c.d_embed, c.d_latent, c.d_model);
        let h = d / 2;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        p.insert("enc.embed", normal(v, de, 0.5));
        p.insert("enc.gru.wx", normal(de, 3 * de, fan(de)));
        p.insert("enc.gru.wh", normal(de, 2 * de, fan(de)));
        p.insert("enc.gru.whn", normal(de, de, fan(de)));
        p.insert("enc.gru.b", Mat::zeros((1, 3 * de)));
        p.insert("enc.proj.w", normal(de, d, fan(de)));
        p.insert("enc.proj.b", Mat::zeros((1, d)));
        for dir in ["fwd", "bwd"] {
            p.insert(&format!("tmp.{dir}.wx"), normal(d, 3 * h, fan(d)));
            p.insert(&format!("tmp.{dir}.wh"), normal(h, 2 * h, fan(h)));
            p.insert(&format!("tmp.{dir}.whn"), normal(h, h, fan(h)));
            p.insert(&format!("tmp.{dir}.b"), Mat::zeros((1, 3 * h)));
        }
        p.insert("mem.prior", normal(c.slots, d, fan(d)));
        p.insert("mem.wq", Mat::eye(d));
        p.insert("dec.tok", normal(v, dm, 0.5));
        p.insert("dec.pos", normal(c.max_pos, dm, 0.1));
        p.insert("dec.wm", normal(d, c.layers * 2 * dm, fan(d)));
        let ff = c.ff_mult * dm;
        for l in 0..c.layers {
            let n = |s: &str| format!("dec.l{l}.{s}");
            p.insert(&n("ln1.g"), Mat::ones((1, dm)));
            p.insert(&n("ln1.b"), Mat::zeros((1, dm)));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(&n(w), normal(dm, dm, fan(dm)));
            }
            p.insert(&n("ln2.g"), Mat::ones((1, dm)));
            p.insert(&n("ln2.b"), Mat::zeros((1, dm)));
            p.insert(&n("ff1.w"), normal(dm, ff, fan(dm)));
            p.insert(&n("ff1.b"), Mat::zeros((1, ff)));
            p.insert(&n("ff2.w"), normal(ff, dm, fan(ff)));
            p.insert(&n("ff2.b"), Mat::zeros((1, dm)));
        }
        p.insert("dec.lnf.g", Mat::ones((1, dm)));
        p.insert("dec.lnf.b", Mat::zeros((1, dm)));
        p.insert("dec.out", normal(dm, v, fan(dm)));
        p.round_to_f32();
        Ok(Model { config, params: p })
    }

    /// Same shapes as [`Model::new`], every entry zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for v in m.params.values_mut() {
            v.fill(0.0);
        }
        Ok(m)
    }

    /// Checks that `params` holds exactly the tensors this config expects.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::zeros(config.clone())?;
        for (name, value) in reference.params.iter() {
            match params.position(name) {
                Some(i) if params.values()[i].dim() == value.dim() => {}
                Some(i) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        params.values()[i].dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        // keep the canonical order
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).clone());
        }
        Ok(Model {
            config,
            params: ordered,
        })
    }
}

/// Names of one recurrent cell's tensors under `prefix`.
pub fn gru_names(prefix: &str) -> [String; 4] {
    GRU_PARTS.map(|p| format!("{prefix}.{p}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_embed: 8,
            d_latent: 8,
            d_model: 8,
            slots: 16,
            max_pos: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Model::new(cfg()).unwrap(), Model::new(cfg()).unwrap());
        let other = ModelConfig {
            init_seed: 1,
            ..cfg()
        };
        assert_ne!(Model::new(cfg()).unwrap(), Model::new(other).unwrap());
    }

    #[test]
    fn params_are_f32_representable() {
        let m = Model::new(cfg()).unwrap();
        for (_, v) in m.params.iter() {
            assert!(v.iter().all(|x| (*x as f32) as f64 == *x));
        }
    }

    #[test]
    fn rejects_odd_latent() {
        let bad = ModelConfig {
            d_latent: 7,
            ..cfg()
        };
        assert!(matches!(Model::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::new(cfg()).unwrap();
        assert_eq!(Model::from_params(cfg(), m.params.clone()).unwrap(), m);
        let mut broken = m.params.clone();
        broken.insert("mem.wq", Mat::zeros((3, 3)));
        assert!(Model::from_params(cfg(), broken).is_err());
    }
}
