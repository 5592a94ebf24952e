//! Independent oracles shared by the property and acceptance tests.
#![allow(dead_code)]

use memreasoner::linalg::{pinv_solve, Mat};
use memreasoner::memory::{gaussian, MemoryState, NoiseConfig};
use memreasoner::model::{Model, ModelConfig};
use memreasoner::taskgen::{generate, GenSpec, Sample, Task, WorldConfig};
use memreasoner::training::{
    grad_check, tokenized_corpus, Batch, EpisodeNoise, GradCheckReport, LossSettings, LossWeights, Prepared,
    Selection,
};
use memreasoner::vocab::Vocab;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub fn from_na(m: &DMatrix<f64>) -> Mat {
    Mat::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn norm(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SVD pseudo-inverse with relative singular-value cutoff 1e-6.
pub fn svd_pinv(a: &Mat) -> Mat {
    let svd = to_na(a).svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-6;
    from_na(&svd.pseudo_inverse(cutoff).expect("svd with u and v"))
}

/// Distance of the row vector `v` from the row space of `rows`, via SVD.
pub fn svd_row_residual(rows: &Mat, v: &Mat) -> f64 {
    let svd = to_na(rows).svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let cutoff = svd.singular_values.max() * 1e-6;
    let mut proj = Mat::zeros(v.raw_dim());
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff {
            let basis = Mat::from_shape_fn((1, vt.ncols()), |(_, j)| vt[(k, j)]);
            let c = (v * &basis).sum();
            proj = proj + basis * c;
        }
    }
    norm(&(v - &proj))
}

/// A random written memory plus a unit-norm query.
///
/// The ridge solve shrinks a direction with singular value `σ` by
/// `σ²/(σ²+λ)`, so tight tolerances need a well-conditioned memory. The
/// default cases mirror the model's shape (slots several times D, short
/// episodes); [`memory_case_any`] draws arbitrary shapes.
pub struct MemoryCase {
    pub mem: MemoryState,
    pub query: Mat,
    pub other: Mat,
    pub dim: usize,
}

pub fn memory_case(seed: u64) -> MemoryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(4..=16);
    let m = rng.random_range(4 * d..=8 * d);
    let e = rng.random_range(1..=d / 2);
    build_case(&mut rng, d, m, e)
}

pub fn memory_case_any(seed: u64) -> MemoryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(4..=16);
    let m = rng.random_range(d..=2 * d);
    let e = rng.random_range(1..d);
    build_case(&mut rng, d, m, e)
}

/// Smallest nonzero singular value of the written memory.
pub fn sigma_min(c: &MemoryCase) -> f64 {
    let svd = to_na(c.mem.current().unwrap()).svd(false, false);
    let max = svd.singular_values.max();
    svd.singular_values.iter().cloned().filter(|s| *s > max * 1e-6).fold(f64::INFINITY, f64::min)
}

fn build_case(rng: &mut ChaCha8Rng, d: usize, m: usize, e: usize) -> MemoryCase {
    let prior = gaussian(m, d, 1.0 / (d as f64).sqrt(), rng);
    let latents = gaussian(e, d, 1.0, rng);
    let mem = MemoryState::new(prior, RIDGE)
        .unwrap()
        .write(&latents, &NoiseConfig::none(), rng)
        .unwrap();
    let unit = |x: Mat| {
        let n = norm(&x);
        x / n
    };
    let query = unit(gaussian(1, d, 1.0, rng));
    let other = unit(gaussian(1, d, 1.0, rng));
    MemoryCase { mem, query, other, dim: d }
}

pub const RIDGE: f64 = 1e-6;

pub fn read(mem: &MemoryState, q: &Mat) -> Mat {
    mem.read(q, &NoiseConfig::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// `|read(read(q)) − read(q)| / |read(q)|`.
pub fn idempotence_error(seed: u64) -> f64 {
    idempotence_error_of(&memory_case(seed))
}

pub fn idempotence_error_of(c: &MemoryCase) -> f64 {
    let r1 = read(&c.mem, &c.query);
    let r2 = read(&c.mem, &r1);
    norm(&(&r2 - &r1)) / norm(&r1).max(1e-300)
}

/// Residual of a read against the rows of the written memory.
pub fn containment_residual(seed: u64) -> f64 {
    let c = memory_case(seed);
    let r = read(&c.mem, &c.query);
    svd_row_residual(c.mem.current().unwrap(), &r)
}

/// Relative error of `read(a q1 + b q2)` against `a read(q1) + b read(q2)`.
pub fn linearity_error(seed: u64) -> f64 {
    let c = memory_case(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let a: f64 = rng.random_range(-2.0..2.0);
    let b: f64 = rng.random_range(-2.0..2.0);
    let lhs = read(&c.mem, &(&c.query * a + &c.other * b));
    let rhs = read(&c.mem, &c.query) * a + read(&c.mem, &c.other) * b;
    norm(&(&lhs - &rhs)) / norm(&rhs).max(1e-12)
}

/// Frobenius distances of the ridge solve at λ = 1e-2, 1e-4, 1e-6 from the
/// SVD pseudo-inverse solution, on a random wide or tall system.
pub fn ridge_distances(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=12);
    let r = rng.random_range(2..=12);
    let a = gaussian(p, r, 1.0, &mut rng);
    let b = gaussian(p, 3, 1.0, &mut rng);
    let oracle = svd_pinv(&a).dot(&b);
    [1e-2, 1e-4, 1e-6].map(|lambda| norm(&(pinv_solve(&a.view(), &b.view(), lambda).unwrap() - &oracle)))
}

pub fn strictly_decreasing(d: &[f64; 3]) -> bool {
    d[0] > d[1] && d[1] > d[2]
}

/// Ordering loss evaluated directly: `−log softmax(−d)[s]` with plain
/// exponentials, no shifting.
pub fn direct_ordering(d: &[f64], s: usize) -> f64 {
    let denom: f64 = d.iter().map(|x| (-x).exp()).sum();
    -((-d[s]).exp() / denom).ln()
}

/// D = 8 toy model. The ridge is larger than the production default: the
/// finite-difference noise of a λ-regularized solve grows like 1/λ.
pub fn toy(vocab: &Vocab) -> Model {
    Model::new(ModelConfig {
        vocab_size: vocab.len(),
        d_embed: 8,
        d_latent: 8,
        d_model: 8,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        slots: 16,
        max_pos: 72,
        init_seed: 3,
        ridge: 1e-2,
        ..ModelConfig::default()
    })
    .unwrap()
}

pub fn data(task: Task, n: usize, seed: u64) -> Vec<Sample> {
    let mut spec = GenSpec::new(task);
    spec.max_lines = spec.max_lines.min(6);
    generate(&spec, &WorldConfig::default(), n, seed).unwrap()
}

pub fn prepared(samples: &[Sample], vocab: &Vocab, supervised: bool) -> Vec<Prepared> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Prepared::new(s, vocab, supervised, format!("{i}")).unwrap())
        .collect()
}

pub fn settings(weights: LossWeights, selection: Selection) -> LossSettings {
    LossSettings {
        weights,
        alpha: 1.0,
        selection,
    }
}

/// Finite-difference check of the whole pipeline on the toy model: two
/// supervised hop-2 samples, noise on, all four loss terms weighted.
/// Returns the report and the parameter tensor count.
pub fn full_grad_check() -> (GradCheckReport, usize) {
    let vocab = Vocab::standard();
    let model = toy(&vocab);
    let samples = prepared(&data(Task::Hop2, 2, 11), &vocab, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = samples
        .iter()
        .map(|p| EpisodeNoise::draw(p, &model.config, 1e-4, 1e-4, &mut rng))
        .collect();
    let batch = Batch {
        samples,
        noise,
        corpus: tokenized_corpus(2, 1, &vocab),
    };
    let rep = grad_check(&model, &batch, &settings(LossWeights::sf_star(), Selection::Detached), 1e-4, 20, 9);
    (rep, model.params.len())
}
