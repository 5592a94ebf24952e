//! Episodic memory: least-squares write and read.
//!
//! Write: `M̂ = (Z_ξ M0†)† Z_ξ`. Read: `z_r = (z_q M̂† + η) M̂`.
//! Every pseudo-inverse is the ridge solve of [`crate::linalg::pinv_solve`].
//!
//! Two realizations are provided. [`MemoryState`] materializes `M̂` (`m×D`)
//! and is used at inference. The `graph_*` functions build the same
//! quantities on an autodiff tape through Gram matrices, which only needs
//! `E×E` and `D×D` solves per episode:
//! with `X0 = M0†`, `W = Z X0`, `K = W Wᵀ = Z (X0 X0ᵀ) Zᵀ` and
//! `Y = (K + λI)⁻¹ Z`, the written memory is `M̂ = Wᵀ Y`, its Gram matrix is
//! `H = M̂ᵀ M̂ = Yᵀ K Y`, and the noiseless read is `q (H + λI)⁻¹ H`.

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{all_finite, identity, pinv, pinv_solve, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseConfig {
    pub sigma_xi: f64,
    pub sigma_eta: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xi >= 0.0) || !(self.sigma_eta >= 0.0) {
            return Err(Error::Config(format!(
                "noise std must be >= 0 (sigma_xi {}, sigma_eta {})",
                self.sigma_xi, self.sigma_eta
            )));
        }
        Ok(())
    }
}

/// Gaussian matrix with the given std; exactly zero when `std == 0`.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    if std == 0.0 {
        return Mat::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w_q: Mat,
}

/// `ẑ_q = W_q z_q` for a row vector `z_q` (`1×D`).
pub fn project_query(params: &ProjectionParams, z_q: &Mat) -> Result<Mat> {
    let d = params.w_q.nrows();
    if params.w_q.ncols() != d || z_q.dim() != (1, d) {
        return Err(shape_err(
            "project_query",
            format!("W_q {:?}, z_q {:?}", params.w_q.dim(), z_q.dim()),
        ));
    }
    Ok(z_q.dot(&params.w_q.t()))
}

/// Prior `M0` plus the per-episode written memory `M̂`.
#[derive(Clone, Debug)]
pub struct MemoryState {
    prior: Mat,
    prior_pinv: Mat,
    current: Option<Mat>,
    ridge: f64,
}

impl MemoryState {
    pub fn new(prior: Mat, ridge: f64) -> Result<Self> {
        if !all_finite(&prior.view()) {
            return Err(Error::NonFinite("memory prior"));
        }
        let prior_pinv = pinv(&prior.view(), ridge)?;
        Ok(MemoryState {
            prior,
            prior_pinv,
            current: None,
            ridge,
        })
    }

    pub fn slots(&self) -> usize {
        self.prior.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prior.ncols()
    }

    pub fn prior(&self) -> &Mat {
        &self.prior
    }

    pub fn current(&self) -> Option<&Mat> {
        self.current.as_ref()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Writes an episode of at most `m` ordered latents (`E×D`).
    pub fn write(&self, ordered: &Mat, noise: &NoiseConfig, rng: &mut impl Rng) -> Result<Self> {
        if ordered.nrows() > self.slots() {
            return Err(Error::EpisodeTooLong {
                lines: ordered.nrows(),
                slots: self.slots(),
            });
        }
        self.write_unbounded(ordered, noise, rng)
    }

    /// [`MemoryState::write`] without the `E ≤ m` limit. The solve stays
    /// well defined for any `E`; this is used by the relevance-filtering pass
    /// of the inference-time update, which then rewrites a bounded subset.
    pub fn write_unbounded(&self, ordered: &Mat, noise: &NoiseConfig, rng: &mut impl Rng) -> Result<Self> {
        let (e, d) = ordered.dim();
        if e == 0 {
            return Err(Error::EmptyEpisode);
        }
        if d != self.dim() {
            return Err(shape_err("write", format!("latents are {e}x{d}, memory dim {}", self.dim())));
        }
        noise.validate()?;
        let z = ordered + &gaussian(e, d, noise.sigma_xi, rng);
        let w = z.dot(&self.prior_pinv);
        let current = pinv_solve(&w.view(), &z.view(), self.ridge)?;
        if !all_finite(&current.view()) {
            return Err(Error::NonFinite("memory write"));
        }
        Ok(MemoryState {
            current: Some(current),
            ..self.clone()
        })
    }

    /// Reads with a row query `z_q` (`1×D`).
    pub fn read(&self, query: &Mat, noise: &NoiseConfig, rng: &mut impl Rng) -> Result<Mat> {
        let m = self.current.as_ref().ok_or(Error::UninitializedMemory)?;
        if query.dim() != (1, self.dim()) {
            return Err(shape_err("read", format!("query {:?}, memory dim {}", query.dim(), self.dim())));
        }
        noise.validate()?;
        // z_q M̂† = ((M̂ᵀ)† z_qᵀ)ᵀ
        let w = pinv_solve(&m.t(), &query.t(), self.ridge)?.reversed_axes();
        let w = w + gaussian(1, self.slots(), noise.sigma_eta, rng);
        let out = w.dot(m);
        if !all_finite(&out.view()) {
            return Err(Error::NonFinite("memory read"));
        }
        Ok(out)
    }
}

/// Prior-dependent quantities shared by every episode in a batch.
#[derive(Clone, Copy, Debug)]
pub struct GraphPrior {
    /// `M0†` (`D×m`).
    pub x0: Var,
    /// `M0† M0†ᵀ` (`D×D`).
    pub bm: Var,
    pub ridge: f64,
}

/// Per-episode written memory in Gram form.
#[derive(Clone, Copy, Debug)]
pub struct GraphEpisode {
    /// Noisy ordered latents `Z_ξ` (`E×D`).
    pub z: Var,
    /// `(K + λI)⁻¹ Z_ξ` (`E×D`).
    pub y: Var,
    /// `M̂ᵀ M̂ + λI` (`D×D`).
    pub h_reg: Var,
    /// `M̂ᵀ M̂` (`D×D`).
    pub h: Var,
}

pub fn graph_prior(tape: &mut Tape, prior: Var, ridge: f64) -> GraphPrior {
    assert!(ridge > 0.0, "graph memory needs a positive ridge");
    let pt = tape.t(prior);
    let gram = tape.matmul(pt, prior);
    let gram = tape.add_diag(gram, ridge);
    let x0 = tape.solve_spd(gram, pt);
    let x0t = tape.t(x0);
    let bm = tape.matmul(x0, x0t);
    GraphPrior { x0, bm, ridge }
}

/// Writes `ordered` (`E×D`); `xi` is the pre-drawn write noise.
pub fn graph_write(tape: &mut Tape, prior: &GraphPrior, ordered: Var, xi: Option<&Mat>) -> GraphEpisode {
    let z = match xi {
        Some(n) => {
            let c = tape.constant(n.clone());
            tape.add(ordered, c)
        }
        None => ordered,
    };
    let zt = tape.t(z);
    let zb = tape.matmul(z, prior.bm);
    let k = tape.matmul(zb, zt);
    let k_reg = tape.add_diag(k, prior.ridge);
    let y = tape.solve_spd(k_reg, z);
    let yt = tape.t(y);
    let ky = tape.matmul(k, y);
    let h = tape.matmul(yt, ky);
    let h_reg = tape.add_diag(h, prior.ridge);
    GraphEpisode { z, y, h_reg, h }
}

/// Reads with row query `q` (`1×D`); `eta` is the pre-drawn read noise (`1×m`).
pub fn graph_read(tape: &mut Tape, prior: &GraphPrior, ep: &GraphEpisode, q: Var, eta: Option<&Mat>) -> Var {
    let qt = tape.t(q);
    let x = tape.solve_spd(ep.h_reg, qt);
    let xt = tape.t(x);
    let zr = tape.matmul(xt, ep.h);
    match eta {
        Some(n) => {
            // η M̂ = ((η X0ᵀ) Zᵀ) Y
            let c = tape.constant(n.clone());
            let x0t = tape.t(prior.x0);
            let a = tape.matmul(c, x0t);
            let zt = tape.t(ep.z);
            let a = tape.matmul(a, zt);
            let noise = tape.matmul(a, ep.y);
            tape.add(zr, noise)
        }
        None => zr,
    }
}

/// Materializes `M̂ = (Z X0)ᵀ Y` from a graph episode (testing aid).
pub fn graph_memory_matrix(tape: &mut Tape, prior: &GraphPrior, ep: &GraphEpisode) -> Var {
    let w = tape.matmul(ep.z, prior.x0);
    let wt = tape.t(w);
    tape.matmul(wt, ep.y)
}

/// Least-squares residual of `v` (`1×D`) against the row space of `rows`.
pub fn row_space_residual(rows: &Mat, v: &Mat) -> Result<f64> {
    let coef = pinv_solve(&rows.t(), &v.t(), 0.0)?;
    let fit = coef.t().dot(rows);
    Ok((&fit - v).iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Stacks row vectors into a matrix.
pub fn stack_rows(rows: &[Mat]) -> Mat {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| identity(0))
}
