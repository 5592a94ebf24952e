//! Temporal encoding: turns unordered line latents into order-aware ones.
//!
//! The default is a one-layer bidirectional GRU with `D/2` hidden units per
//! direction whose outputs are concatenated `[fwd_i, bwd_i]`. The ablation
//! adds a reversed sinusoidal table so the last line always gets position 0.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;
use crate::model::{gru_names, Bound, ParamStore};

/// One recurrent cell: `wx` is `in×3H` (reset, update, candidate), `wh` is
/// `H×2H` (reset, update), `whn` is `H×H`, `b` is `1×3H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub wx: Mat,
    pub wh: Mat,
    pub whn: Mat,
    pub b: Mat,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            wx: Mat::zeros((input, 3 * hidden)),
            wh: Mat::zeros((hidden, 2 * hidden)),
            whn: Mat::zeros((hidden, hidden)),
            b: Mat::zeros((1, 3 * hidden)),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        let [wx, wh, whn, b] = gru_names(prefix);
        GruParams {
            wx: store.get(&wx).clone(),
            wh: store.get(&wh).clone(),
            whn: store.get(&whn).clone(),
            b: store.get(&b).clone(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.whn.nrows()
    }

    pub fn input(&self) -> usize {
        self.wx.nrows()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.wx.ncols() != 3 * h || self.wh.dim() != (h, 2 * h) || self.whn.dim() != (h, h) || self.b.dim() != (1, 3 * h) {
            return Err(shape_err("gru", "inconsistent cell tensors"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGruParams {
    pub fn from_store(store: &ParamStore) -> Self {
        BiGruParams {
            fwd: GruParams::from_store(store, "tmp.fwd"),
            bwd: GruParams::from_store(store, "tmp.bwd"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A recurrent cell's tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wx: Var,
    pub wh: Var,
    pub whn: Var,
    pub b: Var,
}

impl GruVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        let [wx, wh, whn, b] = gru_names(prefix);
        GruVars {
            wx: bound.get(&wx),
            wh: bound.get(&wh),
            whn: bound.get(&whn),
            b: bound.get(&b),
        }
    }

    pub fn constants(tape: &mut Tape, p: &GruParams) -> Self {
        GruVars {
            wx: tape.constant(p.wx.clone()),
            wh: tape.constant(p.wh.clone()),
            whn: tape.constant(p.whn.clone()),
            b: tape.constant(p.b.clone()),
        }
    }
}

/// One batched step: `x` is `n×in`, `h` is `n×H`.
pub fn gru_step(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Var {
    let hd = tape.shape(h).1;
    let xw = tape.matmul(x, p.wx);
    let xw = tape.add_row(xw, p.b);
    let hw = tape.matmul(h, p.wh);
    let xr = tape.slice_cols(xw, 0, hd);
    let hr = tape.slice_cols(hw, 0, hd);
    let r = tape.add(xr, hr);
    let r = tape.sigmoid(r);
    let xu = tape.slice_cols(xw, hd, hd);
    let hu = tape.slice_cols(hw, hd, hd);
    let u = tape.add(xu, hu);
    let u = tape.sigmoid(u);
    let rh = tape.mul(r, h);
    let rhn = tape.matmul(rh, p.whn);
    let xn = tape.slice_cols(xw, 2 * hd, hd);
    let n = tape.add(xn, rhn);
    let n = tape.tanh(n);
    let keep = tape.one_minus(u);
    let a = tape.mul(keep, n);
    let c = tape.mul(u, h);
    tape.add(a, c)
}

/// Masked step: rows with mask 0 keep their previous state.
pub fn gru_step_masked(tape: &mut Tape, x: Var, h: Var, p: &GruVars, mask: Option<&Mat>) -> Var {
    let next = gru_step(tape, x, h, p);
    match mask {
        None => next,
        Some(m) => {
            let keep = tape.constant(m.clone());
            let drop = tape.constant(m.mapv(|v| 1.0 - v));
            let a = tape.mul_col(next, keep);
            let b = tape.mul_col(h, drop);
            tape.add(a, b)
        }
    }
}

/// `h' = GRU(x, h)` for single vectors (`1×in`, `1×H`).
pub fn gru_cell(x: &Mat, h: &Mat, params: &BiGruParams, direction: Direction) -> Result<Mat> {
    let p = match direction {
        Direction::Forward => &params.fwd,
        Direction::Backward => &params.bwd,
    };
    gru_cell_single(x, h, p)
}

pub fn gru_cell_single(x: &Mat, h: &Mat, p: &GruParams) -> Result<Mat> {
    p.check()?;
    if x.dim() != (1, p.input()) || h.dim() != (1, p.hidden()) {
        return Err(shape_err("gru_cell", format!("x {:?}, h {:?}", x.dim(), h.dim())));
    }
    let mut t = Tape::new();
    let vars = GruVars::constants(&mut t, p);
    let xv = t.constant(x.clone());
    let hv = t.constant(h.clone());
    let out = gru_step(&mut t, xv, hv, &vars);
    Ok(t.value(out).clone())
}

/// Bidirectional encoding of several episodes at once.
///
/// Episodes are left-padded to a common length (padding rows come first, as
/// when batching variable-length episodes); masked steps carry the state
/// unchanged, so each episode's result equals its unbatched encoding.
pub fn graph_encode_order(tape: &mut Tape, episodes: &[Var], fwd: &GruVars, bwd: &GruVars) -> Vec<Var> {
    let n = episodes.len();
    if n == 0 {
        return Vec::new();
    }
    let lens: Vec<usize> = episodes.iter().map(|e| tape.shape(*e).0).collect();
    let d = tape.shape(episodes[0]).1;
    let hd = tape.shape(fwd.whn).0;
    let t_max = *lens.iter().max().unwrap();
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    let total: usize = lens.iter().sum();
    let zero_row = tape.constant(Mat::zeros((1, d)));
    let mut parts = episodes.to_vec();
    parts.push(zero_row);
    let all = tape.concat_rows(&parts);
    let uniform = lens.iter().all(|&l| l == t_max);
    let mut xs = Vec::with_capacity(t_max);
    let mut masks = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut idx = Vec::with_capacity(n);
        let mut mask = Mat::zeros((n, 1));
        for i in 0..n {
            let pad = t_max - lens[i];
            if t >= pad {
                idx.push(offsets[i] + t - pad);
                mask[[i, 0]] = 1.0;
            } else {
                idx.push(total);
            }
        }
        xs.push(tape.gather_rows(all, &idx));
        masks.push(if uniform { None } else { Some(mask) });
    }
    let h0 = tape.constant(Mat::zeros((n, hd)));
    let mut fwd_out = Vec::with_capacity(t_max);
    let mut h = h0;
    for t in 0..t_max {
        h = gru_step_masked(tape, xs[t], h, fwd, masks[t].as_ref());
        fwd_out.push(h);
    }
    let mut bwd_out = vec![h0; t_max];
    let mut h = h0;
    for t in (0..t_max).rev() {
        h = gru_step_masked(tape, xs[t], h, bwd, masks[t].as_ref());
        bwd_out[t] = h;
    }
    let f_all = tape.concat_rows(&fwd_out);
    let b_all = tape.concat_rows(&bwd_out);
    (0..n)
        .map(|i| {
            let pad = t_max - lens[i];
            let idx: Vec<usize> = (0..lens[i]).map(|j| (pad + j) * n + i).collect();
            let f = tape.gather_rows(f_all, &idx);
            let b = tape.gather_rows(b_all, &idx);
            tape.concat_cols(&[f, b])
        })
        .collect()
}

/// Bidirectional GRU encoding of one episode (`E×D` → `E×D`).
pub fn encode_order(latents: &Mat, params: &BiGruParams) -> Result<Mat> {
    let (e, d) = latents.dim();
    if e == 0 {
        return Err(Error::EmptyEpisode);
    }
    params.fwd.check()?;
    params.bwd.check()?;
    if params.fwd.input() != d || params.bwd.input() != d || params.fwd.hidden() + params.bwd.hidden() != d {
        return Err(shape_err("encode_order", format!("latent dim {d} does not match the cell")));
    }
    let mut t = Tape::new();
    let fwd = GruVars::constants(&mut t, &params.fwd);
    let bwd = GruVars::constants(&mut t, &params.bwd);
    let z = t.constant(latents.clone());
    let out = graph_encode_order(&mut t, &[z], &fwd, &bwd);
    Ok(t.value(out[0]).clone())
}

/// `PE(pos)` rows for `pos = 0..n` with width `d` (even).
pub fn sinusoid_table(n: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros((n, d));
    for pos in 0..n {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            pe[[pos, 2 * k]] = angle.sin();
            pe[[pos, 2 * k + 1]] = angle.cos();
        }
    }
    pe
}

/// Reversed table: row `i` of an `E`-line episode gets `PE(E−1−i)`.
pub fn reversed_positions(e: usize, d: usize) -> Mat {
    let pe = sinusoid_table(e, d);
    let mut out = Mat::zeros((e, d));
    for i in 0..e {
        out.row_mut(i).assign(&pe.row(e - 1 - i));
    }
    out
}

pub fn encode_order_sinusoidal(latents: &Mat) -> Result<Mat> {
    let (e, d) = latents.dim();
    if e == 0 {
        return Err(Error::EmptyEpisode);
    }
    if d % 2 != 0 {
        return Err(shape_err("encode_order_sinusoidal", format!("odd latent dim {d}")));
    }
    Ok(latents + &reversed_positions(e, d))
}

pub fn graph_encode_sinusoidal(tape: &mut Tape, latents: Var) -> Var {
    let (e, d) = tape.shape(latents);
    let pe = tape.constant(reversed_positions(e, d));
    tape.add(latents, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_gru(rng: &mut ChaCha8Rng, input: usize, h: usize) -> GruParams {
        GruParams {
            wx: rand_mat(rng, input, 3 * h),
            wh: rand_mat(rng, h, 2 * h),
            whn: rand_mat(rng, h, h),
            b: rand_mat(rng, 1, 3 * h),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-by-scalar evaluation of the gate equations.
    fn oracle_cell(x: &[f64], h: &[f64], p: &GruParams) -> Vec<f64> {
        let hd = h.len();
        let gate = |col: usize, with_h: bool| {
            let mut acc = p.b[[0, col]];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * p.wx[[i, col]];
            }
            if with_h {
                for (k, hk) in h.iter().enumerate() {
                    acc += hk * p.wh[[k, col]];
                }
            }
            acc
        };
        let r: Vec<f64> = (0..hd).map(|j| sig(gate(j, true))).collect();
        (0..hd)
            .map(|j| {
                let u = sig(gate(hd + j, true));
                let mut n = gate(2 * hd + j, false);
                for k in 0..hd {
                    n += r[k] * h[k] * p.whn[[k, j]];
                }
                (1.0 - u) * n.tanh() + u * h[j]
            })
            .collect()
    }

    fn oracle_bigru(z: &Mat, p: &BiGruParams) -> Mat {
        let (e, d) = z.dim();
        let hd = d / 2;
        let mut out = Mat::zeros((e, d));
        let mut h = vec![0.0; hd];
        for i in 0..e {
            h = oracle_cell(z.row(i).as_slice().unwrap(), &h, &p.fwd);
            out.slice_mut(s![i, 0..hd]).assign(&ndarray::Array1::from(h.clone()));
        }
        let mut h = vec![0.0; hd];
        for i in (0..e).rev() {
            h = oracle_cell(z.row(i).as_slice().unwrap(), &h, &p.bwd);
            out.slice_mut(s![i, hd..d]).assign(&ndarray::Array1::from(h.clone()));
        }
        out
    }

    #[test]
    fn zero_cell_halves_state() {
        let p = BiGruParams {
            fwd: GruParams::zeros(4, 2),
            bwd: GruParams::zeros(4, 2),
        };
        let h = array![[0.8, -0.4]];
        let out = gru_cell(&array![[1.0, 2.0, 3.0, 4.0]], &h, &p, Direction::Forward).unwrap();
        assert_eq!(out, array![[0.4, -0.2]]);
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut g = GruParams::zeros(2, 2);
        g.b[[0, 2]] = 100.0;
        g.b[[0, 3]] = 100.0;
        let p = BiGruParams {
            fwd: g.clone(),
            bwd: g,
        };
        let h = array![[0.3, -0.9]];
        let out = gru_cell(&array![[5.0, -5.0]], &h, &p, Direction::Backward).unwrap();
        for (a, b) in out.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = rand_gru(&mut rng, 4, 2);
            let x = rand_mat(&mut rng, 1, 4);
            let h = rand_mat(&mut rng, 1, 2);
            let got = gru_cell_single(&x, &h, &g).unwrap();
            let want = oracle_cell(x.as_slice().unwrap(), h.as_slice().unwrap(), &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_line_episode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = BiGruParams {
            fwd: rand_gru(&mut rng, 4, 2),
            bwd: rand_gru(&mut rng, 4, 2),
        };
        let z = rand_mat(&mut rng, 1, 4);
        let out = encode_order(&z, &p).unwrap();
        let h0 = Mat::zeros((1, 2));
        let f = gru_cell(&z, &h0, &p, Direction::Forward).unwrap();
        let b = gru_cell(&z, &h0, &p, Direction::Backward).unwrap();
        assert_eq!(out.slice(s![.., 0..2]), f);
        assert_eq!(out.slice(s![.., 2..4]), b);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = BiGruParams {
            fwd: GruParams::zeros(4, 2),
            bwd: GruParams::zeros(4, 2),
        };
        let z = array![[1.0, 2.0, 3.0, 4.0], [0.5, 0.5, 0.5, 0.5]];
        assert!(encode_order(&z, &p).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(encode_order(&Mat::zeros((0, 4)), &p), Err(Error::EmptyEpisode)));
    }

    #[test]
    fn matches_unrolled_oracle_and_batching_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = BiGruParams {
            fwd: rand_gru(&mut rng, 4, 2),
            bwd: rand_gru(&mut rng, 4, 2),
        };
        let z3 = rand_mat(&mut rng, 3, 4);
        let z5 = rand_mat(&mut rng, 5, 4);
        let single = encode_order(&z3, &p).unwrap();
        let want = oracle_bigru(&z3, &p);
        for (a, b) in single.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut t = Tape::new();
        let fwd = GruVars::constants(&mut t, &p.fwd);
        let bwd = GruVars::constants(&mut t, &p.bwd);
        let a = t.constant(z3.clone());
        let b = t.constant(z5.clone());
        let out = graph_encode_order(&mut t, &[a, b], &fwd, &bwd);
        assert_eq!(t.value(out[0]), &single);
        let alone = encode_order(&z5, &p).unwrap();
        for (x, y) in t.value(out[1]).iter().zip(alone.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = BiGruParams {
            fwd: rand_gru(&mut rng, 4, 2),
            bwd: rand_gru(&mut rng, 4, 2),
        };
        let z = rand_mat(&mut rng, 3, 4);
        let mut swapped = z.clone();
        swapped.row_mut(0).assign(&z.row(2));
        swapped.row_mut(2).assign(&z.row(0));
        let a = encode_order(&z, &p).unwrap();
        let b = encode_order(&swapped, &p).unwrap();
        // compare the outputs for the same input line
        let diff: f64 = (&a.row(0) - &b.row(2)).iter().map(|x| x * x).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn sinusoidal_examples() {
        let out = encode_order_sinusoidal(&Mat::zeros((2, 4))).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in out.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = encode_order_sinusoidal(&Mat::zeros((3, 6))).unwrap();
        let b = encode_order_sinusoidal(&Mat::zeros((5, 6))).unwrap();
        assert_eq!(a.row(2), b.row(4));
        assert!(encode_order_sinusoidal(&Mat::zeros((2, 3))).is_err());
    }
}
