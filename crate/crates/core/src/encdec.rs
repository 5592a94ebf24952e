//! Line encoder and memory-conditioned decoder.
//!
//! The encoder embeds tokens, runs a unidirectional GRU and projects the
//! final state to a `D`-dim latent. The decoder is a small pre-norm causal
//! transformer; `W_M z` is split into one key/value prefix position per layer,
//! which every position can attend to.

use ndarray::Axis;

use crate::autodiff::{Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Bound, Model, ModelConfig};
use crate::temporal::{gru_step_masked, GruVars};
use crate::vocab::{BOS, EOS, PAD};

/// Encodes a batch of token sequences (each non-empty) into an `n×D`
/// latent matrix. Sequences are left-padded and masked so each row equals
/// its unbatched encoding.
pub fn graph_encode_lines(tape: &mut Tape, bound: &Bound, lines: &[&[u32]]) -> Var {
    let n = lines.len();
    let t_max = lines.iter().map(|l| l.len()).max().unwrap_or(0);
    assert!(lines.iter().all(|l| !l.is_empty()), "encode_lines: empty sequence");
    let embed = bound.get("enc.embed");
    let cell = GruVars::bind(bound, "enc.gru");
    let de = tape.shape(cell.whn).0;
    let uniform = lines.iter().all(|l| l.len() == t_max);
    let mut h = tape.constant(Mat::zeros((n, de)));
    for t in 0..t_max {
        let mut ids = Vec::with_capacity(n);
        let mut mask = Mat::zeros((n, 1));
        for (i, l) in lines.iter().enumerate() {
            let pad = t_max - l.len();
            if t >= pad {
                ids.push(l[t - pad] as usize);
                mask[[i, 0]] = 1.0;
            } else {
                ids.push(PAD as usize);
            }
        }
        let x = tape.gather_rows(embed, &ids);
        h = gru_step_masked(tape, x, h, &cell, if uniform { None } else { Some(&mask) });
    }
    let z = tape.matmul(h, bound.get("enc.proj.w"));
    tape.add_row(z, bound.get("enc.proj.b"))
}

/// One decoder input sequence conditioned on row `cond` of the
/// conditioning matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeSeq {
    pub tokens: Vec<u32>,
    pub cond: usize,
}

/// Logits (`Σ len × V`) for packed sequences; `cond` is `k×D`.
pub fn graph_decoder_logits(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cond: Var,
    seqs: &[DecodeSeq],
) -> Var {
    let dm = cfg.d_model;
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        assert!(s.tokens.len() <= cfg.max_pos, "decoder sequence longer than max_pos");
        segments.push(Segment {
            start: ids.len(),
            len: s.tokens.len(),
            prefix: s.cond,
        });
        for (p, &t) in s.tokens.iter().enumerate() {
            ids.push(t as usize);
            pos.push(p);
        }
    }
    let tok = tape.gather_rows(bound.get("dec.tok"), &ids);
    let pe = tape.gather_rows(bound.get("dec.pos"), &pos);
    let mut x = tape.add(tok, pe);
    let prefix = tape.matmul(cond, bound.get("dec.wm"));
    for l in 0..cfg.layers {
        let n = |s: &str| bound.get(&format!("dec.l{l}.{s}"));
        let a = tape.layer_norm(x, n("ln1.g"), n("ln1.b"));
        let q = tape.matmul(a, n("wq"));
        let k = tape.matmul(a, n("wk"));
        let v = tape.matmul(a, n("wv"));
        let pk = tape.slice_cols(prefix, 2 * l * dm, dm);
        let pv = tape.slice_cols(prefix, (2 * l + 1) * dm, dm);
        let o = tape.attention(q, k, v, pk, pv, &segments, cfg.heads);
        let o = tape.matmul(o, n("wo"));
        x = tape.add(x, o);
        let f = tape.layer_norm(x, n("ln2.g"), n("ln2.b"));
        let f = tape.matmul(f, n("ff1.w"));
        let f = tape.add_row(f, n("ff1.b"));
        let f = tape.gelu(f);
        let f = tape.matmul(f, n("ff2.w"));
        let f = tape.add_row(f, n("ff2.b"));
        x = tape.add(x, f);
    }
    let x = tape.layer_norm(x, bound.get("dec.lnf.g"), bound.get("dec.lnf.b"));
    tape.matmul(x, bound.get("dec.out"))
}

/// Latent of one line (`1×D`), tokens already chunked to ≤ 64.
pub fn encode_line(model: &Model, tokens: &[u32]) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    Ok(encode_lines(model, &[tokens])?.row(0).insert_axis(Axis(0)).to_owned())
}

/// Latents of several lines (`n×D`).
pub fn encode_lines(model: &Model, lines: &[&[u32]]) -> Result<Mat> {
    if lines.iter().any(|l| l.is_empty()) {
        return Err(Error::EmptyTokens);
    }
    if lines.is_empty() {
        return Ok(Mat::zeros((0, model.config.d_latent)));
    }
    let mut t = Tape::new();
    let b = Bound::constants(&mut t, &model.params);
    let z = graph_encode_lines(&mut t, &b, lines);
    Ok(t.value(z).clone())
}

/// Lowest index of the row maximum.
fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` conditioned on `z_cond` (`1×D`); stops at
/// EOS (not included) or after `max_new` tokens.
pub fn decode_tokens(model: &Model, z_cond: &Mat, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::EmptyTokens);
    }
    if z_cond.dim() != (1, model.config.d_latent) || !z_cond.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("decoder conditioning latent"));
    }
    let mut t = Tape::new();
    let b = Bound::constants(&mut t, &model.params);
    let cond = t.constant(z_cond.clone());
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let budget = max_new.min(model.config.max_pos.saturating_sub(prompt.len()));
    for _ in 0..budget {
        let logits = graph_decoder_logits(
            &mut t,
            &b,
            &model.config,
            cond,
            &[DecodeSeq {
                tokens: seq.clone(),
                cond: 0,
            }],
        );
        let last = t.value(logits).row(seq.len() - 1).to_owned();
        let next = argmax(last.view()) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Input sequence and `(position, target)` pairs for teacher-forced decoding
/// of `target` after `[BOS] prompt`, ending with EOS.
pub fn teacher_forcing(prompt: &[u32], target: &[u32]) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut input = vec![BOS];
    input.extend_from_slice(prompt);
    let start = input.len() - 1;
    input.extend_from_slice(target);
    let mut pairs = Vec::with_capacity(target.len() + 1);
    for (k, &t) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
        pairs.push((start + k, t));
    }
    (input, pairs)
}

/// Per-token autoencoding loss of one line: encode it, then decode it back
/// from `[BOS]` conditioned on its own latent.
pub fn autoencode_loss(model: &Model, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let mut t = Tape::new();
    let b = Bound::constants(&mut t, &model.params);
    let z = graph_encode_lines(&mut t, &b, &[tokens]);
    let (input, pairs) = teacher_forcing(&[], tokens);
    let logits = graph_decoder_logits(&mut t, &b, &model.config, z, &[DecodeSeq { tokens: input, cond: 0 }]);
    let targets: Vec<(usize, usize)> = pairs.iter().map(|&(r, c)| (r, c as usize)).collect();
    let ce = t.cross_entropy(logits, &targets);
    Ok(t.scalar(ce) / targets.len() as f64)
}

/// Autoencoding logits for `tokens` (`(len+1)×V`; row `k` predicts token
/// `k`, the last row predicts EOS).
pub fn autoencode_logits(model: &Model, tokens: &[u32]) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let mut t = Tape::new();
    let b = Bound::constants(&mut t, &model.params);
    let z = graph_encode_lines(&mut t, &b, &[tokens]);
    let (input, _) = teacher_forcing(&[], tokens);
    let logits = graph_decoder_logits(&mut t, &b, &model.config, z, &[DecodeSeq { tokens: input, cond: 0 }]);
    Ok(t.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::{gru_cell_single, GruParams};
    use ndarray::s;

    fn toy() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_embed: 6,
            d_latent: 8,
            d_model: 8,
            layers: 2,
            heads: 2,
            slots: 16,
            max_pos: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_params_give_zero_latent_and_uniform_logits() {
        let m = Model::zeros(toy()).unwrap();
        let z = encode_line(&m, &[5, 6, 7]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let loss = autoencode_loss(&m, &[5, 6, 7]).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn encoder_matches_unrolled_recurrence() {
        let m = Model::new(toy()).unwrap();
        let tokens = [5u32, 9, 3, 7];
        let cell = GruParams::from_store(&m.params, "enc.gru");
        let embed = m.params.get("enc.embed");
        let mut h = Mat::zeros((1, 6));
        for &t in &tokens {
            let x = embed.slice(s![t as usize..t as usize + 1, ..]).to_owned();
            h = gru_cell_single(&x, &h, &cell).unwrap();
        }
        let want = h.dot(m.params.get("enc.proj.w")) + m.params.get("enc.proj.b");
        let got = encode_line(&m, &tokens).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // batching with a shorter line does not change the result
        let both = encode_lines(&m, &[&[8], &tokens]).unwrap();
        for (a, b) in both.row(1).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(encode_line(&m, &tokens).unwrap(), got);
        assert!(matches!(encode_line(&m, &[]), Err(Error::EmptyTokens)));
    }

    #[test]
    fn decoder_is_causal() {
        let m = Model::new(toy()).unwrap();
        let cond = Mat::from_elem((1, 8), 0.3);
        let run = |tokens: Vec<u32>| {
            let mut t = Tape::new();
            let b = Bound::constants(&mut t, &m.params);
            let c = t.constant(cond.clone());
            let l = graph_decoder_logits(&mut t, &b, &m.config, c, &[DecodeSeq { tokens, cond: 0 }]);
            t.value(l).clone()
        };
        let a = run(vec![1, 5, 6, 7]);
        let b = run(vec![1, 5, 9, 10]);
        assert_eq!(a.slice(s![0..2, ..]), b.slice(s![0..2, ..]));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn packed_sequences_do_not_interact() {
        let m = Model::new(toy()).unwrap();
        let mut t = Tape::new();
        let b = Bound::constants(&mut t, &m.params);
        let cond = t.constant(Mat::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.05));
        let seqs = [
            DecodeSeq { tokens: vec![1, 5, 6], cond: 0 },
            DecodeSeq { tokens: vec![1, 7], cond: 1 },
        ];
        let packed = graph_decoder_logits(&mut t, &b, &m.config, cond, &seqs);
        let c1 = t.row(cond, 1);
        let alone = graph_decoder_logits(&mut t, &b, &m.config, c1, &[DecodeSeq { tokens: vec![1, 7], cond: 0 }]);
        let p = t.value(packed).slice(s![3..5, ..]).to_owned();
        for (x, y) in p.iter().zip(t.value(alone).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let m = Model::new(toy()).unwrap();
        let z = Mat::from_elem((1, 8), 0.1);
        assert!(decode_tokens(&m, &z, &[BOS], 0).unwrap().is_empty());
        let a = decode_tokens(&m, &z, &[BOS, 5], 5).unwrap();
        let b = decode_tokens(&m, &z, &[BOS, 5], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
    }

    #[test]
    fn teacher_forcing_layout() {
        let (input, pairs) = teacher_forcing(&[7, 8], &[9]);
        assert_eq!(input, vec![BOS, 7, 8, 9]);
        assert_eq!(pairs, vec![(2, 9), (3, EOS)]);
    }

    #[test]
    fn autoencode_loss_is_non_negative() {
        let m = Model::new(toy()).unwrap();
        for line in [&[5u32][..], &[6, 7, 8], &[9, 9, 9, 9]] {
            assert!(autoencode_loss(&m, line).unwrap() >= 0.0);
        }
        assert_eq!(autoencode_logits(&m, &[5, 6]).unwrap().nrows(), 3);
    }
}
