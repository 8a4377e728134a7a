//! Free-running decoding with greedy and beam search.
//!
//! These run on plain tensors rather than the tape: nothing here is
//! differentiated, and hypotheses branch step by step.

use super::ModelBundle;
use crate::autodiff::{tensor, Tensor};
use crate::error::{Error, Result};
use crate::toyworld::{END, START};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    TeacherForcing,
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Most tokens emitted, `<end>` included.
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { mode: DecodeMode::Greedy, beam_width: 1, max_len }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        Self { mode: DecodeMode::Beam, beam_width: width, max_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(format!("beam width and max length must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// A generated sequence without `<start>`, ending in `<end>` unless the
/// length limit cut it off, and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Decoder weights with the embedding already projected to the hidden size.
struct Cell<'a> {
    table: Tensor,
    wh: &'a Tensor,
    b: &'a Tensor,
    wo: &'a Tensor,
    bo: &'a Tensor,
    hidden: usize,
    vocab: usize,
}

impl<'a> Cell<'a> {
    fn new(m: &'a ModelBundle) -> Result<Self> {
        let s = &m.store;
        Ok(Self {
            table: tensor::matmul(s.get(m.h.emb), s.get(m.h.wx))?,
            wh: s.get(m.h.wh),
            b: s.get(m.h.b),
            wo: s.get(m.h.wo),
            bo: s.get(m.h.bo),
            hidden: m.dims.dec_hidden,
            vocab: m.dims.vocab,
        })
    }

    fn initial(m: &ModelBundle, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != m.dims.latent {
            return Err(Error::ShapeMismatch { op: "decode_caption", lhs: vec![z.len()], rhs: vec![m.dims.latent] });
        }
        let s = &m.store;
        let mut h = vec![0.0; m.dims.dec_hidden];
        tensor::matmul_into(z, s.get(m.h.wz).data(), &mut h, 1, z.len(), m.dims.dec_hidden);
        for (v, b) in h.iter_mut().zip(s.get(m.h.bz).data()) {
            *v = (*v + b).tanh();
        }
        Ok(h)
    }

    /// New hidden state and next-token log-probabilities.
    fn step(&self, h: &[f64], token: usize) -> (Vec<f64>, Vec<f64>) {
        let mut r = vec![0.0; self.hidden];
        tensor::matmul_into(h, self.wh.data(), &mut r, 1, self.hidden, self.hidden);
        let x = self.table.row_slice(token);
        let next: Vec<f64> = (0..self.hidden).map(|i| (x[i] + r[i] + self.b.data()[i]).tanh()).collect();
        let mut logits = vec![0.0; self.vocab];
        tensor::matmul_into(&next, self.wo.data(), &mut logits, 1, self.hidden, self.vocab);
        for (l, b) in logits.iter_mut().zip(self.bo.data()) {
            *l += b;
        }
        (next, tensor::log_softmax(&logits))
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    h: Vec<f64>,
    log_prob: f64,
    done: bool,
}

fn greedy(cell: &Cell, h0: Vec<f64>, max_len: usize) -> Decoded {
    let mut h = h0;
    let mut prev = START;
    let mut out = Decoded { tokens: Vec::new(), log_prob: 0.0 };
    for _ in 0..max_len {
        let (next, lp) = cell.step(&h, prev);
        // First maximum wins, so ties go to the lowest token id.
        let (tok, best) = lp.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        out.tokens.push(tok);
        out.log_prob += best;
        if tok == END {
            break;
        }
        h = next;
        prev = tok;
    }
    out
}

fn beam_fixed(cell: &Cell, h0: &[f64], width: usize, max_len: usize) -> Decoded {
    let mut beams = vec![Hypothesis { tokens: Vec::new(), h: h0.to_vec(), log_prob: 0.0, done: false }];
    for _ in 0..max_len {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for b in &beams {
            if b.done {
                cands.push(b.clone());
                continue;
            }
            let prev = b.tokens.last().copied().unwrap_or(START);
            let (next, lp) = cell.step(&b.h, prev);
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(tok);
                cands.push(Hypothesis { tokens, h: next.clone(), log_prob: b.log_prob + l, done: tok == END });
            }
        }
        // Stable sort keeps earlier beams and lower tokens first on ties.
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        cands.truncate(width);
        beams = cands;
        if beams.iter().all(|b| b.done) {
            break;
        }
    }
    let best = &beams[0];
    Decoded { tokens: best.tokens.clone(), log_prob: best.log_prob }
}

pub(super) fn decode(m: &ModelBundle, z: &[f64], cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let cell = Cell::new(m)?;
    let h0 = Cell::initial(m, z)?;
    match cfg.mode {
        DecodeMode::TeacherForcing => Err(Error::InvalidArgument(
            "teacher forcing needs a target; use ModelBundle::decode_teacher".into(),
        )),
        DecodeMode::Greedy => Ok(greedy(&cell, h0, cfg.max_len)),
        DecodeMode::Beam => {
            // Fixed-width beam search is not monotone in the width, so the
            // best result over widths 1..=w is returned.
            let mut best = greedy(&cell, h0.clone(), cfg.max_len);
            for w in 2..=cfg.beam_width {
                let d = beam_fixed(&cell, &h0, w, cfg.max_len);
                if d.log_prob > best.log_prob {
                    best = d;
                }
            }
            Ok(best)
        }
    }
}

pub(super) fn sequence_log_prob(m: &ModelBundle, z: &[f64], tokens: &[usize]) -> Result<f64> {
    if let Some(t) = tokens.iter().find(|t| **t >= m.dims.vocab) {
        return Err(Error::InvalidArgument(format!("token {t} outside vocabulary")));
    }
    let cell = Cell::new(m)?;
    let mut h = Cell::initial(m, z)?;
    let mut prev = START;
    let mut total = 0.0;
    for &t in tokens {
        let (next, lp) = cell.step(&h, prev);
        total += lp[t];
        h = next;
        prev = t;
    }
    Ok(total)
}
