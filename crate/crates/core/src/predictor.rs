//! Answer predictor and joint objective.
//!
//! The classifier reads the final clue vectors, `ŝ = σ(W_s·[s_J; e_J])`,
//! and abstains when `ŝ` exceeds a threshold. Span boundaries come from
//! `γ = softmax(W_c·p̃_t)` and `η = softmax(W_e·p̃_t)` over the sentinel
//! (position 0) plus the passage; unanswerable examples are trained to put
//! both boundaries on the sentinel.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoder::SENTINEL;
use crate::error::{Error, Result};
use crate::relation::StepTrace;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct PredictorParams {
    /// `2h` classifier vector.
    pub w_s: ParamId,
    /// `h` start-position vector.
    pub w_c: ParamId,
    /// `h` end-position vector.
    pub w_e: ParamId,
}

impl PredictorParams {
    pub fn new(h: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let bound = (3.0 / h as f64).sqrt();
        Ok(PredictorParams {
            w_s: store.add(
                "predictor.w_s",
                Tensor::uniform(vec![2 * h], bound / 2f64.sqrt(), rng),
            )?,
            w_c: store.add("predictor.w_c", Tensor::uniform(vec![h], bound, rng))?,
            w_e: store.add("predictor.w_e", Tensor::uniform(vec![h], bound, rng))?,
        })
    }
}

/// `ŝ = σ(W_s · [s; e])`, a scalar node.
pub fn answerability_score(g: &mut Graph, s: Var, e: Var, w_s: Var) -> Result<Var> {
    let se = g.concat_last(&[s, e])?;
    let prod = g.mul(w_s, se)?;
    let z = g.sum(prod)?;
    g.sigmoid(z)
}

/// Support of γ/η: the sentinel plus every passage position.
pub fn span_mask(len: usize, passage: &Range<usize>) -> Vec<bool> {
    (0..len)
        .map(|t| t == SENTINEL || passage.contains(&t))
        .collect()
}

/// `(γ, η)` over the rows of `p_tilde`, restricted to `mask`.
pub fn span_distributions(
    g: &mut Graph,
    p_tilde: Var,
    mask: &[bool],
    w_c: Var,
    w_e: Var,
) -> Result<(Var, Var)> {
    if !mask.get(SENTINEL).copied().unwrap_or(false) {
        return Err(Error::Data(
            "the sentinel position must be inside the span support".into(),
        ));
    }
    let start_logits = g.matvec(p_tilde, w_c)?;
    let end_logits = g.matvec(p_tilde, w_e)?;
    let gamma = g.masked_softmax(start_logits, mask)?;
    let eta = g.masked_softmax(end_logits, mask)?;
    Ok((gamma, eta))
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut total = first;
    for &t in rest {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f64)
}

/// Mean binary cross-entropy of unanswerable scores; label 1 = unanswerable.
pub fn ans_loss(g: &mut Graph, scores: &[Var], labels: &[u8]) -> Result<Var> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "ans_loss",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let clamped = g.clamp(s, PROB_EPS, 1.0 - PROB_EPS)?;
        let p = match y {
            1 => clamped,
            0 => g.affine_const(clamped, -1.0, 1.0)?,
            other => return Err(Error::Data(format!("label {other} is not 0 or 1"))),
        };
        let ln = g.ln(p)?;
        terms.push(g.scale(ln, -1.0)?);
    }
    mean(g, &terms)
}

/// Mean of `-(ln γ_s + ln η_e)` over the batch.
pub fn span_loss(
    g: &mut Graph,
    gammas: &[Var],
    etas: &[Var],
    starts: &[usize],
    ends: &[usize],
) -> Result<Var> {
    let n = gammas.len();
    if etas.len() != n || starts.len() != n || ends.len() != n {
        return Err(Error::shape(
            "span_loss",
            "batch components differ in length",
        ));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let mut nll = Vec::with_capacity(2);
        for (dist, pos) in [(gammas[i], starts[i]), (etas[i], ends[i])] {
            let probs = g.value(dist);
            if pos >= probs.len() || probs[pos] == 0.0 {
                return Err(Error::Data(format!(
                    "gold position {pos} lies outside the span support"
                )));
            }
            let p = g.pick(dist, pos)?;
            let p = g.clamp(p, PROB_EPS, 1.0)?;
            let ln = g.ln(p)?;
            nll.push(g.scale(ln, -1.0)?);
        }
        terms.push(g.add(nll[0], nll[1])?);
    }
    mean(g, &terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub span: f64,
    pub ans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            span: 0.7,
            ans: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(span: f64, ans: f64) -> Result<Self> {
        let w = LossWeights { span, ans };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.span >= 0.0 && self.ans >= 0.0) || !self.span.is_finite() || !self.ans.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got ({}, {})",
                self.span, self.ans
            )));
        }
        Ok(())
    }
}

/// `λ₁ L_span + λ₂ L_ans` on the graph.
pub fn joint_loss(g: &mut Graph, span: Var, ans: Var, weights: LossWeights) -> Result<Var> {
    weights.validate()?;
    let a = g.scale(span, weights.span)?;
    let b = g.scale(ans, weights.ans)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub span: f64,
    pub ans: f64,
    pub joint: f64,
    pub lambda_span: f64,
    pub lambda_ans: f64,
}

impl LossBreakdown {
    pub fn new(span: f64, ans: f64, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        if !(span.is_finite() && ans.is_finite()) {
            return Err(Error::NonFinite(format!("loss components ({span}, {ans})")));
        }
        Ok(LossBreakdown {
            span,
            ans,
            joint: weights.span * span + weights.ans * ans,
            lambda_span: weights.span,
            lambda_ans: weights.ans,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Answerable,
    Unanswerable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub threshold: f64,
    pub max_answer_len: usize,
    /// Also abstain when `γ₀·η₀` beats the best span. Off by default.
    pub sentinel_vote: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            threshold: 0.3,
            max_answer_len: 30,
            sentinel_vote: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Unanswerable score ŝ.
    pub score: f64,
    pub decision: Decision,
    /// Inclusive `[start, end]` joint-sequence positions.
    pub span: Option<(usize, usize)>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub traces: Vec<StepTrace>,
    /// No feasible span existed (empty passage).
    pub degenerate: bool,
}

/// Highest `γ_s·η_e` with `s <= e`, `e - s + 1 <= max_len`, both inside
/// `passage`. Ties go to the smallest `(s, e)`.
pub fn best_span(
    gamma: &[f64],
    eta: &[f64],
    passage: &Range<usize>,
    max_len: usize,
) -> Option<(usize, usize, f64)> {
    let end = passage.end.min(gamma.len()).min(eta.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for s in passage.start..end {
        if s == SENTINEL {
            continue;
        }
        for e in s..end.min(s + max_len) {
            let v = gamma[s] * eta[e];
            if best.is_none_or(|(_, _, b)| v > b) {
                best = Some((s, e, v));
            }
        }
    }
    best
}

pub fn decode_answer(
    score: f64,
    gamma: &[f64],
    eta: &[f64],
    passage: &Range<usize>,
    opts: &DecodeOptions,
) -> Prediction {
    let mut pred = Prediction {
        score,
        decision: Decision::Unanswerable,
        span: None,
        gamma: gamma.to_vec(),
        eta: eta.to_vec(),
        traces: Vec::new(),
        degenerate: false,
    };
    if score > opts.threshold {
        return pred;
    }
    match best_span(gamma, eta, passage, opts.max_answer_len) {
        None => pred.degenerate = true,
        Some((s, e, v)) => {
            let sentinel = gamma.get(SENTINEL).copied().unwrap_or(0.0)
                * eta.get(SENTINEL).copied().unwrap_or(0.0);
            if !(opts.sentinel_vote && sentinel > v) {
                pred.decision = Decision::Answerable;
                pred.span = Some((s, e));
            }
        }
    }
    pred
}
