//! Evaluation metrics: SQuAD-style EM and token F1, ROUGE-L, BLEU-4 and
//! precision/recall/F1 of the unanswerable class.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let mut no_articles = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !matches!(word.as_str(), "a" | "an" | "the") {
            out.push_str(word);
        } else {
            out.push(' ');
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut no_articles);
            no_articles.push(c);
        }
    }
    flush(&mut word, &mut no_articles);
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_text(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF | 0x3000..=0x303F | 0xFF00..=0xFFEF)
}

/// Normalized tokens with CJK text split into single characters; used by
/// the sequence metrics.
pub fn metric_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for tok in normalize_text(s).split_whitespace() {
        let mut cur = String::new();
        for c in tok.chars() {
            if is_cjk(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Gold texts for scoring; an empty list means "no answer", scored against
/// the empty string.
fn golds_or_empty(golds: &[String]) -> Vec<&str> {
    if golds.is_empty() {
        vec![""]
    } else {
        golds.iter().map(String::as_str).collect()
    }
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_text(pred);
    let hit = golds_or_empty(golds).iter().any(|g| normalize_text(g) == p);
    if hit {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalized_tokens(pred);
    let g = normalized_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / p.len() as f64;
    let recall = same as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1, maximized over golds.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    golds_or_empty(golds)
        .iter()
        .map(|g| f1_single(pred, g))
        .fold(0.0, f64::max)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)`; 0 when either side is empty.
pub fn rouge_l<T: PartialEq>(pred: &[T], gold: &[T], beta: f64) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, gold);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / gold.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Cumulative 4-gram BLEU against one reference, uniform weights, brevity
/// penalty, add-one smoothing for n ≥ 2.
pub fn bleu4<T: Eq + std::hash::Hash>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p_counts = ngram_counts(pred, n);
        let g_counts = ngram_counts(gold, n);
        let total: usize = p_counts.values().sum();
        let matched: usize = p_counts
            .iter()
            .map(|(k, &c)| c.min(g_counts.get(k).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += 0.25 * precision.ln();
    }
    let (c, r) = (pred.len() as f64, gold.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts of the unanswerable class; positive = predicted unanswerable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted_unanswerable: bool, gold_unanswerable: bool) {
        match (predicted_unanswerable, gold_unanswerable) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Zero denominators give zero.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// P/R/F1 of abstention decisions `score > threshold` over
/// `(score, gold_unanswerable)` pairs.
pub fn unanswerable_prf(items: &[(f64, bool)], threshold: f64) -> Prf {
    let mut c = Confusion::default();
    for &(score, gold) in items {
        c.add(score > threshold, gold);
    }
    c.prf()
}

/// A scored prediction. `answer` is the best span's text, `None` when no
/// span could be decoded or the prediction file recorded an abstention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub score: f64,
    pub answer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    /// Empty for unanswerable questions.
    pub answers: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub threshold: f64,
    pub rouge_beta: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            threshold: 0.3,
            rouge_beta: DEFAULT_ROUGE_BETA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
    pub unanswerable: Prf,
    /// Fraction of questions whose answer/abstain decision is right.
    pub answerability_accuracy: f64,
    /// EM and F1 restricted to answerable gold questions.
    pub answerable_em: f64,
    pub answerable_f1: f64,
    pub total: usize,
    pub answered: usize,
    pub abstained: usize,
    pub threshold: f64,
}

/// Per-question scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleScores {
    pub em: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
    pub abstained: bool,
}

/// Scores one question. Abstaining on an unanswerable question scores 1 on
/// every text metric; any other pairing of abstention and gold scores 0.
pub fn score_example(answer: Option<&str>, golds: &[String], beta: f64) -> ExampleScores {
    let gold_unanswerable = golds.is_empty();
    match answer {
        None => {
            let v = if gold_unanswerable { 1.0 } else { 0.0 };
            ExampleScores {
                em: v,
                f1: v,
                rouge_l: v,
                bleu4: v,
                abstained: true,
            }
        }
        Some(text) if gold_unanswerable => ExampleScores {
            em: exact_match(text, golds),
            f1: token_f1(text, golds),
            rouge_l: 0.0,
            bleu4: 0.0,
            abstained: false,
        },
        Some(text) => {
            let p = metric_tokens(text);
            let seq = |f: &dyn Fn(&[String], &[String]) -> f64| {
                golds
                    .iter()
                    .map(|g| f(&p, &metric_tokens(g)))
                    .fold(0.0, f64::max)
            };
            ExampleScores {
                em: exact_match(text, golds),
                f1: token_f1(text, golds),
                rouge_l: seq(&|a, b| rouge_l(a, b, beta)),
                bleu4: seq(&|a, b| bleu4(a, b)),
                abstained: false,
            }
        }
    }
}

/// Aggregates every metric over `golds`. A gold id without a prediction
/// counts as an answered, wrong prediction; predictions for unknown ids
/// are ignored.
pub fn evaluate_dataset(
    predictions: &[PredictionRecord],
    golds: &[GoldRecord],
    opts: &MetricOptions,
) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Data(format!("duplicate prediction id {:?}", p.id)));
        }
    }
    let mut seen = HashSet::with_capacity(golds.len());
    let mut report = EvalReport {
        threshold: opts.threshold,
        total: golds.len(),
        ..Default::default()
    };
    let mut confusion = Confusion::default();
    let mut n_answerable = 0usize;
    let mut correct_decisions = 0usize;
    for gold in golds {
        if !seen.insert(gold.id.as_str()) {
            return Err(Error::Data(format!("duplicate gold id {:?}", gold.id)));
        }
        let gold_unanswerable = gold.answers.is_empty();
        let scores = match by_id.get(gold.id.as_str()) {
            Some(p) => {
                let answer = if p.score > opts.threshold {
                    None
                } else {
                    p.answer.as_deref()
                };
                score_example(answer, &gold.answers, opts.rouge_beta)
            }
            None => ExampleScores {
                em: 0.0,
                f1: 0.0,
                rouge_l: 0.0,
                bleu4: 0.0,
                abstained: false,
            },
        };
        confusion.add(scores.abstained, gold_unanswerable);
        if scores.abstained == gold_unanswerable {
            correct_decisions += 1;
        }
        if scores.abstained {
            report.abstained += 1;
        } else {
            report.answered += 1;
        }
        if !gold_unanswerable {
            n_answerable += 1;
            report.answerable_em += scores.em;
            report.answerable_f1 += scores.f1;
        }
        report.em += scores.em;
        report.f1 += scores.f1;
        report.rouge_l += scores.rouge_l;
        report.bleu4 += scores.bleu4;
    }
    if report.total > 0 {
        let n = report.total as f64;
        report.em /= n;
        report.f1 /= n;
        report.rouge_l /= n;
        report.bleu4 /= n;
        report.answerability_accuracy = correct_decisions as f64 / n;
    }
    if n_answerable > 0 {
        report.answerable_em /= n_answerable as f64;
        report.answerable_f1 /= n_answerable as f64;
    }
    report.unanswerable = confusion.prf();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn threshold_sweep(
    predictions: &[PredictionRecord],
    golds: &[GoldRecord],
    thresholds: &[f64],
    beta: f64,
) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let r = evaluate_dataset(
                predictions,
                golds,
                &MetricOptions {
                    threshold,
                    rouge_beta: beta,
                },
            )?;
            Ok(SweepRow {
                threshold,
                precision: r.unanswerable.precision,
                recall: r.unanswerable.recall,
                f1: r.unanswerable.f1,
            })
        })
        .collect()
}

impl EvalReport {
    /// Two-column plain-text table.
    pub fn to_table(&self) -> String {
        let rows: [(&str, String); 14] = [
            ("EM", format!("{:.4}", self.em)),
            ("F1", format!("{:.4}", self.f1)),
            ("ROUGE-L", format!("{:.4}", self.rouge_l)),
            ("BLEU-4", format!("{:.4}", self.bleu4)),
            (
                "NoAns precision",
                format!("{:.4}", self.unanswerable.precision),
            ),
            ("NoAns recall", format!("{:.4}", self.unanswerable.recall)),
            ("NoAns F1", format!("{:.4}", self.unanswerable.f1)),
            (
                "Answerability acc",
                format!("{:.4}", self.answerability_accuracy),
            ),
            ("HasAns EM", format!("{:.4}", self.answerable_em)),
            ("HasAns F1", format!("{:.4}", self.answerable_f1)),
            ("Total", self.total.to_string()),
            ("Answered", self.answered.to_string()),
            ("Abstained", self.abstained.to_string()),
            ("Threshold", format!("{}", self.threshold)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("The Cat!"), "cat");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  an   apple, a day "), "apple day");
        assert_eq!(normalize_text("theatre"), "theatre");
    }

    #[test]
    fn unanswerable_gold_requires_empty_prediction() {
        assert_eq!(exact_match("", &[]), 1.0);
        assert_eq!(token_f1("", &[]), 1.0);
        assert_eq!(exact_match("x", &[]), 0.0);
    }

    #[test]
    fn rouge_hand_case() {
        let p = s(&["a", "b", "c", "d"]);
        let g = s(&["a", "c", "d"]);
        let (pr, r, b2) = (0.75, 1.0, 1.44);
        let expected = (1.0 + b2) * pr * r / (r + b2 * pr);
        assert!((rouge_l(&p, &g, 1.2) - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_empty() {
        let p = s(&["one", "two", "three", "four", "five"]);
        assert!((bleu4(&p, &p) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&[] as &[String], &p), 0.0);
    }

    #[test]
    fn cjk_is_split_per_character() {
        assert_eq!(
            metric_tokens("北京大学 ok"),
            s(&["北", "京", "大", "学", "ok"])
        );
    }

    #[test]
    fn duplicate_prediction_ids_error() {
        let p = PredictionRecord {
            id: "a".into(),
            score: 0.0,
            answer: Some("x".into()),
        };
        let r = evaluate_dataset(&[p.clone(), p], &[], &MetricOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn table_lists_every_metric() {
        let t = EvalReport::default().to_table();
        assert_eq!(t.lines().count(), 14);
    }
}
