//! Running a trained network over processed examples.

use serde::Serialize;

use crate::data::ProcessedExample;
use crate::error::Result;
use crate::metrics::{evaluate_dataset, EvalReport, GoldRecord, MetricOptions, PredictionRecord};
use crate::model::{McrNet, ModelInput};
use crate::predictor::{decode_answer, Decision, DecodeOptions, Prediction};

#[derive(Clone, Debug)]
pub struct ExampleOutput {
    pub id: String,
    pub input: ModelInput,
    /// Decision at the requested threshold.
    pub prediction: Prediction,
    /// Highest-scoring feasible span regardless of the threshold.
    pub best_span: Option<(usize, usize)>,
    /// Text and char range of `best_span`.
    pub best_text: Option<(String, usize, usize)>,
}

impl ExampleOutput {
    pub fn answer(&self) -> Option<&(String, usize, usize)> {
        match self.prediction.decision {
            Decision::Answerable => self.best_text.as_ref(),
            Decision::Unanswerable => None,
        }
    }

    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.id.clone(),
            score: self.prediction.score,
            answer: self.best_text.as_ref().map(|(t, _, _)| t.clone()),
        }
    }
}

pub fn run_example(
    net: &McrNet,
    ex: &ProcessedExample,
    max_len: usize,
    opts: &DecodeOptions,
) -> Result<ExampleOutput> {
    let input = ex.model_input(max_len)?;
    let open = DecodeOptions {
        threshold: f64::INFINITY,
        sentinel_vote: false,
        ..*opts
    };
    let full = net.predict(&input, &open)?;
    let mut prediction = decode_answer(
        full.score,
        &full.gamma,
        &full.eta,
        &input.joint.passage,
        opts,
    );
    prediction.traces = full.traces;
    let best_text = match full.span {
        Some((s, e)) => Some(ex.span_text(&input, s, e)?),
        None => None,
    };
    Ok(ExampleOutput {
        id: ex.id.clone(),
        input,
        prediction,
        best_span: full.span,
        best_text,
    })
}

pub fn run_inference(
    net: &McrNet,
    examples: &[ProcessedExample],
    max_len: usize,
    opts: &DecodeOptions,
) -> Result<Vec<ExampleOutput>> {
    examples
        .iter()
        .map(|ex| run_example(net, ex, max_len, opts))
        .collect()
}

pub fn gold_records(examples: &[ProcessedExample]) -> Vec<GoldRecord> {
    examples
        .iter()
        .map(|e| GoldRecord {
            id: e.id.clone(),
            answers: e.answers.clone(),
        })
        .collect()
}

pub fn evaluate(
    net: &McrNet,
    examples: &[ProcessedExample],
    max_len: usize,
    decode: &DecodeOptions,
    metrics: &MetricOptions,
) -> Result<EvalReport> {
    let outputs = run_inference(net, examples, max_len, decode)?;
    let records: Vec<PredictionRecord> = outputs.iter().map(ExampleOutput::record).collect();
    evaluate_dataset(&records, &gold_records(examples), metrics)
}

/// One line of the prediction file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionLine {
    pub id: String,
    pub score: f64,
    pub answer_text: Option<String>,
    /// Char offsets of the answer in the passage, end exclusive.
    pub start: Option<usize>,
    pub end: Option<usize>,
}

impl From<&ExampleOutput> for PredictionLine {
    fn from(o: &ExampleOutput) -> Self {
        let answer = o.answer();
        PredictionLine {
            id: o.id.clone(),
            score: o.prediction.score,
            answer_text: answer.map(|a| a.0.clone()),
            start: answer.map(|a| a.1),
            end: answer.map(|a| a.2),
        }
    }
}
