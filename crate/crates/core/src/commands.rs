//! Entry points behind the `mcrnet` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::data::{
    build_vocab, generate_synthetic, load_squad_json, process, save_squad_json, training_set,
    ProcessedExample, SyntheticSpec,
};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::inference::{gold_records, run_inference, ExampleOutput, PredictionLine};
use crate::metrics::{evaluate_dataset, threshold_sweep, EvalReport, PredictionRecord, SweepRow};
use crate::train::{train, EpochLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset in SQuAD format; returns the example count.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<usize> {
    let examples = generate_synthetic(spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_squad_json(out, &examples, "synthetic")?;
    Ok(examples.len())
}

fn load_processed(path: &Path, vocab: &Vocab) -> Result<Vec<ProcessedExample>> {
    Ok(load_squad_json(path)?
        .iter()
        .map(|r| process(r, vocab))
        .collect())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochLog>,
    pub best_dev: Option<EvalReport>,
    pub trained_on: usize,
    pub flagged: usize,
    pub truncated_away: usize,
}

/// Trains on `config.train_path`, writing `config.txt`, `train_log.jsonl`,
/// `model.ckpt` and `vocab.txt` into `out_dir`.
pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    let train_path = config
        .train_path
        .as_deref()
        .ok_or_else(|| Error::Config("train_path is not set".into()))?;
    let raws = load_squad_json(train_path)?;
    let vocab = build_vocab(&raws);
    let examples: Vec<ProcessedExample> = raws.iter().map(|r| process(r, &vocab)).collect();
    let set = training_set(&examples, config.max_len)?;
    let dev = match &config.dev_path {
        Some(p) => Some(load_processed(p, &vocab)?),
        None => None,
    };

    create_dir(out_dir)?;
    config.save(&out_dir.join(CONFIG_FILE))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(config, vocab.len(), &set, dev.as_deref(), Some(&mut log))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_model(&checkpoint, &outcome.net, config, outcome.step, &vocab)?;
    Ok(TrainSummary {
        checkpoint,
        history: outcome.history,
        best_dev: outcome.best_dev,
        trained_on: set.items.len(),
        flagged: set.flagged,
        truncated_away: set.truncated_away,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub sweep: Vec<SweepRow>,
}

fn score(
    checkpoint: &Path,
    data: &Path,
    threshold: Option<f64>,
) -> Result<(RunConfig, Vec<ProcessedExample>, Vec<ExampleOutput>)> {
    let (net, mut config, vocab) = load_model(checkpoint)?;
    if let Some(t) = threshold {
        config.set("threshold", &t.to_string())?;
    }
    let examples = load_processed(data, &vocab)?;
    let outputs = run_inference(&net, &examples, config.max_len, &config.decode_options())?;
    Ok((config, examples, outputs))
}

/// `out.config.txt` for a file output `out`.
pub fn config_echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.txt")
}

/// Evaluates a checkpoint on gold data at the checkpoint's threshold or
/// `threshold`, plus the unanswerable P/R/F1 at every `sweep` threshold.
/// With `out`, writes the report as JSON there and the resolved config
/// beside it.
pub fn cmd_eval(
    checkpoint: &Path,
    gold: &Path,
    threshold: Option<f64>,
    sweep: &[f64],
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let (config, examples, outputs) = score(checkpoint, gold, threshold)?;
    let records: Vec<PredictionRecord> = outputs.iter().map(ExampleOutput::record).collect();
    let golds = gold_records(&examples);
    let report = evaluate_dataset(&records, &golds, &config.metric_options())?;
    let sweep = threshold_sweep(&records, &golds, sweep, config.rouge_beta)?;
    let result = EvalOutput { report, sweep };
    if let Some(out) = out {
        write_json(out, &result)?;
        config.save(&config_echo_path(out))?;
    }
    Ok(result)
}

/// Writes one JSON line per question and the resolved config beside the
/// file; returns the count.
pub fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    threshold: Option<f64>,
) -> Result<usize> {
    let (config, _, outputs) = score(checkpoint, data, threshold)?;
    config.save(&config_echo_path(out))?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for o in &outputs {
        let line = serde_json::to_string(&PredictionLine::from(o)).expect("prediction serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(outputs.len())
}

pub const ABLATIONS: [(&str, usize); 3] = [
    ("Complete Model", 2),
    ("- Relation Block", 1),
    ("- Stacked Relation Blocks", 0),
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub steps: usize,
    pub report: EvalReport,
}

/// Trains and evaluates J = 2, 1, 0 with otherwise identical configs and
/// seeds. Needs `train_path` and `dev_path`. Each run's artifacts go to
/// `out_dir/j{J}`.
pub fn cmd_ablate(config: &RunConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let dev_path = config
        .dev_path
        .clone()
        .ok_or_else(|| Error::Config("ablation needs dev_path".into()))?;
    create_dir(out_dir)?;
    config.save(&out_dir.join(CONFIG_FILE))?;
    let mut rows = Vec::with_capacity(ABLATIONS.len());
    for (label, steps) in ABLATIONS {
        let mut cfg = config.clone();
        cfg.steps = steps;
        let run_dir = out_dir.join(format!("j{steps}"));
        let summary = cmd_train(&cfg, &run_dir)?;
        let eval = cmd_eval(&summary.checkpoint, &dev_path, None, &[], None)?;
        rows.push(AblationRow {
            model: label.to_string(),
            steps,
            report: eval.report,
        });
    }
    write_json(&out_dir.join("ablation.json"), &rows)?;
    fs::write(out_dir.join("ablation.txt"), ablation_table(&rows))
        .map_err(|e| Error::io(out_dir, e))?;
    Ok(rows)
}

/// EM, F1 and ROUGE-L per row with deltas against the first row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<27} {:>3} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "Model", "J", "EM", "ΔEM", "F1", "ROUGE-L", "ΔR-L"
    );
    let base = rows.first().map(|r| (r.report.em, r.report.rouge_l));
    for (i, r) in rows.iter().enumerate() {
        let (dem, drl) = match (i, base) {
            (0, _) | (_, None) => ("-".to_string(), "-".to_string()),
            (_, Some((em, rl))) => (
                format!("{:+.2}", 100.0 * (r.report.em - em)),
                format!("{:+.2}", 100.0 * (r.report.rouge_l - rl)),
            ),
        };
        out.push_str(&format!(
            "{:<27} {:>3} {:>7.2} {:>7} {:>7.2} {:>7.2} {:>7}\n",
            r.model,
            r.steps,
            100.0 * r.report.em,
            dem,
            100.0 * r.report.f1,
            100.0 * r.report.rouge_l,
            drl
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepAttention {
    pub step: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionExample {
    pub id: String,
    /// Joint-sequence tokens, `[CLS]` first.
    pub tokens: Vec<String>,
    pub steps: Vec<StepAttention>,
    pub prediction: PredictionLine,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub relation_steps: usize,
    pub examples: Vec<AttentionExample>,
}

fn joint_tokens(ex: &ProcessedExample, out: &ExampleOutput) -> Vec<String> {
    let joint = &out.input.joint;
    let mut tokens = vec!["[CLS]".to_string()];
    let q = crate::encoder::tokenize(&ex.question);
    tokens.extend(q.iter().take(joint.question_len()).map(|t| t.text.clone()));
    tokens.push("[SEP]".into());
    tokens.extend(
        ex.passage_tokens
            .iter()
            .take(joint.passage.len())
            .map(|t| t.text.clone()),
    );
    tokens.push("[SEP]".into());
    tokens
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| x.is_nan() || *x < 0.0) {
        return Err(Error::NonFinite(format!(
            "{what} is not a distribution (sum {sum})"
        )));
    }
    Ok(())
}

/// Dumps α/β of every relation step for the first `limit` examples of
/// `data` to `out_dir/attention.json`; with `images`, also one PGM heatmap
/// per example and step.
pub fn cmd_attn(
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
    images: bool,
    limit: Option<usize>,
) -> Result<AttentionDump> {
    let (net, config, vocab) = load_model(checkpoint)?;
    if config.steps == 0 {
        return Err(Error::Config(
            "the checkpoint has no relation blocks (steps = 0), so there are no α/β traces to export".into(),
        ));
    }
    let mut examples = load_processed(data, &vocab)?;
    if let Some(n) = limit {
        examples.truncate(n);
    }
    let outputs = run_inference(&net, &examples, config.max_len, &config.decode_options())?;
    create_dir(out_dir)?;
    config.save(&out_dir.join(CONFIG_FILE))?;
    let mut dump = AttentionDump {
        relation_steps: config.steps,
        examples: Vec::with_capacity(outputs.len()),
    };
    for (ex, out) in examples.iter().zip(&outputs) {
        let tokens = joint_tokens(ex, out);
        let mut steps = Vec::with_capacity(config.steps);
        for t in &out.prediction.traces {
            check_distribution(&t.alpha, &format!("{} step {} alpha", ex.id, t.step))?;
            check_distribution(&t.beta, &format!("{} step {} beta", ex.id, t.step))?;
            if t.alpha.len() != tokens.len() || t.beta.len() != tokens.len() {
                return Err(Error::shape(
                    "attention_dump",
                    format!(
                        "{}: {} tokens, {} weights",
                        ex.id,
                        tokens.len(),
                        t.alpha.len()
                    ),
                ));
            }
            steps.push(StepAttention {
                step: t.step + 1,
                alpha: t.alpha.clone(),
                beta: t.beta.clone(),
            });
        }
        if images {
            for s in &steps {
                let path = out_dir.join(format!("{}_step{}.pgm", sanitize(&ex.id), s.step));
                fs::write(&path, heatmap_pgm(&[&s.alpha, &s.beta], 8))
                    .map_err(|e| Error::io(&path, e))?;
            }
        }
        dump.examples.push(AttentionExample {
            id: ex.id.clone(),
            tokens,
            steps,
            prediction: PredictionLine::from(out),
        });
    }
    write_json(&out_dir.join("attention.json"), &dump)?;
    Ok(dump)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Binary PGM of `rows`, each value a `cell x cell` block scaled so the
/// largest value is white.
pub fn heatmap_pgm(rows: &[&[f64]], cell: usize) -> Vec<u8> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let max = rows
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, &v| m.max(v));
    let (w, h) = (cols * cell, rows.len() * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in rows {
        let mut line = Vec::with_capacity(w);
        for c in 0..cols {
            let v = row.get(c).copied().unwrap_or(0.0);
            let px = if max > 0.0 {
                (255.0 * v / max).round() as u8
            } else {
                0
            };
            line.extend(std::iter::repeat_n(px, cell));
        }
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    out
}
