//! Training loop.

use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{make_batches, ProcessedExample, TrainingSet};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::metrics::EvalReport;
use crate::model::{McrNet, ModelInput, Target};
use crate::predictor::LossBreakdown;
use crate::tensor::{Adam, AdamConfig, Gradients, Rng};

const SHUFFLE_STREAM: u64 = 1_000;
const DROPOUT_STREAM: u64 = 2_000;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss_span: f64,
    pub loss_ans: f64,
    pub loss_joint: f64,
    pub dev: Option<EvalReport>,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-dev parameters (the final ones without a dev set), rounded to
    /// checkpoint precision.
    pub net: McrNet,
    /// Optimizer steps taken when `net` was captured.
    pub step: u64,
    pub total_steps: u64,
    pub history: Vec<EpochLog>,
    pub best_dev: Option<EvalReport>,
}

fn check_gradients(grads: &Gradients, net: &McrNet, context: &str) -> Result<()> {
    for id in net.store.ids() {
        if let Some(g) = grads.get(id) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{context}: gradient of {}",
                    net.store.get(id).name
                )));
            }
        }
    }
    Ok(())
}

/// One optimizer step on `batch`.
pub fn train_step(
    net: &mut McrNet,
    adam: &mut Adam,
    batch: &[(&ModelInput, &Target)],
    drop: Option<&mut Dropout>,
    context: &str,
) -> Result<LossBreakdown> {
    let (loss, grads) = net.batch_gradients(batch, drop).map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{context}: {msg}")),
        other => other,
    })?;
    if !loss.joint.is_finite() {
        return Err(Error::NonFinite(format!("{context}: loss {}", loss.joint)));
    }
    check_gradients(&grads, net, context)?;
    net.store.zero_grad();
    net.store.accumulate(&grads);
    adam.step(&mut net.store)?;
    Ok(loss)
}

/// Trains for `config.epochs` epochs, evaluating on `dev` after each one and
/// keeping the parameters with the best dev F1. Each epoch's log line is
/// written to `log` as JSON.
pub fn train(
    config: &RunConfig,
    vocab_size: usize,
    data: &TrainingSet,
    dev: Option<&[ProcessedExample]>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if data.items.is_empty() {
        return Err(Error::Data("no trainable examples".into()));
    }
    let root = Rng::new(config.seed);
    let mut net = McrNet::new(config.model_config(vocab_size)?, &mut root.derive(0))?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &net.store);
    let mut best: Option<(McrNet, u64, EvalReport)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let shuffle = root.derive(SHUFFLE_STREAM + epoch as u64).next_u64();
        let batches = make_batches(&data.items, config.batch_size, Some(shuffle))?;
        let mut drop = (config.dropout > 0.0).then(|| Dropout {
            rate: config.dropout,
            rng: root.derive(DROPOUT_STREAM + epoch as u64),
        });
        let (mut span, mut ans, mut seen) = (0.0, 0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let context = format!("epoch {epoch}, batch {b} (examples {:?})", batch.indices);
            let loss = train_step(&mut net, &mut adam, &batch.pairs(), drop.as_mut(), &context)?;
            span += loss.span * batch.len() as f64;
            ans += loss.ans * batch.len() as f64;
            seen += batch.len();
        }
        let epoch_loss = LossBreakdown::new(
            span / seen as f64,
            ans / seen as f64,
            config.loss_weights()?,
        )?;

        let mut snapshot = net.clone();
        snapshot.store.round_to_f32();
        let dev_report = match dev {
            Some(dev) => Some(evaluate(
                &snapshot,
                dev,
                config.max_len,
                &config.decode_options(),
                &config.metric_options(),
            )?),
            None => None,
        };
        let is_best = match (&dev_report, &best) {
            (Some(r), Some((_, _, b))) => r.f1 > b.f1,
            _ => true,
        };
        if is_best {
            let report = dev_report.clone().unwrap_or_default();
            best = Some((snapshot, adam.steps_taken(), report));
        }
        let line = EpochLog {
            epoch,
            steps: adam.steps_taken(),
            loss_span: epoch_loss.span,
            loss_ans: epoch_loss.ans,
            loss_joint: epoch_loss.joint,
            dev: dev_report,
            best: is_best,
        };
        if let Some(w) = log.as_deref_mut() {
            let text = serde_json::to_string(&line).expect("log line serializes");
            writeln!(w, "{text}").map_err(|e| Error::Data(format!("writing training log: {e}")))?;
        }
        history.push(line);
    }
    let total_steps = adam.steps_taken();
    let (net, step, report) = match best {
        Some(b) => b,
        None => {
            let mut snapshot = net;
            snapshot.store.round_to_f32();
            (snapshot, total_steps, EvalReport::default())
        }
    };
    Ok(TrainOutcome {
        net,
        step,
        total_steps,
        history,
        best_dev: dev.map(|_| report),
    })
}

#[derive(Clone, Debug)]
pub struct OverfitOutcome {
    pub net: McrNet,
    /// Joint loss before each step.
    pub losses: Vec<f64>,
    /// Updates applied before the loss first fell below the target.
    pub reached_at: Option<usize>,
}

/// Full-batch training without dropout on a handful of examples until the
/// joint loss drops below `target` or `max_steps` steps have been taken.
pub fn overfit(
    config: &RunConfig,
    vocab_size: usize,
    items: &[(ModelInput, Target)],
    max_steps: usize,
    target: f64,
) -> Result<OverfitOutcome> {
    if items.is_empty() {
        return Err(Error::Data("no examples to overfit".into()));
    }
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut net = McrNet::new(
        cfg.model_config(vocab_size)?,
        &mut Rng::new(cfg.seed).derive(0),
    )?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.store);
    let batch = make_batches(items, items.len(), None)?.remove(0);
    let pairs = batch.pairs();
    let mut losses = Vec::new();
    let mut reached_at = None;
    for step in 0..max_steps {
        let loss = train_step(
            &mut net,
            &mut adam,
            &pairs,
            None,
            &format!("overfit step {step}"),
        )?;
        losses.push(loss.joint);
        if loss.joint < target {
            reached_at = Some(step);
            break;
        }
    }
    Ok(OverfitOutcome {
        net,
        losses,
        reached_at,
    })
}
