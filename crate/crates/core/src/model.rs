//! The full network: encoder → relation module → predictor.

use std::ops::Range;

use crate::encoder::{Dropout, Encoder, EncoderConfig, JointInput};
use crate::error::{Error, Result};
use crate::predictor::{
    ans_loss, answerability_score, decode_answer, joint_loss, span_distributions, span_loss,
    span_mask, DecodeOptions, LossBreakdown, LossWeights, Prediction, PredictorParams,
};
use crate::relation::{RelationConfig, RelationModule, RelationOutput};
use crate::tensor::{Gradients, Graph, ParamStore, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Relation blocks J.
    pub steps: usize,
    pub share_weights: bool,
    pub loss: LossWeights,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()
    }

    fn relation(&self) -> RelationConfig {
        RelationConfig {
            steps: self.steps,
            hidden: self.encoder.hidden,
            share_weights: self.share_weights,
        }
    }
}

/// Token ids for one example: the laid-out joint sequence and the bare question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub joint: JointInput,
    pub question: Vec<usize>,
}

impl ModelInput {
    pub fn new(question: &[usize], passage: &[usize], max_len: usize) -> Result<Self> {
        Ok(ModelInput {
            joint: JointInput::new(question, passage, max_len)?,
            question: question.to_vec(),
        })
    }
}

/// Training target in joint-sequence positions; `(0, 0)` for unanswerable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub label: u8,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub score: Var,
    pub gamma: Var,
    pub eta: Var,
    pub relation: RelationOutput,
    pub passage: Range<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub span: Var,
    pub ans: Var,
    pub joint: Var,
}

#[derive(Clone, Debug)]
pub struct McrNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub relation: RelationModule,
    pub predictor: PredictorParams,
}

impl McrNet {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, rng)?;
        let relation = RelationModule::new(config.relation(), &mut store, rng)?;
        let predictor = PredictorParams::new(config.encoder.hidden, &mut store, rng)?;
        Ok(McrNet {
            config,
            store,
            encoder,
            relation,
            predictor,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        drop: Option<&mut Dropout>,
    ) -> Result<ForwardOutput> {
        let pair = self
            .encoder
            .encode_pair(g, &input.joint, &input.question, drop)?;
        let rel = self.relation.run(g, pair.p, pair.q_cls, &pair.mask)?;
        let w_s = g.param(self.predictor.w_s);
        let w_c = g.param(self.predictor.w_c);
        let w_e = g.param(self.predictor.w_e);
        let score = answerability_score(g, rel.s, rel.e, w_s)?;
        let support = span_mask(pair.mask.len(), &pair.passage);
        let (gamma, eta) = span_distributions(g, rel.p_tilde, &support, w_c, w_e)?;
        Ok(ForwardOutput {
            score,
            gamma,
            eta,
            relation: rel,
            passage: pair.passage,
        })
    }

    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, target: &Target) -> Result<LossVars> {
        let span = span_loss(g, &[out.gamma], &[out.eta], &[target.start], &[target.end])?;
        let ans = ans_loss(g, &[out.score], &[target.label])?;
        let joint = joint_loss(g, span, ans, self.config.loss)?;
        Ok(LossVars { span, ans, joint })
    }

    /// Mean joint loss over `batch` and its gradient. Each example gets its
    /// own graph, so padding and batch neighbours cannot interact.
    pub fn batch_gradients(
        &self,
        batch: &[(&ModelInput, &Target)],
        mut drop: Option<&mut Dropout>,
    ) -> Result<(LossBreakdown, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let (mut span, mut ans) = (0.0, 0.0);
        let mut total: Option<Gradients> = None;
        for (input, target) in batch {
            let mut g = Graph::with_params(&self.store);
            let out = self.forward(&mut g, input, drop.as_deref_mut())?;
            let l = self.loss(&mut g, &out, target)?;
            span += g.scalar(l.span);
            ans += g.scalar(l.ans);
            let grads = g.backward_with_seed(l.joint, inv)?;
            match &mut total {
                Some(t) => t.merge(&grads),
                None => total = Some(grads),
            }
        }
        let breakdown = LossBreakdown::new(span * inv, ans * inv, self.config.loss)?;
        Ok((breakdown, total.expect("nonempty batch")))
    }

    /// Mean losses without gradients, in eval mode.
    pub fn evaluate_loss(&self, batch: &[(&ModelInput, &Target)]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (mut span, mut ans) = (0.0, 0.0);
        for (input, target) in batch {
            let mut g = Graph::with_params(&self.store);
            let out = self.forward(&mut g, input, None)?;
            let l = self.loss(&mut g, &out, target)?;
            span += g.scalar(l.span);
            ans += g.scalar(l.ans);
        }
        let n = batch.len() as f64;
        LossBreakdown::new(span / n, ans / n, self.config.loss)
    }

    pub fn predict(&self, input: &ModelInput, opts: &DecodeOptions) -> Result<Prediction> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, input, None)?;
        let mut pred = decode_answer(
            g.scalar(out.score),
            g.value(out.gamma),
            g.value(out.eta),
            &out.passage,
            opts,
        );
        pred.traces = out.relation.traces(&g);
        Ok(pred)
    }
}
