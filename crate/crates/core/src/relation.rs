//! Co-interactive relation module.
//!
//! Starting from trainable clue vectors s₀ and e₀, each of the J relation
//! blocks rereads the passage twice:
//!
//! * start sub-block: `p̂_t = ReLU(W[s_j; p_t] + b)`, `α = softmax_t(q_cls·p̂_t)`,
//!   `s_{j+1} = Σ_t α_t p̂_t`
//! * end sub-block: `p̂_t = ReLU(W'[s_{j+1}; e_j; p_t] + b')`,
//!   `β = softmax_t(w·(q_cls·p̂_t) + b)`, `e_{j+1} = Σ_t β_t p̂_t`
//!
//! The final clues are fused back into every position:
//! `p̃_t = W_gᵀ[p_t; s_J; e_J]`.

use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RelationConfig {
    /// Number of relation blocks J. Zero bypasses the module.
    pub steps: usize,
    pub hidden: usize,
    pub share_weights: bool,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            steps: 2,
            hidden: 64,
            share_weights: true,
        }
    }
}

/// Weights of one relation block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub start_w: ParamId,
    pub start_b: ParamId,
    pub end_w: ParamId,
    pub end_b: ParamId,
    pub logit_w: ParamId,
    pub logit_b: ParamId,
}

/// [`BlockParams`] materialized on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub start_w: Var,
    pub start_b: Var,
    pub end_w: Var,
    pub end_b: Var,
    pub logit_w: Var,
    pub logit_b: Var,
}

impl BlockParams {
    fn new(prefix: &str, h: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(BlockParams {
            start_w: add("start_w", xavier(2 * h, h, rng))?,
            start_b: add("start_b", Tensor::zeros(vec![h]))?,
            end_w: add("end_w", xavier(3 * h, h, rng))?,
            end_b: add("end_b", Tensor::zeros(vec![h]))?,
            // identity affine on the end logits at init
            logit_w: add("logit_w", Tensor::vector(vec![1.0]))?,
            logit_b: add("logit_b", Tensor::vector(vec![0.0]))?,
        })
    }

    pub fn vars(&self, g: &mut Graph) -> BlockVars {
        BlockVars {
            start_w: g.param(self.start_w),
            start_b: g.param(self.start_b),
            end_w: g.param(self.end_w),
            end_b: g.param(self.end_b),
            logit_w: g.param(self.logit_w),
            logit_b: g.param(self.logit_b),
        }
    }
}

/// Trainable initial clue vectors s₀, e₀, shared by all examples.
#[derive(Clone, Debug)]
pub struct ClueParams {
    pub start: ParamId,
    pub end: ParamId,
}

/// Draws s₀, e₀ ~ U(-0.1, 0.1).
pub fn init_clues(rng: &mut Rng, h: usize) -> (Tensor, Tensor) {
    let s = Tensor::uniform(vec![h], 0.1, rng);
    let e = Tensor::uniform(vec![h], 0.1, rng);
    (s, e)
}

#[derive(Clone, Debug)]
pub struct RelationModule {
    pub config: RelationConfig,
    pub clues: ClueParams,
    /// One entry when weights are shared, otherwise one per step.
    pub blocks: Vec<BlockParams>,
    pub fusion: ParamId,
}

impl RelationModule {
    pub fn new(config: RelationConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let h = config.hidden;
        if h == 0 {
            return Err(Error::Config(
                "relation hidden size must be positive".into(),
            ));
        }
        let (s0, e0) = init_clues(rng, h);
        let clues = ClueParams {
            start: store.add("relation.s0", s0)?,
            end: store.add("relation.e0", e0)?,
        };
        let n_blocks = match (config.steps, config.share_weights) {
            (0, _) => 0,
            (_, true) => 1,
            (j, false) => j,
        };
        let blocks = (0..n_blocks)
            .map(|i| {
                let prefix = if config.share_weights {
                    "relation.block".to_string()
                } else {
                    format!("relation.block{i}")
                };
                BlockParams::new(&prefix, h, store, rng)
            })
            .collect::<Result<_>>()?;
        let fusion = store.add("relation.fusion", xavier(3 * h, h, rng))?;
        Ok(RelationModule {
            config,
            clues,
            blocks,
            fusion,
        })
    }

    fn block(&self, step: usize) -> &BlockParams {
        if self.config.share_weights {
            &self.blocks[0]
        } else {
            &self.blocks[step]
        }
    }

    /// Runs J blocks from s₀, e₀ and fuses the final clues into p̃.
    pub fn run(&self, g: &mut Graph, p: Var, q_cls: Var, mask: &[bool]) -> Result<RelationOutput> {
        let s0 = g.param(self.clues.start);
        let e0 = g.param(self.clues.end);
        let fusion = g.param(self.fusion);
        let blocks: Vec<BlockVars> = (0..self.config.steps)
            .map(|j| self.block(j).vars(g))
            .collect();
        run_module(g, p, q_cls, mask, s0, e0, &blocks, fusion)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StartOutput {
    pub alpha: Var,
    pub s_next: Var,
    pub p_hat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EndOutput {
    pub beta: Var,
    pub e_next: Var,
    pub p_hat: Var,
}

/// α and β of one step, still on the graph.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub alpha: Var,
    pub beta: Var,
}

/// Per-step attention distributions as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RelationOutput {
    pub s: Var,
    pub e: Var,
    pub p_tilde: Var,
    pub steps: Vec<StepVars>,
}

impl RelationOutput {
    pub fn traces(&self, g: &Graph) -> Vec<StepTrace> {
        self.steps
            .iter()
            .enumerate()
            .map(|(step, sv)| StepTrace {
                step,
                alpha: g.value(sv.alpha).to_vec(),
                beta: g.value(sv.beta).to_vec(),
            })
            .collect()
    }
}

fn rows_of(g: &Graph, p: Var) -> Result<usize> {
    match *g.shape(p) {
        [l, _] => Ok(l),
        ref s => Err(Error::shape("relation", format!("passage rows {s:?}"))),
    }
}

pub fn start_subblock(
    g: &mut Graph,
    s: Var,
    p: Var,
    q_cls: Var,
    mask: &[bool],
    w: &BlockVars,
) -> Result<StartOutput> {
    let l = rows_of(g, p)?;
    let s_rows = g.broadcast_rows(s, l)?;
    let joined = g.concat_last(&[s_rows, p])?;
    let pre = g.affine(joined, w.start_w, Some(w.start_b))?;
    let p_hat = g.relu(pre)?;
    let logits = g.matvec(p_hat, q_cls)?;
    let alpha = g.masked_softmax(logits, mask)?;
    let s_next = g.weighted_sum(alpha, p_hat)?;
    Ok(StartOutput {
        alpha,
        s_next,
        p_hat,
    })
}

pub fn end_subblock(
    g: &mut Graph,
    s_next: Var,
    e: Var,
    p: Var,
    q_cls: Var,
    mask: &[bool],
    w: &BlockVars,
) -> Result<EndOutput> {
    let l = rows_of(g, p)?;
    let s_rows = g.broadcast_rows(s_next, l)?;
    let e_rows = g.broadcast_rows(e, l)?;
    let joined = g.concat_last(&[s_rows, e_rows, p])?;
    let pre = g.affine(joined, w.end_w, Some(w.end_b))?;
    let p_hat = g.relu(pre)?;
    let scores = g.matvec(p_hat, q_cls)?;
    let logits = g.scalar_affine(scores, w.logit_w, w.logit_b)?;
    let beta = g.masked_softmax(logits, mask)?;
    let e_next = g.weighted_sum(beta, p_hat)?;
    Ok(EndOutput {
        beta,
        e_next,
        p_hat,
    })
}

/// Threads the clue state through `blocks.len()` relation blocks, then
/// fuses: `p̃ = [p; s_J; e_J] · W_g`.
#[allow(clippy::too_many_arguments)]
pub fn run_module(
    g: &mut Graph,
    p: Var,
    q_cls: Var,
    mask: &[bool],
    s0: Var,
    e0: Var,
    blocks: &[BlockVars],
    fusion: Var,
) -> Result<RelationOutput> {
    let (mut s, mut e) = (s0, e0);
    let mut steps = Vec::with_capacity(blocks.len());
    for w in blocks {
        let start = start_subblock(g, s, p, q_cls, mask, w)?;
        let end = end_subblock(g, start.s_next, e, p, q_cls, mask, w)?;
        s = start.s_next;
        e = end.e_next;
        steps.push(StepVars {
            alpha: start.alpha,
            beta: end.beta,
        });
    }
    let l = rows_of(g, p)?;
    let s_rows = g.broadcast_rows(s, l)?;
    let e_rows = g.broadcast_rows(e, l)?;
    let joined = g.concat_last(&[p, s_rows, e_rows])?;
    let p_tilde = g.affine(joined, fusion, None)?;
    Ok(RelationOutput {
        s,
        e,
        p_tilde,
        steps,
    })
}
