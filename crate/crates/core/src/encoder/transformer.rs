use std::ops::Range;

use super::vocab::{CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!(
                "max sequence length {} cannot hold [CLS] q [SEP] p [SEP]",
                self.max_len
            )));
        }
        if self.vocab_size <= SEP {
            return Err(Error::Config(
                "vocabulary has no room for reserved tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Inverted dropout driven by a seeded stream. Absent in eval mode.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: Rng,
}

impl Dropout {
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.bernoulli(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        g.mul_const(x, mask)
    }
}

fn maybe_dropout(drop: &mut Option<&mut Dropout>, g: &mut Graph, x: Var) -> Result<Var> {
    match drop {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// `[CLS] q [SEP] p [SEP]` followed by `[PAD]`s, with its attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointInput {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Positions of passage tokens.
    pub passage: Range<usize>,
    /// Set when the question or passage tail was cut to fit `max_len`.
    pub truncated: bool,
}

impl JointInput {
    /// Lays out a question/passage pair. Sequences longer than `max_len`
    /// keep at least one passage slot: the question is cut to `max_len - 4`
    /// tokens, then the passage tail is dropped.
    pub fn new(question: &[usize], passage: &[usize], max_len: usize) -> Result<Self> {
        if max_len < 4 {
            return Err(Error::Config(format!("max_len {max_len} < 4")));
        }
        let m = question.len().min(max_len - 4);
        let n = passage.len().min(max_len - m - 3);
        let truncated = m < question.len() || n < passage.len();
        let mut ids = Vec::with_capacity(m + n + 3);
        ids.push(CLS);
        ids.extend_from_slice(&question[..m]);
        ids.push(SEP);
        ids.extend_from_slice(&passage[..n]);
        ids.push(SEP);
        let mask = vec![true; ids.len()];
        Ok(JointInput {
            ids,
            mask,
            passage: m + 2..m + 2 + n,
            truncated,
        })
    }

    /// Unpadded length `M + N + 3`.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn question_len(&self) -> usize {
        self.passage.start - 2
    }

    /// Right-pads with `[PAD]` to `len` positions.
    pub fn padded_to(&self, len: usize) -> JointInput {
        let mut out = self.clone();
        if len > out.ids.len() {
            out.ids.resize(len, PAD);
            out.mask.resize(len, false);
        }
        out
    }
}

/// `[CLS] q [SEP]` ids for the question-only pass.
pub fn question_input(question: &[usize], max_len: usize) -> Vec<usize> {
    let m = question.len().min(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(m + 2);
    ids.push(CLS);
    ids.extend_from_slice(&question[..m]);
    ids.push(SEP);
    ids
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], bound, rng)
}

impl LayerParams {
    fn new(
        prefix: &str,
        h: usize,
        ffn: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(LayerParams {
            wq: add("wq", xavier(h, h, rng))?,
            bq: add("bq", Tensor::zeros(vec![h]))?,
            wk: add("wk", xavier(h, h, rng))?,
            bk: add("bk", Tensor::zeros(vec![h]))?,
            wv: add("wv", xavier(h, h, rng))?,
            bv: add("bv", Tensor::zeros(vec![h]))?,
            wo: add("wo", xavier(h, h, rng))?,
            bo: add("bo", Tensor::zeros(vec![h]))?,
            ln1_gain: add("ln1_gain", Tensor::vector(vec![1.0; h]))?,
            ln1_bias: add("ln1_bias", Tensor::zeros(vec![h]))?,
            w1: add("w1", xavier(h, ffn, rng))?,
            b1: add("b1", Tensor::zeros(vec![ffn]))?,
            w2: add("w2", xavier(ffn, h, rng))?,
            b2: add("b2", Tensor::zeros(vec![h]))?,
            ln2_gain: add("ln2_gain", Tensor::vector(vec![1.0; h]))?,
            ln2_bias: add("ln2_bias", Tensor::zeros(vec![h]))?,
        })
    }
}

pub struct LayerOutput {
    pub out: Var,
    /// Per-head `L x L` attention probabilities.
    pub attention: Vec<Var>,
}

const LN_EPS: f64 = 1e-5;

/// Post-norm transformer block: multi-head self-attention and a GELU
/// feed-forward, each followed by residual + layer norm. Keys at masked
/// positions get zero attention and masked query rows attend to nothing.
pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    layer: &LayerParams,
    heads: usize,
    mut drop: Option<&mut Dropout>,
) -> Result<LayerOutput> {
    let (l, h) = match *g.shape(x) {
        [l, h] => (l, h),
        ref s => return Err(Error::shape("transformer_layer", format!("input {s:?}"))),
    };
    if mask.len() != l {
        return Err(Error::shape(
            "transformer_layer",
            format!("mask of {} for {l} positions", mask.len()),
        ));
    }
    let dh = h / heads;
    let p = |g: &mut Graph, id| g.param(id);
    let (wq, bq, wk, bk, wv, bv) = (
        p(g, layer.wq),
        p(g, layer.bq),
        p(g, layer.wk),
        p(g, layer.bk),
        p(g, layer.wv),
        p(g, layer.bv),
    );
    let q = g.affine(x, wq, Some(bq))?;
    let k = g.affine(x, wk, Some(bk))?;
    let v = g.affine(x, wv, Some(bv))?;
    let row_mask: Option<Vec<f64>> = mask.iter().any(|m| !m).then(|| {
        mask.iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, l))
            .collect()
    });

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (a, b) = (hd * dh, (hd + 1) * dh);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let mut probs = g.masked_softmax(scores, mask)?;
        if let Some(rm) = &row_mask {
            probs = g.mul_const(probs, rm.clone())?;
        }
        attention.push(probs);
        head_outs.push(g.matmul(probs, vh)?);
    }
    let merged = g.concat_last(&head_outs)?;
    let (wo, bo) = (p(g, layer.wo), p(g, layer.bo));
    let attn_out = g.affine(merged, wo, Some(bo))?;
    let attn_out = maybe_dropout(&mut drop, g, attn_out)?;
    let res1 = g.add(x, attn_out)?;
    let (g1, b1n) = (p(g, layer.ln1_gain), p(g, layer.ln1_bias));
    let x1 = g.layer_norm(res1, g1, b1n, LN_EPS)?;

    let (w1, b1, w2, b2) = (
        p(g, layer.w1),
        p(g, layer.b1),
        p(g, layer.w2),
        p(g, layer.b2),
    );
    let hidden = g.affine(x1, w1, Some(b1))?;
    let hidden = g.gelu(hidden)?;
    let ff = g.affine(hidden, w2, Some(b2))?;
    let ff = maybe_dropout(&mut drop, g, ff)?;
    let res2 = g.add(x1, ff)?;
    let (g2, b2n) = (p(g, layer.ln2_gain), p(g, layer.ln2_bias));
    let out = g.layer_norm(res2, g2, b2n, LN_EPS)?;
    Ok(LayerOutput { out, attention })
}

/// Token + learned position embeddings followed by a transformer stack.
/// One parameter set serves both the joint and the question-only pass.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let token_embedding = store.add(
            "encoder.token_embedding",
            Tensor::uniform(vec![config.vocab_size, h], 0.1, rng),
        )?;
        let position_embedding = store.add(
            "encoder.position_embedding",
            Tensor::uniform(vec![config.max_len, h], 0.1, rng),
        )?;
        let layers = (0..config.layers)
            .map(|i| LayerParams::new(&format!("encoder.layer{i}"), h, config.ffn, store, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_len {
            return Err(Error::shape(
                "embed",
                format!(
                    "{} positions exceed max_len {}",
                    ids.len(),
                    self.config.max_len
                ),
            ));
        }
        let tok = g.param(self.token_embedding);
        let pos = g.param(self.position_embedding);
        let t = g.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        g.add(t, p)
    }

    /// Runs the stack, returning the final `L x h` rows and the per-layer,
    /// per-head attention maps.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[usize],
        mask: &[bool],
        mut drop: Option<&mut Dropout>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut x = self.embed(g, ids)?;
        x = maybe_dropout(&mut drop, g, x)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = transformer_layer(g, x, mask, layer, self.config.heads, drop.as_deref_mut())?;
            x = out.out;
            maps.push(out.attention);
        }
        Ok((x, maps))
    }

    /// Joint pass over `[CLS] q [SEP] p [SEP] [PAD]...`: the `L x h` matrix p.
    pub fn encode_joint(
        &self,
        g: &mut Graph,
        input: &JointInput,
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        Ok(self.forward(g, &input.ids, &input.mask, drop)?.0)
    }

    /// Question-only pass over `[CLS] q [SEP]`: the `[CLS]` row q_cls.
    pub fn encode_question(
        &self,
        g: &mut Graph,
        question: &[usize],
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        let ids = question_input(question, self.config.max_len);
        let mask = vec![true; ids.len()];
        let (x, _) = self.forward(g, &ids, &mask, drop)?;
        g.row(x, 0)
    }
}
