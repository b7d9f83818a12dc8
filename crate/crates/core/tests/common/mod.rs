//! Shared oracles and check suites for the integration tests and the
//! acceptance runner. The oracles recompute everything with plain `f64`
//! loops and never touch `Graph`.

#![allow(dead_code)]

#[rustfmt::skip]
pub mod metrics_expected;

use mcrnet::config::RunConfig;
use mcrnet::data::{
    build_vocab, generate_synthetic, process, training_set, ProcessedExample, SyntheticSpec,
};
use mcrnet::encoder::EncoderConfig;
use mcrnet::model::{McrNet, ModelConfig, ModelInput, Target};
use mcrnet::predictor::LossWeights;
use mcrnet::relation::BlockVars;
use mcrnet::tensor::{grad_check, GradCheckReport, Graph, ParamId, ParamStore, Rng, Tensor, Var};

// ---------------------------------------------------------------- oracles

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W + b` for `W` stored row-major as `d_in x d_out`.
pub fn affine(x: &[f64], w: &Tensor, b: Option<&[f64]>) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), d_in);
    (0..d_out)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * d_out + j];
            }
            acc
        })
        .collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn convex(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += w * v;
        }
    }
    out
}

pub fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// One relation block's weights as plain values.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub start_w: Tensor,
    pub start_b: Vec<f64>,
    pub end_w: Tensor,
    pub end_b: Vec<f64>,
    pub logit_w: f64,
    pub logit_b: f64,
}

impl BlockWeights {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        let get = |n: &str| {
            store
                .get(store.id(&format!("{prefix}.{n}")).expect(n))
                .value
                .clone()
        };
        BlockWeights {
            start_w: get("start_w"),
            start_b: get("start_b").into_data(),
            end_w: get("end_w"),
            end_b: get("end_b").into_data(),
            logit_w: get("logit_w").data()[0],
            logit_b: get("logit_b").data()[0],
        }
    }

    pub fn random(h: usize, rng: &mut Rng) -> Self {
        BlockWeights {
            start_w: Tensor::uniform(vec![2 * h, h], 0.8, rng),
            start_b: Tensor::uniform(vec![h], 0.3, rng).into_data(),
            end_w: Tensor::uniform(vec![3 * h, h], 0.8, rng),
            end_b: Tensor::uniform(vec![h], 0.3, rng).into_data(),
            logit_w: rng.uniform(0.5, 1.5),
            logit_b: rng.uniform(-1.0, 1.0),
        }
    }
}

pub fn block_vars(g: &mut Graph, w: &BlockWeights) -> BlockVars {
    BlockVars {
        start_w: g.constant(w.start_w.clone()),
        start_b: g.constant(Tensor::vector(w.start_b.clone())),
        end_w: g.constant(w.end_w.clone()),
        end_b: g.constant(Tensor::vector(w.end_b.clone())),
        logit_w: g.constant(Tensor::vector(vec![w.logit_w])),
        logit_b: g.constant(Tensor::vector(vec![w.logit_b])),
    }
}

pub struct SubOut {
    pub weights: Vec<f64>,
    pub next: Vec<f64>,
    pub p_hat: Vec<Vec<f64>>,
}

pub fn start_oracle(
    s: &[f64],
    p: &[Vec<f64>],
    q: &[f64],
    mask: &[bool],
    w: &BlockWeights,
) -> SubOut {
    let p_hat: Vec<Vec<f64>> = p
        .iter()
        .map(|pt| relu(affine(&cat(&[s, pt]), &w.start_w, Some(&w.start_b))))
        .collect();
    let logits: Vec<f64> = p_hat.iter().map(|r| dot(r, q)).collect();
    let weights = softmax(&logits, mask);
    let next = convex(&weights, &p_hat);
    SubOut {
        weights,
        next,
        p_hat,
    }
}

pub fn end_oracle(
    s_next: &[f64],
    e: &[f64],
    p: &[Vec<f64>],
    q: &[f64],
    mask: &[bool],
    w: &BlockWeights,
) -> SubOut {
    let p_hat: Vec<Vec<f64>> = p
        .iter()
        .map(|pt| relu(affine(&cat(&[s_next, e, pt]), &w.end_w, Some(&w.end_b))))
        .collect();
    let logits: Vec<f64> = p_hat
        .iter()
        .map(|r| w.logit_w * dot(r, q) + w.logit_b)
        .collect();
    let weights = softmax(&logits, mask);
    let next = convex(&weights, &p_hat);
    SubOut {
        weights,
        next,
        p_hat,
    }
}

pub struct RelationOracle {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub p_tilde: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn relation_oracle(
    p: &[Vec<f64>],
    q: &[f64],
    mask: &[bool],
    s0: &[f64],
    e0: &[f64],
    blocks: &[BlockWeights],
    fusion: &Tensor,
) -> RelationOracle {
    let (mut s, mut e) = (s0.to_vec(), e0.to_vec());
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    for w in blocks {
        let st = start_oracle(&s, p, q, mask, w);
        let en = end_oracle(&st.next, &e, p, q, mask, w);
        s = st.next;
        e = en.next;
        alphas.push(st.weights);
        betas.push(en.weights);
    }
    let p_tilde = p
        .iter()
        .map(|pt| affine(&cat(&[pt, &s, &e]), fusion, None))
        .collect();
    RelationOracle {
        s,
        e,
        p_tilde,
        alphas,
        betas,
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Exhaustive decode: every pair `(s, e)` is enumerated, filtered by the
/// feasibility rules, and ranked by probability, then by `s`, then by `e`.
pub fn brute_force_span(
    gamma: &[f64],
    eta: &[f64],
    passage: &std::ops::Range<usize>,
    max_len: usize,
) -> Option<(usize, usize)> {
    let mut all = Vec::new();
    for s in 0..gamma.len() {
        for e in 0..eta.len() {
            let feasible =
                s != 0 && s <= e && passage.contains(&s) && passage.contains(&e) && e - s < max_len;
            if feasible {
                all.push((gamma[s] * eta[e], s, e));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.first().map(|&(_, s, e)| (s, e))
}

// ------------------------------------------------------ gradient suites

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const PIPELINE_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;
/// Steps for the deep graph. See [`numeric_derivative`].
pub const PIPELINE_EPS: f64 = 3e-4;
pub const KINK_EPS: f64 = 1e-6;
pub const TRIALS: usize = 20;

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> mcrnet::Result<Var>>;

struct Trial {
    store: ParamStore,
    op: Op,
}

fn dim(rng: &mut Rng) -> usize {
    1 + rng.below(4)
}

fn add(store: &mut ParamStore, shape: Vec<usize>, rng: &mut Rng) {
    let name = format!("x{}", store.len());
    store.add(name, Tensor::uniform(shape, 1.0, rng)).unwrap();
}

/// Uniform values with `|x - k| >= 0.02` for every kink `k`.
fn add_away_from(store: &mut ParamStore, shape: Vec<usize>, kinks: &[f64], rng: &mut Rng) {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-1.0, 1.0);
            if kinks.iter().all(|k| (v - k).abs() >= 0.02) {
                break v;
            }
        })
        .collect();
    let name = format!("x{}", store.len());
    store.add(name, Tensor::new(shape, data).unwrap()).unwrap();
}

fn random_mask(n: usize, rng: &mut Rng) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
    mask[rng.below(n)] = true;
    mask
}

fn trial(name: &str, rng: &mut Rng) -> Trial {
    let mut store = ParamStore::new();
    let s = &mut store;
    let op: Op = match name {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            add(s, vec![m, k], rng);
            add(s, vec![k, n], rng);
            Box::new(|g, v| g.matmul(v[0], v[1]))
        }
        "matvec" => {
            let (m, k) = (dim(rng), dim(rng));
            add(s, vec![m, k], rng);
            add(s, vec![k], rng);
            Box::new(|g, v| g.matvec(v[0], v[1]))
        }
        "transpose" => {
            add(s, vec![dim(rng), dim(rng)], rng);
            Box::new(|g, v| g.transpose(v[0]))
        }
        "affine" => {
            let (m, d, o) = (dim(rng), dim(rng), dim(rng));
            add(s, vec![m, d], rng);
            add(s, vec![d, o], rng);
            add(s, vec![o], rng);
            Box::new(|g, v| g.affine(v[0], v[1], Some(v[2])))
        }
        "affine_vector" => {
            let (d, o) = (dim(rng), dim(rng));
            add(s, vec![d], rng);
            add(s, vec![d, o], rng);
            add(s, vec![o], rng);
            Box::new(|g, v| g.affine(v[0], v[1], Some(v[2])))
        }
        "affine_no_bias" => {
            let (m, d, o) = (dim(rng), dim(rng), dim(rng));
            add(s, vec![m, d], rng);
            add(s, vec![d, o], rng);
            Box::new(|g, v| g.affine(v[0], v[1], None))
        }
        "reshape" => {
            let (m, n) = (dim(rng), dim(rng));
            add(s, vec![m, n], rng);
            Box::new(move |g, v| g.reshape(v[0], vec![n, m]))
        }
        "add" => {
            let shape = vec![dim(rng), dim(rng)];
            add(s, shape.clone(), rng);
            add(s, shape, rng);
            Box::new(|g, v| g.add(v[0], v[1]))
        }
        "add_bias" => {
            let (m, n) = (dim(rng), dim(rng));
            add(s, vec![m, n], rng);
            add(s, vec![n], rng);
            Box::new(|g, v| g.add_bias(v[0], v[1]))
        }
        "mul" => {
            let shape = vec![dim(rng), dim(rng)];
            add(s, shape.clone(), rng);
            add(s, shape, rng);
            Box::new(|g, v| g.mul(v[0], v[1]))
        }
        "mul_const" => {
            let n = dim(rng) * dim(rng);
            add(s, vec![n], rng);
            let c = Tensor::uniform(vec![n], 2.0, rng).into_data();
            Box::new(move |g, v| g.mul_const(v[0], c.clone()))
        }
        "scale" => {
            add(s, vec![dim(rng), dim(rng)], rng);
            let k = rng.uniform(-2.0, 2.0);
            Box::new(move |g, v| g.scale(v[0], k))
        }
        "affine_const" => {
            add(s, vec![dim(rng)], rng);
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            Box::new(move |g, v| g.affine_const(v[0], a, b))
        }
        "scalar_affine" => {
            add(s, vec![dim(rng)], rng);
            add(s, vec![1], rng);
            add(s, vec![1], rng);
            Box::new(|g, v| g.scalar_affine(v[0], v[1], v[2]))
        }
        "relu" => {
            add_away_from(s, vec![dim(rng), dim(rng)], &[0.0], rng);
            Box::new(|g, v| g.relu(v[0]))
        }
        "gelu" => {
            add(s, vec![dim(rng), dim(rng)], rng);
            Box::new(|g, v| g.gelu(v[0]))
        }
        "sigmoid" => {
            add(s, vec![dim(rng), dim(rng)], rng);
            Box::new(|g, v| g.sigmoid(v[0]))
        }
        "clamp" => {
            add_away_from(s, vec![dim(rng), dim(rng)], &[-0.5, 0.5], rng);
            Box::new(|g, v| g.clamp(v[0], -0.5, 0.5))
        }
        "ln" => {
            let n = dim(rng);
            let data = (0..n).map(|_| rng.uniform(0.2, 3.0)).collect();
            s.add("x0", Tensor::new(vec![n], data).unwrap()).unwrap();
            Box::new(|g, v| g.ln(v[0]))
        }
        "concat_vectors" => {
            let parts = 2 + rng.below(2);
            for _ in 0..parts {
                add(s, vec![dim(rng)], rng);
            }
            Box::new(|g, v| g.concat_last(v))
        }
        "concat_matrices" => {
            let m = dim(rng);
            let parts = 2 + rng.below(2);
            for _ in 0..parts {
                add(s, vec![m, dim(rng)], rng);
            }
            Box::new(|g, v| g.concat_last(v))
        }
        "broadcast_rows" => {
            add(s, vec![dim(rng)], rng);
            let rows = dim(rng);
            Box::new(move |g, v| g.broadcast_rows(v[0], rows))
        }
        "slice_cols" => {
            let (m, n) = (dim(rng), 1 + dim(rng));
            add(s, vec![m, n], rng);
            let start = rng.below(n);
            let end = start + 1 + rng.below(n - start);
            Box::new(move |g, v| g.slice_cols(v[0], start, end))
        }
        "row" => {
            let m = dim(rng);
            add(s, vec![m, dim(rng)], rng);
            let i = rng.below(m);
            Box::new(move |g, v| g.row(v[0], i))
        }
        "gather_rows" => {
            let rows = dim(rng);
            add(s, vec![rows, dim(rng)], rng);
            let ids: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(rows)).collect();
            Box::new(move |g, v| g.gather_rows(v[0], &ids))
        }
        "pick" => {
            let n = dim(rng);
            add(s, vec![n], rng);
            let i = rng.below(n);
            Box::new(move |g, v| g.pick(v[0], i))
        }
        "sum" => {
            add(s, vec![dim(rng), dim(rng)], rng);
            Box::new(|g, v| g.sum(v[0]))
        }
        "masked_softmax" => {
            let n = 1 + dim(rng);
            add(s, vec![n], rng);
            let mask = random_mask(n, rng);
            Box::new(move |g, v| g.masked_softmax(v[0], &mask))
        }
        "masked_softmax_rows" => {
            let n = 1 + dim(rng);
            add(s, vec![dim(rng), n], rng);
            let mask = random_mask(n, rng);
            Box::new(move |g, v| g.masked_softmax(v[0], &mask))
        }
        "weighted_sum" => {
            let (l, h) = (dim(rng), dim(rng));
            add(s, vec![l], rng);
            add(s, vec![l, h], rng);
            Box::new(|g, v| g.weighted_sum(v[0], v[1]))
        }
        "layer_norm" => {
            let (m, n) = (dim(rng), 1 + dim(rng));
            add(s, vec![m, n], rng);
            add(s, vec![n], rng);
            add(s, vec![n], rng);
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "linear_relu_sum" => {
            add(s, vec![3], rng);
            add_away_from(s, vec![3, 3], &[], rng);
            add(s, vec![3], rng);
            Box::new(|g, v| {
                let y = g.affine(v[0], v[1], Some(v[2]))?;
                g.relu(y)
            })
        }
        other => panic!("unknown primitive {other}"),
    };
    Trial { store, op }
}

pub const PRIMITIVES: [&str; 32] = [
    "matmul",
    "matvec",
    "transpose",
    "affine",
    "affine_vector",
    "affine_no_bias",
    "reshape",
    "add",
    "add_bias",
    "mul",
    "mul_const",
    "scale",
    "affine_const",
    "scalar_affine",
    "relu",
    "gelu",
    "sigmoid",
    "clamp",
    "ln",
    "concat_vectors",
    "concat_matrices",
    "broadcast_rows",
    "slice_cols",
    "row",
    "gather_rows",
    "pick",
    "sum",
    "masked_softmax",
    "masked_softmax_rows",
    "weighted_sum",
    "layer_norm",
    "linear_relu_sum",
];

/// `Σ out ⊙ R` for a fixed random `R`, making any output a scalar loss.
fn readout(g: &mut Graph, out: Var, seed: u64) -> mcrnet::Result<Var> {
    let r = Tensor::uniform(g.shape(out).to_vec(), 1.0, &mut Rng::new(seed));
    let c = g.constant(r);
    let y = g.mul(out, c)?;
    g.sum(y)
}

/// Worst report over `TRIALS` randomized shapes of one primitive.
pub fn primitive_check(name: &str, seed: u64) -> mcrnet::Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut worst: Option<GradCheckReport> = None;
    for t in 0..TRIALS {
        let Trial { mut store, op } = trial(name, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let readout_seed = seed * 1000 + t as u64;
        let report = grad_check(
            &mut store,
            &ids,
            |g| {
                let vars: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
                let out = op(g, &vars)?;
                readout(g, out, readout_seed)
            },
            FD_EPS,
            PRIMITIVE_TOL,
        )?;
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_error > w.max_rel_error)
        {
            worst = Some(report);
        }
    }
    Ok(worst.expect("at least one trial"))
}

pub fn tiny_config(steps: usize, share: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len: 16,
            vocab_size: 20,
            dropout: 0.0,
        },
        steps,
        share_weights: share,
        loss: LossWeights::default(),
    }
}

#[derive(Clone, Debug)]
pub struct PipelineCase {
    pub seed: u64,
    pub steps: usize,
    pub share: bool,
    pub label: u8,
    /// Valid passage tokens; the joint sequence is padded to 12 positions.
    pub passage_len: usize,
}

pub const PIPELINE_CASES: [PipelineCase; 4] = [
    PipelineCase {
        seed: 1,
        steps: 2,
        share: true,
        label: 0,
        passage_len: 7,
    },
    PipelineCase {
        seed: 2,
        steps: 2,
        share: true,
        label: 1,
        passage_len: 7,
    },
    PipelineCase {
        seed: 3,
        steps: 2,
        share: false,
        label: 0,
        passage_len: 5,
    },
    PipelineCase {
        seed: 4,
        steps: 1,
        share: true,
        label: 1,
        passage_len: 6,
    },
];

pub struct PipelineResult {
    /// Max relative error over coordinates with a non-trivial gradient.
    pub max_rel_error: f64,
    pub worst: (String, usize, f64, f64),
    pub checked: usize,
    /// Coordinates whose stencil straddled a ReLU kink.
    pub kinks: usize,
    /// Coordinates whose gradient is identically zero because they add the
    /// same amount to every logit of a softmax: end-logit biases, attention
    /// key biases, and the fusion rows that multiply `s_J` and `e_J`.
    pub zero_coords: usize,
    /// Largest |∂L/∂θ| over those coordinates, analytic and numeric.
    pub zero_grad_analytic: f64,
    pub zero_grad_numeric: f64,
    pub seq_len: usize,
}

impl PipelineResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= PIPELINE_TOL
            && self.zero_grad_analytic < 1e-10
            && self.zero_grad_numeric < 1e-6
    }
}

fn central(
    store: &mut ParamStore,
    id: ParamId,
    k: usize,
    eps: f64,
    eval: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id).value.data()[k];
    store.get_mut(id).value.data_mut()[k] = orig + eps;
    let plus = eval(store);
    store.get_mut(id).value.data_mut()[k] = orig - eps;
    let minus = eval(store);
    store.get_mut(id).value.data_mut()[k] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Central differences at `ε` and `ε/2` combined by Richardson
/// extrapolation, which cancels the `ε²` term. With a loss near 1 a single
/// 1e-5 step has a rounding floor of ~1e-11, which is not small next to the
/// 1e-8 floor of the relative error; the wider pair keeps it near 1e-12.
///
/// A ReLU kink inside the stencil shows up as the two estimates disagreeing
/// by far more than an `O(ε²)` amount; the coordinate is then re-measured
/// with a plain `KINK_EPS` step. Returns the estimate and whether a kink was
/// detected.
pub fn numeric_derivative(
    store: &mut ParamStore,
    id: ParamId,
    k: usize,
    eval: &dyn Fn(&ParamStore) -> f64,
) -> (f64, bool) {
    let wide = central(store, id, k, PIPELINE_EPS, eval);
    let half = central(store, id, k, PIPELINE_EPS / 2.0, eval);
    let smooth_gap = 1e-9 + 1e-6 * wide.abs().max(half.abs());
    if (wide - half).abs() <= smooth_gap {
        ((4.0 * half - wide) / 3.0, false)
    } else {
        (central(store, id, k, KINK_EPS, eval), true)
    }
}

pub fn case_input(case: &PipelineCase, rng: &mut Rng) -> (ModelInput, Target) {
    let question = [4 + rng.below(16), 4 + rng.below(16)];
    let passage: Vec<usize> = (0..case.passage_len).map(|_| 4 + rng.below(16)).collect();
    let mut input = ModelInput::new(&question, &passage, 16).unwrap();
    input.joint = input.joint.padded_to(12);
    let p = input.joint.passage.clone();
    let target = if case.label == 1 {
        Target {
            label: 1,
            start: 0,
            end: 0,
        }
    } else {
        Target {
            label: 0,
            start: p.start + 1,
            end: p.start + 3,
        }
    };
    (input, target)
}

/// Gradient check of encoder → relation → predictor → joint loss.
/// Coordinates with an identically zero gradient are checked against zero
/// instead, since relative error there only measures rounding noise.
pub fn pipeline_check(case: &PipelineCase) -> mcrnet::Result<PipelineResult> {
    let mut rng = Rng::new(case.seed);
    let mut net = McrNet::new(tiny_config(case.steps, case.share), &mut rng)?;
    let (input, target) = case_input(case, &mut rng);
    let h = net.config.encoder.hidden;
    let mut store = std::mem::take(&mut net.store);
    let loss = |g: &mut Graph| -> mcrnet::Result<Var> {
        let out = net.forward(g, &input, None)?;
        Ok(net.loss(g, &out, &target)?.joint)
    };
    let grads = {
        let mut g = Graph::with_params(&store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g).expect("loss evaluates");
        g.scalar(l)
    };
    let mut out = PipelineResult {
        max_rel_error: 0.0,
        worst: (String::new(), 0, 0.0, 0.0),
        checked: 0,
        kinks: 0,
        zero_coords: 0,
        zero_grad_analytic: 0.0,
        zero_grad_numeric: 0.0,
        seq_len: input.joint.ids.len(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let shift_invariant = name.ends_with(".logit_b") || name.ends_with(".bk");
        for k in 0..store.get(id).value.numel() {
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            // fusion is (3h)×h row-major; rows h.. multiply s_J and e_J
            if shift_invariant || (name == "relation.fusion" && k / h >= h) {
                let numeric = central(&mut store, id, k, FD_EPS, &eval);
                out.zero_coords += 1;
                out.zero_grad_analytic = out.zero_grad_analytic.max(analytic.abs());
                out.zero_grad_numeric = out.zero_grad_numeric.max(numeric.abs());
                continue;
            }
            let (numeric, kink) = numeric_derivative(&mut store, id, k, &eval);
            out.kinks += usize::from(kink);
            out.checked += 1;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (name.clone(), k, analytic, numeric);
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------ synthetic helpers

pub struct SyntheticData {
    pub vocab_size: usize,
    pub train: Vec<ProcessedExample>,
    pub test: Vec<ProcessedExample>,
}

pub fn synthetic(n_train: usize, n_test: usize, seed: u64) -> SyntheticData {
    let train_raw = generate_synthetic(&SyntheticSpec {
        n: n_train,
        seed,
        ..Default::default()
    })
    .unwrap();
    let test_raw = generate_synthetic(&SyntheticSpec {
        n: n_test,
        seed: seed + 1,
        ..Default::default()
    })
    .unwrap();
    let vocab = build_vocab(&train_raw);
    SyntheticData {
        vocab_size: vocab.len(),
        train: train_raw.iter().map(|r| process(r, &vocab)).collect(),
        test: test_raw.iter().map(|r| process(r, &vocab)).collect(),
    }
}

pub fn training_items(examples: &[ProcessedExample], max_len: usize) -> Vec<(ModelInput, Target)> {
    training_set(examples, max_len).unwrap().items
}

/// A small, fast configuration for tests that train.
pub fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "hidden = 16\nheads = 2\nffn = 32\nlayers = 1\nmax_len = 48\nepochs = 1\nbatch_size = 16",
    )
    .unwrap();
    c
}

/// Largest change in score, γ, η or α when `examples` are right-padded by
/// nine `[PAD]` positions. Probabilities on the padding must be exactly zero;
/// any that are not make the result infinite.
pub fn padding_deviation(net: &McrNet, examples: &[ProcessedExample], max_len: usize) -> f64 {
    let opts = mcrnet::predictor::DecodeOptions::default();
    let mut worst = 0.0f64;
    for ex in examples {
        let input = ex.model_input(max_len).unwrap();
        let n = input.joint.ids.len();
        let padded = ModelInput {
            joint: input.joint.padded_to(n + 9),
            question: input.question.clone(),
        };
        let a = net.predict(&input, &opts).unwrap();
        let b = net.predict(&padded, &opts).unwrap();
        let tails = b.gamma[n..].iter().chain(&b.eta[n..]).chain(
            b.traces
                .iter()
                .flat_map(|t| t.alpha[n..].iter().chain(&t.beta[n..])),
        );
        if tails.into_iter().any(|&v| v != 0.0) || a.span != b.span {
            return f64::INFINITY;
        }
        worst = worst
            .max((a.score - b.score).abs())
            .max(max_abs_diff(&a.gamma, &b.gamma[..n]))
            .max(max_abs_diff(&a.eta, &b.eta[..n]));
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            worst = worst
                .max(max_abs_diff(&ta.alpha, &tb.alpha[..n]))
                .max(max_abs_diff(&ta.beta, &tb.beta[..n]));
        }
    }
    worst
}

/// Largest difference, relative to the largest entry of each parameter,
/// between the gradient of one padded batch and the mean of the unpadded
/// per-example gradients. Loss mismatches count too.
pub fn batch_gradient_deviation(net: &McrNet, items: &[(ModelInput, Target)]) -> f64 {
    let batch = mcrnet::data::make_batches(items, items.len(), None)
        .unwrap()
        .remove(0);
    let (loss, grads) = net.batch_gradients(&batch.pairs(), None).unwrap();
    let singles: Vec<_> = items
        .iter()
        .map(|(i, t)| net.batch_gradients(&[(i, t)], None).unwrap())
        .collect();
    let n = singles.len() as f64;
    let mean_joint = singles.iter().map(|(l, _)| l.joint).sum::<f64>() / n;
    let mut worst = (loss.joint - mean_joint).abs();
    for id in net.store.ids() {
        let mut want = vec![0.0; net.store.get(id).value.numel()];
        for (_, g) in &singles {
            if let Some(g) = g.get(id) {
                want.iter_mut().zip(g).for_each(|(w, v)| *w += v / n);
            }
        }
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = match grads.get(id) {
            Some(got) => max_abs_diff(got, &want),
            None => want.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        };
        worst = worst.max(err / scale);
    }
    worst
}
