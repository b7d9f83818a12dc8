//! Datasets: SQuAD-format ingestion, answer alignment, batching and the
//! synthetic task.

mod squad;
mod synthetic;

pub use squad::{
    load_squad_json, parse_squad, save_squad_json, to_squad_value, Answer, RawExample,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, POLARITY_WORDS};

use crate::encoder::{char_slice, Token, Vocab};
use crate::error::{Error, Result};
use crate::metrics::normalize_text;
use crate::model::{ModelInput, Target};
use crate::tensor::Rng;

/// Smallest token range `[s, e]` covering the answer's char extent, kept
/// only if the covered text normalizes to the answer text.
pub fn align_span(
    passage: &str,
    tokens: &[Token],
    answer_text: &str,
    answer_start: usize,
) -> Option<(usize, usize)> {
    let end = answer_start + answer_text.chars().count();
    if answer_text.is_empty() || end > passage.chars().count() {
        return None;
    }
    let s = tokens.iter().position(|t| t.end > answer_start)?;
    let e = tokens.iter().rposition(|t| t.start < end)?;
    if s > e {
        return None;
    }
    let covered = char_slice(passage, tokens[s].start, tokens[e].end);
    (normalize_text(&covered) == normalize_text(answer_text)).then_some((s, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedExample {
    pub id: String,
    pub question: String,
    pub passage: String,
    pub question_ids: Vec<usize>,
    pub passage_ids: Vec<usize>,
    /// Passage tokens with char offsets, for detokenization.
    pub passage_tokens: Vec<Token>,
    /// 1 = unanswerable.
    pub label: u8,
    /// Gold span in passage-token indices; `None` when unanswerable or flagged.
    pub span: Option<(usize, usize)>,
    pub answers: Vec<String>,
    /// The first answer could not be aligned; excluded from training.
    pub flagged: bool,
}

pub fn process(raw: &RawExample, vocab: &Vocab) -> ProcessedExample {
    let q = vocab.encode(&raw.question);
    let p = vocab.encode(&raw.passage);
    let span = raw
        .answers
        .first()
        .and_then(|a| align_span(&raw.passage, &p.tokens, &a.text, a.answer_start));
    ProcessedExample {
        id: raw.id.clone(),
        question: raw.question.clone(),
        passage: raw.passage.clone(),
        question_ids: q.ids,
        passage_ids: p.ids,
        passage_tokens: p.tokens,
        label: u8::from(raw.is_impossible),
        span,
        answers: raw.answers.iter().map(|a| a.text.clone()).collect(),
        flagged: !raw.is_impossible && span.is_none(),
    }
}

/// Vocabulary over every question and passage.
pub fn build_vocab(raws: &[RawExample]) -> Vocab {
    Vocab::build(
        raws.iter()
            .flat_map(|r| [r.question.as_str(), r.passage.as_str()]),
    )
}

impl ProcessedExample {
    pub fn model_input(&self, max_len: usize) -> Result<ModelInput> {
        ModelInput::new(&self.question_ids, &self.passage_ids, max_len)
    }

    /// Training target for `input`, or `None` when the example is flagged or
    /// truncation cut off the answer.
    pub fn target(&self, input: &ModelInput) -> Option<Target> {
        if self.label == 1 {
            return Some(Target {
                label: 1,
                start: 0,
                end: 0,
            });
        }
        let (s, e) = self.span?;
        let base = input.joint.passage.start;
        let n = input.joint.passage.len();
        (e < n).then_some(Target {
            label: 0,
            start: base + s,
            end: base + e,
        })
    }

    /// Passage text and char range `[start, end)` for an inclusive span of
    /// joint-sequence positions inside `input`'s passage region.
    pub fn span_text(
        &self,
        input: &ModelInput,
        start: usize,
        end: usize,
    ) -> Result<(String, usize, usize)> {
        let region = &input.joint.passage;
        if !(region.contains(&start) && region.contains(&end) && start <= end) {
            return Err(Error::Data(format!(
                "span ({start}, {end}) outside passage positions {region:?}"
            )));
        }
        let first = &self.passage_tokens[start - region.start];
        let last = &self.passage_tokens[end - region.start];
        Ok((
            char_slice(&self.passage, first.start, last.end),
            first.start,
            last.end,
        ))
    }
}

/// Inputs and targets ready for training, with counts of what was dropped.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub items: Vec<(ModelInput, Target)>,
    /// Indices into the source examples.
    pub source: Vec<usize>,
    pub flagged: usize,
    pub truncated_away: usize,
}

pub fn training_set(examples: &[ProcessedExample], max_len: usize) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    for (i, ex) in examples.iter().enumerate() {
        if ex.flagged {
            set.flagged += 1;
            continue;
        }
        let input = ex.model_input(max_len)?;
        match ex.target(&input) {
            Some(t) => {
                set.items.push((input, t));
                set.source.push(i);
            }
            None => set.truncated_away += 1,
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the members in the input slice.
    pub indices: Vec<usize>,
    /// Right-padded to the longest member.
    pub inputs: Vec<ModelInput>,
    pub targets: Vec<Target>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pairs(&self) -> Vec<(&ModelInput, &Target)> {
        self.inputs.iter().zip(&self.targets).collect()
    }
}

/// Splits `items` into batches of `batch_size`, shuffled with `seed` when
/// given, each padded with `[PAD]` to its longest member.
pub fn make_batches(
    items: &[(ModelInput, Target)],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    if let Some(seed) = seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk
                .iter()
                .map(|&i| items[i].0.joint.ids.len())
                .max()
                .unwrap_or(0);
            Batch {
                indices: chunk.to_vec(),
                inputs: chunk
                    .iter()
                    .map(|&i| ModelInput {
                        joint: items[i].0.joint.padded_to(width),
                        question: items[i].0.question.clone(),
                    })
                    .collect(),
                targets: chunk.iter().map(|&i| items[i].1).collect(),
            }
        })
        .collect())
}
