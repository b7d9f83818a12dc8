//! Synthetic answerable/unanswerable task.
//!
//! A passage is filler words with facts of the form `key POLARITY value`
//! dropped in. The question asks for a key under one polarity word
//! ("what is the little key3 ?"). It is answerable exactly when the fact
//! for that key carries the same polarity; the answer is the value token.
//! Optional distractor facts about other keys make the key itself matter.

use serde::{Deserialize, Serialize};

use super::squad::{Answer, RawExample};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Built-in polarity pairs; more pairs than listed fall back to `posK`/`negK`.
pub const POLARITY_WORDS: [(&str, &str); 6] = [
    ("little", "significant"),
    ("few", "many"),
    ("low", "high"),
    ("weak", "strong"),
    ("small", "large"),
    ("rare", "common"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Distinct filler words and distinct answer values.
    pub vocab_size: usize,
    pub keys: usize,
    pub polarity_pairs: usize,
    pub n: usize,
    pub unanswerable_frac: f64,
    pub seed: u64,
    /// Filler words per passage, inclusive range.
    pub min_filler: usize,
    pub max_filler: usize,
    /// Facts about keys other than the one asked for.
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 50,
            keys: 20,
            polarity_pairs: 4,
            n: 1000,
            unanswerable_frac: 0.33,
            seed: 0,
            min_filler: 8,
            max_filler: 14,
            distractors: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.unanswerable_frac) {
            return Err(Error::Config(format!(
                "unanswerable fraction {} not in [0, 1]",
                self.unanswerable_frac
            )));
        }
        if self.vocab_size == 0 || self.polarity_pairs == 0 {
            return Err(Error::Config(
                "vocab_size and polarity_pairs must be positive".into(),
            ));
        }
        if self.keys < 1 + self.distractors {
            return Err(Error::Config(format!(
                "{} keys cannot supply {} distractor facts plus the asked key",
                self.keys, self.distractors
            )));
        }
        if self.min_filler > self.max_filler {
            return Err(Error::Config("min_filler exceeds max_filler".into()));
        }
        Ok(())
    }

    fn polarity(&self, pair: usize, side: usize) -> String {
        match POLARITY_WORDS.get(pair) {
            Some((a, b)) => [a, b][side].to_string(),
            None => format!("{}{pair}", ["pos", "neg"][side]),
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RawExample>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let unanswerable = rng.bernoulli(spec.unanswerable_frac);
        let key = rng.below(spec.keys);
        let pair = rng.below(spec.polarity_pairs);
        let side = rng.below(2);
        let value = rng.below(spec.vocab_size);
        let asked_side = if unanswerable { 1 - side } else { side };

        let mut facts: Vec<[String; 3]> = vec![[
            format!("key{key}"),
            spec.polarity(pair, side),
            format!("val{value}"),
        ]];
        let mut used = vec![key];
        for _ in 0..spec.distractors {
            let mut k = rng.below(spec.keys);
            while used.contains(&k) {
                k = rng.below(spec.keys);
            }
            used.push(k);
            let p = rng.below(spec.polarity_pairs);
            let s = rng.below(2);
            let v = rng.below(spec.vocab_size);
            facts.push([format!("key{k}"), spec.polarity(p, s), format!("val{v}")]);
        }
        rng.shuffle(&mut facts);

        let filler_len = spec.min_filler + rng.below(spec.max_filler - spec.min_filler + 1);
        let mut slots: Vec<Option<usize>> = (0..filler_len).map(|_| None).collect();
        for f in 0..facts.len() {
            let at = rng.below(slots.len() + 1);
            slots.insert(at, Some(f));
        }
        let mut words: Vec<String> = Vec::new();
        let mut answer_word = 0;
        for slot in slots {
            match slot {
                None => words.push(format!("w{}", rng.below(spec.vocab_size))),
                Some(f) => {
                    if facts[f][0] == format!("key{key}") {
                        answer_word = words.len() + 2;
                    }
                    words.extend(facts[f].iter().cloned());
                }
            }
        }
        let passage = words.join(" ");
        let answer_start: usize = words[..answer_word]
            .iter()
            .map(|w| w.chars().count() + 1)
            .sum();
        let answers = if unanswerable {
            Vec::new()
        } else {
            vec![Answer {
                text: words[answer_word].clone(),
                answer_start,
            }]
        };
        out.push(RawExample {
            id: format!("syn-{}-{i}", spec.seed),
            question: format!("what is the {} key{key} ?", spec.polarity(pair, asked_side)),
            passage,
            answers,
            is_impossible: unanswerable,
        });
    }
    Ok(out)
}
