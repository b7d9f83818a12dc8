//! Reading and writing the SQuAD 2.0 JSON schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::GoldRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Char offset into the passage, counted in Unicode scalar values.
    pub answer_start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub question: String,
    pub passage: String,
    pub answers: Vec<Answer>,
    pub is_impossible: bool,
}

impl RawExample {
    pub fn gold(&self) -> GoldRecord {
        GoldRecord {
            id: self.id.clone(),
            answers: self.answers.iter().map(|a| a.text.clone()).collect(),
        }
    }
}

pub fn load_squad_json(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    parse_squad(&root).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn field<'a>(v: &'a Value, name: &str, owner: &str) -> Result<&'a Value> {
    v.get(name)
        .ok_or_else(|| Error::Data(format!("{owner}: missing field `{name}`")))
}

fn string(v: &Value, name: &str, owner: &str) -> Result<String> {
    field(v, name, owner)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("{owner}: field `{name}` is not a string")))
}

fn array<'a>(v: &'a Value, name: &str, owner: &str) -> Result<&'a Vec<Value>> {
    field(v, name, owner)?
        .as_array()
        .ok_or_else(|| Error::Data(format!("{owner}: field `{name}` is not an array")))
}

/// Walks `data → paragraphs → qas` in document order.
pub fn parse_squad(root: &Value) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (a, article) in array(root, "data", "dataset")?.iter().enumerate() {
        let article_owner = format!("article {a}");
        for (p, paragraph) in array(article, "paragraphs", &article_owner)?
            .iter()
            .enumerate()
        {
            let para_owner = format!("{article_owner}, paragraph {p}");
            let context = string(paragraph, "context", &para_owner)?;
            for (q, qa) in array(paragraph, "qas", &para_owner)?.iter().enumerate() {
                let id = string(qa, "id", &format!("{para_owner}, question {q}"))?;
                let owner = format!("question {id:?}");
                let question = string(qa, "question", &owner)?;
                let is_impossible =
                    field(qa, "is_impossible", &owner)?
                        .as_bool()
                        .ok_or_else(|| {
                            Error::Data(format!("{owner}: field `is_impossible` is not a boolean"))
                        })?;
                let mut answers = Vec::new();
                for ans in array(qa, "answers", &owner)? {
                    let text = string(ans, "text", &owner)?;
                    let answer_start =
                        field(ans, "answer_start", &owner)?
                            .as_u64()
                            .ok_or_else(|| {
                                Error::Data(format!(
                                    "{owner}: `answer_start` is not a nonnegative integer"
                                ))
                            })? as usize;
                    answers.push(Answer { text, answer_start });
                }
                if is_impossible != answers.is_empty() {
                    return Err(Error::Data(format!(
                        "{owner}: is_impossible={is_impossible} but {} answers",
                        answers.len()
                    )));
                }
                out.push(RawExample {
                    id,
                    question,
                    passage: context.clone(),
                    answers,
                    is_impossible,
                });
            }
        }
    }
    Ok(out)
}

/// One article; consecutive examples sharing a passage form one paragraph.
pub fn to_squad_value(examples: &[RawExample], title: &str) -> Value {
    let mut paragraphs: Vec<(String, Vec<Value>)> = Vec::new();
    for ex in examples {
        let qa = json!({
            "id": ex.id,
            "question": ex.question,
            "answers": ex.answers.iter().map(|a| json!({"text": a.text, "answer_start": a.answer_start})).collect::<Vec<_>>(),
            "is_impossible": ex.is_impossible,
        });
        match paragraphs.last_mut() {
            Some((ctx, qas)) if *ctx == ex.passage => qas.push(qa),
            _ => paragraphs.push((ex.passage.clone(), vec![qa])),
        }
    }
    let paragraphs: Vec<Value> = paragraphs
        .into_iter()
        .map(|(context, qas)| json!({"context": context, "qas": qas}))
        .collect();
    json!({
        "version": "v2.0",
        "data": [{"title": title, "paragraphs": paragraphs}],
    })
}

pub fn save_squad_json(path: &Path, examples: &[RawExample], title: &str) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(&to_squad_value(examples, title)).map_err(|source| {
            Error::Json {
                path: path.to_path_buf(),
                source,
            }
        })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
