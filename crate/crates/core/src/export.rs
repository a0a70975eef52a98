//! Attention-weight export for the top-ranked answer of each question.

use csv::Writer;
use thiserror::Error;

use crate::candidates::CandidateSet;
use crate::kb::KnowledgeBase;
use crate::model::{Model, ModelError};
use crate::templates::QaInstance;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const HEADER: [&str; 8] = [
    "question_id",
    "candidate",
    "path",
    "row_type",
    "aspect",
    "token_index",
    "token",
    "value",
];

/// CSV with one `alpha` row per (aspect, token), one `weight` and one
/// `similarity` row per aspect, and one `score` row per question. Questions
/// without candidates are skipped.
pub fn attention_csv(
    model: &Model,
    kb: &KnowledgeBase,
    questions: &[&QaInstance],
    cands: &[CandidateSet],
) -> Result<String, ExportError> {
    let mut w = Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for (q, set) in questions.iter().zip(cands) {
        let scores = model.score_all(&q.question_tokens, &set.candidates)?;
        let Some(top) = (0..scores.len()).reduce(|a, b| {
            let (ea, eb) = (set.candidates[a].entity, set.candidates[b].entity);
            if scores[b] > scores[a] || (scores[b] == scores[a] && eb < ea) {
                b
            } else {
                a
            }
        }) else {
            continue;
        };
        let cand = &set.candidates[top];
        let breakdown = model.explain(&q.question_tokens, cand)?;
        let id = q.id.to_string();
        let name = kb.entities()[cand.entity].name.as_str();
        let path = cand.path.key.as_str();
        for a in &breakdown.aspects {
            for (i, (tok, alpha)) in q.question_tokens.iter().zip(&a.alpha).enumerate() {
                w.write_record([&id, name, path, "alpha", a.aspect.name(), &i.to_string(), tok, &alpha.to_string()])?;
            }
            w.write_record([&id, name, path, "weight", a.aspect.name(), "", "", &a.weight.to_string()])?;
            w.write_record([&id, name, path, "similarity", a.aspect.name(), "", "", &a.similarity.to_string()])?;
        }
        w.write_record([&id, name, path, "score", "", "", "", &breakdown.score.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
