//! Question templates: parsing, population against a KB, gold answers.
//!
//! A template is a question with `|Type|` placeholders. Each placeholder is
//! filled with the verbatim name of a KB entity of that type. One placeholder
//! is the root (topic entity); the others constrain the answer paths. Gold
//! answers are the endpoints of simple paths from the root that match one of
//! the template's relation-path patterns, visit every constraint entity, and
//! have the expected answer type.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{extract_subgraph, CandidateError, RelationPath};
use crate::dataset::Split;
use crate::kb::{EntityId, KnowledgeBase};

/// Per-template question budget used when a template does not set one.
pub const DEFAULT_CAP: usize = 30;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("column {column}: unbalanced '|' in template {text:?}")]
    Unbalanced { column: usize, text: String },
    #[error("column {column}: empty placeholder in template {text:?}")]
    EmptyPlaceholder { column: usize, text: String },
    #[error("template has no placeholders: {0:?}")]
    NoPlaceholders(String),
    #[error("root placeholder |{root}| does not occur in {text:?}")]
    UnknownRoot { root: String, text: String },
    #[error("template {text:?} has no answer paths")]
    NoAnswerPaths { text: String },
    #[error("answer path {key:?} has {hops} hops; 1 to 3 allowed")]
    PathLength { key: String, hops: usize },
    #[error("unknown entity type {0:?}")]
    UnknownType(String),
    #[error("cap must be at least 1")]
    ZeroCap,
    #[error(transparent)]
    Path(#[from] CandidateError),
    #[error("template file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub text: String,
    pub pieces: Vec<Piece>,
    /// Entity type named by each placeholder, in order of appearance.
    pub placeholders: Vec<String>,
    /// Index into `placeholders` of the topic entity.
    pub root: usize,
    pub answer_type: String,
    pub answer_paths: Vec<RelationPath>,
    pub cap: usize,
}

/// JSON form of a template, as stored in template files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    pub answer_type: String,
    pub answer_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
}

/// Lowercase, split on whitespace, then split punctuation off word runs.
/// Letters, digits and `_` form words; any other character is a token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Parse placeholder syntax. The first placeholder becomes the root; answer
/// metadata is left empty.
pub fn parse_template(src: &str) -> Result<Template, TemplateError> {
    let mut pieces = Vec::new();
    let mut placeholders = Vec::new();
    let mut literal = String::new();
    let mut chars = src.char_indices().enumerate().peekable();
    while let Some((col, (_, ch))) = chars.next() {
        if ch != '|' {
            literal.push(ch);
            continue;
        }
        let mut name = String::new();
        let mut closed = false;
        for (_, (_, c)) in chars.by_ref() {
            if c == '|' {
                closed = true;
                break;
            }
            name.push(c);
        }
        if !closed {
            return Err(TemplateError::Unbalanced {
                column: col + 1,
                text: src.to_string(),
            });
        }
        let name = name.trim();
        if name.is_empty() {
            return Err(TemplateError::EmptyPlaceholder {
                column: col + 1,
                text: src.to_string(),
            });
        }
        pieces.extend(tokenize(&literal).into_iter().map(Piece::Word));
        literal.clear();
        pieces.push(Piece::Slot(placeholders.len()));
        placeholders.push(name.to_string());
    }
    pieces.extend(tokenize(&literal).into_iter().map(Piece::Word));
    if placeholders.is_empty() {
        return Err(TemplateError::NoPlaceholders(src.to_string()));
    }
    Ok(Template {
        text: src.to_string(),
        pieces,
        placeholders,
        root: 0,
        answer_type: String::new(),
        answer_paths: Vec::new(),
        cap: DEFAULT_CAP,
    })
}

impl Template {
    pub fn from_spec(spec: &TemplateSpec) -> Result<Self, TemplateError> {
        let mut t = parse_template(&spec.text)?;
        if let Some(root) = &spec.root {
            t.root = t
                .placeholders
                .iter()
                .position(|p| p == root)
                .ok_or_else(|| TemplateError::UnknownRoot {
                    root: root.clone(),
                    text: spec.text.clone(),
                })?;
        }
        if spec.answer_paths.is_empty() {
            return Err(TemplateError::NoAnswerPaths {
                text: spec.text.clone(),
            });
        }
        for key in &spec.answer_paths {
            let path = RelationPath::parse(key)?;
            if !(1..=3).contains(&path.hops()) {
                return Err(TemplateError::PathLength {
                    key: key.clone(),
                    hops: path.hops(),
                });
            }
            t.answer_paths.push(path);
        }
        t.answer_type = spec.answer_type.clone();
        t.cap = spec.cap.unwrap_or(DEFAULT_CAP);
        if t.cap == 0 {
            return Err(TemplateError::ZeroCap);
        }
        Ok(t)
    }

    pub fn to_spec(&self) -> TemplateSpec {
        TemplateSpec {
            text: self.text.clone(),
            root: Some(self.placeholders[self.root].clone()),
            answer_type: self.answer_type.clone(),
            answer_paths: self.answer_paths.iter().map(|p| p.key.clone()).collect(),
            cap: Some(self.cap),
        }
    }

    pub fn root_type(&self) -> &str {
        &self.placeholders[self.root]
    }

    /// Slots other than the root, in order.
    pub fn constraint_slots(&self) -> Vec<usize> {
        (0..self.placeholders.len()).filter(|&i| i != self.root).collect()
    }

    fn max_hops(&self) -> usize {
        self.answer_paths.iter().map(RelationPath::hops).max().unwrap_or(1)
    }

    /// Check that every type the template mentions exists in `kb`.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<(), TemplateError> {
        let known = |t: &str| kb.types().iter().any(|k| k == t);
        for t in self.placeholders.iter().chain(std::iter::once(&self.answer_type)) {
            if !known(t) {
                return Err(TemplateError::UnknownType(t.clone()));
            }
        }
        Ok(())
    }

    /// Render the question for a slot assignment.
    pub fn render(&self, kb: &KnowledgeBase, slots: &[EntityId]) -> (String, Vec<String>) {
        let mut text = String::new();
        let mut pos = 0;
        let chars: Vec<char> = self.text.chars().collect();
        let mut slot = 0;
        while pos < chars.len() {
            if chars[pos] == '|' {
                let end = chars[pos + 1..]
                    .iter()
                    .position(|&c| c == '|')
                    .map(|e| pos + 1 + e)
                    .expect("validated at parse time");
                text.push_str(&kb.entities()[slots[slot]].name);
                slot += 1;
                pos = end + 1;
            } else {
                text.push(chars[pos]);
                pos += 1;
            }
        }
        let mut tokens = Vec::new();
        for piece in &self.pieces {
            match piece {
                Piece::Word(w) => tokens.push(w.clone()),
                Piece::Slot(i) => tokens.extend(tokenize(&kb.entities()[slots[*i]].name)),
            }
        }
        (text, tokens)
    }
}

pub fn parse_template_file(json: &str) -> Result<Vec<Template>, TemplateError> {
    let specs: Vec<TemplateSpec> = serde_json::from_str(json)?;
    specs.iter().map(Template::from_spec).collect()
}

pub fn templates_to_json(templates: &[Template]) -> String {
    let specs: Vec<TemplateSpec> = templates.iter().map(Template::to_spec).collect();
    serde_json::to_string_pretty(&specs).expect("template specs serialize")
}

/// A populated question with its gold answer set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaInstance {
    pub id: usize,
    pub template: usize,
    pub question: String,
    pub question_tokens: Vec<String>,
    /// Entities filling the placeholders, in slot order.
    pub topic_entities: Vec<EntityId>,
    pub root_entity: EntityId,
    pub constraints: Vec<EntityId>,
    pub answer_type: String,
    pub gold_answers: BTreeSet<EntityId>,
    pub split: Split,
}

/// Endpoints of pattern-matching simple paths from `root` that visit every
/// constraint and have `answer_type`.
pub fn gold_answers(
    kb: &KnowledgeBase,
    root: EntityId,
    constraints: &[EntityId],
    patterns: &[RelationPath],
    answer_type: &str,
) -> Result<BTreeSet<EntityId>, CandidateError> {
    let hops = patterns.iter().map(RelationPath::hops).max().unwrap_or(1);
    let sub = extract_subgraph(kb, root, hops)?;
    let keys: BTreeSet<&str> = patterns.iter().map(|p| p.key.as_str()).collect();
    Ok(sub
        .candidates
        .iter()
        .filter(|c| c.etype == answer_type && keys.contains(c.path.key.as_str()))
        .filter(|c| {
            c.traversals.iter().any(|via| {
                constraints
                    .iter()
                    .all(|&k| k == root || k == c.entity || via.contains(&k))
            })
        })
        .map(|c| c.entity)
        .collect())
}

/// Populate `t` with at most `cap` answerable questions.
///
/// Slot assignments are drawn only from entities lying on a pattern-matching
/// path, since any other assignment has no answers. The full set of
/// answerable assignments is shuffled under `seed` and truncated to `cap`.
pub fn populate(
    t: &Template,
    template_index: usize,
    kb: &KnowledgeBase,
    cap: usize,
    seed: u64,
) -> Result<Vec<QaInstance>, TemplateError> {
    if cap == 0 {
        return Err(TemplateError::ZeroCap);
    }
    let slots = t.constraint_slots();
    let keys: BTreeSet<&str> = t.answer_paths.iter().map(|p| p.key.as_str()).collect();
    let mut combos: BTreeSet<(EntityId, Vec<EntityId>)> = BTreeSet::new();

    for &root in kb.entities_of_type(t.root_type()) {
        let sub = extract_subgraph(kb, root, t.max_hops())?;
        for cand in &sub.candidates {
            if cand.etype != t.answer_type || !keys.contains(cand.path.key.as_str()) {
                continue;
            }
            for via in &cand.traversals {
                let mut on_path = via.clone();
                on_path.push(cand.entity);
                let mut partial = vec![Vec::new()];
                for &slot in &slots {
                    let want = &t.placeholders[slot];
                    let options: Vec<EntityId> = on_path
                        .iter()
                        .copied()
                        .filter(|&e| &kb.entities()[e].etype == want)
                        .collect();
                    partial = partial
                        .into_iter()
                        .flat_map(|prefix: Vec<EntityId>| {
                            options
                                .iter()
                                .filter(|e| !prefix.contains(e))
                                .map(|&e| {
                                    let mut next = prefix.clone();
                                    next.push(e);
                                    next
                                })
                                .collect::<Vec<_>>()
                        })
                        .collect();
                }
                for assignment in partial {
                    combos.insert((root, assignment));
                }
            }
        }
    }

    let mut combos: Vec<_> = combos.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);

    let mut out = Vec::new();
    for (root, constraints) in combos {
        if out.len() == cap {
            break;
        }
        let gold = gold_answers(kb, root, &constraints, &t.answer_paths, &t.answer_type)?;
        if gold.is_empty() {
            continue;
        }
        let mut slot_entities = vec![0; t.placeholders.len()];
        slot_entities[t.root] = root;
        for (&slot, &e) in slots.iter().zip(&constraints) {
            slot_entities[slot] = e;
        }
        let (question, question_tokens) = t.render(kb, &slot_entities);
        out.push(QaInstance {
            id: 0,
            template: template_index,
            question,
            question_tokens,
            topic_entities: slot_entities,
            root_entity: root,
            constraints,
            answer_type: t.answer_type.clone(),
            gold_answers: gold,
            split: Split::Train,
        });
    }
    Ok(out)
}
