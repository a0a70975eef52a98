//! QA datasets: splits and the JSON-lines file format.
//!
//! On disk every entity is referenced by `(name, etype)` so a dataset stays
//! valid against any KB that holds the same facts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{EntityId, KbError, KnowledgeBase};
use crate::templates::QaInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: unresolved entity {name:?} of type {etype:?}")]
    Unresolved {
        line: usize,
        name: String,
        etype: String,
    },
    #[error("line {line}: question has no gold answers")]
    NoGold { line: usize },
    #[error(transparent)]
    Kb(#[from] KbError),
}

/// Train/dev/test proportions. The default is 5952/1000/2000 normalised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitProportions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        Self {
            train: 5952.0,
            dev: 1000.0,
            test: 2000.0,
        }
    }
}

impl SplitProportions {
    /// Split sizes for `n` items: train and dev rounded, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.dev + self.test;
        let train = ((n as f64) * self.train / total).round() as usize;
        let dev = (((n as f64) * self.dev / total).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, dev, n - train - dev)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub instances: Vec<QaInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<QaInstance>) -> Self {
        Self { instances }
    }

    pub fn split(&self, split: Split) -> Vec<&QaInstance> {
        self.instances.iter().filter(|q| q.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Shuffle under `seed`, assign splits by `proportions`, renumber ids.
    pub fn assign_splits(&mut self, proportions: SplitProportions, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.instances.shuffle(&mut rng);
        let (train, dev, _) = proportions.counts(self.instances.len());
        for (i, q) in self.instances.iter_mut().enumerate() {
            q.id = i;
            q.split = if i < train {
                Split::Train
            } else if i < train + dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }

    pub fn to_jsonl(&self, kb: &KnowledgeBase) -> String {
        let mut out = String::new();
        for q in &self.instances {
            let rec = QaRecord::from_instance(q, kb);
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, kb: &KnowledgeBase) -> Result<Self, DatasetError> {
        let mut instances = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QaRecord =
                serde_json::from_str(line).map_err(|source| DatasetError::Json { line: line_no, source })?;
            instances.push(rec.resolve(kb, line_no)?);
        }
        Ok(Self { instances })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub name: String,
    pub etype: String,
}

impl EntityRef {
    fn of(kb: &KnowledgeBase, id: EntityId) -> Self {
        let e = &kb.entities()[id];
        Self {
            name: e.name.clone(),
            etype: e.etype.clone(),
        }
    }
}

/// One line of a QA dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: usize,
    pub template: usize,
    pub question: String,
    pub tokens: Vec<String>,
    pub topic_entities: Vec<EntityRef>,
    pub root: EntityRef,
    pub constraints: Vec<EntityRef>,
    pub answer_type: String,
    pub gold_answers: Vec<EntityRef>,
    pub split: Split,
}

impl QaRecord {
    pub fn from_instance(q: &QaInstance, kb: &KnowledgeBase) -> Self {
        Self {
            id: q.id,
            template: q.template,
            question: q.question.clone(),
            tokens: q.question_tokens.clone(),
            topic_entities: q.topic_entities.iter().map(|&e| EntityRef::of(kb, e)).collect(),
            root: EntityRef::of(kb, q.root_entity),
            constraints: q.constraints.iter().map(|&e| EntityRef::of(kb, e)).collect(),
            answer_type: q.answer_type.clone(),
            gold_answers: q.gold_answers.iter().map(|&e| EntityRef::of(kb, e)).collect(),
            split: q.split,
        }
    }

    fn resolve(&self, kb: &KnowledgeBase, line: usize) -> Result<QaInstance, DatasetError> {
        let find = |r: &EntityRef| {
            kb.lookup(&r.name, &r.etype).ok_or_else(|| DatasetError::Unresolved {
                line,
                name: r.name.clone(),
                etype: r.etype.clone(),
            })
        };
        let gold_answers: BTreeSet<EntityId> =
            self.gold_answers.iter().map(find).collect::<Result<_, _>>()?;
        if gold_answers.is_empty() {
            return Err(DatasetError::NoGold { line });
        }
        Ok(QaInstance {
            id: self.id,
            template: self.template,
            question: self.question.clone(),
            question_tokens: self.tokens.clone(),
            topic_entities: self.topic_entities.iter().map(find).collect::<Result<_, _>>()?,
            root_entity: find(&self.root)?,
            constraints: self.constraints.iter().map(find).collect::<Result<_, _>>()?,
            answer_type: self.answer_type.clone(),
            gold_answers,
            split: self.split,
        })
    }
}
