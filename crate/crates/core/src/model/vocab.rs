use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSet, PathStep};
use crate::kb::{Direction, KnowledgeBase};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lookup tables mapping symbols to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub words: Vec<String>,
    pub types: Vec<String>,
    pub paths: Vec<String>,
    /// Relation steps such as `has reason>`; row 0 is the unknown step.
    pub relations: Vec<String>,
    pub num_entities: usize,
    word_index: HashMap<String, usize>,
    type_index: HashMap<String, usize>,
    path_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

/// Serialized form stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub words: Vec<String>,
    pub types: Vec<String>,
    pub paths: Vec<String>,
    pub relations: Vec<String>,
    pub num_entities: usize,
}

fn index(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

impl Vocab {
    /// Words come from training questions, paths from training candidate
    /// sets (keys seen at least `min_path_count` times), types and relation
    /// steps from the KB.
    pub fn build<'a>(
        kb: &KnowledgeBase,
        questions: impl IntoIterator<Item = &'a [String]>,
        candidate_sets: impl IntoIterator<Item = &'a CandidateSet>,
        min_path_count: usize,
    ) -> Self {
        let words: BTreeSet<&str> = questions
            .into_iter()
            .flat_map(|q| q.iter().map(String::as_str))
            .collect();
        let mut path_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for set in candidate_sets {
            for c in &set.candidates {
                *path_counts.entry(c.path.key.as_str()).or_default() += 1;
            }
        }
        let mut relations = vec!["<unk>".to_string()];
        for p in kb.predicates() {
            for direction in [Direction::Out, Direction::In] {
                relations.push(
                    PathStep {
                        predicate: p.clone(),
                        direction,
                    }
                    .to_string(),
                );
            }
        }
        Self::from_spec(VocabSpec {
            words: ["<pad>", "<unk>"]
                .into_iter()
                .chain(words)
                .map(str::to_string)
                .collect(),
            types: kb.types().to_vec(),
            paths: path_counts
                .into_iter()
                .filter(|&(_, n)| n >= min_path_count.max(1))
                .map(|(k, _)| k.to_string())
                .collect(),
            relations,
            num_entities: kb.num_entities(),
        })
    }

    pub fn from_spec(spec: VocabSpec) -> Self {
        Self {
            word_index: index(&spec.words),
            type_index: index(&spec.types),
            path_index: index(&spec.paths),
            relation_index: index(&spec.relations),
            words: spec.words,
            types: spec.types,
            paths: spec.paths,
            relations: spec.relations,
            num_entities: spec.num_entities,
        }
    }

    pub fn to_spec(&self) -> VocabSpec {
        VocabSpec {
            words: self.words.clone(),
            types: self.types.clone(),
            paths: self.paths.clone(),
            relations: self.relations.clone(),
            num_entities: self.num_entities,
        }
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.word_index.get(w).copied().unwrap_or(UNK)
    }

    pub fn word_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }

    pub fn type_id(&self, t: &str) -> Option<usize> {
        self.type_index.get(t).copied()
    }

    pub fn path_id(&self, key: &str) -> Option<usize> {
        self.path_index.get(key).copied()
    }

    pub fn relation_id(&self, step: &PathStep) -> usize {
        self.relation_index.get(&step.to_string()).copied().unwrap_or(0)
    }
}
