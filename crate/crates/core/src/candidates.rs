//! Candidate subgraph extraction and pruning.
//!
//! Every simple path of at most `max_hops` edges leaving the topic entity
//! (edges may be walked against their stored direction) yields a candidate
//! entry keyed by `(entity, path key)`. Distinct traversals that share an
//! entity and a key collapse into one entry that remembers all of their
//! intermediate entity sequences, which is what constraint pruning inspects.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{Direction, EntityId, KbError, KnowledgeBase, PATH_SEPARATOR};
use crate::templates::QaInstance;

pub const DEFAULT_MAX_HOPS: usize = 3;

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("max_hops must be at least 1")]
    ZeroHops,
    #[error("malformed path key {0:?}")]
    BadPathKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathStep {
    pub predicate: String,
    pub direction: Direction,
}

impl fmt::Display for PathStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.predicate, self.direction.marker())
    }
}

/// Relation sequence from the topic entity to a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationPath {
    pub steps: Vec<PathStep>,
    pub key: String,
}

impl RelationPath {
    pub fn new(steps: Vec<PathStep>) -> Self {
        let key = steps
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(PATH_SEPARATOR);
        Self { steps, key }
    }

    /// Parse a key such as `prescribed with> / has reason>`.
    pub fn parse(key: &str) -> Result<Self, CandidateError> {
        let mut steps = Vec::new();
        for part in key.split(PATH_SEPARATOR) {
            let direction = match part.chars().last() {
                Some('>') => Direction::Out,
                Some('<') => Direction::In,
                _ => return Err(CandidateError::BadPathKey(key.to_string())),
            };
            let predicate = &part[..part.len() - 1];
            if predicate.is_empty() {
                return Err(CandidateError::BadPathKey(key.to_string()));
            }
            steps.push(PathStep {
                predicate: predicate.to_string(),
                direction,
            });
        }
        Ok(Self::new(steps))
    }

    pub fn hops(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub entity: EntityId,
    pub etype: String,
    pub path: RelationPath,
    /// Neighbor ids of `entity`, in `KnowledgeBase::neighbors` order.
    pub context: Vec<EntityId>,
    /// Intermediate entities (root and candidate excluded) of every simple
    /// traversal realising `path`, sorted.
    pub traversals: Vec<Vec<EntityId>>,
}

impl CandidateAnswer {
    /// True if some traversal of this entry visits every constraint.
    fn satisfies(&self, root: EntityId, constraints: &[EntityId]) -> bool {
        self.traversals.iter().any(|via| {
            constraints
                .iter()
                .all(|&c| c == root || c == self.entity || via.contains(&c))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub root: EntityId,
    pub candidates: Vec<CandidateAnswer>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Distinct candidate entities, ascending.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut ids: Vec<EntityId> = self.candidates.iter().map(|c| c.entity).collect();
        ids.dedup();
        ids
    }
}

/// Collect every entity within `max_hops` of `root` along simple paths.
pub fn extract_subgraph(
    kb: &KnowledgeBase,
    root: EntityId,
    max_hops: usize,
) -> Result<CandidateSet, CandidateError> {
    if max_hops == 0 {
        return Err(CandidateError::ZeroHops);
    }
    kb.entity(root)?;

    let mut found = Found::new();
    let mut walk = Walk {
        kb,
        max_hops,
        nodes: vec![root],
        steps: Vec::with_capacity(max_hops),
        found: &mut found,
    };
    walk.expand(root);

    let mut contexts: HashMap<EntityId, Vec<EntityId>> = HashMap::new();
    let mut candidates = Vec::with_capacity(found.len());
    for ((entity, steps), mut traversals) in found {
        traversals.sort();
        traversals.dedup();
        let context = contexts
            .entry(entity)
            .or_insert_with(|| {
                kb.neighbors(entity)
                    .expect("entity reached by traversal")
                    .into_iter()
                    .map(|n| n.entity)
                    .collect()
            })
            .clone();
        let path = RelationPath::new(
            steps
                .into_iter()
                .map(|(p, direction)| PathStep {
                    predicate: kb.predicate_name(p).to_string(),
                    direction,
                })
                .collect(),
        );
        candidates.push(CandidateAnswer {
            entity,
            etype: kb.entities()[entity].etype.clone(),
            path,
            context,
            traversals,
        });
    }
    sort_candidates(&mut candidates);
    Ok(CandidateSet { root, candidates })
}

/// `(entity, steps)` to the intermediate nodes of each traversal.
type Found = BTreeMap<(EntityId, Vec<(usize, Direction)>), Vec<Vec<EntityId>>>;

struct Walk<'a> {
    kb: &'a KnowledgeBase,
    max_hops: usize,
    nodes: Vec<EntityId>,
    steps: Vec<(usize, Direction)>,
    found: &'a mut Found,
}

impl Walk<'_> {
    fn expand(&mut self, at: EntityId) {
        let kb = self.kb;
        let outs = kb.out_edges(at).iter().map(|&(p, e)| (p, e, Direction::Out));
        let ins = kb.in_edges(at).iter().map(|&(p, e)| (p, e, Direction::In));
        for (p, next, dir) in outs.chain(ins) {
            if self.nodes.contains(&next) {
                continue;
            }
            self.steps.push((p, dir));
            self.found
                .entry((next, self.steps.clone()))
                .or_default()
                .push(self.nodes[1..].to_vec());
            if self.steps.len() < self.max_hops {
                self.nodes.push(next);
                self.expand(next);
                self.nodes.pop();
            }
            self.steps.pop();
        }
    }
}

fn sort_candidates(c: &mut [CandidateAnswer]) {
    c.sort_by(|a, b| (a.entity, &a.path.key).cmp(&(b.entity, &b.path.key)));
}

/// Keep candidates of `answer_type` whose path visits every constraint.
pub fn prune(cands: &CandidateSet, constraints: &[EntityId], answer_type: &str) -> CandidateSet {
    let root = cands.root;
    let candidates = cands
        .candidates
        .iter()
        .filter(|c| c.etype == answer_type && c.satisfies(root, constraints))
        .map(|c| {
            let mut kept = c.clone();
            kept.traversals.retain(|via| {
                constraints
                    .iter()
                    .all(|&k| k == root || k == c.entity || via.contains(&k))
            });
            kept
        })
        .collect();
    CandidateSet { root, candidates }
}

/// Extract from the question's root and prune with its constraints and
/// expected answer type.
pub fn generate_candidates(kb: &KnowledgeBase, q: &QaInstance) -> Result<CandidateSet, CandidateError> {
    for &c in &q.constraints {
        kb.entity(c)?;
    }
    let sub = extract_subgraph(kb, q.root_entity, DEFAULT_MAX_HOPS)?;
    Ok(prune(&sub, &q.constraints, &q.answer_type))
}
