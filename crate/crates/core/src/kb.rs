//! Typed-entity triple store.
//!
//! Entities are identified by their `(name, etype)` pair and carry dense ids
//! `0..N`. Ids are assigned in sorted `(name, etype)` order when the store is
//! built, so two stores holding the same facts are identical regardless of
//! the order in which those facts were supplied.
//!
//! On-disk format is line oriented, tab separated:
//!
//! ```text
//! # entity declaration
//! name<TAB>etype
//! # triple
//! subject_name<TAB>subject_type<TAB>predicate<TAB>object_name<TAB>object_type
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense entity identifier.
pub type EntityId = usize;

/// Separator used in relation-path keys. Predicates may not contain it.
pub const PATH_SEPARATOR: &str = " / ";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("line {line}: expected 2 or 5 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty {field}")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: predicate {predicate:?} contains the reserved separator {PATH_SEPARATOR:?}")]
    ReservedPredicate { line: usize, predicate: String },
    #[error("line {line}: undeclared entity {name:?} of type {etype:?}")]
    UndeclaredEntity {
        line: usize,
        name: String,
        etype: String,
    },
    #[error("line {line}: self-loop on entity {name:?}")]
    SelfLoop { line: usize, name: String },
    #[error("line {line}: duplicate triple: {text}")]
    DuplicateTriple { line: usize, text: String },
    #[error("unknown entity id {0}")]
    UnknownEntity(EntityId),
    #[error("unknown entity {name:?} of type {etype:?}")]
    UnknownName { name: String, etype: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub etype: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub predicate: usize,
    pub object: EntityId,
}

/// Traversal direction of an edge relative to the entity being expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    pub fn marker(self) -> char {
        match self {
            Direction::Out => '>',
            Direction::In => '<',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor {
    pub predicate: usize,
    pub entity: EntityId,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub entities: usize,
    pub types: usize,
    pub triples: usize,
    pub relations: usize,
}

impl fmt::Display for KbStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entities, {} types, {} triples, {} relations",
            self.entities, self.types, self.triples, self.relations
        )
    }
}

/// Immutable triple store with both adjacency directions indexed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    predicates: Vec<String>,
    types: Vec<String>,
    triples: Vec<Triple>,
    out_index: Vec<Vec<(usize, EntityId)>>,
    in_index: Vec<Vec<(usize, EntityId)>>,
    by_name: HashMap<(String, String), EntityId>,
    by_type: BTreeMap<String, Vec<EntityId>>,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KbBuilder::new().build()
    }
}

impl KnowledgeBase {
    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity, KbError> {
        self.entities.get(id).ok_or(KbError::UnknownEntity(id))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Relation labels, sorted; a triple's `predicate` indexes into this list.
    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn predicate_name(&self, predicate: usize) -> &str {
        &self.predicates[predicate]
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicates.binary_search_by(|p| p.as_str().cmp(name)).ok()
    }

    /// Entity type labels, sorted.
    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn lookup(&self, name: &str, etype: &str) -> Option<EntityId> {
        self.by_name
            .get(&(name.to_string(), etype.to_string()))
            .copied()
    }

    pub fn resolve(&self, name: &str, etype: &str) -> Result<EntityId, KbError> {
        self.lookup(name, etype).ok_or_else(|| KbError::UnknownName {
            name: name.to_string(),
            etype: etype.to_string(),
        })
    }

    /// Entities of the given type, in id order.
    pub fn entities_of_type(&self, etype: &str) -> &[EntityId] {
        self.by_type.get(etype).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn out_edges(&self, id: EntityId) -> &[(usize, EntityId)] {
        &self.out_index[id]
    }

    pub fn in_edges(&self, id: EntityId) -> &[(usize, EntityId)] {
        &self.in_index[id]
    }

    /// Every triple incident to `id`, ordered by predicate, then neighbor id,
    /// then direction (out before in).
    pub fn neighbors(&self, id: EntityId) -> Result<Vec<Neighbor>, KbError> {
        if id >= self.entities.len() {
            return Err(KbError::UnknownEntity(id));
        }
        let mut out: Vec<Neighbor> = self.out_index[id]
            .iter()
            .map(|&(predicate, entity)| Neighbor {
                predicate,
                entity,
                direction: Direction::Out,
            })
            .chain(self.in_index[id].iter().map(|&(predicate, entity)| Neighbor {
                predicate,
                entity,
                direction: Direction::In,
            }))
            .collect();
        out.sort_by_key(|n| (n.predicate, n.entity, n.direction));
        Ok(out)
    }

    pub fn degree(&self, id: EntityId) -> usize {
        self.out_index[id].len() + self.in_index[id].len()
    }

    pub fn stats(&self) -> KbStats {
        KbStats {
            entities: self.entities.len(),
            types: self.types.len(),
            triples: self.triples.len(),
            relations: self.predicates.len(),
        }
    }

    /// Canonical text form: declarations in id order, then triples sorted by
    /// `(subject, predicate, object)`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entities {
            s.push_str(&e.name);
            s.push('\t');
            s.push_str(&e.etype);
            s.push('\n');
        }
        for t in &self.triples {
            let subj = &self.entities[t.subject];
            let obj = &self.entities[t.object];
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                subj.name, subj.etype, self.predicates[t.predicate], obj.name, obj.etype
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        fs::write(path, self.to_tsv()).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Load a KB from a triple file.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kb(&text)
}

pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KbError> {
    let mut declared: BTreeSet<(String, String)> = BTreeSet::new();
    let mut raw_triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        match fields.len() {
            2 => {
                let name = non_empty(fields[0], line, "entity name")?;
                let etype = non_empty(fields[1], line, "entity type")?;
                declared.insert((name.to_string(), etype.to_string()));
            }
            5 => {
                let s = non_empty(fields[0], line, "subject name")?;
                let st = non_empty(fields[1], line, "subject type")?;
                let p = non_empty(fields[2], line, "predicate")?;
                let o = non_empty(fields[3], line, "object name")?;
                let ot = non_empty(fields[4], line, "object type")?;
                if p.contains(PATH_SEPARATOR) {
                    return Err(KbError::ReservedPredicate {
                        line,
                        predicate: p.to_string(),
                    });
                }
                raw_triples.push((line, raw, (s, st), p, (o, ot)));
            }
            found => return Err(KbError::FieldCount { line, found }),
        }
    }

    let mut builder = KbBuilder::new();
    for (name, etype) in &declared {
        builder.add_entity(name, etype);
    }
    let mut seen = BTreeSet::new();
    for (line, raw, (s, st), p, (o, ot)) in raw_triples {
        for (name, etype) in [(s, st), (o, ot)] {
            if !declared.contains(&(name.to_string(), etype.to_string())) {
                return Err(KbError::UndeclaredEntity {
                    line,
                    name: name.to_string(),
                    etype: etype.to_string(),
                });
            }
        }
        if (s, st) == (o, ot) {
            return Err(KbError::SelfLoop {
                line,
                name: s.to_string(),
            });
        }
        if !seen.insert((s, st, p, o, ot)) {
            return Err(KbError::DuplicateTriple {
                line,
                text: raw.to_string(),
            });
        }
        builder.add_triple((s, st), p, (o, ot));
    }
    Ok(builder.build())
}

fn non_empty<'a>(field: &'a str, line: usize, what: &'static str) -> Result<&'a str, KbError> {
    if field.is_empty() {
        Err(KbError::EmptyField { line, field: what })
    } else {
        Ok(field)
    }
}

type EntityKey = (String, String);

/// Accumulates entities and triples by name; ids are assigned on [`build`].
///
/// Repeated entities and triples are merged, self-loops are dropped. Use
/// [`parse_kb`] when those should be reported as errors.
///
/// [`build`]: KbBuilder::build
#[derive(Debug, Default, Clone)]
pub struct KbBuilder {
    entities: BTreeSet<EntityKey>,
    triples: BTreeSet<(EntityKey, String, EntityKey)>,
}

impl KbBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str, etype: &str) -> &mut Self {
        self.entities.insert((name.to_string(), etype.to_string()));
        self
    }

    /// Adds a triple, declaring both endpoints. Returns false if the triple
    /// was already present or is a self-loop.
    pub fn add_triple(&mut self, subject: (&str, &str), predicate: &str, object: (&str, &str)) -> bool {
        if subject == object {
            return false;
        }
        let s = (subject.0.to_string(), subject.1.to_string());
        let o = (object.0.to_string(), object.1.to_string());
        self.entities.insert(s.clone());
        self.entities.insert(o.clone());
        self.triples.insert((s, predicate.to_string(), o))
    }

    pub fn contains_triple(&self, subject: (&str, &str), predicate: &str, object: (&str, &str)) -> bool {
        let key = (
            (subject.0.to_string(), subject.1.to_string()),
            predicate.to_string(),
            (object.0.to_string(), object.1.to_string()),
        );
        self.triples.contains(&key)
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn build(self) -> KnowledgeBase {
        let entities: Vec<Entity> = self
            .entities
            .into_iter()
            .enumerate()
            .map(|(id, (name, etype))| Entity { id, name, etype })
            .collect();
        let by_name: HashMap<(String, String), EntityId> = entities
            .iter()
            .map(|e| ((e.name.clone(), e.etype.clone()), e.id))
            .collect();
        let predicates: Vec<String> = self
            .triples
            .iter()
            .map(|(_, p, _)| p.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let types: Vec<String> = entities
            .iter()
            .map(|e| e.etype.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut by_type: BTreeMap<String, Vec<EntityId>> = BTreeMap::new();
        for e in &entities {
            by_type.entry(e.etype.clone()).or_default().push(e.id);
        }

        let mut triples: Vec<Triple> = self
            .triples
            .iter()
            .map(|(s, p, o)| Triple {
                subject: by_name[s],
                predicate: predicates.binary_search(p).expect("predicate collected above"),
                object: by_name[o],
            })
            .collect();
        triples.sort();

        let n = entities.len();
        let mut out_index = vec![Vec::new(); n];
        let mut in_index = vec![Vec::new(); n];
        for t in &triples {
            out_index[t.subject].push((t.predicate, t.object));
            in_index[t.object].push((t.predicate, t.subject));
        }
        for list in in_index.iter_mut() {
            list.sort();
        }

        KnowledgeBase {
            entities,
            predicates,
            types,
            triples,
            out_index,
            in_index,
            by_name,
            by_type,
        }
    }
}
