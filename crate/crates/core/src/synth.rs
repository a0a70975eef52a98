//! Synthetic typed knowledge bases and template datasets.
//!
//! Hub entities (patients) sit at the centre of the type graph. Every other
//! entity is attached once to a parent whose type is one step closer to the
//! hub, so the KB is a forest of hub-rooted trees; remaining triples are
//! drawn uniformly over relation signatures until the triple target is met.
//! Hub endpoints are drawn from a power law so a few hubs get most edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, SplitProportions};
use crate::kb::{KbBuilder, KnowledgeBase};
use crate::templates::{populate, Template, TemplateError, TemplateSpec};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("infeasible profile: {0}")]
    Infeasible(String),
    #[error("no template produced an answerable question")]
    NoInstances,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSignature {
    pub predicate: String,
    /// Allowed `(subject type, object type)` pairs.
    pub signatures: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbProfile {
    pub name: String,
    pub entities: usize,
    pub triples: usize,
    /// Number of hub entities.
    pub patients: usize,
    #[serde(default = "default_hub")]
    pub hub_type: String,
    /// Power-law exponent for hub endpoint selection.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Relative share of non-hub entities per type; missing types weigh 1.
    #[serde(default)]
    pub type_weights: BTreeMap<String, f64>,
    pub relations: Vec<RelationSignature>,
}

fn default_hub() -> String {
    "Patient".to_string()
}

fn default_alpha() -> f64 {
    1.0
}

fn sig(predicate: &str, pairs: &[(&str, &str)]) -> RelationSignature {
    RelationSignature {
        predicate: predicate.to_string(),
        signatures: pairs.iter().map(|(s, o)| (s.to_string(), o.to_string())).collect(),
    }
}

impl KbProfile {
    /// 1,000 entities, 10 types, 3,000 triples, 8 relations.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            entities: 1000,
            triples: 3000,
            patients: 60,
            hub_type: default_hub(),
            alpha: 1.0,
            type_weights: [("Medication", 3.0), ("Disease", 2.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            relations: vec![
                sig("prescribed with", &[("Patient", "Medication")]),
                sig("has reason", &[("Medication", "Disease"), ("Procedure", "Disease")]),
                sig("has dosage", &[("Medication", "Dosage")]),
                sig("has frequency", &[("Medication", "Frequency")]),
                sig("has route", &[("Medication", "Route")]),
                sig("has comorbidity", &[("Disease", "Disease"), ("Disease", "Symptom")]),
                sig("underwent", &[("Patient", "Test"), ("Patient", "Procedure")]),
                sig("has result", &[("Test", "TestResult")]),
            ],
        }
    }

    /// Full-size medication KB: 28,821 entities, 46 types, 53,519 triples,
    /// 14 relations, 261 patients.
    pub fn medications() -> Self {
        Self {
            name: "medications".into(),
            entities: 28_821,
            triples: 53_519,
            patients: 261,
            hub_type: default_hub(),
            alpha: 1.0,
            type_weights: BTreeMap::new(),
            relations: vec![
                sig("prescribed with", &[("Patient", "Medication")]),
                sig("has dosage", &[("Medication", "Dosage"), ("Medication", "Strength"), ("Medication", "Quantity")]),
                sig("has frequency", &[("Medication", "Frequency"), ("Medication", "Time")]),
                sig("has route", &[("Medication", "Route"), ("Medication", "Form")]),
                sig("has duration", &[("Medication", "Duration"), ("Medication", "Date")]),
                sig(
                    "has reason",
                    &[("Medication", "Reason"), ("Medication", "Disease"), ("Procedure", "Disease"), ("Treatment", "Problem")],
                ),
                sig("has adverse event", &[("Medication", "AdverseEvent"), ("Vaccine", "AdverseEvent")]),
                sig(
                    "has comorbidity",
                    &[("Disease", "Disease"), ("Disease", "Symptom"), ("Disease", "Diagnosis"), ("Problem", "Finding")],
                ),
                sig("has test", &[("Patient", "Test"), ("Patient", "Lab"), ("Patient", "Imaging"), ("Patient", "Vital")]),
                sig(
                    "has result",
                    &[("Test", "TestResult"), ("Lab", "LabValue"), ("Imaging", "ImagingFinding"), ("LabValue", "Unit")],
                ),
                sig(
                    "underwent",
                    &[
                        ("Patient", "Procedure"),
                        ("Patient", "Surgery"),
                        ("Patient", "Treatment"),
                        ("Patient", "Vaccine"),
                        ("Patient", "Visit"),
                    ],
                ),
                sig(
                    "located at",
                    &[("Surgery", "SurgerySite"), ("Finding", "BodySite"), ("Symptom", "BodySite"), ("Visit", "Department")],
                ),
                sig(
                    "has attribute",
                    &[
                        ("Disease", "Severity"),
                        ("Disease", "Onset"),
                        ("Problem", "Status"),
                        ("Symptom", "Modifier"),
                        ("Procedure", "Device"),
                        ("TestResult", "Outcome"),
                    ],
                ),
                sig(
                    "has history",
                    &[
                        ("Patient", "Allergy"),
                        ("Patient", "Smoking"),
                        ("Patient", "Alcohol"),
                        ("Patient", "Occupation"),
                        ("Patient", "FamilyHistory"),
                        ("Patient", "Problem"),
                        ("Visit", "Provider"),
                    ],
                ),
            ],
        }
    }

    /// Built-in profile by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "medications" => Some(Self::medications()),
            _ => None,
        }
    }

    /// Entity, triple and hub counts scaled by `f`; types and relations kept.
    pub fn scaled(&self, f: f64) -> Self {
        let scale = |n: usize| ((n as f64) * f).round().max(1.0) as usize;
        Self {
            name: format!("{}@{f}", self.name),
            entities: scale(self.entities),
            triples: scale(self.triples),
            patients: scale(self.patients),
            ..self.clone()
        }
    }

    /// Entity types in sorted order; the hub type is always included.
    pub fn types(&self) -> Vec<String> {
        let mut types: BTreeSet<&str> = BTreeSet::new();
        types.insert(&self.hub_type);
        for r in &self.relations {
            for (s, o) in &r.signatures {
                types.insert(s);
                types.insert(o);
            }
        }
        types.into_iter().map(str::to_string).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Profile(m));
        if self.relations.is_empty() {
            return bad("at least one relation is required".into());
        }
        let mut preds = BTreeSet::new();
        for r in &self.relations {
            if r.signatures.is_empty() {
                return bad(format!("relation {:?} has no signatures", r.predicate));
            }
            if !preds.insert(&r.predicate) {
                return bad(format!("relation {:?} is listed twice", r.predicate));
            }
            if r.predicate.is_empty() || r.predicate.contains(['\t', '\n']) || r.predicate.contains(crate::kb::PATH_SEPARATOR) {
                return bad(format!("relation name {:?} is not allowed", r.predicate));
            }
        }
        if self.patients == 0 || self.entities == 0 || self.triples == 0 {
            return bad("entity, triple and patient counts must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative".into());
        }
        if self.type_weights.values().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("type weights must be positive".into());
        }
        Ok(())
    }
}

fn slug(etype: &str) -> String {
    let mut out = String::new();
    for (i, c) in etype.chars().enumerate() {
        if c.is_uppercase() && i > 0 && !out.ends_with('_') {
            out.push('_');
        }
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out
}

/// Largest-remainder split of `total` by `weights`, at least one each.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let n = weights.len();
    let spare = total - n;
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| spare as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

/// One orientable link between two types through a relation signature.
#[derive(Debug, Clone)]
struct Link {
    relation: usize,
    subject: usize,
    object: usize,
}

struct Pools {
    /// Entity names per type index.
    names: Vec<Vec<String>>,
    types: Vec<String>,
    hub: usize,
    hub_weights: WeightedIndex<f64>,
}

impl Pools {
    fn pick<R: Rng>(&self, t: usize, rng: &mut R) -> usize {
        if t == self.hub {
            self.hub_weights.sample(rng)
        } else {
            rng.gen_range(0..self.names[t].len())
        }
    }
}

pub fn generate_kb(profile: &KbProfile, seed: u64) -> Result<KnowledgeBase, SynthError> {
    profile.validate()?;
    let types = profile.types();
    let type_ix: BTreeMap<&str, usize> = types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let hub = type_ix[profile.hub_type.as_str()];
    let links: Vec<Link> = profile
        .relations
        .iter()
        .enumerate()
        .flat_map(|(r, rel)| {
            rel.signatures.iter().map(move |(s, o)| (r, s.clone(), o.clone()))
        })
        .map(|(relation, s, o)| Link {
            relation,
            subject: type_ix[s.as_str()],
            object: type_ix[o.as_str()],
        })
        .collect();

    // Type levels by BFS from the hub over the undirected signature graph.
    let mut level = vec![usize::MAX; types.len()];
    level[hub] = 0;
    let mut queue = VecDeque::from([hub]);
    while let Some(t) = queue.pop_front() {
        for l in &links {
            for (a, b) in [(l.subject, l.object), (l.object, l.subject)] {
                if a == t && level[b] == usize::MAX {
                    level[b] = level[t] + 1;
                    queue.push_back(b);
                }
            }
        }
    }
    if let Some(t) = (0..types.len()).find(|&t| level[t] == usize::MAX) {
        return Err(SynthError::Infeasible(format!("type {:?} is not connected to the hub type", types[t])));
    }

    let others: Vec<usize> = (0..types.len()).filter(|&t| t != hub).collect();
    if profile.entities < profile.patients + others.len() {
        return Err(SynthError::Infeasible(format!(
            "{} entities cannot cover {} hubs and {} other types",
            profile.entities,
            profile.patients,
            others.len()
        )));
    }
    let weights: Vec<f64> = others
        .iter()
        .map(|&t| profile.type_weights.get(&types[t]).copied().unwrap_or(1.0))
        .collect();
    let mut counts = vec![0; types.len()];
    counts[hub] = profile.patients;
    for (&t, c) in others.iter().zip(apportion(profile.entities - profile.patients, &weights)) {
        counts[t] = c;
    }

    let tree_edges = profile.entities - profile.patients;
    if profile.triples < tree_edges + profile.relations.len() {
        return Err(SynthError::Infeasible(format!(
            "{} triples cannot attach {} entities and cover {} relations",
            profile.triples,
            tree_edges,
            profile.relations.len()
        )));
    }
    let mut capacity: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut total_capacity = 0usize;
    for l in &links {
        if capacity.insert((l.relation, l.subject, l.object)) {
            let pairs = counts[l.subject] * counts[l.object];
            total_capacity += if l.subject == l.object { pairs - counts[l.subject] } else { pairs };
        }
    }
    if profile.triples > total_capacity {
        return Err(SynthError::Infeasible(format!(
            "{} triples exceed the {} signature-respecting pairs",
            profile.triples, total_capacity
        )));
    }

    let names: Vec<Vec<String>> = types
        .iter()
        .enumerate()
        .map(|(t, name)| {
            let width = counts[t].saturating_sub(1).to_string().len().max(4);
            let s = slug(name);
            (0..counts[t]).map(|i| format!("{s}_{i:0width$}")).collect()
        })
        .collect();
    let hub_weights =
        WeightedIndex::new((0..profile.patients).map(|i| ((i + 1) as f64).powf(-profile.alpha))).expect("positive weights");
    let pools = Pools {
        names,
        types: types.clone(),
        hub,
        hub_weights,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Writer {
        b: KbBuilder::new(),
        pools: &pools,
        predicates: profile.relations.iter().map(|r| r.predicate.as_str()).collect(),
        used: vec![false; profile.relations.len()],
    };
    for (t, names) in pools.names.iter().enumerate() {
        for n in names {
            w.b.add_entity(n, &pools.types[t]);
        }
    }

    // Attach every non-hub entity to a parent one level closer to the hub.
    let mut by_level = others.clone();
    by_level.sort_by_key(|&t| (level[t], t));
    for &t in &by_level {
        let parents: Vec<(&Link, bool)> = links
            .iter()
            .filter_map(|l| {
                if l.object == t && l.subject != t && level[l.subject] + 1 == level[t] {
                    Some((l, true))
                } else if l.subject == t && l.object != t && level[l.object] + 1 == level[t] {
                    Some((l, false))
                } else {
                    None
                }
            })
            .collect();
        for e in 0..counts[t] {
            let &(l, parent_is_subject) = parents.choose(&mut rng).expect("BFS gives a parent link");
            let added = if parent_is_subject {
                let p = pools.pick(l.subject, &mut rng);
                w.add(l, p, e)
            } else {
                let p = pools.pick(l.object, &mut rng);
                w.add(l, e, p)
            };
            debug_assert!(added, "tree edges are new");
        }
    }

    // Make sure every relation occurs, then fill up to the triple target.
    let by_relation: Vec<Vec<&Link>> = (0..profile.relations.len())
        .map(|r| links.iter().filter(|l| l.relation == r).collect())
        .collect();
    for (r, mine) in by_relation.iter().enumerate() {
        let mut tries = 0;
        while !w.used[r] && tries < 10_000 {
            let l = *mine.choose(&mut rng).expect("validated");
            w.add_random(l, &mut rng);
            tries += 1;
        }
        if !w.used[r] {
            w.fill_exhaustive(mine[0], 1, &mut rng);
        }
    }
    let mut failures = 0;
    while w.b.num_triples() < profile.triples {
        let mine = by_relation.choose(&mut rng).expect("validated");
        let l = *mine.choose(&mut rng).expect("validated");
        if w.add_random(l, &mut rng) {
            failures = 0;
            continue;
        }
        failures += 1;
        if failures > 10_000 {
            let mut remaining = profile.triples - w.b.num_triples();
            let mut all: Vec<&Link> = links.iter().collect();
            all.shuffle(&mut rng);
            for l in all {
                remaining -= w.fill_exhaustive(l, remaining, &mut rng);
                if remaining == 0 {
                    break;
                }
            }
        }
    }
    Ok(w.b.build())
}

struct Writer<'a> {
    b: KbBuilder,
    pools: &'a Pools,
    predicates: Vec<&'a str>,
    used: Vec<bool>,
}

impl Writer<'_> {
    fn add(&mut self, l: &Link, s: usize, o: usize) -> bool {
        let p = self.pools;
        let ok = self.b.add_triple(
            (&p.names[l.subject][s], &p.types[l.subject]),
            self.predicates[l.relation],
            (&p.names[l.object][o], &p.types[l.object]),
        );
        if ok {
            self.used[l.relation] = true;
        }
        ok
    }

    fn add_random(&mut self, l: &Link, rng: &mut ChaCha8Rng) -> bool {
        let s = self.pools.pick(l.subject, rng);
        let o = self.pools.pick(l.object, rng);
        self.add(l, s, o)
    }

    /// Add up to `want` edges for `l` drawn from all free pairs; returns how
    /// many were added.
    fn fill_exhaustive(&mut self, l: &Link, want: usize, rng: &mut ChaCha8Rng) -> usize {
        let (ns, no) = (self.pools.names[l.subject].len(), self.pools.names[l.object].len());
        let mut pairs: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..no).map(move |o| (s, o))).collect();
        pairs.shuffle(rng);
        let mut added = 0;
        for (s, o) in pairs {
            if added == want {
                break;
            }
            if self.add(l, s, o) {
                added += 1;
            }
        }
        added
    }
}

/// Twelve templates over the desk profile's vocabulary.
pub fn desk_templates() -> Vec<Template> {
    let t = |text: &str, root: Option<&str>, answer: &str, paths: &[&str]| {
        Template::from_spec(&TemplateSpec {
            text: text.to_string(),
            root: root.map(str::to_string),
            answer_type: answer.to_string(),
            answer_paths: paths.iter().map(|p| p.to_string()).collect(),
            cap: None,
        })
        .expect("built-in template parses")
    };
    vec![
        t("what medications is patient |Patient| prescribed ?", None, "Medication", &["prescribed with>"]),
        t("what does patient |Patient| take |Medication| for ?", None, "Disease", &["prescribed with> / has reason>"]),
        t(
            "what is the dosage of |Medication| for patient |Patient| ?",
            Some("Patient"),
            "Dosage",
            &["prescribed with> / has dosage>"],
        ),
        t("how often does |Patient| take |Medication| ?", None, "Frequency", &["prescribed with> / has frequency>"]),
        t(
            "how is |Medication| given to patient |Patient| ?",
            Some("Patient"),
            "Route",
            &["prescribed with> / has route>"],
        ),
        t("give me all patients who have been prescribed with |Medication| .", None, "Patient", &["prescribed with<"]),
        t("which medications treat |Disease| ?", None, "Medication", &["has reason<"]),
        t("what tests did patient |Patient| undergo ?", None, "Test", &["underwent>"]),
        t("what were the results of |Test| for |Patient| ?", Some("Patient"), "TestResult", &["underwent> / has result>"]),
        t(
            "what conditions does patient |Patient| have ?",
            None,
            "Disease",
            &["prescribed with> / has reason>", "underwent> / has reason>"],
        ),
        t("what comorbidities are associated with |Disease| ?", None, "Disease", &["has comorbidity>", "has comorbidity<"]),
        t(
            "what symptoms come with the reason |Patient| takes |Medication| ?",
            None,
            "Symptom",
            &["prescribed with> / has reason> / has comorbidity>"],
        ),
    ]
}

/// Populate every template (each with its own cap) and assign splits.
pub fn generate_dataset(
    kb: &KnowledgeBase,
    templates: &[Template],
    proportions: SplitProportions,
    seed: u64,
) -> Result<Dataset, SynthError> {
    let mut instances = Vec::new();
    for (i, t) in templates.iter().enumerate() {
        t.validate(kb)?;
        let template_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        instances.extend(populate(t, i, kb, t.cap, template_seed)?);
    }
    if instances.is_empty() {
        return Err(SynthError::NoInstances);
    }
    let mut ds = Dataset::new(instances);
    ds.assign_splits(proportions, seed);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_is_exact() {
        let c = apportion(100, &[3.0, 1.0, 1.0]);
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert!(c.iter().all(|&x| x >= 1));
        assert_eq!(apportion(3, &[1.0, 5.0, 9.0]), vec![1, 1, 1]);
    }

    #[test]
    fn slugs_are_readable() {
        assert_eq!(slug("Medication"), "medication");
        assert_eq!(slug("TestResult"), "test_result");
        assert_eq!(slug("Adverse Event"), "adverse_event");
    }

    #[test]
    fn single_signature_profile() {
        let p = KbProfile {
            name: "ab".into(),
            entities: 30,
            triples: 60,
            patients: 10,
            hub_type: "A".into(),
            alpha: 1.0,
            type_weights: BTreeMap::new(),
            relations: vec![sig("r", &[("A", "B")])],
        };
        let kb = generate_kb(&p, 1).unwrap();
        let s = kb.stats();
        assert_eq!((s.entities, s.types, s.triples, s.relations), (30, 2, 60, 1));
        for t in kb.triples() {
            assert_eq!(kb.entities()[t.subject].etype, "A");
            assert_eq!(kb.entities()[t.object].etype, "B");
        }
    }

    #[test]
    fn too_many_triples_is_infeasible() {
        let p = KbProfile {
            name: "tight".into(),
            entities: 4,
            triples: 5,
            patients: 2,
            hub_type: "A".into(),
            alpha: 1.0,
            type_weights: BTreeMap::new(),
            relations: vec![sig("r", &[("A", "B")])],
        };
        assert!(matches!(generate_kb(&p, 0), Err(SynthError::Infeasible(_))));
        let exact = KbProfile { triples: 4, ..p };
        assert_eq!(generate_kb(&exact, 0).unwrap().stats().triples, 4);
    }

    #[test]
    fn desk_profile_hits_targets() {
        let kb = generate_kb(&KbProfile::desk(), 7).unwrap();
        let s = kb.stats();
        assert_eq!((s.entities, s.types, s.triples, s.relations), (1000, 10, 3000, 8));
        assert_eq!(kb.to_tsv(), generate_kb(&KbProfile::desk(), 7).unwrap().to_tsv());
        for t in desk_templates() {
            t.validate(&kb).unwrap();
        }
    }
}
