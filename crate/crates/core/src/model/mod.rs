//! Attention-based aspect reasoning ranker and the subgraph-embedding
//! baseline.
//!
//! A question is encoded by word embeddings and a bidirectional LSTM into
//! hidden states `H`. Each candidate answer contributes up to four aspect
//! vectors (entity, type, path, context). Every aspect attends over `H`,
//! yielding an aspect-conditioned question vector `r`; the aspect's
//! similarity is `s = h_x·r` and its weight is `w = mean(H)·r`. A candidate's
//! score is `Σ w·s` over the active aspects.

mod encoder;
mod score;
mod vocab;

pub use encoder::{encode_question, LstmParams, QuestionEncoding};
pub use score::{
    aspect_attention, attend, combine_aspects, hinge_loss, predict, project_question, AspectScore,
    Prediction, ScoreBreakdown,
};
pub use vocab::{Vocab, VocabSpec, PAD, UNK};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{read_checkpoint, write_checkpoint, CheckpointError, Graph, ParamId, ParamStore, ShapeError, Tensor, Var};
use crate::candidates::CandidateAnswer;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("empty question")]
    EmptyQuestion,
    #[error("unknown entity type {0:?}")]
    UnknownType(String),
    #[error("embedding dimension {emb} must equal twice the hidden size {hidden}")]
    Dimensions { emb: usize, hidden: usize },
    #[error("no active aspects")]
    NoAspects,
    #[error("unknown aspect {0:?}")]
    UnknownAspect(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Entity,
    Type,
    Path,
    Context,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [Aspect::Entity, Aspect::Type, Aspect::Path, Aspect::Context];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Entity => "entity",
            Aspect::Type => "type",
            Aspect::Path => "path",
            Aspect::Context => "context",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Non-empty subset of the four aspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AspectSet(u8);

impl AspectSet {
    pub const FULL: AspectSet = AspectSet(0b1111);

    pub fn new(aspects: &[Aspect]) -> Result<Self, ModelError> {
        let bits = aspects.iter().fold(0u8, |b, a| b | (1 << a.index()));
        if bits == 0 {
            return Err(ModelError::NoAspects);
        }
        Ok(Self(bits))
    }

    pub fn contains(self, a: Aspect) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Aspect> {
        Aspect::ALL.into_iter().filter(move |&a| self.contains(a))
    }
}

impl Default for AspectSet {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for AspectSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::FULL {
            return f.write_str("full");
        }
        let names: Vec<&str> = self.iter().map(Aspect::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for AspectSet {
    type Err = ModelError;

    /// `full`, or aspect names joined by `+` or `&`, e.g. `type+path`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "full" || s == "all" {
            return Ok(Self::FULL);
        }
        let mut aspects = Vec::new();
        for part in s.split(['+', '&']) {
            aspects.push(match part.trim() {
                "entity" => Aspect::Entity,
                "type" => Aspect::Type,
                "path" => Aspect::Path,
                "context" => Aspect::Context,
                other => return Err(ModelError::UnknownAspect(other.to_string())),
            });
        }
        Self::new(&aspects)
    }
}

impl TryFrom<String> for AspectSet {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AspectSet> for String {
    fn from(a: AspectSet) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Aar,
    Sgemb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Width of every embedding table and of the encoder output.
    pub emb_dim: usize,
    /// Hidden size of each LSTM direction; `2 * hidden == emb_dim`.
    pub hidden: usize,
    pub init_bound: f64,
    /// Softmax-normalise aspect weights across aspects before combining.
    pub normalize_aspect_weights: bool,
    /// Path keys seen fewer times than this in training get no table row
    /// and are embedded through their relation steps.
    pub min_path_count: usize,
    pub aspects: AspectSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Aar,
            emb_dim: 300,
            hidden: 150,
            init_bound: 0.08,
            normalize_aspect_weights: false,
            min_path_count: 2,
            aspects: AspectSet::FULL,
        }
    }
}

impl ModelConfig {
    pub fn with_dims(emb_dim: usize) -> Self {
        Self {
            emb_dim,
            hidden: emb_dim / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.emb_dim != 2 * self.hidden || self.hidden == 0 {
            return Err(ModelError::Dimensions {
                emb: self.emb_dim,
                hidden: self.hidden,
            });
        }
        Ok(())
    }
}

/// Parameter handles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIds {
    pub word_emb: ParamId,
    pub entity_emb: ParamId,
    pub type_emb: ParamId,
    pub path_emb: ParamId,
    pub relation_emb: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// `(W, b)` per aspect, indexed in `Aspect::ALL` order.
    pub projections: [(ParamId, ParamId); 4],
}

impl ParamIds {
    fn init(store: &mut ParamStore, vocab: &Vocab, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, b) = (cfg.emb_dim, cfg.hidden, cfg.init_bound);
        let mut add = |name: &str, shape: Vec<usize>| store.insert(name, Tensor::uniform(shape, b, &mut rng));
        let word_emb = add("word_emb", vec![vocab.num_words(), d]);
        let entity_emb = add("entity_emb", vec![vocab.num_entities, d]);
        let type_emb = add("type_emb", vec![vocab.types.len(), d]);
        let path_emb = add("path_emb", vec![vocab.paths.len(), d]);
        let relation_emb = add("relation_emb", vec![vocab.num_relations(), d]);
        let mut lstm = |prefix: &str| LstmParams {
            w_ih: add(&format!("{prefix}.w_ih"), vec![4 * h, d]),
            w_hh: add(&format!("{prefix}.w_hh"), vec![4 * h, h]),
            bias: add(&format!("{prefix}.bias"), vec![4 * h]),
        };
        let forward = lstm("lstm_fwd");
        let backward = lstm("lstm_bwd");
        let projections = Aspect::ALL.map(|a| {
            (
                add(&format!("attn.{}.w", a.name()), vec![d, d]),
                add(&format!("attn.{}.b", a.name()), vec![d]),
            )
        });
        Self {
            word_emb,
            entity_emb,
            type_emb,
            path_emb,
            relation_emb,
            forward,
            backward,
            projections,
        }
    }

    fn lookup(store: &ParamStore) -> Result<Self, ModelError> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| ModelError::Metadata(format!("missing tensor {name:?}")))
        };
        let lstm = |prefix: &str| -> Result<LstmParams, ModelError> {
            Ok(LstmParams {
                w_ih: get(&format!("{prefix}.w_ih"))?,
                w_hh: get(&format!("{prefix}.w_hh"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let mut projections = [(ParamId(0), ParamId(0)); 4];
        for a in Aspect::ALL {
            projections[a.index()] = (
                get(&format!("attn.{}.w", a.name()))?,
                get(&format!("attn.{}.b", a.name()))?,
            );
        }
        Ok(Self {
            word_emb: get("word_emb")?,
            entity_emb: get("entity_emb")?,
            type_emb: get("type_emb")?,
            path_emb: get("path_emb")?,
            relation_emb: get("relation_emb")?,
            forward: lstm("lstm_fwd")?,
            backward: lstm("lstm_bwd")?,
            projections,
        })
    }
}

/// Per-question state shared by all of its candidates.
pub enum QuestionState {
    Aar {
        encoding: QuestionEncoding,
        /// `tanh(H Wᵀ + b)` per aspect; `None` for inactive aspects.
        projected: [Option<Var>; 4],
    },
    Sgemb {
        mean_words: Var,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub ids: ParamIds,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = ParamIds::init(&mut params, &vocab, &config, seed);
        Ok(Self {
            config,
            vocab,
            params,
            ids,
        })
    }

    pub fn aspects(&self) -> AspectSet {
        self.config.aspects
    }

    /// Encode the question and precompute what every candidate reuses.
    pub fn prepare(&self, g: &mut Graph, tokens: &[String]) -> Result<QuestionState, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let token_ids = self.vocab.word_ids(tokens);
        match self.config.kind {
            ModelKind::Aar => {
                let encoding = encode_question(g, &self.ids, &token_ids)?;
                let mut projected = [None; 4];
                for a in self.aspects().iter() {
                    let (w, b) = self.ids.projections[a.index()];
                    let (w, b) = (g.param(w), g.param(b));
                    projected[a.index()] = Some(project_question(g, encoding.hidden, w, b)?);
                }
                Ok(QuestionState::Aar { encoding, projected })
            }
            ModelKind::Sgemb => {
                let words = g.gather(self.ids.word_emb, &token_ids)?;
                Ok(QuestionState::Sgemb {
                    mean_words: g.mean_axis(words, 0)?,
                })
            }
        }
    }

    /// Aspect vector of a candidate, `None` for an empty context.
    pub fn aspect_vector(&self, g: &mut Graph, cand: &CandidateAnswer, aspect: Aspect) -> Result<Option<Var>, ModelError> {
        Ok(match aspect {
            Aspect::Entity => Some(g.embed(self.ids.entity_emb, cand.entity)?),
            Aspect::Type => {
                let t = self
                    .vocab
                    .type_id(&cand.etype)
                    .ok_or_else(|| ModelError::UnknownType(cand.etype.clone()))?;
                Some(g.embed(self.ids.type_emb, t)?)
            }
            Aspect::Path => Some(self.path_vector(g, cand)?),
            Aspect::Context if cand.context.is_empty() => None,
            Aspect::Context => {
                let rows = g.gather(self.ids.entity_emb, &cand.context)?;
                Some(g.mean_axis(rows, 0)?)
            }
        })
    }

    fn path_vector(&self, g: &mut Graph, cand: &CandidateAnswer) -> Result<Var, ModelError> {
        if let Some(p) = self.vocab.path_id(&cand.path.key) {
            return Ok(g.embed(self.ids.path_emb, p)?);
        }
        let steps: Vec<usize> = cand.path.steps.iter().map(|s| self.vocab.relation_id(s)).collect();
        let rows = g.gather(self.ids.relation_emb, &steps)?;
        Ok(g.mean_axis(rows, 0)?)
    }

    /// Score one candidate, returning the score node and, for the AAR model,
    /// the per-aspect pieces.
    pub fn score(&self, g: &mut Graph, state: &QuestionState, cand: &CandidateAnswer) -> Result<(Var, Vec<AspectScore>), ModelError> {
        match state {
            QuestionState::Aar { encoding, projected } => {
                let mut parts = Vec::new();
                for a in self.aspects().iter() {
                    let Some(h_x) = self.aspect_vector(g, cand, a)? else { continue };
                    let proj = projected[a.index()].expect("projection prepared for active aspect");
                    let (alpha, r) = attend(g, proj, encoding.hidden, h_x)?;
                    parts.push((a, h_x, alpha, r));
                }
                let (score, pieces) = combine_aspects(g, encoding.mean, &parts, self.config.normalize_aspect_weights)?;
                Ok((score, pieces))
            }
            QuestionState::Sgemb { mean_words } => Ok((self.sgemb_score(g, *mean_words, cand)?, Vec::new())),
        }
    }

    fn sgemb_score(&self, g: &mut Graph, mean_words: Var, cand: &CandidateAnswer) -> Result<Var, ModelError> {
        let e = g.embed(self.ids.entity_emb, cand.entity)?;
        let p = self.path_vector(g, cand)?;
        let mut rep = g.add(e, p)?;
        if !cand.context.is_empty() {
            let rows = g.gather(self.ids.entity_emb, &cand.context)?;
            let c = g.mean_axis(rows, 0)?;
            rep = g.add(rep, c)?;
        }
        Ok(g.dot(mean_words, rep)?)
    }

    /// Scores of all candidates of one question, in input order.
    pub fn score_all(&self, tokens: &[String], cands: &[CandidateAnswer]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let state = self.prepare(&mut g, tokens)?;
        cands
            .iter()
            .map(|c| {
                let (s, _) = self.score(&mut g, &state, c)?;
                Ok(g.scalar(s))
            })
            .collect()
    }

    /// Full breakdown of one candidate's score.
    pub fn explain(&self, tokens: &[String], cand: &CandidateAnswer) -> Result<ScoreBreakdown, ModelError> {
        let mut g = Graph::new(&self.params);
        let state = self.prepare(&mut g, tokens)?;
        let (s, aspects) = self.score(&mut g, &state, cand)?;
        Ok(ScoreBreakdown {
            aspects,
            score: g.scalar(s),
        })
    }

    pub fn save(&self, manifest: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab.to_spec(),
            "extra": extra,
        });
        write_checkpoint(manifest, &self.params, meta)?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let (params, meta) = read_checkpoint(manifest)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| ModelError::Metadata(e.to_string()))?;
        config.validate()?;
        let spec: VocabSpec = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| ModelError::Metadata(e.to_string()))?;
        let ids = ParamIds::lookup(&params)?;
        Ok((
            Self {
                config,
                vocab: Vocab::from_spec(spec),
                params,
                ids,
            },
            meta["extra"].clone(),
        ))
    }
}
