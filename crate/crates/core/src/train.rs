//! Pairwise hinge training, evaluation and aspect ablation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Gradients, Graph, ParamStore, Var};
use crate::candidates::{generate_candidates, CandidateAnswer, CandidateError, CandidateSet};
use crate::dataset::{Dataset, Split};
use crate::kb::{EntityId, KnowledgeBase};
use crate::metrics::{compute_metrics, Metrics, QuestionOutcome};
use crate::model::{predict, AspectSet, Model, ModelConfig, ModelError, Vocab};
use crate::par::{self, Execution};
use crate::templates::QaInstance;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candidates(#[from] CandidateError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("loss diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training margin.
    pub gamma: f64,
    /// Inference threshold; the margin when unset.
    pub infer_gamma: Option<f64>,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            gamma: 0.2,
            infer_gamma: None,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn inference_gamma(&self) -> f64 {
        self.infer_gamma.unwrap_or(self.gamma)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.infer_gamma.is_some_and(|g| g.is_nan() || g < 0.0) {
            return bad("infer_gamma must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Indices of a gold and a non-gold entry in one question's candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingPair {
    pub question: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One uniformly drawn negative per gold entry, or `None` when the question
/// lacks gold or non-gold entries.
pub fn sample_pairs<R: Rng>(
    question: usize,
    q: &QaInstance,
    cands: &CandidateSet,
    rng: &mut R,
) -> Option<Vec<TrainingPair>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..cands.len()).partition(|&i| q.gold_answers.contains(&cands.candidates[i].entity));
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    Some(
        pos.into_iter()
            .map(|positive| TrainingPair {
                question,
                positive,
                negative: neg[rng.gen_range(0..neg.len())],
            })
            .collect(),
    )
}

/// Candidate sets for `questions`, in order.
pub fn candidate_sets(
    kb: &KnowledgeBase,
    questions: &[&QaInstance],
    exec: Execution,
) -> Result<Vec<CandidateSet>, CandidateError> {
    par::map(exec, questions, |q| generate_candidates(kb, q)).into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean hinge loss over the epoch's pairs.
    pub train_loss: f64,
    pub dev_micro_f1: f64,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,dev_micro_f1\n");
    for e in log {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.dev_micro_f1);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev: Metrics,
    /// Training questions without both gold and non-gold candidates.
    pub skipped_questions: usize,
}

/// Score every candidate and apply the margin threshold.
pub fn predict_question(model: &Model, q: &QaInstance, cands: &CandidateSet, gamma: f64) -> Result<QuestionOutcome, ModelError> {
    let scores = model.score_all(&q.question_tokens, &cands.candidates)?;
    let scored: Vec<(EntityId, f64)> = cands.candidates.iter().map(|c| c.entity).zip(scores).collect();
    let p = predict(&scored, gamma);
    Ok(QuestionOutcome {
        id: q.id,
        predicted: p.entities,
        gold: q.gold_answers.clone(),
        best: p.best,
    })
}

/// Metrics over precomputed candidate sets, plus per-question outcomes.
pub fn evaluate(
    model: &Model,
    questions: &[&QaInstance],
    cands: &[CandidateSet],
    gamma: f64,
    exec: Execution,
) -> Result<(Metrics, Vec<QuestionOutcome>), ModelError> {
    let items: Vec<(&QaInstance, &CandidateSet)> = questions.iter().copied().zip(cands).collect();
    let outcomes = par::map(exec, &items, |(q, c)| predict_question(model, q, c, gamma))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok((compute_metrics(&outcomes), outcomes))
}

/// Generate candidates for one split and evaluate on it.
pub fn evaluate_split(
    model: &Model,
    kb: &KnowledgeBase,
    dataset: &Dataset,
    split: Split,
    gamma: f64,
    exec: Execution,
) -> Result<(Metrics, Vec<QuestionOutcome>), TrainError> {
    let qs = dataset.split(split);
    if qs.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let cands = candidate_sets(kb, &qs, exec)?;
    Ok(evaluate(model, &qs, &cands, gamma, exec)?)
}

/// Vocabulary built from the training split only.
pub fn build_vocab(kb: &KnowledgeBase, train: &[&QaInstance], cands: &[CandidateSet], min_path_count: usize) -> Vocab {
    Vocab::build(
        kb,
        train.iter().map(|q| q.question_tokens.as_slice()),
        cands.iter(),
        min_path_count,
    )
}

pub fn train(dataset: &Dataset, kb: &KnowledgeBase, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let train_qs = dataset.split(Split::Train);
    let dev_qs = dataset.split(Split::Dev);
    if train_qs.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if dev_qs.is_empty() {
        return Err(TrainError::EmptySplit(Split::Dev));
    }
    let train_cands = candidate_sets(kb, &train_qs, exec)?;
    let dev_cands = candidate_sets(kb, &dev_qs, exec)?;
    let vocab = build_vocab(kb, &train_qs, &train_cands, cfg.model.min_path_count);
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let infer_gamma = cfg.inference_gamma();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut skipped_questions = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut pairs = Vec::new();
        skipped_questions = 0;
        for (i, (q, c)) in train_qs.iter().zip(&train_cands).enumerate() {
            match sample_pairs(i, q, c, &mut rng) {
                Some(p) => pairs.extend(p),
                None => skipped_questions += 1,
            }
        }
        pairs.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradients(&model, &train_qs, &train_cands, batch, cfg.gamma, exec)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss;
            if loss == 0.0 {
                continue;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads);
        }

        let (dev, _) = evaluate(&model, &dev_qs, &dev_cands, infer_gamma, exec)?;
        log.push(EpochLog {
            epoch,
            train_loss: if pairs.is_empty() { 0.0 } else { loss_sum / pairs.len() as f64 },
            dev_micro_f1: dev.micro_f1,
        });
        if best.as_ref().is_none_or(|(_, m, _)| dev.micro_f1 > m.micro_f1) {
            best = Some((epoch, dev, model.params.clone()));
        }
    }
    let (best_epoch, best_dev, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutput {
        model,
        log,
        best_epoch,
        best_dev,
        skipped_questions,
    })
}

/// Summed hinge loss and gradients of one batch, computed per question and
/// merged in question order.
fn batch_gradients(
    model: &Model,
    questions: &[&QaInstance],
    cands: &[CandidateSet],
    batch: &[TrainingPair],
    gamma: f64,
    exec: Execution,
) -> Result<(f64, Gradients), ModelError> {
    let mut groups: BTreeMap<usize, Vec<TrainingPair>> = BTreeMap::new();
    for p in batch {
        groups.entry(p.question).or_default().push(*p);
    }
    let groups: Vec<(usize, Vec<TrainingPair>)> = groups.into_iter().collect();
    let parts = par::map(exec, &groups, |(qi, pairs)| {
        question_gradients(model, questions[*qi], &cands[*qi], pairs, gamma)
    });
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        if let Some(g) = g {
            grads.accumulate(&g);
        }
    }
    Ok((loss, grads))
}

/// Summed hinge loss `Σ max(0, γ − S_pos + S_neg)` over `(positive,
/// negative)` index pairs into one question's candidates.
pub fn pair_loss(
    g: &mut Graph,
    model: &Model,
    tokens: &[String],
    cands: &[CandidateAnswer],
    pairs: &[(usize, usize)],
    gamma: f64,
) -> Result<Var, ModelError> {
    let state = model.prepare(g, tokens)?;
    let mut scored: HashMap<usize, Var> = HashMap::new();
    let needed: BTreeSet<usize> = pairs.iter().flat_map(|&(p, n)| [p, n]).collect();
    for i in needed {
        let (s, _) = model.score(g, &state, &cands[i])?;
        scored.insert(i, s);
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (p, n) in pairs {
        let diff = g.sub(scored[n], scored[p])?;
        let margin = g.add_scalar(diff, gamma);
        terms.push(g.relu(margin));
    }
    Ok(g.sum_scalars(&terms)?)
}

fn question_gradients(
    model: &Model,
    q: &QaInstance,
    cands: &CandidateSet,
    pairs: &[TrainingPair],
    gamma: f64,
) -> Result<(f64, Option<Gradients>), ModelError> {
    let mut g = Graph::new(&model.params);
    let idx: Vec<(usize, usize)> = pairs.iter().map(|p| (p.positive, p.negative)).collect();
    let loss = pair_loss(&mut g, model, &q.question_tokens, &cands.candidates, &idx, gamma)?;
    let value = g.scalar(loss);
    if value == 0.0 {
        return Ok((0.0, None));
    }
    Ok((value, Some(g.backward(loss))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub aspects: AspectSet,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

/// Train one model per aspect subset with identical seeds and report test
/// metrics for each.
pub fn ablate(
    dataset: &Dataset,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    subsets: &[AspectSet],
    exec: Execution,
) -> Result<Vec<AblationRow>, TrainError> {
    let test_qs = dataset.split(Split::Test);
    if test_qs.is_empty() {
        return Err(TrainError::EmptySplit(Split::Test));
    }
    let test_cands = candidate_sets(kb, &test_qs, exec)?;
    subsets
        .iter()
        .map(|&aspects| {
            let mut c = cfg.clone();
            c.model.aspects = aspects;
            let out = train(dataset, kb, &c, exec)?;
            let (metrics, _) = evaluate(&out.model, &test_qs, &test_cands, c.inference_gamma(), exec)?;
            Ok(AblationRow {
                aspects,
                best_epoch: out.best_epoch,
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::{CandidateAnswer, RelationPath};

    fn cand(entity: EntityId) -> CandidateAnswer {
        CandidateAnswer {
            entity,
            etype: "T".into(),
            path: RelationPath::parse("p>").unwrap(),
            context: vec![],
            traversals: vec![vec![]],
        }
    }

    fn question(gold: &[EntityId]) -> QaInstance {
        QaInstance {
            id: 0,
            template: 0,
            question: "q".into(),
            question_tokens: vec!["q".into()],
            topic_entities: vec![0],
            root_entity: 0,
            constraints: vec![],
            answer_type: "T".into(),
            gold_answers: gold.iter().copied().collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn one_negative_per_positive() {
        let set = CandidateSet {
            root: 0,
            candidates: (1..=13).map(cand).collect(),
        };
        let q = question(&[1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = sample_pairs(0, &q, &set, &mut rng).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert!(q.gold_answers.contains(&set.candidates[p.positive].entity));
            assert!(!q.gold_answers.contains(&set.candidates[p.negative].entity));
        }
        let again = sample_pairs(0, &q, &set, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn all_gold_is_skipped() {
        let set = CandidateSet {
            root: 0,
            candidates: (1..=2).map(cand).collect(),
        };
        assert!(sample_pairs(0, &question(&[1, 2]), &set, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { gamma: 1.5, ..Default::default() },
            TrainConfig { lr: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
        let csv = loss_log_csv(&[EpochLog { epoch: 1, train_loss: 0.5, dev_micro_f1: 0.25 }]);
        assert_eq!(csv, "epoch,train_loss,dev_micro_f1\n1,0.5,0.25\n");
    }
}
