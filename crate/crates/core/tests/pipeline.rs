use std::collections::BTreeSet;

use kbqa_core::candidates::{extract_subgraph, generate_candidates, prune, DEFAULT_MAX_HOPS};
use kbqa_core::dataset::{Dataset, Split, SplitProportions};
use kbqa_core::export::attention_csv;
use kbqa_core::kb::{parse_kb, KnowledgeBase};
use kbqa_core::model::{Model, ModelConfig, ModelKind};
use kbqa_core::par::Execution;
use kbqa_core::synth::{desk_templates, generate_dataset, generate_kb, KbProfile};
use kbqa_core::train::{build_vocab, candidate_sets, evaluate, train, TrainConfig};

fn desk(seed: u64) -> (KnowledgeBase, Dataset) {
    let kb = generate_kb(&KbProfile::desk(), seed).unwrap();
    let ds = generate_dataset(&kb, &desk_templates(), SplitProportions::default(), seed).unwrap();
    (kb, ds)
}

fn small_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        seed: 3,
        model: ModelConfig::with_dims(16),
        ..TrainConfig::default()
    }
}

#[test]
fn gold_is_always_among_candidates() {
    for seed in [1, 2] {
        let (kb, ds) = desk(seed);
        for q in &ds.instances {
            let ents: BTreeSet<_> = generate_candidates(&kb, q).unwrap().entities().into_iter().collect();
            assert!(q.gold_answers.is_subset(&ents), "question {} misses gold", q.id);
        }
    }
}

#[test]
fn pruning_is_idempotent() {
    let (kb, ds) = desk(4);
    for q in ds.instances.iter().take(60) {
        let sub = extract_subgraph(&kb, q.root_entity, DEFAULT_MAX_HOPS).unwrap();
        let once = prune(&sub, &q.constraints, &q.answer_type);
        assert_eq!(prune(&once, &q.constraints, &q.answer_type), once);
        assert!(once.candidates.iter().all(|c| c.etype == q.answer_type));
    }
}

#[test]
fn round_tripped_files_match() {
    let (kb, ds) = desk(5);
    let kb2 = parse_kb(&kb.to_tsv()).unwrap();
    assert_eq!(kb2.stats(), kb.stats());
    assert_eq!(kb2.triples(), kb.triples());
    let ds2 = Dataset::from_jsonl(&ds.to_jsonl(&kb), &kb2).unwrap();
    assert_eq!(ds2, ds);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let (kb, ds) = desk(6);
    let cfg = small_config(2, 0.0);
    let out = train(&ds, &kb, &cfg, Execution::Parallel).unwrap();
    let qs = ds.split(Split::Train);
    let cands = candidate_sets(&kb, &qs, Execution::Sequential).unwrap();
    let vocab = build_vocab(&kb, &qs, &cands, cfg.model.min_path_count);
    let fresh = Model::new(cfg.model.clone(), vocab, cfg.seed).unwrap();
    assert_eq!(out.model, fresh);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (kb, ds) = desk(7);
    let cfg = small_config(1, 0.005);
    let out = train(&ds, &kb, &cfg, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.model.save(&path, serde_json::json!({"note": 1})).unwrap();
    let (loaded, extra) = Model::load(&path).unwrap();
    assert_eq!(extra["note"], 1);
    assert_eq!(loaded, out.model);

    let qs = ds.split(Split::Dev);
    let cands = candidate_sets(&kb, &qs, Execution::Parallel).unwrap();
    let (a, _) = evaluate(&out.model, &qs, &cands, 0.2, Execution::Parallel).unwrap();
    let (b, _) = evaluate(&loaded, &qs, &cands, 0.2, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, out.best_dev);
}

#[test]
fn sequential_and_parallel_training_agree() {
    let (kb, ds) = desk(8);
    let cfg = small_config(1, 0.005);
    let a = train(&ds, &kb, &cfg, Execution::Sequential).unwrap();
    let b = train(&ds, &kb, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.len(), b.log.len());
    assert_eq!(a.log[0].train_loss, b.log[0].train_loss);
}

#[test]
fn sgemb_baseline_is_deterministic() {
    let (kb, ds) = desk(9);
    let mut cfg = small_config(1, 0.005);
    cfg.model.kind = ModelKind::Sgemb;
    let a = train(&ds, &kb, &cfg, Execution::Parallel).unwrap();
    let b = train(&ds, &kb, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a.best_dev, b.best_dev);
    assert_eq!(a.model, b.model);
    assert!(a.best_dev.micro_f1.is_finite());
}

#[test]
fn attention_export_has_one_score_row_per_question() {
    let (kb, ds) = desk(10);
    let out = train(&ds, &kb, &small_config(1, 0.005), Execution::Parallel).unwrap();
    let qs = ds.split(Split::Test);
    let cands = candidate_sets(&kb, &qs, Execution::Parallel).unwrap();
    let csv = attention_csv(&out.model, &kb, &qs, &cands).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.len(), 8);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let scores = rows.iter().filter(|r| &r[3] == "score").count();
    let nonempty = cands.iter().filter(|c| !c.is_empty()).count();
    assert_eq!(scores, nonempty);
    for r in rows.iter().filter(|r| &r[3] == "alpha") {
        let v: f64 = r[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}
