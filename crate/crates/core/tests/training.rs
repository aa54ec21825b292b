mod common;

use common::*;
use gramlm::maskplan::Objective;
use gramlm::model::{forward_loss, LossSpec, ModelParams};
use gramlm::train::{eval_ngram_ppl, Schedule, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(jv: &gramlm::lexicon::JointVocab, objective: Objective) -> TrainConfig {
    TrainConfig {
        objective,
        steps: 60,
        batch_size: 4,
        lr: 5e-3,
        warmup_steps: 5,
        deterministic: true,
        model: tiny_config(jv),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let jv = toy_vocab();
    let mut c = config(&jv, Objective::Comprehensive);
    c.lr = 0.0;
    c.steps = 5;
    let p = ModelParams::<f32>::init(&c.model, 3).unwrap();
    let mut t = Trainer::new(c, p.clone()).unwrap();
    t.run(&plans(&jv, Objective::Comprehensive, 12, 1), std::io::sink(), None).unwrap();
    assert_eq!(t.params, p);
}

#[test]
fn loss_goes_down() {
    let jv = toy_vocab();
    for objective in [Objective::Contiguous, Objective::Explicit, Objective::Comprehensive, Objective::Relation] {
        let c = config(&jv, objective);
        let data = plans(&jv, objective, 16, 2);
        let p = ModelParams::<f64>::init(&c.model, 3).unwrap();
        let mut t = Trainer::new(c, p).unwrap();
        let logs = t.run(&data, std::io::sink(), None).unwrap();
        let first: f64 = logs[..5].iter().map(|l| l.losses["total"]).sum();
        let last: f64 = logs[logs.len() - 5..].iter().map(|l| l.losses["total"]).sum();
        assert!(last < first, "{objective:?}: {first} -> {last}");
    }
}

#[test]
fn explicit_ppl_improves_with_training() {
    let jv = toy_vocab();
    let c = config(&jv, Objective::Explicit);
    let data = plans(&jv, Objective::Explicit, 16, 2);
    let p = ModelParams::<f64>::init(&c.model, 3).unwrap();
    let before = eval_ngram_ppl(&p, &data).unwrap();
    let mut t = Trainer::new(c, p).unwrap();
    t.run(&data, std::io::sink(), None).unwrap();
    assert!(eval_ngram_ppl(&t.params, &data).unwrap() < before);
}

#[test]
fn comprehensive_is_explicit_plus_contiguous() {
    let jv = toy_vocab();
    let p = ModelParams::<f64>::init(&tiny_config(&jv), 5).unwrap();
    let spec = LossSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = forward_loss(&p, &plans(&jv, Objective::Comprehensive, 6, 4), &spec, &mut rng).unwrap();
    assert_eq!(r.comprehensive().sum(), r.coarse.sum + r.fine.sum);
    assert!(r.coarse.count > 0 && r.fine.count > 0);
}

#[test]
fn constant_schedule_after_warmup() {
    let jv = toy_vocab();
    let c = TrainConfig {
        schedule: Schedule::Constant,
        ..config(&jv, Objective::Explicit)
    };
    assert_eq!(c.lr_at(10), c.lr);
    assert_eq!(c.lr_at(60), c.lr);
}
