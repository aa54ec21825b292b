mod common;

use common::*;
use gramlm::maskplan::{MaskPlan, Objective};
use gramlm::model::{backward, forward_loss, LossSpec, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn loss_at(params: &ModelParams<f64>, plans: &[MaskPlan], spec: &LossSpec) -> f64 {
    forward_loss(params, plans, spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().total
}

/// Worst relative error over `samples` parameters chosen at random.
fn check(params: &ModelParams<f64>, plans: &[MaskPlan], spec: &LossSpec, samples: usize, seed: u64) -> f64 {
    let (_, grads) = backward(params, plans, spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let names: Vec<(String, usize)> = params.named().into_iter().map(|(n, m)| (n, m.len())).collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut k = rng.gen_range(0..total);
        let (ti, _) = names
            .iter()
            .enumerate()
            .find(|(_, (_, l))| {
                if k < *l {
                    true
                } else {
                    k -= l;
                    false
                }
            })
            .unwrap();
        let analytic = grads.named()[ti].1.data[k];
        let mut p = params.clone();
        p.named_mut()[ti].1.data[k] += EPS;
        let up = loss_at(&p, plans, spec);
        p.named_mut()[ti].1.data[k] -= 2.0 * EPS;
        let down = loss_at(&p, plans, spec);
        let numeric = (up - down) / (2.0 * EPS);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
        assert!(
            rel < 1e-4,
            "{}[{k}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
            names[ti].0
        );
    }
    worst
}

fn model(jv: &gramlm::lexicon::JointVocab) -> ModelParams<f64> {
    let cfg = gramlm::model::ModelConfig {
        init_std: 0.2,
        ..tiny_config(jv)
    };
    ModelParams::init(&cfg, 11).unwrap()
}

#[test]
fn contiguous_gradients() {
    let jv = toy_vocab();
    let p = model(&jv);
    check(&p, &plans(&jv, Objective::Contiguous, 3, 1), &LossSpec::default(), 50, 1);
}

#[test]
fn explicit_gradients() {
    let jv = toy_vocab();
    let p = model(&jv);
    check(&p, &plans(&jv, Objective::Explicit, 3, 2), &LossSpec::default(), 50, 2);
}

#[test]
fn comprehensive_gradients() {
    let jv = toy_vocab();
    let p = model(&jv);
    check(&p, &plans(&jv, Objective::Comprehensive, 3, 3), &LossSpec::default(), 50, 3);
}

#[test]
fn relation_gradients() {
    let jv = toy_vocab();
    let p = model(&jv);
    let spec = LossSpec {
        rtd: 0.7,
        ..LossSpec::default()
    };
    check(&p, &filled_relation_plans(&p, &jv, 3, 4), &spec, 50, 4);
}

#[test]
fn zero_weight_heads_get_zero_gradient() {
    let jv = toy_vocab();
    let p = model(&jv);
    let spec = LossSpec {
        fine: 0.0,
        rtd: 0.0,
        ..LossSpec::default()
    };
    let plans = filled_relation_plans(&p, &jv, 3, 5);
    let (_, g) = backward(&p, &plans, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(g.fine_head.weight.data.iter().all(|&v| v == 0.0));
    assert!(g.rtd_head.weight.data.iter().all(|&v| v == 0.0));
    assert!(g.ngram_head.weight.data.iter().any(|&v| v != 0.0));
}

#[test]
fn generator_gradient_is_its_own_term() {
    let jv = toy_vocab();
    let p = model(&jv);
    // Unlabelled plans: sampling happens inside the pass.
    let plans = plans(&jv, Objective::Relation, 4, 6);
    let full = LossSpec::default();
    let gen_only = LossSpec {
        coarse: 0.0,
        fine: 0.0,
        rtd: 0.0,
        ..full
    };
    let (_, a) = backward(&p, &plans, &full, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (_, b) = backward(&p, &plans, &gen_only, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for ((name, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        if name.starts_with("generator.") {
            assert_eq!(x, y, "{name}");
        }
    }
}

#[test]
fn gradients_are_deterministic() {
    let jv = toy_vocab();
    let p = model(&jv);
    let plans = plans(&jv, Objective::Relation, 4, 7);
    let spec = LossSpec {
        keep_mask_prob: 0.2,
        ..LossSpec::default()
    };
    let (ra, a) = backward(&p, &plans, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let (rb, b) = backward(&p, &plans, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let jv = toy_vocab();
    let mut p = model(&jv);
    p.fine_head.weight.data[0] = f64::NAN;
    let err = backward(&p, &plans(&jv, Objective::Contiguous, 2, 8), &LossSpec::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(gramlm::Error::Numeric(_))));
}
