//! Batch loss and its reverse pass over every plan objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{encode, encode_backward, Activations, Dropout};
use super::params::{Encoder, Linear, ModelParams};
use super::tensor::{Mat, Real};
use super::sample_from_logits;
use crate::corpus::MASK_ID;
use crate::error::{Error, Result};
use crate::maskplan::{MaskPlan, Objective};
use crate::train::loss::{binary_cross_entropy, cross_entropy, LossReport, LossTerm};

/// Loss weights and sampling settings.
///
/// Slot and token terms are normalized by the batch's number of standard
/// model targets, so a comprehensive batch optimizes the per-target mean
/// of the summed objective. The generator and RTD terms are per-target
/// means of their own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub coarse: f64,
    pub fine: f64,
    pub generator: f64,
    /// λ.
    pub rtd: f64,
    pub temperature: f64,
    /// Probability that a relation slot keeps `[MASK]` instead of a sample.
    pub keep_mask_prob: f64,
    /// Apply the configured dropout.
    pub train: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            coarse: 1.0,
            fine: 1.0,
            generator: 1.0,
            rtd: 1.0,
            temperature: 1.0,
            keep_mask_prob: 0.0,
            train: false,
        }
    }
}

struct Scales {
    coarse: f64,
    fine: f64,
    generator: f64,
    rtd: f64,
}

fn per(weight: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        weight / count as f64
    }
}

impl Scales {
    fn new(plans: &[MaskPlan], spec: &LossSpec) -> Self {
        let mlm: usize = plans
            .iter()
            .map(|p| p.coarse_targets.len() + p.fine_targets.len())
            .sum();
        let relation = plans.iter().filter(|p| p.objective == Objective::Relation);
        let gen: usize = relation.clone().map(|p| p.coarse_targets.len()).sum();
        let rtd: usize = relation.map(|p| p.context_len()).sum();
        Scales {
            coarse: per(spec.coarse, mlm),
            fine: per(spec.fine, mlm),
            generator: per(spec.generator, gen),
            rtd: per(spec.rtd, rtd),
        }
    }
}

fn scatter_add<F: Real>(d_out: &mut Mat<F>, rows: &[usize], dx: &Mat<F>) {
    for (i, &r) in rows.iter().enumerate() {
        for (a, &b) in d_out.row_mut(r).iter_mut().zip(dx.row(i)) {
            *a += b;
        }
    }
}

fn scale<F: Real>(m: &mut [F], s: f64) {
    let s = F::of(s);
    m.iter_mut().for_each(|v| *v *= s);
}

/// Cross-entropy of `head` at `rows`; on a gradient pass adds the scaled
/// gradient into the head and into `d_out`.
fn head_term<F: Real>(
    out: &Mat<F>,
    rows: &[usize],
    targets: &[u32],
    head: &Linear<F>,
    grad: Option<(&mut Linear<F>, &mut Mat<F>)>,
    weight: f64,
) -> Result<LossTerm> {
    let x = out.gather_rows(rows);
    let (term, mut d) = cross_entropy(&head.forward(&x), targets)?;
    if let Some((g, d_out)) = grad {
        scale(&mut d.data, weight);
        let dx = head.backward(&x, &d, g);
        scatter_add(d_out, rows, &dx);
    }
    Ok(term)
}

fn run_encoder<F: Real>(
    enc: &Encoder<F>,
    plan: &MaskPlan,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Activations<F>> {
    let drop = (dropout > 0.0).then(|| Dropout { rate: dropout, rng });
    encode(enc, &plan.input_ids(), &plan.positions, plan.attention_mask(), drop)
}

fn run_plan<F: Real>(
    params: &ModelParams<F>,
    plan: &MaskPlan,
    spec: &LossSpec,
    scales: &Scales,
    seed: u64,
    want_grad: bool,
) -> Result<(LossReport, Option<ModelParams<F>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropout = if spec.train { params.config.dropout } else { 0.0 };
    let mut grads = want_grad.then(|| params.zeros_like());
    let mut report = LossReport::default();

    let filled;
    let plan = if plan.objective == Objective::Relation {
        // Generator: explicit prediction on the [MASK]ed view. Sampled ids
        // feed the standard model as data, so no gradient crosses over.
        let view = plan.explicit_view(MASK_ID);
        let gen = &params.generator;
        let act = run_encoder(&gen.encoder, &view, dropout, &mut rng)?;
        let rows: Vec<usize> = view.coarse_targets.iter().map(|t| t.row as usize).collect();
        let targets: Vec<u32> = view.coarse_targets.iter().map(|t| t.id).collect();
        let x = act.output().gather_rows(&rows);
        let logits = gen.ngram_head.forward(&x);
        let (term, mut d) = cross_entropy(&logits, &targets)?;
        report.generator = term;
        if let Some(g) = grads.as_mut() {
            scale(&mut d.data, scales.generator);
            let dx = gen.ngram_head.backward(&x, &d, &mut g.generator.ngram_head);
            let mut d_out = Mat::zeros(act.seq_len(), gen.encoder.shape.hidden);
            scatter_add(&mut d_out, &rows, &dx);
            encode_backward(&gen.encoder, &act, d_out, &mut g.generator.encoder);
        }
        if plan.rtd_labels.is_some() {
            plan
        } else {
            let sampled: Vec<u32> = (0..logits.rows)
                .map(|r| {
                    if spec.keep_mask_prob > 0.0 && rng.gen::<f64>() < spec.keep_mask_prob {
                        MASK_ID
                    } else {
                        sample_from_logits(logits.row(r), spec.temperature, &mut rng)
                    }
                })
                .collect();
            filled = plan.fill_sampled(&sampled, params.config.joint_vocab())?;
            &filled
        }
    } else {
        plan
    };

    let act = run_encoder(&params.encoder, plan, dropout, &mut rng)?;
    let out = act.output();
    let mut d_out = Mat::zeros(out.rows, out.cols);
    let coarse_rows: Vec<usize> = plan.coarse_targets.iter().map(|t| t.row as usize).collect();
    let coarse_ids: Vec<u32> = plan.coarse_targets.iter().map(|t| t.id).collect();
    let fine_rows: Vec<usize> = plan.fine_targets.iter().map(|t| t.row as usize).collect();
    let fine_ids: Vec<u32> = plan.fine_targets.iter().map(|t| t.id).collect();

    report.coarse = head_term(
        out,
        &coarse_rows,
        &coarse_ids,
        &params.ngram_head,
        grads.as_mut().map(|g| (&mut g.ngram_head, &mut d_out)),
        scales.coarse,
    )?;
    report.fine = head_term(
        out,
        &fine_rows,
        &fine_ids,
        &params.fine_head,
        grads.as_mut().map(|g| (&mut g.fine_head, &mut d_out)),
        scales.fine,
    )?;

    if plan.objective == Objective::Relation {
        let labels = plan
            .rtd_labels
            .as_ref()
            .ok_or_else(|| Error::Plan("relation plan without labels".into()))?;
        let rows: Vec<usize> = (0..plan.context_len()).collect();
        let x = out.gather_rows(&rows);
        let z = params.rtd_head.forward(&x);
        let (term, mut dz) = binary_cross_entropy(&z.data, labels)?;
        report.rtd = term;
        if let Some(g) = grads.as_mut() {
            scale(&mut dz, scales.rtd);
            let dz = Mat::from_vec(dz.len(), 1, dz);
            let dx = params.rtd_head.backward(&x, &dz, &mut g.rtd_head);
            scatter_add(&mut d_out, &rows, &dx);
        }
    }

    if let Some(g) = grads.as_mut() {
        encode_backward(&params.encoder, &act, d_out, &mut g.encoder);
    }
    Ok((report, grads))
}

fn run<F: Real, R: Rng>(
    params: &ModelParams<F>,
    plans: &[MaskPlan],
    spec: &LossSpec,
    rng: &mut R,
    want_grad: bool,
) -> Result<(LossReport, Option<ModelParams<F>>)> {
    if plans.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if !(spec.temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {}",
            spec.temperature
        )));
    }
    let scales = Scales::new(plans, spec);
    let seeds: Vec<u64> = plans.iter().map(|_| rng.gen()).collect();
    // Per-plan results are reduced in batch order, so the outcome does not
    // depend on the thread count.
    let outcomes = plans
        .par_iter()
        .zip(seeds)
        .map(|(p, s)| run_plan(params, p, spec, &scales, s, want_grad))
        .collect::<Result<Vec<_>>>()?;
    let mut report = LossReport::default();
    let mut grads: Option<ModelParams<F>> = None;
    for (r, g) in outcomes {
        report.add(&r);
        if let Some(g) = g {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
                        a.add_assign(b);
                    }
                }
            }
        }
    }
    report.total = scales.coarse * report.coarse.sum
        + scales.fine * report.fine.sum
        + scales.generator * report.generator.sum
        + scales.rtd * report.rtd.sum;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", report.total)));
    }
    Ok((report, grads))
}

/// Batch losses without gradients.
pub fn forward_loss<F: Real, R: Rng>(
    params: &ModelParams<F>,
    plans: &[MaskPlan],
    spec: &LossSpec,
    rng: &mut R,
) -> Result<LossReport> {
    Ok(run(params, plans, spec, rng, false)?.0)
}

/// Batch losses and the gradient of `total` with respect to every
/// parameter. Relation plans without labels are filled by sampling from
/// the generator; labelled ones are used as given.
pub fn backward<F: Real, R: Rng>(
    params: &ModelParams<F>,
    plans: &[MaskPlan],
    spec: &LossSpec,
    rng: &mut R,
) -> Result<(LossReport, ModelParams<F>)> {
    let (report, grads) = run(params, plans, spec, rng, true)?;
    let grads = grads.expect("gradient pass");
    for (name, m) in grads.named() {
        if !m.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    Ok((report, grads))
}
