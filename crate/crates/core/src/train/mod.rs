//! Losses, the optimizer loop and n-gram perplexity.

pub mod loss;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::maskplan::{MaskPlan, Objective, RngState};
use crate::model::checkpoint::Checkpoint;
use crate::model::{backward, encode_plan, LossSpec, Mat, ModelConfig, ModelParams, Real};

pub use loss::{
    loss_comprehensive, loss_contiguous, loss_explicit, loss_joint_relation, loss_rtd,
    ComprehensiveLoss, LossReport, LossTerm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then linear decay to zero at the last step.
    Linear,
    /// Linear warmup, then flat.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Report `wall_ms = 0` so metrics logs are byte-reproducible.
    pub deterministic: bool,
    /// Write a checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
    pub loss: LossSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Explicit,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            schedule: Schedule::Linear,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            loss: LossSpec {
                train: true,
                ..LossSpec::default()
            },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if !(self.loss.temperature > 0.0) || !(0.0..=1.0).contains(&self.loss.keep_mask_prob) {
            return bad("temperature must be positive and keep_mask_prob in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => {
                let rest = (self.steps - self.warmup_steps) as f64;
                let left = self.steps.saturating_sub(step) as f64;
                if rest == 0.0 {
                    0.0
                } else {
                    self.lr * left / rest
                }
            }
        }
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

fn no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// AdamW over [`ModelParams`], with batches drawn from a per-epoch
/// shuffle so that any step can be replayed from the step number alone.
pub struct Trainer<F> {
    pub config: TrainConfig,
    pub params: ModelParams<F>,
    m: ModelParams<F>,
    v: ModelParams<F>,
    /// Number of completed steps.
    pub step: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(config: TrainConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        let m = params.zeros_like();
        let v = params.zeros_like();
        Ok(Trainer {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    /// Plans of the batch for 1-based `step`.
    pub fn batch_indices(&self, step: usize, num_plans: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut perm_epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (0..b)
            .map(|i| {
                let k = (step - 1) * b + i;
                let epoch = k / num_plans;
                if epoch != perm_epoch {
                    perm = (0..num_plans).collect();
                    let mut rng = RngState::for_shard(self.config.seed ^ 0x5eed_ba7c, epoch as u64).next_rng();
                    perm.shuffle(&mut rng);
                    perm_epoch = epoch;
                }
                perm[k % num_plans]
            })
            .collect()
    }

    /// One optimizer step on the next batch of `plans`.
    pub fn step(&mut self, plans: &[MaskPlan]) -> Result<(LossReport, f64)> {
        if plans.is_empty() {
            return Err(Error::Argument("no training plans".into()));
        }
        let t = self.step + 1;
        let batch: Vec<MaskPlan> = self
            .batch_indices(t, plans.len())
            .into_iter()
            .map(|i| plans[i].clone())
            .collect();
        if let Some(p) = batch.iter().find(|p| p.objective != self.config.objective) {
            return Err(Error::Config(format!(
                "plan objective {} does not match configured {}",
                p.objective.name(),
                self.config.objective.name()
            )));
        }
        let mut rng = RngState::for_shard(self.config.seed, t as u64).next_rng();
        let (report, mut grads) = backward(&self.params, &batch, &self.config.loss, &mut rng)?;

        let norm: f64 = grads
            .named()
            .iter()
            .flat_map(|(_, g)| g.data.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt();
        if norm > self.config.clip_norm {
            let s = F::of(self.config.clip_norm / norm);
            for (_, g) in grads.named_mut() {
                g.data.iter_mut().for_each(|v| *v *= s);
            }
        }

        let c = &self.config;
        let lr = c.lr_at(t);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let params = self.params.named_mut();
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for ((((name, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.named()) {
            let decay = if no_decay(&name) { 0.0 } else { c.weight_decay };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m.data[i].f64() / bc1;
                let vhat = v.data[i].f64() / bc2;
                let pi = p.data[i].f64();
                p.data[i] = F::of(pi - lr * (mhat / (vhat.sqrt() + c.eps) + decay * pi));
            }
        }
        self.step = t;
        Ok((report, lr))
    }

    /// Runs until `config.steps`, writing one JSON line per step to `log`.
    /// Periodic checkpoints go to `checkpoint_dir` as `step-<n>.ckpt`; on a
    /// non-finite loss or gradient the untouched parameters are saved there
    /// as `diagnostic-step-<n>.ckpt` before the error is returned.
    pub fn run<W: Write>(
        &mut self,
        plans: &[MaskPlan],
        mut log: W,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let start = Instant::now();
            let (report, lr) = match self.step(plans) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = checkpoint_dir {
                        let path = dir.join(format!("diagnostic-step-{}.ckpt", self.step + 1));
                        self.checkpoint().save(&path)?;
                        log::error!("{e}; diagnostic checkpoint at {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let entry = StepLog {
                step: self.step,
                losses: report.terms(),
                lr,
                wall_ms: if self.config.deterministic {
                    0
                } else {
                    start.elapsed().as_millis() as u64
                },
            };
            let line = serde_json::to_string(&entry).expect("serializable log");
            writeln!(log, "{line}").map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
            logs.push(entry);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("step-{}.ckpt", self.step)))?;
                }
            }
        }
        Ok(logs)
    }

    /// Parameters, optimizer moments and trainer state.
    pub fn checkpoint(&self) -> Checkpoint<F> {
        let meta = json!({
            "step": self.step,
            "train": serde_json::to_value(&self.config).expect("serializable config"),
        });
        let mut ck = Checkpoint::from_params(&self.params, meta);
        for (name, m) in self.m.named() {
            ck.push(format!("adam.m.{name}"), m);
        }
        for (name, v) in self.v.named() {
            ck.push(format!("adam.v.{name}"), v);
        }
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. With
    /// `config` given, its step budget and schedule replace the stored
    /// ones; everything else must be resumed as saved.
    pub fn resume(ck: &Checkpoint<F>, config: Option<TrainConfig>) -> Result<Self> {
        let stored: TrainConfig = ck
            .meta
            .get("train")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| Error::Config(format!("trainer state: {e}")))?
            .ok_or_else(|| Error::Config("checkpoint has no trainer state".into()))?;
        let step = ck
            .meta
            .get("step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::Config("checkpoint has no step".into()))? as usize;
        let params = ck.to_params()?;
        let mut trainer = Trainer::new(config.unwrap_or(stored), params)?;
        if trainer.params.config != trainer.config.model
            && trainer.config.model.fine_vocab != 0
        {
            return Err(Error::Config("model config differs from checkpoint".into()));
        }
        ck.fill(trainer.m.named_mut(), "adam.m.")?;
        ck.fill(trainer.v.named_mut(), "adam.v.")?;
        trainer.step = step;
        Ok(trainer)
    }
}

/// `(∏ ppl_i)^(1/k)`, evaluated in log space.
pub fn geometric_mean_ppl(ppls: &[f64]) -> Result<f64> {
    if ppls.is_empty() {
        return Err(Error::Argument("no masked n-grams to evaluate".into()));
    }
    let logs: Vec<f64> = ppls.iter().map(|p| p.ln()).collect();
    Ok(mean_exp(&logs))
}

fn mean_exp(logs: &[f64]) -> f64 {
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn nll<F: Real>(logits: &[F], target: u32) -> f64 {
    let max = logits.iter().map(|z| z.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z.f64() - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize].f64()
}

/// Log-perplexity of every masked n-gram of `plan`: the identity NLL for
/// slots predicted as a whole, the mean token NLL otherwise.
pub fn span_log_ppl<F: Real>(params: &ModelParams<F>, plan: &MaskPlan) -> Result<Vec<f64>> {
    let act = encode_plan(&params.encoder, plan)?;
    let out = act.output();
    let one = |head: &crate::model::Linear<F>, row: u32, id: u32| -> Result<f64> {
        if row as usize >= out.rows {
            return Err(Error::Plan(format!("target row {row} outside sequence")));
        }
        let x = Mat::from_vec(1, out.cols, out.row(row as usize).to_vec());
        Ok(nll(&head.forward(&x).data, id))
    };
    plan.span_targets()
        .into_iter()
        .map(|(coarse, fine)| match coarse {
            Some(t) => one(&params.ngram_head, t.row, t.id),
            None => {
                if fine.is_empty() {
                    return Err(Error::Plan("span without targets".into()));
                }
                let n = fine.len() as f64;
                let mut s = 0.0;
                for t in &plan.fine_targets[fine] {
                    s += one(&params.fine_head, t.row, t.id)?;
                }
                Ok(s / n)
            }
        })
        .collect()
}

/// Geometric mean over all masked n-grams of `plans` of their
/// perplexities.
pub fn eval_ngram_ppl<F: Real>(params: &ModelParams<F>, plans: &[MaskPlan]) -> Result<f64> {
    let per_plan = plans
        .par_iter()
        .map(|p| span_log_ppl(params, p))
        .collect::<Result<Vec<_>>>()?;
    let logs: Vec<f64> = per_plan.into_iter().flatten().collect();
    if logs.is_empty() {
        return Err(Error::Argument("no masked n-grams to evaluate".into()));
    }
    Ok(mean_exp(&logs))
}
