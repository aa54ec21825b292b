//! Negative log-likelihood terms of the masking objectives.
//!
//! Every term is kept as a `(sum, count)` pair. Sums make the
//! comprehensive identity `coarse + fine` exact; means (nats per target)
//! are what gets logged and optimized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mat, Real};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub sum: f64,
    pub count: usize,
}

impl LossTerm {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn add(&mut self, other: LossTerm) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn combined(a: LossTerm, b: LossTerm) -> LossTerm {
        LossTerm {
            sum: a.sum + b.sum,
            count: a.count + b.count,
        }
    }
}

/// Per-term losses of one batch. `coarse` holds slot-identity terms
/// (explicit prediction), `fine` holds token terms (contiguous slots and
/// queries); the comprehensive term is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub coarse: LossTerm,
    pub fine: LossTerm,
    pub generator: LossTerm,
    pub rtd: LossTerm,
    pub total: f64,
}

impl LossReport {
    pub fn comprehensive(&self) -> ComprehensiveLoss {
        ComprehensiveLoss {
            coarse: self.coarse,
            fine: self.fine,
        }
    }

    pub fn add(&mut self, other: &LossReport) {
        self.coarse.add(other.coarse);
        self.fine.add(other.fine);
        self.generator.add(other.generator);
        self.rtd.add(other.rtd);
    }

    /// Means in nats per target, keyed by term name, plus `total`.
    pub fn terms(&self) -> std::collections::BTreeMap<String, f64> {
        let mut out = std::collections::BTreeMap::new();
        let mut put = |k: &str, t: LossTerm| {
            if t.count > 0 {
                out.insert(k.to_string(), t.mean());
            }
        };
        match (self.coarse.count > 0, self.fine.count > 0) {
            (true, true) => {
                put("coarse", self.coarse);
                put("fine", self.fine);
                put("comprehensive", LossTerm::combined(self.coarse, self.fine));
            }
            (true, false) => put("explicit", self.coarse),
            (false, _) => put("contiguous", self.fine),
        }
        put("generator", self.generator);
        put("rtd", self.rtd);
        out.insert("total".to_string(), self.total);
        out
    }
}

/// `log Σ exp(z)` in f64.
fn log_sum_exp<F: Real>(row: &[F]) -> f64 {
    let max = row.iter().map(|z| z.f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z.f64() - max).exp()).sum::<f64>().ln()
}

/// Summed softmax cross-entropy over the rows of `logits`, plus the
/// gradient of that sum (`softmax - onehot` per row).
pub fn cross_entropy<F: Real>(logits: &Mat<F>, targets: &[u32]) -> Result<(LossTerm, Mat<F>)> {
    if logits.rows != targets.len() {
        return Err(Error::Argument(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= logits.cols {
            return Err(Error::Argument(format!(
                "target {t} outside {} classes",
                logits.cols
            )));
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        sum += lse - row[t as usize].f64();
        for (g, &z) in grad.row_mut(r).iter_mut().zip(row) {
            *g = F::of((z.f64() - lse).exp());
        }
        grad.data[r * logits.cols + t as usize] -= F::one();
    }
    Ok((
        LossTerm {
            sum,
            count: targets.len(),
        },
        grad,
    ))
}

/// Mean token NLL of the fine-grained predictions at masked positions.
pub fn loss_contiguous<F: Real>(logits: &Mat<F>, targets: &[u32]) -> Result<f64> {
    Ok(cross_entropy(logits, targets)?.0.mean())
}

/// Mean NLL of the joint identities at masked slots.
pub fn loss_explicit<F: Real>(logits: &Mat<F>, targets: &[u32]) -> Result<f64> {
    Ok(cross_entropy(logits, targets)?.0.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComprehensiveLoss {
    pub coarse: LossTerm,
    pub fine: LossTerm,
}

impl ComprehensiveLoss {
    /// Sum convention: coarse sum + fine sum.
    pub fn sum(&self) -> f64 {
        self.coarse.sum + self.fine.sum
    }

    pub fn per_target(&self) -> f64 {
        LossTerm::combined(self.coarse, self.fine).mean()
    }
}

pub fn loss_comprehensive<F: Real>(
    coarse_logits: &Mat<F>,
    coarse_targets: &[u32],
    fine_logits: &Mat<F>,
    fine_targets: &[u32],
) -> Result<ComprehensiveLoss> {
    Ok(ComprehensiveLoss {
        coarse: cross_entropy(coarse_logits, coarse_targets)?.0,
        fine: cross_entropy(fine_logits, fine_targets)?.0,
    })
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy of replaced-token logits (label `true` =
/// original) and the gradient of that sum.
pub fn binary_cross_entropy<F: Real>(logits: &[F], labels: &[bool]) -> Result<(LossTerm, Vec<F>)> {
    if logits.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let z = z.f64();
        // -log σ(z) = softplus(-z); -log(1 - σ(z)) = softplus(z)
        sum += if y { softplus(-z) } else { softplus(z) };
        grad.push(F::of(sigmoid(z) - if y { 1.0 } else { 0.0 }));
    }
    Ok((
        LossTerm {
            sum,
            count: logits.len(),
        },
        grad,
    ))
}

/// Mean binary cross-entropy over context positions.
pub fn loss_rtd<F: Real>(logits: &[F], labels: &[bool]) -> Result<f64> {
    Ok(binary_cross_entropy(logits, labels)?.0.mean())
}

/// Generator explicit term + standard comprehensive term + λ · RTD.
pub fn loss_joint_relation(generator: f64, comprehensive: f64, rtd: f64, lambda: f64) -> f64 {
    generator + comprehensive + lambda * rtd
}
