//! Reference transformer encoder, prediction heads and generator.
//!
//! Everything is written out by hand on dense row-major matrices so the
//! reverse pass can be checked against finite differences. The element
//! type is generic: `f32` for training, `f64` for gradient checks.
//!
//! Attention weights are `softmax(QKᵀ/√d_k + M)` with `M` the additive
//! `{0, -inf}` mask of a plan, so forbidden entries are exactly zero.

mod backward;
pub mod checkpoint;
mod encoder;
mod params;
mod tensor;

use rand::Rng;

pub use backward::{backward, forward_loss, LossSpec};
pub use encoder::{encode, encode_backward, Activations, Dropout};
pub use params::{EncoderShape, Encoder, Generator, Layer, LayerNorm, Linear, ModelConfig, ModelParams};
pub use tensor::{DType, Mat, Real};

use crate::error::{Error, Result};
use crate::maskplan::{AttnMask, MaskPlan};

/// No dropout; the generic parameter of [`encode`] still needs a type.
pub type NoDropout = Option<Dropout<'static, rand_chacha::ChaCha8Rng>>;

pub fn no_dropout() -> NoDropout {
    None
}

/// Runs `encoder` over a plan's context and queries.
pub fn encode_plan<F: Real>(encoder: &Encoder<F>, plan: &MaskPlan) -> Result<Activations<F>> {
    encode(
        encoder,
        &plan.input_ids(),
        &plan.positions,
        plan.attention_mask(),
        no_dropout(),
    )
}

fn head_logits<F: Real>(act: &Activations<F>, rows: &[usize], head: &Linear<F>) -> Result<Mat<F>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= act.seq_len()) {
        return Err(Error::Argument(format!(
            "row {bad} outside sequence of length {}",
            act.seq_len()
        )));
    }
    Ok(head.forward(&act.output().gather_rows(rows)))
}

/// Logits over V_F at the given rows (queries or contiguous slots).
pub fn predict_fine<F: Real>(act: &Activations<F>, rows: &[usize], head: &Linear<F>) -> Result<Mat<F>> {
    head_logits(act, rows, head)
}

/// Logits over the joint space at the given slots.
pub fn predict_ngram<F: Real>(act: &Activations<F>, rows: &[usize], head: &Linear<F>) -> Result<Mat<F>> {
    head_logits(act, rows, head)
}

/// One replaced-token logit per context position (the first `context_len`
/// rows); positive means "original".
pub fn predict_rtd<F: Real>(act: &Activations<F>, context_len: usize, head: &Linear<F>) -> Result<Vec<F>> {
    let rows: Vec<usize> = (0..context_len).collect();
    Ok(head_logits(act, &rows, head)?.data)
}

/// Softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_from_logits<F: Real, R: Rng>(logits: &[F], temperature: f64, rng: &mut R) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|&z| z.f64() / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left u above the running total; take the last nonzero.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// Runs the generator on the explicit view of `plan` and samples one
/// joint identity per coarse slot. Samples may be of any order.
pub fn generator_forward_and_sample<F: Real, R: Rng>(
    params: &ModelParams<F>,
    plan: &MaskPlan,
    mask_id: u32,
    rng: &mut R,
    temperature: f64,
) -> Result<Vec<u32>> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    let view = plan.explicit_view(mask_id);
    let act = encode_plan(&params.generator.encoder, &view)?;
    let rows: Vec<usize> = view.coarse_targets.iter().map(|t| t.row as usize).collect();
    let logits = predict_ngram(&act, &rows, &params.generator.ngram_head)?;
    Ok((0..logits.rows)
        .map(|r| sample_from_logits(logits.row(r), temperature, rng))
        .collect())
}

/// Parameters kept for fine-tuning: the encoder with its embedding table
/// cut to the fine vocabulary. Heads and the generator are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneParams<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
}

impl<F: Real> FineTuneParams<F> {
    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
    }

    pub fn named(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.encoder.named("encoder", &mut out);
        out
    }

    /// Encodes a fine-only sequence with no queries.
    pub fn encode(&self, ids: &[u32], positions: &[u32]) -> Result<Activations<F>> {
        encode(&self.encoder, ids, positions, AttnMask::new(ids.len(), 0), no_dropout())
    }
}

impl<F: Real> FineTuneParams<F> {
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> checkpoint::Checkpoint<F> {
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("config".into(), serde_json::to_value(&self.config).expect("serializable config"));
            map.insert("kind".into(), "finetune".into());
        }
        let mut ck = checkpoint::Checkpoint::new(meta);
        for (name, m) in self.named() {
            ck.push(name, m);
        }
        ck
    }

    pub fn from_checkpoint(ck: &checkpoint::Checkpoint<F>) -> Result<Self> {
        let config = ck.config()?;
        let mut encoder = Encoder::zeros(vanilla_shape(&config));
        let mut targets = Vec::new();
        encoder.named_mut("encoder", &mut targets);
        ck.fill(targets, "")?;
        Ok(FineTuneParams { config, encoder })
    }
}

/// Shape of a plain encoder over the fine vocabulary only.
pub fn vanilla_shape(config: &ModelConfig) -> EncoderShape {
    EncoderShape {
        vocab: config.fine_vocab,
        ..config.encoder_shape()
    }
}

pub fn export_finetune_weights<F: Real>(params: &ModelParams<F>) -> FineTuneParams<F> {
    let mut encoder = params.encoder.clone();
    let fine = params.config.fine_vocab;
    let h = encoder.shape.hidden;
    encoder.token_embedding.data.truncate(fine * h);
    encoder.token_embedding.rows = fine;
    encoder.shape = vanilla_shape(&params.config);
    FineTuneParams {
        config: params.config.clone(),
        encoder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_heads_are_uniform() {
        let c = ModelConfig::tiny(10, 4);
        let mut p = ModelParams::<f64>::init(&c, 0).unwrap();
        p.fine_head = Linear::zeros(16, 10);
        p.ngram_head = Linear::zeros(16, 14);
        p.rtd_head = Linear::zeros(16, 1);
        let act = encode(&p.encoder, &[5, 6, 7], &[1, 2, 3], AttnMask::new(3, 0), no_dropout()).unwrap();
        let f = predict_fine(&act, &[0, 2], &p.fine_head).unwrap();
        assert_eq!(f.shape(), (2, 10));
        assert!(softmax(&f.data[..10]).iter().all(|&q| (q - 0.1).abs() < 1e-15));
        let n = predict_ngram(&act, &[1], &p.ngram_head).unwrap();
        assert_eq!(n.shape(), (1, 14));
        let r = predict_rtd(&act, 3, &p.rtd_head).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|&z| z == 0.0));
        assert!(predict_fine(&act, &[3], &p.fine_head).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, 2.0, -1.0, 0.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        let a = softmax(&z);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cold_sampling_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.1f32, 0.4, 0.39, -2.0];
        for _ in 0..100 {
            assert_eq!(sample_from_logits(&logits, 1e-4, &mut rng), 1);
        }
    }

    #[test]
    fn export_truncates_embeddings() {
        let c = ModelConfig::tiny(100, 7);
        let p = ModelParams::<f32>::init(&c, 0).unwrap();
        let e = export_finetune_weights(&p);
        assert_eq!(e.encoder.token_embedding.shape(), (100, 16));
        assert!(e.named().iter().all(|(_, m)| m.rows != 107 && m.cols != 107));
        assert_eq!(e.num_params(), Encoder::<f32>::zeros(vanilla_shape(&c)).num_params());
    }
}
