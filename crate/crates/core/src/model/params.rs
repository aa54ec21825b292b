use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Mat, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_positions: usize,
    /// |V_F|.
    pub fine_vocab: usize,
    /// |V_N|.
    pub ngram_vocab: usize,
    pub gen_layers: usize,
    pub gen_heads: usize,
    pub dropout: f64,
    pub max_query: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// Desk-scale shape; vocabulary sizes are filled in from the data.
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff: 256,
            max_positions: 128,
            fine_vocab: 0,
            ngram_vocab: 0,
            gen_layers: 1,
            gen_heads: 1,
            dropout: 0.1,
            max_query: 8,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// A small configuration over the given vocabulary sizes.
    pub fn tiny(fine_vocab: usize, ngram_vocab: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff: 32,
            max_positions: 64,
            fine_vocab,
            ngram_vocab,
            gen_layers: 1,
            gen_heads: 1,
            dropout: 0.0,
            max_query: 8,
            init_std: 0.02,
        }
    }

    pub fn joint_vocab(&self) -> usize {
        self.fine_vocab + self.ngram_vocab
    }

    /// Generator width: a third of the model width, rounded down to a
    /// multiple of the generator's head count (at least one per head).
    pub fn gen_hidden(&self) -> usize {
        let third = self.hidden / 3;
        (third / self.gen_heads * self.gen_heads).max(self.gen_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return bad("layers, hidden, heads and ff must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.gen_heads == 0 || self.gen_layers == 0 {
            return bad("generator needs at least one layer and head".into());
        }
        if self.fine_vocab == 0 || self.max_positions == 0 {
            return bad("vocabulary and position table must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff: self.ff,
            vocab: self.joint_vocab(),
            max_positions: self.max_positions,
        }
    }

    pub fn generator_shape(&self) -> EncoderShape {
        let h = self.gen_hidden();
        EncoderShape {
            layers: self.gen_layers,
            hidden: h,
            heads: self.gen_heads,
            ff: (self.ff * h).div_ceil(self.hidden).max(1),
            vocab: self.joint_vocab(),
            max_positions: self.max_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

fn trunc_normal<F: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<F> {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break F::of(z * std);
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// `x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Mat<F>,
    pub bias: Mat<F>,
}

impl<F: Real> Linear<F> {
    pub fn init<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: trunc_normal(input, output, std, rng),
            bias: Mat::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Mat::zeros(input, output),
            bias: Mat::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grad: &mut Linear<F>) -> Mat<F> {
        x.matmul_tn_acc(dy, &mut grad.weight);
        dy.col_sum_acc(&mut grad.bias);
        dy.matmul_nt(&self.weight)
    }

    fn named<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((format!("{p}.weight"), &self.weight));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Mat<F>,
    pub beta: Mat<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Mat::filled(1, dim, F::one()),
            beta: Mat::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Mat::zeros(1, dim),
            beta: Mat::zeros(1, dim),
        }
    }

    fn named<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((format!("{p}.gamma"), &self.gamma));
        out.push((format!("{p}.beta"), &self.beta));
    }

    fn named_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((format!("{p}.gamma"), &mut self.gamma));
        out.push((format!("{p}.beta"), &mut self.beta));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub attn_norm: LayerNorm<F>,
    pub ff_in: Linear<F>,
    pub ff_out: Linear<F>,
    pub ff_norm: LayerNorm<F>,
}

impl<F: Real> Layer<F> {
    fn init<R: Rng>(s: &EncoderShape, std: f64, rng: &mut R) -> Self {
        let h = s.hidden;
        Layer {
            query: Linear::init(h, h, std, rng),
            key: Linear::init(h, h, std, rng),
            value: Linear::init(h, h, std, rng),
            output: Linear::init(h, h, std, rng),
            attn_norm: LayerNorm::init(h),
            ff_in: Linear::init(h, s.ff, std, rng),
            ff_out: Linear::init(s.ff, h, std, rng),
            ff_norm: LayerNorm::init(h),
        }
    }

    fn zeros(s: &EncoderShape) -> Self {
        let h = s.hidden;
        Layer {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            output: Linear::zeros(h, h),
            attn_norm: LayerNorm::zeros(h),
            ff_in: Linear::zeros(h, s.ff),
            ff_out: Linear::zeros(s.ff, h),
            ff_norm: LayerNorm::zeros(h),
        }
    }

    fn named<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.query.named(&format!("{p}.attn.query"), out);
        self.key.named(&format!("{p}.attn.key"), out);
        self.value.named(&format!("{p}.attn.value"), out);
        self.output.named(&format!("{p}.attn.output"), out);
        self.attn_norm.named(&format!("{p}.attn.norm"), out);
        self.ff_in.named(&format!("{p}.ff.input"), out);
        self.ff_out.named(&format!("{p}.ff.output"), out);
        self.ff_norm.named(&format!("{p}.ff.norm"), out);
    }

    fn named_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.query.named_mut(&format!("{p}.attn.query"), out);
        self.key.named_mut(&format!("{p}.attn.key"), out);
        self.value.named_mut(&format!("{p}.attn.value"), out);
        self.output.named_mut(&format!("{p}.attn.output"), out);
        self.attn_norm.named_mut(&format!("{p}.attn.norm"), out);
        self.ff_in.named_mut(&format!("{p}.ff.input"), out);
        self.ff_out.named_mut(&format!("{p}.ff.output"), out);
        self.ff_norm.named_mut(&format!("{p}.ff.norm"), out);
    }
}

/// Post-norm transformer encoder with learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub shape: EncoderShape,
    pub token_embedding: Mat<F>,
    pub position_embedding: Mat<F>,
    pub embedding_norm: LayerNorm<F>,
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> Encoder<F> {
    pub fn init<R: Rng>(shape: EncoderShape, std: f64, rng: &mut R) -> Self {
        Encoder {
            token_embedding: trunc_normal(shape.vocab, shape.hidden, std, rng),
            position_embedding: trunc_normal(shape.max_positions, shape.hidden, std, rng),
            embedding_norm: LayerNorm::init(shape.hidden),
            layers: (0..shape.layers).map(|_| Layer::init(&shape, std, rng)).collect(),
            shape,
        }
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        Encoder {
            token_embedding: Mat::zeros(shape.vocab, shape.hidden),
            position_embedding: Mat::zeros(shape.max_positions, shape.hidden),
            embedding_norm: LayerNorm::zeros(shape.hidden),
            layers: (0..shape.layers).map(|_| Layer::zeros(&shape)).collect(),
            shape,
        }
    }

    pub fn named<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((format!("{p}.embedding.token"), &self.token_embedding));
        out.push((format!("{p}.embedding.position"), &self.position_embedding));
        self.embedding_norm.named(&format!("{p}.embedding.norm"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("{p}.layers.{i}"), out);
        }
    }

    pub fn named_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((format!("{p}.embedding.token"), &mut self.token_embedding));
        out.push((format!("{p}.embedding.position"), &mut self.position_embedding));
        self.embedding_norm.named_mut(&format!("{p}.embedding.norm"), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("{p}.layers.{i}"), out);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut v = Vec::new();
        self.named("", &mut v);
        v.iter().map(|(_, m)| m.len()).sum()
    }
}

/// The narrow encoder that samples plausible identities, with its own
/// n-gram head.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<F> {
    pub encoder: Encoder<F>,
    pub ngram_head: Linear<F>,
}

/// Standard model θ and generator θ′.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    /// h × |V_F|.
    pub fine_head: Linear<F>,
    /// h × |⟨V_F, V_N⟩|.
    pub ngram_head: Linear<F>,
    /// h × 1.
    pub rtd_head: Linear<F>,
    pub generator: Generator<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let h = config.hidden;
        let gs = config.generator_shape();
        Ok(ModelParams {
            encoder: Encoder::init(config.encoder_shape(), std, &mut rng),
            fine_head: Linear::init(h, config.fine_vocab, std, &mut rng),
            ngram_head: Linear::init(h, config.joint_vocab(), std, &mut rng),
            rtd_head: Linear::init(h, 1, std, &mut rng),
            generator: Generator {
                encoder: Encoder::init(gs, std, &mut rng),
                ngram_head: Linear::init(gs.hidden, config.joint_vocab(), std, &mut rng),
            },
            config: config.clone(),
        })
    }

    /// Same shapes, all zeros: the gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let gs = config.generator_shape();
        ModelParams {
            encoder: Encoder::zeros(config.encoder_shape()),
            fine_head: Linear::zeros(h, config.fine_vocab),
            ngram_head: Linear::zeros(h, config.joint_vocab()),
            rtd_head: Linear::zeros(h, 1),
            generator: Generator {
                encoder: Encoder::zeros(gs),
                ngram_head: Linear::zeros(gs.hidden, config.joint_vocab()),
            },
            config: config.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.config)
    }

    /// Every tensor with a stable dotted name.
    pub fn named(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.encoder.named("encoder", &mut out);
        self.fine_head.named("heads.fine", &mut out);
        self.ngram_head.named("heads.ngram", &mut out);
        self.rtd_head.named("heads.rtd", &mut out);
        self.generator.encoder.named("generator.encoder", &mut out);
        self.generator.ngram_head.named("generator.heads.ngram", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        self.encoder.named_mut("encoder", &mut out);
        self.fine_head.named_mut("heads.fine", &mut out);
        self.ngram_head.named_mut("heads.ngram", &mut out);
        self.rtd_head.named_mut("heads.rtd", &mut out);
        self.generator.encoder.named_mut("generator.encoder", &mut out);
        self.generator.ngram_head.named_mut("generator.heads.ngram", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in self.named() {
            if !m.all_finite() {
                return Err(Error::Numeric(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config);
        for ((_, src), (_, dst)) in self.named().into_iter().zip(out.named_mut()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d = G::of(s.f64());
            }
        }
        out
    }
}
