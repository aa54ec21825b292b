//! Encoder forward pass with a retained cache, and its reverse pass.

use rand::Rng;

use super::params::{Encoder, Layer, LayerNorm};
use super::tensor::{Mat, Real};
use crate::error::{Error, Result};
use crate::maskplan::AttnMask;

const LN_EPS: f64 = 1e-12;

struct NormCache<F> {
    xhat: Mat<F>,
    inv_std: Vec<F>,
}

fn norm_forward<F: Real>(x: &Mat<F>, ln: &LayerNorm<F>) -> (Mat<F>, NormCache<F>) {
    let n = F::of(x.cols as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = &mut y.data[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            yr[c] = xhat.data[r * x.cols + c] * ln.gamma.data[c] + ln.beta.data[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn norm_backward<F: Real>(
    dy: &Mat<F>,
    cache: &NormCache<F>,
    ln: &LayerNorm<F>,
    grad: &mut LayerNorm<F>,
) -> Mat<F> {
    let cols = dy.cols;
    let n = F::of(cols as f64);
    let mut dx = dy.zeros_like();
    let mut dxhat = vec![F::zero(); cols];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            grad.gamma.data[c] += dyr[c] * xh[c];
            grad.beta.data[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gamma.data[c];
        }
        let mean_d = dxhat.iter().copied().sum::<F>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Inverted dropout in place; returns the scale mask when anything was
/// dropped.
fn dropout<F: Real, R: Rng>(x: &mut Mat<F>, p: f64, rng: &mut R) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
        .collect();
    for (v, &m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

fn apply_mask<F: Real>(x: &mut Mat<F>, mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &s) in x.data.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

struct LayerCache<F> {
    input: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    context: Mat<F>,
    attn_drop: Option<Vec<F>>,
    norm1: NormCache<F>,
    h1: Mat<F>,
    pre_act: Mat<F>,
    act: Mat<F>,
    ff_drop: Option<Vec<F>>,
    norm2: NormCache<F>,
}

/// Result of [`encode`]: hidden states and attention weights for
/// inspection, plus what the reverse pass needs.
pub struct Activations<F> {
    /// Embedding output followed by every layer's output, each `S × h`.
    pub hidden: Vec<Mat<F>>,
    /// `attention[layer][head]` is the `S × S` post-softmax weight matrix.
    pub attention: Vec<Vec<Mat<F>>>,
    ids: Vec<u32>,
    positions: Vec<u32>,
    emb_norm: NormCache<F>,
    emb_drop: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
}

impl<F: Real> Activations<F> {
    pub fn output(&self) -> &Mat<F> {
        self.hidden.last().expect("at least the embedding output")
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

pub struct Dropout<'a, R> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Runs the encoder over `ids` at `positions` (1-based) under `mask`.
pub fn encode<F: Real, R: Rng>(
    enc: &Encoder<F>,
    ids: &[u32],
    positions: &[u32],
    mask: AttnMask,
    mut dropout_cfg: Option<Dropout<'_, R>>,
) -> Result<Activations<F>> {
    let s = ids.len();
    let h = enc.shape.hidden;
    if positions.len() != s || mask.size() != s {
        return Err(Error::Argument(format!(
            "{} ids, {} positions, mask of size {}",
            s,
            positions.len(),
            mask.size()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= enc.shape.vocab) {
        return Err(Error::Argument(format!(
            "id {bad} outside vocabulary of size {}",
            enc.shape.vocab
        )));
    }
    if let Some(&bad) = positions
        .iter()
        .find(|&&p| p == 0 || p as usize > enc.shape.max_positions)
    {
        return Err(Error::Argument(format!(
            "position {bad} outside 1..={}",
            enc.shape.max_positions
        )));
    }
    let mut x = Mat::zeros(s, h);
    for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
        let tok = enc.token_embedding.row(id as usize);
        let p = enc.position_embedding.row(pos as usize - 1);
        for ((o, &a), &b) in x.row_mut(r).iter_mut().zip(tok).zip(p) {
            *o = a + b;
        }
    }
    let (mut hcur, emb_norm) = norm_forward(&x, &enc.embedding_norm);
    let active = |d: &Option<Dropout<'_, R>>| d.as_ref().is_some_and(|d| d.rate > 0.0);
    let emb_drop = if active(&dropout_cfg) {
        let d = dropout_cfg.as_mut().unwrap();
        Some(dropout(&mut hcur, d.rate, d.rng))
    } else {
        None
    };

    // Additive {0, -inf} mask.
    let additive: Vec<F> = (0..s * s)
        .map(|i| {
            if mask.allows(i / s, i % s) {
                F::zero()
            } else {
                F::neg_infinity()
            }
        })
        .collect();

    let mut hidden = vec![hcur.clone()];
    let mut attention = Vec::with_capacity(enc.layers.len());
    let mut caches = Vec::with_capacity(enc.layers.len());
    for layer in &enc.layers {
        let (out, probs, cache) = layer_forward(layer, enc.shape.heads, hcur, &additive, &mut dropout_cfg)?;
        hidden.push(out.clone());
        attention.push(probs);
        caches.push(cache);
        hcur = out;
    }
    Ok(Activations {
        hidden,
        attention,
        ids: ids.to_vec(),
        positions: positions.to_vec(),
        emb_norm,
        emb_drop,
        layers: caches,
    })
}

#[allow(clippy::type_complexity)]
fn layer_forward<F: Real, R: Rng>(
    layer: &Layer<F>,
    heads: usize,
    input: Mat<F>,
    additive: &[F],
    dropout_cfg: &mut Option<Dropout<'_, R>>,
) -> Result<(Mat<F>, Vec<Mat<F>>, LayerCache<F>)> {
    let s = input.rows;
    let h = input.cols;
    let dk = h / heads;
    let scale = F::one() / F::of(dk as f64).sqrt();
    let q = layer.query.forward(&input);
    let k = layer.key.forward(&input);
    let v = layer.value.forward(&input);
    let mut context = Mat::zeros(s, h);
    let mut probs = Vec::with_capacity(heads);
    for a in 0..heads {
        let off = a * dk;
        let mut p = Mat::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[off..off + dk];
            let row = p.row_mut(i);
            let mut max = F::neg_infinity();
            for j in 0..s {
                let kj = &k.row(j)[off..off + dk];
                let mut dot = F::zero();
                for (&x, &y) in qi.iter().zip(kj) {
                    dot += x * y;
                }
                let sc = dot * scale + additive[i * s + j];
                row[j] = sc;
                if sc > max {
                    max = sc;
                }
            }
            if !max.is_finite() {
                return Err(Error::Numeric(format!("attention row {i} has no finite score")));
            }
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        for i in 0..s {
            let pi = p.row(i);
            let ci = &mut context.data[i * h + off..i * h + off + dk];
            for (j, &w) in pi.iter().enumerate() {
                if w == F::zero() {
                    continue;
                }
                let vj = &v.data[j * h + off..j * h + off + dk];
                for (c, &x) in ci.iter_mut().zip(vj) {
                    *c += w * x;
                }
            }
        }
        probs.push(p);
    }
    let mut attn_out = layer.output.forward(&context);
    let attn_drop = match dropout_cfg.as_mut() {
        Some(d) if d.rate > 0.0 => Some(dropout(&mut attn_out, d.rate, d.rng)),
        _ => None,
    };
    let mut r1 = input.clone();
    r1.add_assign(&attn_out);
    let (h1, norm1) = norm_forward(&r1, &layer.attn_norm);
    let pre_act = layer.ff_in.forward(&h1);
    let act = Mat::from_vec(pre_act.rows, pre_act.cols, pre_act.data.iter().map(|&x| gelu(x)).collect());
    let mut ff = layer.ff_out.forward(&act);
    let ff_drop = match dropout_cfg.as_mut() {
        Some(d) if d.rate > 0.0 => Some(dropout(&mut ff, d.rate, d.rng)),
        _ => None,
    };
    let mut r2 = h1.clone();
    r2.add_assign(&ff);
    let (out, norm2) = norm_forward(&r2, &layer.ff_norm);
    Ok((
        out,
        probs,
        LayerCache {
            input,
            q,
            k,
            v,
            context,
            attn_drop,
            norm1,
            h1,
            pre_act,
            act,
            ff_drop,
            norm2,
        },
    ))
}

/// Back-propagates `d_out` (gradient w.r.t. the final hidden states)
/// through the encoder, accumulating into `grad`.
pub fn encode_backward<F: Real>(
    enc: &Encoder<F>,
    act: &Activations<F>,
    d_out: Mat<F>,
    grad: &mut Encoder<F>,
) {
    let heads = enc.shape.heads;
    let mut d = d_out;
    for (li, layer) in enc.layers.iter().enumerate().rev() {
        d = layer_backward(layer, heads, &act.layers[li], &act.attention[li], d, &mut grad.layers[li]);
    }
    apply_mask(&mut d, &act.emb_drop);
    let dx = norm_backward(&d, &act.emb_norm, &enc.embedding_norm, &mut grad.embedding_norm);
    for (r, (&id, &pos)) in act.ids.iter().zip(&act.positions).enumerate() {
        let dr = dx.row(r);
        for (g, &v) in grad.token_embedding.row_mut(id as usize).iter_mut().zip(dr) {
            *g += v;
        }
        for (g, &v) in grad.position_embedding.row_mut(pos as usize - 1).iter_mut().zip(dr) {
            *g += v;
        }
    }
}

fn layer_backward<F: Real>(
    layer: &Layer<F>,
    heads: usize,
    c: &LayerCache<F>,
    probs: &[Mat<F>],
    d_out: Mat<F>,
    g: &mut Layer<F>,
) -> Mat<F> {
    let s = c.input.rows;
    let h = c.input.cols;
    let dk = h / heads;
    let scale = F::one() / F::of(dk as f64).sqrt();

    let dr2 = norm_backward(&d_out, &c.norm2, &layer.ff_norm, &mut g.ff_norm);
    let mut dh1 = dr2.clone();
    let mut dff = dr2;
    apply_mask(&mut dff, &c.ff_drop);
    let mut dact = layer.ff_out.backward(&c.act, &dff, &mut g.ff_out);
    for (d, &x) in dact.data.iter_mut().zip(&c.pre_act.data) {
        *d *= gelu_grad(x);
    }
    let dh1_ff = layer.ff_in.backward(&c.h1, &dact, &mut g.ff_in);
    dh1.add_assign(&dh1_ff);

    let dr1 = norm_backward(&dh1, &c.norm1, &layer.attn_norm, &mut g.attn_norm);
    let mut dx = dr1.clone();
    let mut dattn = dr1;
    apply_mask(&mut dattn, &c.attn_drop);
    let dcontext = layer.output.backward(&c.context, &dattn, &mut g.output);

    let mut dq = Mat::zeros(s, h);
    let mut dk_m = Mat::zeros(s, h);
    let mut dv = Mat::zeros(s, h);
    let mut dp = vec![F::zero(); s];
    for (a, p) in probs.iter().enumerate() {
        let off = a * dk;
        for i in 0..s {
            let pi = p.row(i);
            let dci = &dcontext.data[i * h + off..i * h + off + dk];
            // dP[i][j] = dC_i · V_j ; dV_j += P[i][j] dC_i
            let mut dot_sum = F::zero();
            for j in 0..s {
                if pi[j] == F::zero() {
                    dp[j] = F::zero();
                    continue;
                }
                let vj = &c.v.data[j * h + off..j * h + off + dk];
                let mut acc = F::zero();
                for (&x, &y) in dci.iter().zip(vj) {
                    acc += x * y;
                }
                dp[j] = acc;
                dot_sum += acc * pi[j];
                let dvj = &mut dv.data[j * h + off..j * h + off + dk];
                for (o, &x) in dvj.iter_mut().zip(dci) {
                    *o += pi[j] * x;
                }
            }
            // dS = P ⊙ (dP - Σ dP ⊙ P), then through the scaled dot product.
            let qi = &c.q.data[i * h + off..i * h + off + dk];
            for j in 0..s {
                if pi[j] == F::zero() {
                    continue;
                }
                let ds = pi[j] * (dp[j] - dot_sum) * scale;
                let kj = &c.k.data[j * h + off..j * h + off + dk];
                let dqi = &mut dq.data[i * h + off..i * h + off + dk];
                for (o, &x) in dqi.iter_mut().zip(kj) {
                    *o += ds * x;
                }
                let dkj = &mut dk_m.data[j * h + off..j * h + off + dk];
                for (o, &x) in dkj.iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    dx.add_assign(&layer.query.backward(&c.input, &dq, &mut g.query));
    dx.add_assign(&layer.key.backward(&c.input, &dk_m, &mut g.key));
    dx.add_assign(&layer.value.backward(&c.input, &dv, &mut g.value));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{EncoderShape, ModelConfig, ModelParams};
    use rand_chacha::ChaCha8Rng;

    fn no_dropout() -> Option<Dropout<'static, ChaCha8Rng>> {
        None
    }

    #[test]
    fn uniform_attention_with_degenerate_weights() {
        let shape = EncoderShape {
            layers: 1,
            hidden: 4,
            heads: 1,
            ff: 4,
            vocab: 5,
            max_positions: 8,
        };
        // Zero query/key weights make every score equal.
        let enc = Encoder::<f64>::zeros(shape);
        let act = encode(&enc, &[1, 2, 3], &[1, 2, 3], AttnMask::new(3, 0), no_dropout()).unwrap();
        for row in act.attention[0][0].data.chunks(3) {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forbidden_columns_get_exact_zero() {
        let c = ModelConfig::tiny(12, 3);
        let p = ModelParams::<f32>::init(&c, 4).unwrap();
        let mask = AttnMask::new(4, 3);
        let act = encode(&p.encoder, &[1, 2, 3, 4, 5, 6, 7], &[1, 2, 3, 4, 2, 2, 4], mask, no_dropout()).unwrap();
        for layer in &act.attention {
            for head in layer {
                for i in 0..7 {
                    let sum: f32 = head.row(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                    for j in 0..7 {
                        if !mask.allows(i, j) {
                            assert_eq!(head.at(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = ModelConfig::tiny(12, 3);
        let p = ModelParams::<f32>::init(&c, 4).unwrap();
        assert!(encode(&p.encoder, &[99], &[1], AttnMask::new(1, 0), no_dropout()).is_err());
        assert!(encode(&p.encoder, &[1], &[0], AttnMask::new(1, 0), no_dropout()).is_err());
        assert!(encode(&p.encoder, &[1, 2], &[1], AttnMask::new(2, 0), no_dropout()).is_err());
    }

    #[test]
    fn layer_norm_gradient() {
        let x = Mat::from_vec(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]);
        let ln = LayerNorm {
            gamma: Mat::from_vec(1, 3, vec![1.1, 0.9, -0.7]),
            beta: Mat::from_vec(1, 3, vec![0.1, 0.0, 0.2]),
        };
        let w = Mat::from_vec(2, 3, vec![0.2, -0.5, 1.0, 0.7, 0.3, -0.9]);
        let loss = |x: &Mat<f64>| -> f64 {
            let (y, _) = norm_forward(x, &ln);
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = norm_forward(&x, &ln);
        let mut g = LayerNorm::zeros(3);
        let dx = norm_backward(&w, &cache, &ln, &mut g);
        for i in 0..6 {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-8, "{fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
