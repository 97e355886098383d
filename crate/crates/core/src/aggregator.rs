//! MIL head: normalize detached attention, form the bag representation,
//! classify, and compute the weighted aggregator loss. Also the ABMIL and
//! mean-pool reference baselines used for frozen-feature comparisons.

use crate::autograd::{Graph, Value};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PROB_EPS: f64 = 1e-7;

/// Aggregator parameters θ_agg = {W, b}; C_out = 1 for binary tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams<T> {
    /// C_out × D
    pub w: Tensor<T>,
    /// C_out
    pub b: Tensor<T>,
}

impl<T: Scalar> AggregatorParams<T> {
    pub fn init(c_out: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = crate::synth::normal_tensor(&mut rng, vec![c_out, d], 0.02);
        AggregatorParams {
            w,
            b: Tensor::zeros(vec![c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> AggregatorParams<U> {
        AggregatorParams {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("agg.w".into(), &self.w), ("agg.b".into(), &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Per-class weighting: loss coefficient for class j with label y is
/// alpha[j] * (pos[j] if y = 1 else neg[j]).
#[derive(Clone, Debug)]
pub struct ClassWeights {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ClassWeights {
    pub fn unit(classes: usize) -> Self {
        ClassWeights {
            pos: vec![1.0; classes],
            neg: vec![1.0; classes],
            alpha: vec![1.0; classes],
        }
    }

    /// Binary inverse-frequency balancing: w_y = M / (2·M_y).
    pub fn balanced_binary(m: usize, m_pos: usize) -> Self {
        let m_neg = m.saturating_sub(m_pos);
        let w = |count: usize| {
            if count == 0 {
                1.0
            } else {
                m as f64 / (2.0 * count as f64)
            }
        };
        ClassWeights {
            pos: vec![w(m_pos)],
            neg: vec![w(m_neg)],
            alpha: vec![1.0],
        }
    }

    /// Multi-label: per-class balanced weights plus alpha_j = M / M_j+,
    /// the inverse positive ratio.
    pub fn multilabel(m: usize, m_pos: &[usize]) -> Self {
        let w = |count: usize| {
            if count == 0 {
                1.0
            } else {
                m as f64 / (2.0 * count as f64)
            }
        };
        ClassWeights {
            pos: m_pos.iter().map(|&p| w(p)).collect(),
            neg: m_pos.iter().map(|&p| w(m.saturating_sub(p))).collect(),
            alpha: m_pos
                .iter()
                .map(|&p| if p == 0 { 1.0 } else { m as f64 / p as f64 })
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    /// Combined coefficient for class j under label y.
    pub fn coeff(&self, j: usize, y: f64) -> f64 {
        self.alpha[j] * if y >= 0.5 { self.pos[j] } else { self.neg[j] }
    }
}

/// Min-max scale to [0,1] followed by softmax, on raw data. All-equal input
/// degenerates to the uniform distribution.
pub fn normalize_attention<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.numel() == 0 {
        return Err(Error::EmptyBag);
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("normalize_attention"));
    }
    let mut mn = a.data()[0];
    let mut mx = a.data()[0];
    for &v in a.data() {
        mn = mn.minv(v);
        mx = mx.maxv(v);
    }
    let k = a.numel();
    let mut out = Tensor::zeros(vec![k]);
    if mx == mn {
        let u = T::ONE / T::from_f64(k as f64);
        out.data_mut().fill(u);
        return Ok(out);
    }
    let range = mx - mn;
    // softmax of (a - mn)/range, max-subtracted (max of s is 1)
    let mut sum = T::ZERO;
    for (o, &v) in out.data_mut().iter_mut().zip(a.data()) {
        let s = (v - mn) / range;
        let e = (s - T::ONE).exp();
        *o = e;
        sum += e;
    }
    for o in out.data_mut() {
        *o = *o / sum;
    }
    Ok(out)
}

/// Graph version of `normalize_attention`; keeps gradients flowing to `a`.
pub fn normalize_attention_value<T: Scalar>(
    graph: &mut Graph<T>,
    a: &Value<T>,
) -> Result<Value<T>> {
    if a.data().numel() == 0 {
        return Err(Error::EmptyBag);
    }
    if !a.data().all_finite() {
        return Err(Error::NonFinite("normalize_attention"));
    }
    let mn = a.data().data().iter().fold(a.data().data()[0], |m, &v| m.minv(v));
    let mx = a.data().data().iter().fold(a.data().data()[0], |m, &v| m.maxv(v));
    let s = if mx == mn {
        // Degenerate range: all-zero scores, hence uniform attention.
        graph.scale(a, T::ZERO)?
    } else {
        let mn_v = graph.min_all(a)?;
        let mx_v = graph.max_all(a)?;
        let range = graph.sub(&mx_v, &mn_v)?;
        let centered = graph.sub(a, &mn_v)?;
        graph.div(&centered, &range)?
    };
    graph.softmax(&s, 0)
}

/// Bag representation Z = sum_i a_hat_i z_i.
pub fn aggregate_bag_value<T: Scalar>(
    graph: &mut Graph<T>,
    z: &Value<T>,
    a_hat: &Value<T>,
) -> Result<Value<T>> {
    let k = z.shape()[0];
    let d = z.shape()[1];
    if a_hat.data().numel() != k {
        return Err(Error::ShapeMismatch {
            op: "aggregate_bag",
            lhs: z.shape().to_vec(),
            rhs: a_hat.shape().to_vec(),
        });
    }
    let row = graph.reshape(a_hat, vec![1, k])?;
    let bag = graph.matmul(&row, z)?;
    graph.reshape(&bag, vec![d])
}

/// Linear classifier: sigmoid(W Z + b), elementwise over outputs.
pub fn classify_bag_value<T: Scalar>(
    graph: &mut Graph<T>,
    bag: &Value<T>,
    w: &Value<T>,
    b: &Value<T>,
) -> Result<Value<T>> {
    let d = bag.data().numel();
    let c = w.shape()[0];
    let col = graph.reshape(bag, vec![d, 1])?;
    let logits = graph.matmul(w, &col)?; // [C,1]
    let logits = graph.reshape(&logits, vec![c])?;
    let logits = graph.add(&logits, b)?;
    graph.sigmoid(&logits)
}

/// Weighted cross-entropy over C sigmoid outputs. Probabilities at exactly
/// 0 or 1 are clamped to [eps, 1-eps] and the clamp is reported.
pub fn weighted_bce_value<T: Scalar>(
    graph: &mut Graph<T>,
    probs: &Value<T>,
    labels: &[f64],
    weights: &ClassWeights,
) -> Result<(Value<T>, bool)> {
    let c = probs.data().numel();
    if labels.len() != c || weights.classes() != c {
        return Err(Error::ShapeMismatch {
            op: "aggregator_loss",
            lhs: vec![c],
            rhs: vec![labels.len()],
        });
    }
    let eps = T::from_f64(PROB_EPS);
    let one_m_eps = T::ONE - eps;
    let clamped = probs
        .data()
        .data()
        .iter()
        .any(|&p| p < eps || p > one_m_eps);
    let p = graph.clamp(probs, eps, one_m_eps)?;
    let y = Value::constant(Tensor::new(
        vec![c],
        labels.iter().map(|&v| T::from_f64(v)).collect(),
    )?);
    let one_minus_y = Value::constant(Tensor::new(
        vec![c],
        labels.iter().map(|&v| T::from_f64(1.0 - v)).collect(),
    )?);
    let coeffs = Value::constant(Tensor::new(
        vec![c],
        labels
            .iter()
            .enumerate()
            .map(|(j, &v)| T::from_f64(weights.coeff(j, v)))
            .collect(),
    )?);
    let ln_p = graph.ln(&p)?;
    let neg_p = graph.scale(&p, -T::ONE)?;
    let one_m_p = graph.add_scalar(&neg_p, T::ONE)?;
    let ln_1mp = graph.ln(&one_m_p)?;
    let t1 = graph.mul(&y, &ln_p)?;
    let t2 = graph.mul(&one_minus_y, &ln_1mp)?;
    let ll = graph.add(&t1, &t2)?;
    let weighted = graph.mul(&coeffs, &ll)?;
    let total = graph.sum_all(&weighted)?;
    let loss = graph.scale(&total, -T::ONE)?;
    Ok((loss, clamped))
}

/// One full aggregator pass on a graph. In decoupled training `z` and `a` are
/// requires-grad leaves built from detached backbone outputs; in joint
/// training they are the attached backbone values themselves.
pub struct AggregatorForward<T> {
    pub a_hat: Value<T>,
    pub bag_vector: Value<T>,
    pub probs: Value<T>,
    pub loss: Value<T>,
    pub clamped: bool,
}

pub fn bag_forward<T: Scalar>(
    graph: &mut Graph<T>,
    z: &Value<T>,
    a: &Value<T>,
    w: &Value<T>,
    b: &Value<T>,
    labels: &[f64],
    weights: &ClassWeights,
) -> Result<AggregatorForward<T>> {
    let a_hat = normalize_attention_value(graph, a)?;
    let bag_vector = aggregate_bag_value(graph, z, &a_hat)?;
    let probs = classify_bag_value(graph, &bag_vector, w, b)?;
    let (loss, clamped) = weighted_bce_value(graph, &probs, labels, weights)?;
    Ok(AggregatorForward {
        a_hat,
        bag_vector,
        probs,
        loss,
        clamped,
    })
}

/// The spec's BagPrediction: detached tensors of one aggregator pass.
#[derive(Clone, Debug)]
pub struct BagPrediction<T> {
    pub normalized_attention: Tensor<T>,
    pub bag_vector: Tensor<T>,
    pub probs: Tensor<T>,
    pub loss: f64,
}

impl<T: Scalar> AggregatorForward<T> {
    pub fn prediction(&self) -> BagPrediction<T> {
        BagPrediction {
            normalized_attention: self.a_hat.data().clone(),
            bag_vector: self.bag_vector.data().clone(),
            probs: self.probs.data().clone(),
            loss: self.loss.data().item().to_f64(),
        }
    }
}

/// Pure-data inference: normalize, aggregate, classify. No graph, no loss.
pub fn infer_bag<T: Scalar>(
    features: &Tensor<T>,
    a: &Tensor<T>,
    params: &AggregatorParams<T>,
) -> Result<Tensor<T>> {
    let a_hat = normalize_attention(a)?;
    let k = features.shape()[0];
    let d = features.shape()[1];
    if a_hat.numel() != k {
        return Err(Error::ShapeMismatch {
            op: "infer_bag",
            lhs: features.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let mut bag = vec![T::ZERO; d];
    for (i, &ai) in a_hat.data().iter().enumerate() {
        for (bv, &zv) in bag.iter_mut().zip(&features.data()[i * d..(i + 1) * d]) {
            *bv += ai * zv;
        }
    }
    let c = params.c_out();
    let mut probs = Tensor::zeros(vec![c]);
    for j in 0..c {
        let wrow = &params.w.data()[j * d..(j + 1) * d];
        let mut logit = params.b.data()[j];
        for (&wv, &bv) in wrow.iter().zip(&bag) {
            logit += wv * bv;
        }
        probs.data_mut()[j] = T::ONE / (T::ONE + (-logit).exp());
    }
    Ok(probs)
}

// ── Reference baselines ─────────────────────────────────────────────────

/// ABMIL attention head: a_hat = softmax_i(w^T tanh(V z_i)).
#[derive(Clone, Debug)]
pub struct AbmilParams<T> {
    pub v: Tensor<T>,
    pub w_attn: Tensor<T>,
    pub classifier: AggregatorParams<T>,
}

impl<T: Scalar> AbmilParams<T> {
    pub fn init(c_out: usize, d: usize, attn_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AbmilParams {
            v: crate::synth::normal_tensor(&mut rng, vec![d, attn_dim], 0.1),
            w_attn: crate::synth::normal_tensor(&mut rng, vec![attn_dim, 1], 0.1),
            classifier: AggregatorParams::init(c_out, d, seed ^ 0x5eed),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.v,
            &mut self.w_attn,
            &mut self.classifier.w,
            &mut self.classifier.b,
        ]
    }
}

pub struct BaselineForward<T> {
    pub a_hat: Value<T>,
    pub probs: Value<T>,
    pub loss: Value<T>,
}

/// ABMIL pass over detached features (z is a leaf of `graph`).
pub fn abmil_forward<T: Scalar>(
    graph: &mut Graph<T>,
    z: &Value<T>,
    v: &Value<T>,
    w_attn: &Value<T>,
    w: &Value<T>,
    b: &Value<T>,
    labels: &[f64],
    weights: &ClassWeights,
) -> Result<BaselineForward<T>> {
    let k = z.shape()[0];
    if k == 0 {
        return Err(Error::EmptyBag);
    }
    let hidden = graph.matmul(z, v)?; // [K,A]
    // tanh(x) = 2 sigmoid(2x) - 1
    let two = T::from_f64(2.0);
    let scaled = graph.scale(&hidden, two)?;
    let sig = graph.sigmoid(&scaled)?;
    let sig2 = graph.scale(&sig, two)?;
    let tanh = graph.add_scalar(&sig2, -T::ONE)?;
    let logits = graph.matmul(&tanh, w_attn)?; // [K,1]
    let logits = graph.reshape(&logits, vec![k])?;
    let a_hat = graph.softmax(&logits, 0)?;
    let bag = aggregate_bag_value(graph, z, &a_hat)?;
    let probs = classify_bag_value(graph, &bag, w, b)?;
    let (loss, _) = weighted_bce_value(graph, &probs, labels, weights)?;
    Ok(BaselineForward { a_hat, probs, loss })
}

/// Mean-pool pass: fixed uniform attention 1/K.
pub fn meanpool_forward<T: Scalar>(
    graph: &mut Graph<T>,
    z: &Value<T>,
    w: &Value<T>,
    b: &Value<T>,
    labels: &[f64],
    weights: &ClassWeights,
) -> Result<BaselineForward<T>> {
    let k = z.shape()[0];
    if k == 0 {
        return Err(Error::EmptyBag);
    }
    let a_hat = graph.leaf(
        Tensor::full(vec![k], T::ONE / T::from_f64(k as f64)),
        false,
    );
    let bag = aggregate_bag_value(graph, z, &a_hat)?;
    let probs = classify_bag_value(graph, &bag, w, b)?;
    let (loss, _) = weighted_bce_value(graph, &probs, labels, weights)?;
    Ok(BaselineForward { a_hat, probs, loss })
}
