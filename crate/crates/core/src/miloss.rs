//! Mutual-information minimisation between the stage-1 decoder and the
//! stage-2 encoder.
//!
//! Each feature map is embedded to a fixed-length vector, turned into a
//! probability vector by a softmax, and the loss
//! `G_q(p) + G_p(q) - K(p‖q) - K(q‖p)` is evaluated in closed form. The four
//! terms collapse to `H(p) + H(q)`, which is checked on every call.

use crate::blocks::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ParamStore, Scope};

/// Floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Two 3×3 convolutions, global average pooling and two fully connected
/// layers. Output shape `(n, d_emb, 1, 1)` for any input size.
#[derive(Clone, Debug)]
pub struct EmbeddingHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Conv2d,
    fc2: Conv2d,
    pub channels: usize,
    pub dim: usize,
}

impl EmbeddingHead {
    /// Parameters are flagged training-only.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, dim: usize) -> Self {
        store.set_training_only(true);
        let head = EmbeddingHead {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, hidden, 3, 1),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, hidden, 3, 1),
            fc1: Conv2d::new(store, &format!("{name}.fc1"), hidden, dim, 1, 1),
            fc2: Conv2d::new(store, &format!("{name}.fc2"), dim, dim, 1, 1),
            channels,
            dim,
        };
        store.set_training_only(false);
        head
    }

    pub fn forward(&self, s: &mut Scope, features: Var) -> Result<Var> {
        let c = s.shape(features).c;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "embedding head expects {} channels, got {c}",
                self.channels
            )));
        }
        let x = self.conv1.forward(s, features)?;
        let x = s.leaky_relu(x, LEAKY_SLOPE);
        let x = self.conv2.forward(s, x)?;
        let x = s.leaky_relu(x, LEAKY_SLOPE);
        let x = s.global_avg_pool(x);
        let x = self.fc1.forward(s, x)?;
        let x = s.leaky_relu(x, LEAKY_SLOPE);
        self.fc2.forward(s, x)
    }
}

/// The four information terms for one pair of probability vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiTerms {
    /// `-Σ p ln q`
    pub cross_pq: f64,
    /// `-Σ q ln p`
    pub cross_qp: f64,
    /// `Σ p ln(p/q)`
    pub kl_pq: f64,
    /// `Σ q ln(q/p)`
    pub kl_qp: f64,
    pub entropy_p: f64,
    pub entropy_q: f64,
}

impl MiTerms {
    pub fn loss(&self) -> f64 {
        self.cross_pq + self.cross_qp - self.kl_pq - self.kl_qp
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Closed-form terms for two raw embedding vectors.
pub fn mi_terms(v_d: &[f64], v_e: &[f64]) -> Result<MiTerms> {
    if v_d.len() != v_e.len() || v_d.is_empty() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            v_d.len(),
            v_e.len()
        )));
    }
    if !v_d.iter().chain(v_e).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("embedding vector".into()));
    }
    let (p, q) = (softmax(v_d), softmax(v_e));
    let ln = |x: f64| x.max(LOG_FLOOR).ln();
    let mut t = MiTerms {
        cross_pq: 0.0,
        cross_qp: 0.0,
        kl_pq: 0.0,
        kl_qp: 0.0,
        entropy_p: 0.0,
        entropy_q: 0.0,
    };
    for (&p, &q) in p.iter().zip(&q) {
        t.cross_pq -= p * ln(q);
        t.cross_qp -= q * ln(p);
        t.kl_pq += p * (ln(p) - ln(q));
        t.kl_qp += q * (ln(q) - ln(p));
        t.entropy_p -= p * ln(p);
        t.entropy_q -= q * ln(q);
    }
    Ok(t)
}

impl Graph {
    /// Differentiable MI loss between two `(n, d, 1, 1)` embeddings, averaged
    /// over the batch.
    pub fn mi_loss(&mut self, v_d: Var, v_e: Var) -> Result<Var> {
        let (sd, se) = (self.shape(v_d), self.shape(v_e));
        if sd != se || sd.h != 1 || sd.w != 1 {
            return Err(Error::Shape(format!("mi_loss: embeddings {sd} and {se}")));
        }
        self.value(v_d).ensure_finite("stage-1 embedding")?;
        self.value(v_e).ensure_finite("stage-2 embedding")?;
        let p = self.softmax_channels(v_d);
        let q = self.softmax_channels(v_e);
        let ln_p = self.ln_floor(p, LOG_FLOOR);
        let ln_q = self.ln_floor(q, LOG_FLOOR);
        let weighted_sum = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
            let m = g.mul(a, b)?;
            Ok(g.sum(m))
        };
        let p_ln_q = weighted_sum(self, p, ln_q)?;
        let q_ln_p = weighted_sum(self, q, ln_p)?;
        let p_ln_p = weighted_sum(self, p, ln_p)?;
        let q_ln_q = weighted_sum(self, q, ln_q)?;
        let cross_pq = self.scale(p_ln_q, -1.0);
        let cross_qp = self.scale(q_ln_p, -1.0);
        let kl_pq = self.sub(p_ln_p, p_ln_q)?;
        let kl_qp = self.sub(q_ln_q, q_ln_p)?;
        let cross = self.add(cross_pq, cross_qp)?;
        let kl = self.add(kl_pq, kl_qp)?;
        let total = self.sub(cross, kl)?;

        let entropies = -(self.value(p_ln_p).item(0)[0] + self.value(q_ln_q).item(0)[0]);
        let loss = self.value(total).item(0)[0];
        debug_assert!(
            (loss - entropies).abs() <= 1e-6 * entropies.abs().max(1.0),
            "four-term MI {loss} differs from H(p)+H(q) {entropies}"
        );
        Ok(self.scale(total, 1.0 / sd.n as f64))
    }

    /// `Σ_scales mi_loss(d[i], e[i])`.
    pub fn multi_scale_mi(&mut self, decoder: &[Var], encoder: &[Var]) -> Result<Var> {
        if decoder.len() != 3 || encoder.len() != 3 {
            return Err(Error::Shape(format!(
                "multi-scale MI needs embeddings at three scales, got {} and {}",
                decoder.len(),
                encoder.len()
            )));
        }
        let mut total = self.mi_loss(decoder[0], encoder[0])?;
        for i in 1..3 {
            let l = self.mi_loss(decoder[i], encoder[i])?;
            total = self.add(total, l)?;
        }
        Ok(total)
    }
}

/// Cosine similarity between the softmax-normalised embeddings, averaged over
/// the batch. Used as the redundancy measure between paired embeddings.
pub fn embedding_cosine(v_d: &crate::Tensor, v_e: &crate::Tensor) -> Result<f64> {
    let (sd, se) = (v_d.shape(), v_e.shape());
    if sd != se {
        return Err(Error::Shape(format!("embedding_cosine: {sd} vs {se}")));
    }
    let mut total = 0.0;
    for n in 0..sd.n {
        let (p, q) = (softmax(v_d.item(n)), softmax(v_e.item(n)));
        let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += dot / (np * nq);
    }
    Ok(total / sd.n as f64)
}
