//! Harmonized cross-attention: a cosine agreement score between the visual
//! and textual streams gates a scalar weight that scales the joint-context
//! attention output.

use serde::{Deserialize, Serialize};

use crate::attention::{sdpa, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `λ + (1 − λ)·σ(s)`. The exact value lies strictly inside `(λ, 1)`; where
/// σ saturates in floating point the result is held at the nearest
/// representable interior value.
pub fn alpha(s: f64, lambda: f64) -> f64 {
    let a = lambda + (1.0 - lambda) * sigmoid(s);
    a.clamp(lambda.next_up(), 1f64.next_down())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySource {
    /// Encoder outputs before enhancement.
    Raw,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcaConfig {
    pub lambda: f64,
    pub alpha_override: Option<f64>,
    pub similarity: SimilaritySource,
    /// Stop gradients flowing from α into the encoders.
    pub detach_alpha: bool,
}

impl Default for HcaConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alpha_override: None,
            similarity: SimilaritySource::Raw,
            detach_alpha: false,
        }
    }
}

impl HcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1)", self.lambda)));
        }
        if let Some(a) = self.alpha_override {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha override {a} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn new_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<AttentionParams> {
    AttentionParams::new(store, prefix, d, rng)
}

/// Cosine of the mean-pooled token sequences, as a `[1×1]` node.
pub fn cosine_sim(g: &mut Graph, v: Var, t: Var) -> Result<Var> {
    let vm = g.mean_rows(v)?;
    let tm = g.mean_rows(t)?;
    g.cosine(vm, tm)
}

/// [`alpha`] as a graph node.
pub fn alpha_node(g: &mut Graph, s: Var, lambda: f64) -> Result<Var> {
    let sig = g.sigmoid(s)?;
    let scaled = g.scale(sig, 1.0 - lambda)?;
    g.add_scalar(scaled, lambda)
}

/// `α · Softmax(Q Kᵀ/√d) V` with `Q = v′W^Q`, `K = [v′W^K; t′W^K]`,
/// `V = [v′W^V; t′W^V]`.
pub fn hca_forward(g: &mut Graph, p: &AttentionParams, v: Var, t: Var, alpha: Var) -> Result<Var> {
    if g.shape(v).0 == 0 || g.shape(t).0 == 0 {
        return Err(Error::EmptyContext);
    }
    let (wq, wk, wv) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let q = g.matmul(v, wq)?;
    let kv = g.matmul(v, wk)?;
    let kt = g.matmul(t, wk)?;
    let k = g.concat_rows(&[kv, kt])?;
    let vv = g.matmul(v, wv)?;
    let vt = g.matmul(t, wv)?;
    let val = g.concat_rows(&[vv, vt])?;
    let a = sdpa(g, q, k, val, Some("hca"))?;
    g.scale_by(a, alpha)
}

/// Similarity, weight and harmonized tokens for one request.
#[derive(Clone, Copy, Debug)]
pub struct HcaVars {
    pub s: Var,
    pub alpha: Var,
    pub z: Var,
}

/// Score on `(sim_v, sim_t)`, weight from the score (or the override), then
/// attention over the enhanced pair.
pub fn harmonize(
    g: &mut Graph,
    p: &AttentionParams,
    cfg: &HcaConfig,
    (sim_v, sim_t): (Var, Var),
    v2: Var,
    t2: Var,
) -> Result<HcaVars> {
    let s = cosine_sim(g, sim_v, sim_t)?;
    let alpha = match cfg.alpha_override {
        Some(a) => g.input(Tensor::scalar(a).reshape(&[1, 1])?),
        None => {
            let s_in = if cfg.detach_alpha { g.detach(s) } else { s };
            alpha_node(g, s_in, cfg.lambda)?
        }
    };
    let z = hca_forward(g, p, v2, t2, alpha)?;
    Ok(HcaVars { s, alpha, z })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_at_zero_is_exact() {
        assert_eq!(alpha(0.0, 0.6), 0.8);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1e6), 0.0);
        assert_eq!(sigmoid(1e6), 1.0);
        assert!(sigmoid(-745.0) >= 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(HcaConfig::default().validate().is_ok());
        let bad = HcaConfig {
            lambda: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HcaConfig {
            alpha_override: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
