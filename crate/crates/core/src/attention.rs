//! Single-head scaled dot-product attention.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An ordered sequence of feature vectors, `[len × width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq(pub Tensor);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.numel() == 0
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Query/key/value projections and an optional output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Option<ParamId>,
}

impl AttentionParams {
    /// Square `d×d` projections, normal init with std `1/√d`.
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Self::rect(store, prefix, d, d, d, false, rng)
    }

    /// Queries of width `q_dim`, context of width `ctx_dim`, attention in
    /// width `inner`; the output projection maps back to `q_dim`.
    pub fn rect(
        store: &mut ParamStore,
        prefix: &str,
        q_dim: usize,
        ctx_dim: usize,
        inner: usize,
        with_output: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w_q = store.add_normal(format!("{prefix}.w_q"), &[q_dim, inner], (q_dim as f64).powf(-0.5), rng)?;
        let w_k = store.add_normal(format!("{prefix}.w_k"), &[ctx_dim, inner], (ctx_dim as f64).powf(-0.5), rng)?;
        let w_v = store.add_normal(format!("{prefix}.w_v"), &[ctx_dim, inner], (ctx_dim as f64).powf(-0.5), rng)?;
        let w_o = if with_output {
            Some(store.add_zeros(format!("{prefix}.w_o"), &[inner, q_dim])?)
        } else {
            None
        };
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_q, self.w_k, self.w_v];
        v.extend(self.w_o);
        v
    }
}

/// `Softmax(Q·Kᵀ/√d)·V` with `d` the query width. When `tap` is set the
/// attention weights are recorded on graphs that capture.
pub fn sdpa(g: &mut Graph, q: Var, k: Var, v: Var, tap: Option<&str>) -> Result<Var> {
    let (_, dq) = g.shape(q);
    let (lk, dk) = g.shape(k);
    let (lv, _) = g.shape(v);
    if dq != dk {
        return Err(Error::shape("sdpa q/k", &[dq], &[dk]));
    }
    if lk != lv {
        return Err(Error::shape("sdpa k/v", &[lk], &[lv]));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dq as f64).sqrt())?;
    let weights = g.softmax_rows(scores)?;
    if let Some(label) = tap {
        g.tap(label, weights);
    }
    g.matmul(weights, v)
}

/// Row-concatenate context parts; an empty list is an empty context.
pub fn concat_context(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Err(Error::EmptyContext),
        [one] => Ok(*one),
        _ => g.concat_rows(parts),
    }
}

/// `sdpa(x·W_q, c·W_k, c·W_v)`, followed by `W_o` when present.
pub fn attend(g: &mut Graph, p: &AttentionParams, x_q: Var, context: Var) -> Result<Var> {
    attend_tapped(g, p, x_q, context, None)
}

pub fn attend_tapped(
    g: &mut Graph,
    p: &AttentionParams,
    x_q: Var,
    context: Var,
    tap: Option<&str>,
) -> Result<Var> {
    let (wq, wk, wv) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(context, wk)?;
    let v = g.matmul(context, wv)?;
    let out = sdpa(g, q, k, v, tap)?;
    match p.w_o {
        Some(o) => {
            let wo = g.param(o);
            g.matmul(out, wo)
        }
        None => Ok(out),
    }
}

/// [`attend`] over the concatenation of `parts`.
pub fn attend_over(g: &mut Graph, p: &AttentionParams, x_q: Var, parts: &[Var]) -> Result<Var> {
    let ctx = concat_context(g, parts)?;
    attend(g, p, x_q, ctx)
}
