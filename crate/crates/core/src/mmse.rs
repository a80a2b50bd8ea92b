//! Multi-modal semantic enhancement: a single-block query transformer that
//! fuses a fabric label with its sample image, followed by cross-modal
//! enhancement of the visual and textual token sequences.

use crate::attention::{attend_over, sdpa, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct QFormerParams {
    /// Learned query tokens, `[n_q × d]`.
    pub queries: ParamId,
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
}

impl QFormerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, n_queries: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if n_queries == 0 {
            return Err(Error::Invalid("query count must be at least 1".into()));
        }
        Ok(Self {
            queries: store.add_normal(format!("{prefix}.queries"), &[n_queries, d], 0.5, rng)?,
            self_attn: AttentionParams::new(store, &format!("{prefix}.self"), d, rng)?,
            cross_attn: AttentionParams::new(store, &format!("{prefix}.cross"), d, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EnhancerParams {
    pub visual: AttentionParams,
    pub text: AttentionParams,
}

impl EnhancerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            visual: AttentionParams::new(store, &format!("{prefix}.visual"), d, rng)?,
            text: AttentionParams::new(store, &format!("{prefix}.text"), d, rng)?,
        })
    }
}

/// Self-attention over `[q; l]`, queries first.
pub fn qformer_self(g: &mut Graph, p: &AttentionParams, q: Var, l: Var) -> Result<Var> {
    if g.shape(l).0 == 0 {
        return Err(Error::EmptyContext);
    }
    let x = g.concat_rows(&[q, l])?;
    let (wq, wk, wv) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let qs = g.matmul(x, wq)?;
    let ks = g.matmul(x, wk)?;
    let vs = g.matmul(x, wv)?;
    sdpa(g, qs, ks, vs, Some("qformer.self"))
}

/// Cross-attention from `f_s` onto the sample-image tokens `i`.
pub fn qformer_cross(g: &mut Graph, p: &AttentionParams, f_s: Var, i: Var) -> Result<Var> {
    let (wq, wk, wv) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let q = g.matmul(f_s, wq)?;
    let k = g.matmul(i, wk)?;
    let v = g.matmul(i, wv)?;
    sdpa(g, q, k, v, Some("qformer.cross"))
}

/// Fabric tokens `f` from label tokens `l` and sample-image tokens `i`.
pub fn qformer(g: &mut Graph, p: &QFormerParams, l: Var, i: Var) -> Result<Var> {
    let q = g.param(p.queries);
    let f_s = qformer_self(g, &p.self_attn, q, l)?;
    qformer_cross(g, &p.cross_attn, f_s, i)
}

/// `x + attend(x, [ctx; f])`, with the fabric rows omitted when absent.
fn enhance(g: &mut Graph, p: &AttentionParams, x: Var, ctx: Var, f: Option<Var>) -> Result<Var> {
    let mut parts = vec![ctx];
    parts.extend(f);
    let a = attend_over(g, p, x, &parts)?;
    g.add(x, a)
}

pub fn enhance_visual(g: &mut Graph, p: &EnhancerParams, v: Var, t: Var, f: Option<Var>) -> Result<Var> {
    enhance(g, &p.visual, v, t, f)
}

pub fn enhance_text(g: &mut Graph, p: &EnhancerParams, t: Var, v: Var, f: Option<Var>) -> Result<Var> {
    enhance(g, &p.text, t, v, f)
}

/// Enhanced pair plus the fabric tokens used (if any).
#[derive(Clone, Copy, Debug)]
pub struct EnhancedVars {
    pub v: Var,
    pub t: Var,
    pub f: Option<Var>,
}

/// The enhancement stage given already-encoded inputs. `fabric`
/// holds `(label tokens, sample-image tokens)` when the prompt names one.
pub fn mmse(
    g: &mut Graph,
    qf: &QFormerParams,
    enh: &EnhancerParams,
    v: Var,
    t: Var,
    fabric: Option<(Var, Var)>,
) -> Result<EnhancedVars> {
    let f = match fabric {
        Some((l, i)) => Some(qformer(g, qf, l, i)?),
        None => None,
    };
    // both sides read the un-enhanced features
    let v2 = enhance_visual(g, enh, v, t, f)?;
    let t2 = enhance_text(g, enh, t, v, f)?;
    Ok(EnhancedVars { v: v2, t: t2, f })
}
