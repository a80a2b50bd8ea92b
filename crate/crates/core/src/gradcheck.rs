//! Finite-difference verification of analytic gradients (five-point
//! central stencil, truncation error O(h⁴)).

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Stencil spacing.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords: Option<usize>,
    /// Only parameters whose name starts with one of these prefixes.
    pub only: Vec<String>,
    /// Test hook: added to every analytic gradient entry before comparison.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-6,
            max_coords: None,
            only: Vec::new(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = f(&mut g)?;
    Ok(g.value(l).item())
}

/// Compare the analytic gradient of `f` (a scalar loss built over `store`)
/// with numeric derivatives, parameter by parameter.
pub fn grad_check<F>(store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        g.backward(l)?
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let p = store.get(id);
        if !cfg.only.is_empty() && !cfg.only.iter().any(|o| p.name.starts_with(o.as_str())) {
            continue;
        }
        let n = p.value.numel();
        let stride = match cfg.max_coords {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let zeros = vec![0.0; n];
        let analytic = grads.param(id).map_or(&zeros[..], |t| t.data());

        let mut check = ParamCheck {
            name: p.name.clone(),
            coords: 0,
            max_rel_err: 0.0,
            max_abs_analytic: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let orig = p.value.data()[i];
            let mut at = |k: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + k * cfg.step;
                eval_loss(&work, &f)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work.value_mut(id).data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.step);
            let a = analytic[i] + cfg.corrupt.unwrap_or(0.0);
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric, cfg.abs_floor));
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.coords += 1;
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn linear_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(seed);
        s.add_normal("x", &[3, 4], 1.0, &mut rng).unwrap();
        s.add_normal("w", &[4, 5], 1.0, &mut rng).unwrap();
        s.add_normal("b", &[1, 5], 1.0, &mut rng).unwrap();
        s.add_normal("probe", &[3, 5], 1.0, &mut rng).unwrap();
        s
    }

    fn linear_loss(g: &mut Graph) -> Result<Var> {
        let st = g.store();
        let x = g.param(st.id("x")?);
        let w = g.param(st.id("w")?);
        let b = g.param(st.id("b")?);
        let probe = g.param(st.id("probe")?);
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        let y = g.mul(y, probe)?;
        g.sum(y)
    }

    #[test]
    fn linear_layer_passes() {
        let s = linear_store(11);
        let r = grad_check(&s, linear_loss, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-6, "{r:?}");
        assert_eq!(r.coords(), 12 + 20 + 5 + 15);
    }

    #[test]
    fn attention_block_passes() {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(12);
        for name in ["x", "c"] {
            s.add_normal(name, &[3, 4], 1.0, &mut rng).unwrap();
        }
        for name in ["wq", "wk", "wv"] {
            s.add_normal(name, &[4, 4], 0.5, &mut rng).unwrap();
        }
        s.add_normal("probe", &[3, 4], 1.0, &mut rng).unwrap();
        let f = |g: &mut Graph| -> Result<Var> {
            let st = g.store();
            let [x, c, wq, wk, wv, probe] =
                ["x", "c", "wq", "wk", "wv", "probe"].map(|n| st.id(n).unwrap());
            let (x, c) = (g.param(x), g.param(c));
            let (wq, wk, wv, probe) = (g.param(wq), g.param(wk), g.param(wv), g.param(probe));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(c, wk)?;
            let v = g.matmul(c, wv)?;
            let sc = g.matmul_nt(q, k)?;
            let sc = g.scale(sc, 0.5)?;
            let a = g.softmax_rows(sc)?;
            let o = g.matmul(a, v)?;
            let o = g.mul(o, probe)?;
            g.sum(o)
        };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-5, "{r:?}");
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(13);
        s.add_normal("a", &[4, 6], 1.0, &mut rng).unwrap();
        s.add_normal("r", &[1, 6], 1.0, &mut rng).unwrap();
        s.add_normal("k", &[9, 6], 1.0, &mut rng).unwrap();
        s.add_normal("u", &[1, 6], 1.0, &mut rng).unwrap();
        s.add_normal("probe", &[4, 6], 1.0, &mut rng).unwrap();
        let f = |g: &mut Graph| -> Result<Var> {
            let st = g.store();
            let a = g.param(st.id("a")?);
            let r = g.param(st.id("r")?);
            let k = g.param(st.id("k")?);
            let u = g.param(st.id("u")?);
            let probe = g.param(st.id("probe")?);
            let x = g.layer_norm_rows(a, 1e-5)?;
            let x = g.mul_row(x, r)?;
            let x = g.silu(x)?;
            let x = g.dwconv3x3(x, k, 2, 2)?;
            let x = g.sigmoid(x)?;
            let m = g.mean_rows(x)?;
            let s = g.cosine(m, u)?;
            let x = g.scale_by(x, s)?;
            let x = g.add_scalar(x, 0.3)?;
            let c = g.concat_rows(&[x, a])?;
            let c = g.slice_rows(c, 2, 4)?;
            let c = g.mul(c, probe)?;
            g.mean(c)
        };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-5, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::filled(&[2, 2], 3.0)).unwrap();
        let f = |g: &mut Graph| -> Result<Var> { Ok(g.input(Tensor::scalar(7.0))) };
        let r = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.max_rel_err(), 0.0);
        assert_eq!(r.params[0].max_abs_analytic, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let s = linear_store(14);
        let cfg = GradCheckConfig {
            corrupt: Some(1e-2),
            ..Default::default()
        };
        let r = grad_check(&s, linear_loss, &cfg).unwrap();
        assert!(r.max_rel_err() > 1e-4);
    }

    #[test]
    fn strided_sampling_limits_coords() {
        let s = linear_store(15);
        let cfg = GradCheckConfig {
            max_coords: Some(4),
            ..Default::default()
        };
        let r = grad_check(&s, linear_loss, &cfg).unwrap();
        assert!(r.params.iter().all(|p| p.coords <= 4));
    }
}
