//! Enhancement and harmonization against hand-assembled formulas.

use approx::assert_relative_eq;
use higarment::attention::AttentionParams;
use higarment::autograd::Graph;
use higarment::hca::{alpha, harmonize, sigmoid, HcaConfig};
use higarment::mmse::{mmse, EnhancerParams, QFormerParams};
use higarment::params::ParamStore;
use higarment::rng::Rng;
use higarment::tensor::Tensor;
use proptest::prelude::*;

const D: usize = 5;

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, rng.normals(r * c)).unwrap()
}

fn softmax_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let s = q.matmul(&k.transpose()).unwrap().scale(1.0 / (q.cols() as f64).sqrt());
    s.softmax_rows().unwrap().matmul(v).unwrap()
}

fn project_attn(store: &ParamStore, p: &AttentionParams, x: &Tensor, ctx: &Tensor) -> Tensor {
    let q = x.matmul(store.value(p.w_q)).unwrap();
    let k = ctx.matmul(store.value(p.w_k)).unwrap();
    let v = ctx.matmul(store.value(p.w_v)).unwrap();
    softmax_attn(&q, &k, &v)
}

fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::concat_rows(&[a, b]).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

struct Setup {
    store: ParamStore,
    qf: QFormerParams,
    enh: EnhancerParams,
    hca: AttentionParams,
    v: Tensor,
    t: Tensor,
    l: Tensor,
    i: Tensor,
}

fn setup(seed: u64) -> Setup {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let qf = QFormerParams::new(&mut store, "qf", 3, D, &mut rng).unwrap();
    let enh = EnhancerParams::new(&mut store, "enh", D, &mut rng).unwrap();
    let hca = higarment::hca::new_params(&mut store, "hca", D, &mut rng).unwrap();
    Setup {
        v: rand_t(&mut rng, 4, D),
        t: rand_t(&mut rng, 6, D),
        l: rand_t(&mut rng, 2, D),
        i: rand_t(&mut rng, 4, D),
        store,
        qf,
        enh,
        hca,
    }
}

#[test]
fn enhancement_matches_direct_formula() {
    let s = setup(3);
    let mut g = Graph::new(&s.store);
    let (v, t, l, i) = (g.input(s.v.clone()), g.input(s.t.clone()), g.input(s.l.clone()), g.input(s.i.clone()));
    let e = mmse(&mut g, &s.qf, &s.enh, v, t, Some((l, i))).unwrap();

    let queries = s.store.value(s.qf.queries);
    let x = cat(queries, &s.l);
    let f_s = project_attn(&s.store, &s.qf.self_attn, &x, &x);
    let f = project_attn(&s.store, &s.qf.cross_attn, &f_s, &s.i);
    let v2 = s.v.add(&project_attn(&s.store, &s.enh.visual, &s.v, &cat(&s.t, &f))).unwrap();
    let t2 = s.t.add(&project_attn(&s.store, &s.enh.text, &s.t, &cat(&s.v, &f))).unwrap();

    assert_eq!(g.value(e.f.unwrap()).rows(), 3 + 2);
    assert!(g.value(e.f.unwrap()).max_abs_diff(&f) < 1e-12);
    assert!(g.value(e.v).max_abs_diff(&v2) < 1e-12);
    assert!(g.value(e.t).max_abs_diff(&t2) < 1e-12);
}

#[test]
fn enhancement_without_fabric_uses_the_other_stream_only() {
    let s = setup(4);
    let mut g = Graph::new(&s.store);
    let (v, t) = (g.input(s.v.clone()), g.input(s.t.clone()));
    let e = mmse(&mut g, &s.qf, &s.enh, v, t, None).unwrap();
    assert!(e.f.is_none());
    let v2 = s.v.add(&project_attn(&s.store, &s.enh.visual, &s.v, &s.t)).unwrap();
    assert!(g.value(e.v).max_abs_diff(&v2) < 1e-12);
}

#[test]
fn zero_value_projection_is_a_residual_bypass() {
    let mut s = setup(5);
    for p in [s.enh.visual.w_v, s.enh.text.w_v] {
        s.store.value_mut(p).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new(&s.store);
    let (v, t, l, i) = (g.input(s.v.clone()), g.input(s.t.clone()), g.input(s.l.clone()), g.input(s.i.clone()));
    let e = mmse(&mut g, &s.qf, &s.enh, v, t, Some((l, i))).unwrap();
    assert_eq!(g.value(e.v), &s.v);
    assert_eq!(g.value(e.t), &s.t);
}

#[test]
fn harmonization_matches_direct_formula() {
    let s = setup(6);
    let mut rng = Rng::new(60);
    let v2 = rand_t(&mut rng, 4, D);
    let t2 = rand_t(&mut rng, 6, D);
    let mut g = Graph::new(&s.store);
    let (v, t, v2v, t2v) = (g.input(s.v.clone()), g.input(s.t.clone()), g.input(v2.clone()), g.input(t2.clone()));
    let cfg = HcaConfig::default();
    let h = harmonize(&mut g, &s.hca, &cfg, (v, t), v2v, t2v).unwrap();

    let sim = cosine(s.v.mean_rows().data(), s.t.mean_rows().data());
    let a = cfg.lambda + (1.0 - cfg.lambda) / (1.0 + (-sim).exp());
    let w = |id| s.store.value(id);
    let q = v2.matmul(w(s.hca.w_q)).unwrap();
    let k = cat(&v2, &t2).matmul(w(s.hca.w_k)).unwrap();
    let val = cat(&v2, &t2).matmul(w(s.hca.w_v)).unwrap();
    let z = softmax_attn(&q, &k, &val).scale(a);

    assert_relative_eq!(g.value(h.s).item(), sim, epsilon = 1e-12);
    assert_relative_eq!(g.value(h.alpha).item(), a, epsilon = 1e-12);
    assert_eq!(g.value(h.z).rows(), 4);
    assert!(g.value(h.z).max_abs_diff(&z) < 1e-12);
}

#[test]
fn override_replaces_alpha() {
    let s = setup(7);
    let cfg = HcaConfig {
        alpha_override: Some(0.65),
        ..Default::default()
    };
    let mut g = Graph::new(&s.store);
    let (v, t) = (g.input(s.v.clone()), g.input(s.t.clone()));
    let h = harmonize(&mut g, &s.hca, &cfg, (v, t), v, t).unwrap();
    assert_eq!(g.value(h.alpha).item(), 0.65);
}

#[test]
fn alpha_at_zero() {
    assert!((alpha(0.0, 0.6) - 0.8).abs() <= 1e-12);
}

#[test]
fn alpha_at_one_matches_series_sigmoid() {
    // e^-1 by its Taylor series, independent of the library exp
    let mut e_inv = 0.0;
    let mut term = 1.0;
    for n in 1..40 {
        e_inv += term;
        term *= -1.0 / n as f64;
    }
    let expect = 0.6 + 0.4 / (1.0 + e_inv);
    assert!((alpha(1.0, 0.6) - expect).abs() <= 1e-12);
}

#[test]
fn alpha_is_strictly_increasing_on_a_grid() {
    let grid: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect();
    for w in grid.windows(2) {
        assert!(alpha(w[1], 0.6) > alpha(w[0], 0.6), "at {}", w[0]);
    }
}

#[test]
fn alpha_stays_strictly_inside() {
    for s in [-1e6, -1e3, -40.0, -1.0, 0.0, 1.0, 40.0, 1e3, 1e6] {
        let a = alpha(s, 0.6);
        assert!(a > 0.6 && a < 1.0, "alpha({s}) = {a}");
    }
}

proptest! {
    #[test]
    fn alpha_bounds_hold_for_any_lambda(s in -1e6f64..1e6, lambda in 0.0f64..0.99) {
        let a = alpha(s, lambda);
        prop_assert!(a > lambda && a < 1.0);
    }

    #[test]
    fn sigmoid_symmetry(x in -700.0f64..700.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-15);
    }
}
