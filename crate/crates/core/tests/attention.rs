use higarment::attention::sdpa;
use higarment::autograd::Graph;
use higarment::hca::hca_forward;
use higarment::params::ParamStore;
use higarment::rng::Rng;
use higarment::tensor::Tensor;
use proptest::prelude::*;

fn rand_t(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, rng.normals(r * c).into_iter().map(|x| x * scale).collect()).unwrap()
}

/// Plain triple-loop attention, independent of the graph kernels.
fn naive_sdpa(q: &Tensor, k: &Tensor, v: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q.cols() as f64;
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..k.rows())
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        out.push((0..v.cols()).map(|c| (0..v.rows()).map(|j| w[j] * v.get(j, c)).sum()).collect());
        weights.push(w);
    }
    (weights, out)
}

fn run_sdpa(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let store = ParamStore::new();
    let mut g = Graph::new(&store).with_capture();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = sdpa(&mut g, qv, kv, vv, Some("w")).unwrap();
    let w = g.taps().find(|(l, _)| *l == "w").unwrap().1.clone();
    (w, g.value(out).clone())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..6, 1usize..9, 1usize..7, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_are_row_stochastic((lq, lk, d, seed) in dims(), scale in 0.1f64..20.0) {
        let mut rng = Rng::new(seed);
        let q = rand_t(&mut rng, lq, d, scale);
        let k = rand_t(&mut rng, lk, d, scale);
        let v = rand_t(&mut rng, lk, d, 1.0);
        let (w, _) = run_sdpa(&q, &k, &v);
        for r in 0..lq {
            let row = w.row(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn matches_naive_oracle((lq, lk, d, seed) in dims()) {
        let mut rng = Rng::new(seed);
        let q = rand_t(&mut rng, lq, d, 1.0);
        let k = rand_t(&mut rng, lk, d, 1.0);
        let v = rand_t(&mut rng, lk, d + 1, 1.0);
        let (w, out) = run_sdpa(&q, &k, &v);
        let (w_ref, out_ref) = naive_sdpa(&q, &k, &v);
        for r in 0..lq {
            for (a, b) in w.row(r).iter().zip(&w_ref[r]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in out.row(r).iter().zip(&out_ref[r]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn joint_kv_permutation_is_invariant((lq, lk, d, seed) in dims()) {
        let mut rng = Rng::new(seed);
        let q = rand_t(&mut rng, lq, d, 1.0);
        let k = rand_t(&mut rng, lk, d, 1.0);
        let v = rand_t(&mut rng, lk, d, 1.0);
        let mut perm: Vec<usize> = (0..lk).collect();
        rng.shuffle(&mut perm);
        let pk = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pv = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (_, a) = run_sdpa(&q, &k, &v);
        let (_, b) = run_sdpa(&q, &pk, &pv);
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn outputs_lie_in_convex_hull((lq, lk, d, seed) in dims()) {
        let mut rng = Rng::new(seed);
        let q = rand_t(&mut rng, lq, d, 3.0);
        let k = rand_t(&mut rng, lk, d, 3.0);
        let v = rand_t(&mut rng, lk, d, 1.0);
        let (_, out) = run_sdpa(&q, &k, &v);
        // coordinatewise bounds of the value rows are a necessary condition
        for c in 0..d {
            let lo = (0..lk).map(|j| v.get(j, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..lk).map(|j| v.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..lq {
                prop_assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn harmonized_output_is_linear_in_alpha((lv, lt, seed) in (1usize..6, 1usize..6, any::<u64>()), a in 1e-3f64..1.0) {
        let d = 6;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let p = higarment::hca::new_params(&mut store, "hca", d, &mut rng).unwrap();
        let v = rand_t(&mut rng, lv, d, 1.0);
        let t = rand_t(&mut rng, lt, d, 1.0);
        let run = |alpha: f64| {
            let mut g = Graph::new(&store);
            let (vv, tv) = (g.input(v.clone()), g.input(t.clone()));
            let al = g.input(Tensor::matrix(1, 1, vec![alpha]).unwrap());
            let z = hca_forward(&mut g, &p, vv, tv, al).unwrap();
            g.value(z).clone()
        };
        let za = run(a);
        let z1 = run(1.0).scale(a);
        let rel = za.max_abs_diff(&z1) / z1.norm().max(f64::MIN_POSITIVE);
        prop_assert!(rel <= 1e-9);
    }
}

#[test]
fn softmax_survives_huge_scores() {
    let q = Tensor::matrix(1, 2, vec![1e6, -1e6]).unwrap();
    let k = Tensor::matrix(2, 2, vec![1e6, 0.0, -1e6, 0.0]).unwrap();
    let v = Tensor::matrix(2, 1, vec![3.0, -3.0]).unwrap();
    let (w, out) = run_sdpa(&q, &k, &v);
    assert!(w.is_finite());
    assert_eq!(out.get(0, 0), 3.0);
}
