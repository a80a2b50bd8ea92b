use std::f64::consts::FRAC_1_SQRT_2;

use higarment::eval::{color_err, orientation_histogram, silhouette_iou, spearman, texture_chi2, ORIENTATION_BINS};
use higarment::image::Image;
use higarment::rng::Rng;
use higarment::synth::{gen_dataset, render_fabric_swatch, Mask};
use proptest::prelude::*;

fn stripes(size: usize, horizontal: bool, period: usize, phase: usize) -> Image {
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let k = if horizontal { y } else { x };
            let v = if ((k + phase) / period).is_multiple_of(2) { 0.9 } else { 0.1 };
            img.set(x, y, &[v, v, v]);
        }
    }
    img
}

fn rect(size: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Image {
    let mut img = Image::filled(size, size, &[1.0, 1.0, 1.0]);
    for y in y0..y1 {
        for x in x0..x1 {
            img.set(x, y, &[0.0, 0.0, 0.0]);
        }
    }
    img
}

#[test]
fn orientation_separates_stripe_directions() {
    let h = stripes(32, true, 2, 0);
    let v = stripes(32, false, 2, 0);
    let h2 = stripes(32, true, 2, 1);
    let cross = texture_chi2(&h, None, &v, None).unwrap();
    let matched = texture_chi2(&h, None, &h2, None).unwrap();
    assert!(cross >= 10.0 * matched.max(1e-3), "cross {cross}, matched {matched}");
    assert!((cross - 1.0).abs() < 1e-12);
}

#[test]
fn stripe_swatch_histogram_peaks_at_vertical_gradient() {
    // horizontal bands change along y; the gradient angle is π/2
    let sw = render_fabric_swatch("seersucker", 32, &mut Rng::new(1)).unwrap();
    let hist = orientation_histogram(&sw, None).unwrap().unwrap();
    let peak = (0..ORIENTATION_BINS).max_by(|&a, &b| hist[a].total_cmp(&hist[b])).unwrap();
    assert_eq!(peak, ORIENTATION_BINS / 2);
}

#[test]
fn half_overlapping_rectangles() {
    let a = rect(32, 4, 20, 8, 24);
    let b = rect(32, 12, 28, 8, 24);
    assert!((silhouette_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn half_red_half_blue_against_red() {
    let mut img = Image::new(8, 8, 3);
    let mut mask = Mask::new(8, 8);
    for y in 0..8 {
        for x in 0..8 {
            img.set(x, y, if x < 4 { &[1.0, 0.0, 0.0] } else { &[0.0, 0.0, 1.0] });
            mask.set(x, y, true);
        }
    }
    let e = color_err(&img, [1.0, 0.0, 0.0], &mask).unwrap();
    assert!((e - FRAC_1_SQRT_2).abs() < 1e-12);
}

#[test]
fn spearman_of_monotone_maps() {
    let x = [0.6, 0.7, 0.8, 0.9, 1.0];
    let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3)).collect();
    assert_eq!(spearman(&x, &y), 1.0);
    let z: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
    assert_eq!(spearman(&x, &z), -1.0);
}

#[test]
fn generated_masks_match_sketch_foreground() {
    let data = gen_dataset(6, 3, 0.5, 32).unwrap();
    for s in &data.samples {
        let from_sketch = higarment::synth::foreground_from_sketch(&s.sketch);
        assert_eq!(from_sketch.iou(&s.mask), 1.0, "{}", s.caption);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0usize..16, 17usize..32, 0usize..16, 17usize..32),
                                    b in (0usize..16, 17usize..32, 0usize..16, 17usize..32)) {
        let ia = rect(32, a.0, a.1, a.2, a.3);
        let ib = rect(32, b.0, b.1, b.2, b.3);
        let ab = silhouette_iou(&ia, &ib).unwrap();
        let ba = silhouette_iou(&ib, &ia).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(silhouette_iou(&ia, &ia).unwrap(), 1.0);
    }

    #[test]
    fn chi2_is_a_bounded_symmetric_distance(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = Image::from_data(16, 16, 3, (0..768).map(|_| rng.uniform()).collect()).unwrap();
        let b = Image::from_data(16, 16, 3, (0..768).map(|_| rng.uniform()).collect()).unwrap();
        let ab = texture_chi2(&a, None, &b, None).unwrap();
        prop_assert!((ab - texture_chi2(&b, None, &a, None).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(texture_chi2(&a, None, &a, None).unwrap(), 0.0);
    }
}
