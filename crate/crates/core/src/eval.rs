//! Proxy metrics: silhouette agreement, regional color error and a
//! gradient-orientation texture distance.
//!
//! These stand in for perceptual scores that need pretrained networks; they
//! are labelled as proxies wherever they are reported.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::Mask;

pub const ORIENTATION_BINS: usize = 16;

/// Otsu threshold over 256 equal-width bins spanning `[0, max]`; values
/// strictly above the threshold form the upper class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &v in values {
        hist[((v / max * 255.0).round() as usize).min(255)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    (best as f64 + 0.5) / 255.0 * max
}

/// Pixels whose luma departs from the border's mean luma by more than the
/// Otsu threshold of those departures.
pub fn foreground_mask(img: &Image) -> Mask {
    let (w, h) = (img.width, img.height);
    let luma = img.luma();
    let mut border = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                border.push(luma[y * w + x]);
            }
        }
    }
    let bg = border.iter().sum::<f64>() / border.len() as f64;
    let dist: Vec<f64> = luma.iter().map(|l| (l - bg).abs()).collect();
    let thr = otsu_threshold(&dist);
    let mut m = Mask::new(w, h);
    for (b, &d) in m.bits.iter_mut().zip(&dist) {
        *b = d > thr && d > 0.0;
    }
    m
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn silhouette_iou(generated: &Image, reference: &Image) -> Result<f64> {
    same_size(generated, reference)?;
    Ok(foreground_mask(generated).iou(&foreground_mask(reference)))
}

fn rgb(img: &Image, x: usize, y: usize) -> [f64; 3] {
    let p = img.pixel(x, y);
    match p.len() {
        3 => [p[0], p[1], p[2]],
        _ => [p[0]; 3],
    }
}

fn l2(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean RGB distance to `color` over the masked pixels.
pub fn color_err(img: &Image, color: [f64; 3], mask: &Mask) -> Result<f64> {
    masked_mean(img, mask, |x, y| l2(rgb(img, x, y), color))
}

/// Mean per-pixel RGB distance between two images over the masked pixels.
pub fn color_err_pixelwise(img: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    same_size(img, reference)?;
    masked_mean(img, mask, |x, y| l2(rgb(img, x, y), rgb(reference, x, y)))
}

fn masked_mean(img: &Image, mask: &Mask, f: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if mask.width != img.width || mask.height != img.height {
        return Err(Error::Invalid("mask size differs from image".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..img.height {
        for x in 0..img.width {
            if mask.get(x, y) {
                sum += f(x, y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Magnitude-weighted histogram of unsigned gradient orientation over the
/// masked interior pixels; `None` when every gradient vanishes.
pub fn orientation_histogram(img: &Image, mask: Option<&Mask>) -> Result<Option<[f64; ORIENTATION_BINS]>> {
    let (w, h) = (img.width, img.height);
    if w < 8 || h < 8 {
        return Err(Error::Invalid(format!("texture region {w}x{h} is smaller than 8x8")));
    }
    let luma = img.luma();
    let at = |x: usize, y: usize| luma[y * w + x];
    let mut hist = [0.0; ORIENTATION_BINS];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if let Some(m) = mask {
                if !m.get(x, y) {
                    continue;
                }
            }
            let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
            let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(PI);
            let bin = ((theta / PI * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            hist[bin] += mag;
        }
    }
    let total: f64 = hist.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    hist.iter_mut().for_each(|v| *v /= total);
    Ok(Some(hist))
}

/// `½ Σ (a−b)²/(a+b)` over bins with `a + b > 0`. A flat side counts as a
/// uniform histogram; two flat sides are at distance 0.
pub fn chi2(a: Option<&[f64; ORIENTATION_BINS]>, b: Option<&[f64; ORIENTATION_BINS]>) -> f64 {
    let uniform = [1.0 / ORIENTATION_BINS as f64; ORIENTATION_BINS];
    match (a, b) {
        (None, None) => 0.0,
        (a, b) => {
            let (a, b) = (a.unwrap_or(&uniform), b.unwrap_or(&uniform));
            a.iter()
                .zip(b)
                .filter(|(x, y)| *x + *y > 0.0)
                .map(|(x, y)| (x - y).powi(2) / (x + y))
                .sum::<f64>()
                / 2.0
        }
    }
}

/// Texture distance between a (masked) region and a reference image.
pub fn texture_chi2(region: &Image, mask: Option<&Mask>, reference: &Image, ref_mask: Option<&Mask>) -> Result<f64> {
    let a = orientation_histogram(region, mask)?;
    let b = orientation_histogram(reference, ref_mask)?;
    Ok(chi2(a.as_ref(), b.as_ref()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub silhouette_iou: f64,
    pub color_err: f64,
    pub texture_chi2: f64,
}

/// Compare a generated image with its reference render: silhouette IoU,
/// per-pixel color error and texture distance inside the reference
/// foreground (eroded to keep silhouette edges out of the texture).
pub fn compare(generated: &Image, reference: &Image) -> Result<MetricReport> {
    same_size(generated, reference)?;
    let ref_mask = foreground_mask(reference);
    let inner = ref_mask.eroded();
    let texture_mask = if inner.count() > 0 { inner } else { ref_mask.clone() };
    Ok(MetricReport {
        silhouette_iou: foreground_mask(generated).iou(&ref_mask),
        color_err: color_err_pixelwise(generated, reference, &ref_mask)?,
        texture_chi2: texture_chi2(generated, Some(&texture_mask), reference, Some(&texture_mask))?,
    })
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = rank;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
