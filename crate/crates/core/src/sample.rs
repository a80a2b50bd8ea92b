//! Deterministic DDIM sampling.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::hca::HcaConfig;
use crate::image::Image;
use crate::model::{from_model_range, ConditioningBundle, Model, Request};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: Image,
    pub bundle: ConditioningBundle,
    /// Denoiser calls made.
    pub evaluations: usize,
    /// Denoiser cross-attention weights from the final evaluation.
    pub denoiser_attention: Vec<(String, Tensor)>,
}

/// Start from `N(0, I)` drawn with `seed` and run the η = 0 update over the
/// configured sub-schedule; the last step lands on t = 0.
pub fn ddim_sample(model: &Model, req: &Request, hca: &HcaConfig, seed: u64) -> Result<SampleOutput> {
    hca.validate()?;
    if !model.store.all_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    let arch = &model.arch;
    let bundle = model.build_conditioning(req, hca)?;
    let ts = arch.schedule.ddim_timesteps(arch.cfg.ddim_steps)?;
    let n = arch.denoiser.numel();
    let mut x = Rng::new(seed).normals(n);
    let mut evaluations = 0;
    let mut denoiser_attention = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let last = i + 1 == ts.len();
        let mut g = Graph::new(&model.store);
        if last {
            g = g.with_capture();
        }
        let ctx = g.input(bundle.context.clone());
        let xt = g.input(Tensor::matrix(1, n, x.clone())?);
        let eps = arch.denoiser.forward(&mut g, xt, t, ctx)?;
        evaluations += 1;
        let eps = g.value(eps).data().to_vec();
        if last {
            denoiser_attention = g.taps().map(|(k, t)| (k.to_string(), t.clone())).collect();
        }
        x = arch.schedule.ddim_step(&x, &eps, t, t_prev)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampler state"));
        }
    }
    Ok(SampleOutput {
        image: from_model_range(&x, arch.cfg.image_size)?.quantized(),
        bundle,
        evaluations,
        denoiser_attention,
    })
}

/// Attention weights rescaled to `[0, 1]` by their maximum, one pixel per entry.
pub fn attention_heatmap(w: &Tensor) -> Result<Image> {
    let max = w.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Image::from_data(w.cols(), w.rows(), 1, w.data().iter().map(|v| v * scale).collect())
}
