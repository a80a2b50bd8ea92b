//! Finite-difference suites for each conditioning block, the denoiser, and
//! the whole chain, on tiny 64-bit instances.

use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::config::{Precision, RunConfig};
use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::hca::{harmonize, HcaConfig};
use crate::image::Image;
use crate::mmse::{mmse, EnhancerParams, QFormerParams};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{draws_loss, Draw, TrainItem};

/// Bound for a single block.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Bound for the end-to-end chain.
pub const CHAIN_TOLERANCE: f64 = 1e-4;

const D: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Mmse,
    Hca,
    Denoiser,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "mmse" => Ok(Suite::Mmse),
            "hca" => Ok(Suite::Hca),
            "denoiser" => Ok(Suite::Denoiser),
            other => Err(Error::Invalid(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn max_rel_err(&self) -> f64 {
        self.report.max_rel_err()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Run the blocks selected by `suite`. `corrupt` shifts every analytic
/// gradient entry (harness self-test).
pub fn run(suite: Suite, corrupt: Option<f64>) -> Result<Vec<SuiteResult>> {
    let cfg = GradCheckConfig {
        corrupt,
        ..Default::default()
    };
    type Block = (&'static str, f64, fn(&GradCheckConfig) -> Result<GradCheckReport>);
    let blocks: &[Block] = match suite {
        Suite::All => &[
            ("encoders", BLOCK_TOLERANCE, encoders),
            ("mmse", BLOCK_TOLERANCE, mmse_block),
            ("hca", BLOCK_TOLERANCE, hca_block),
            ("denoiser", BLOCK_TOLERANCE, denoiser_block),
            ("chain", CHAIN_TOLERANCE, chain),
        ],
        Suite::Mmse => &[("mmse", BLOCK_TOLERANCE, mmse_block)],
        Suite::Hca => &[("hca", BLOCK_TOLERANCE, hca_block)],
        Suite::Denoiser => &[("denoiser", BLOCK_TOLERANCE, denoiser_block)],
    };
    blocks
        .iter()
        .map(|&(name, tolerance, f)| {
            Ok(SuiteResult {
                name,
                tolerance,
                report: f(&cfg)?,
            })
        })
        .collect()
}

/// Push every parameter off its init so zero-initialized projections do not
/// hide upstream gradients.
fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
}

fn input_param(store: &mut ParamStore, name: &str, rows: usize, rng: &mut Rng) -> Result<ParamId> {
    store.add_normal(name, &[rows, D], 1.0, rng)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let w = g.input(Tensor::matrix(r, c, Rng::new(seed).normals(r * c))?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn random_image(size: usize, channels: usize, rng: &mut Rng) -> Result<Image> {
    Image::from_data(size, size, channels, (0..size * size * channels).map(|_| rng.uniform()).collect())
}

fn encoders(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, "text", 12, D, 6, 8, &mut rng)?;
    let img = ImageEncoder::new(&mut store, "sketch", 8, 1, 4, D, &mut rng)?;
    let sketch = random_image(8, 1, &mut rng)?;
    grad_check(
        &store,
        |g| {
            let t = text.encode(g, &[3, 7, 3, 11])?;
            let v = img.encode(g, &sketch)?;
            let a = project(g, t, 1)?;
            let b = project(g, v, 2)?;
            g.add(a, b)
        },
        cfg,
    )
}

fn mmse_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(12);
    let mut store = ParamStore::new();
    let qf = QFormerParams::new(&mut store, "qformer", 3, D, &mut rng)?;
    let enh = EnhancerParams::new(&mut store, "enhance", D, &mut rng)?;
    let v = input_param(&mut store, "input.v", 4, &mut rng)?;
    let t = input_param(&mut store, "input.t", 5, &mut rng)?;
    let l = input_param(&mut store, "input.l", 2, &mut rng)?;
    let i = input_param(&mut store, "input.i", 4, &mut rng)?;
    grad_check(
        &store,
        |g| {
            let (v, t, l, i) = (g.param(v), g.param(t), g.param(l), g.param(i));
            let e = mmse(g, &qf, &enh, v, t, Some((l, i)))?;
            let a = project(g, e.v, 3)?;
            let b = project(g, e.t, 4)?;
            g.add(a, b)
        },
        cfg,
    )
}

fn hca_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(13);
    let mut store = ParamStore::new();
    let p = crate::hca::new_params(&mut store, "hca", D, &mut rng)?;
    let v = input_param(&mut store, "input.v", 4, &mut rng)?;
    let t = input_param(&mut store, "input.t", 5, &mut rng)?;
    let v2 = input_param(&mut store, "input.v2", 4, &mut rng)?;
    let t2 = input_param(&mut store, "input.t2", 5, &mut rng)?;
    let hca = HcaConfig::default();
    grad_check(
        &store,
        |g| {
            let (v, t, v2, t2) = (g.param(v), g.param(t), g.param(v2), g.param(t2));
            let h = harmonize(g, &p, &hca, (v, t), v2, t2)?;
            project(g, h.z, 5)
        },
        cfg,
    )
}

fn denoiser_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(14);
    let mut store = ParamStore::new();
    let den = Denoiser::new(
        &mut store,
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            patch: 2,
            width1: 4,
            width2: 8,
            time_dim: 4,
            context_dim: D,
        },
        &mut rng,
    )?;
    let ctx = input_param(&mut store, "input.context", 5, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = rng.normals(den.numel());
    grad_check(
        &store,
        |g| {
            let xt = g.input(Tensor::matrix(1, x.len(), x.clone())?);
            let c = g.param(ctx);
            let out = den.forward(g, xt, 321, c)?;
            project(g, out, 6)
        },
        cfg,
    )
}

/// The small configuration the chain check runs on.
pub fn chain_config() -> RunConfig {
    RunConfig {
        precision: Precision::F64,
        d_model: D,
        patch: 4,
        n_queries: 2,
        max_prompt_len: 8,
        subword_buckets: 8,
        image_size: 8,
        swatch_size: 8,
        denoiser_patch: 2,
        denoiser_width1: 4,
        denoiser_width2: 8,
        time_dim: 4,
        ..RunConfig::default()
    }
}

fn chain(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = Model::new(&chain_config())?;
    let mut rng = Rng::new(15);
    jitter(&mut model.store, &mut rng);
    let db = model.grammar_db()?;
    let sketch = random_image(8, 1, &mut rng)?;
    let request = model.request(&sketch, "pink jeans hoodie with hood", &db)?;
    if request.fabric.is_none() {
        return Err(Error::Invalid("chain prompt must reach the fabric path".into()));
    }
    let n = model.arch.denoiser.numel();
    let items = [TrainItem {
        request,
        target: (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    }];
    let draws = [Draw {
        item: 0,
        t: 250,
        eps: rng.normals(n),
    }];
    let model = &model;
    grad_check(&model.store, |g| draws_loss(g, model, &items, &draws), cfg)
}
