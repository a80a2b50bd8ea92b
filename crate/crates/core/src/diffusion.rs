//! Pixel-space diffusion: noise schedule, a small two-level conditional
//! denoiser and the deterministic DDIM sampler.

use std::sync::Arc;

use crate::attention::AttentionParams;
use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::encoders::patch_table;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` at t=1 to `beta_end` at t=T.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::Timestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != eps.len() {
            return Err(Error::shape("forward_noise", &[x0.len()], &[eps.len()]));
        }
        let (a, b) = self.coefficients(t)?;
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Uniform sub-schedule `T, T−k, …, k` with `k = T/steps`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.timesteps();
        if steps == 0 || steps > total || !total.is_multiple_of(steps) {
            return Err(Error::Invalid(format!("{steps} sampling steps do not divide {total}")));
        }
        let k = total / steps;
        Ok((1..=steps).rev().map(|i| i * k).collect())
    }

    /// One deterministic (η = 0) update from `t` to `t_prev`.
    pub fn ddim_step(&self, x: &[f64], eps: &[f64], t: usize, t_prev: usize) -> Result<Vec<f64>> {
        let (a, b) = self.coefficients(t)?;
        let (ap, bp) = self.coefficients(t_prev)?;
        Ok(x.iter()
            .zip(eps)
            .map(|(xv, ev)| {
                let x0 = (xv - b * ev) / a;
                ap * x0 + bp * ev
            })
            .collect())
    }
}

/// Sinusoidal embedding of a timestep, `[1 × dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Tensor::matrix(1, dim, out).expect("dim > 0")
}

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width1: usize,
    pub width2: usize,
    pub time_dim: usize,
    pub context_dim: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, i: usize, o: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let w = if std == 0.0 {
            store.add_zeros(format!("{name}.w"), &[i, o])?
        } else {
            store.add_normal(format!("{name}.w"), &[i, o], std, rng)?
        };
        let b = store.add_zeros(format!("{name}.b"), &[1, o])?;
        Ok(Self { w, b })
    }

    fn fan_in(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(store, name, i, o, (i as f64).powf(-0.5), rng)
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// FiLM-modulated layer norm, depthwise 3×3 mixing, SiLU, pointwise
/// projection, residual.
#[derive(Clone, Debug)]
struct ConvBlock {
    film_scale: Linear,
    film_shift: Linear,
    kernel: ParamId,
    pointwise: Linear,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, time_hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            film_scale: Linear::new(store, &format!("{name}.film_scale"), time_hidden, width, 0.0, rng)?,
            film_shift: Linear::new(store, &format!("{name}.film_shift"), time_hidden, width, 0.0, rng)?,
            kernel: store.add_normal(format!("{name}.dw"), &[9, width], 1.0 / 3.0, rng)?,
            pointwise: Linear::fan_in(store, &format!("{name}.pw"), width, width, rng)?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var, temb: Var, side: usize) -> Result<Var> {
        let h = g.layer_norm_rows(x, 1e-5)?;
        let scale = self.film_scale.apply(g, temb)?;
        let scale = g.add_scalar(scale, 1.0)?;
        let shift = self.film_shift.apply(g, temb)?;
        let h = g.mul_row(h, scale)?;
        let h = g.add_row(h, shift)?;
        let k = g.param(self.kernel);
        let h = g.dwconv3x3(h, k, side, side)?;
        let h = g.silu(h)?;
        let h = self.pointwise.apply(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct CrossBlock {
    attn: AttentionParams,
}

impl CrossBlock {
    fn apply(&self, g: &mut Graph, x: Var, context: Var, tap: &str) -> Result<Var> {
        let h = g.layer_norm_rows(x, 1e-5)?;
        let a = crate::attention::attend_tapped(g, &self.attn, h, context, Some(tap))?;
        g.add(x, a)
    }
}

/// Two-level conditional noise predictor; every cross-attention layer sees
/// the same context.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    input: Linear,
    pos1: ParamId,
    enc1: ConvBlock,
    down: Linear,
    pos2: ParamId,
    mid1: ConvBlock,
    cross2: CrossBlock,
    mid2: ConvBlock,
    up: Linear,
    dec1: ConvBlock,
    cross1: CrossBlock,
    readout: Linear,
    to_patches: Arc<[usize]>,
    from_patches: Arc<[usize]>,
    space_to_depth: Arc<[usize]>,
    depth_to_space: Arc<[usize]>,
}

/// Inverse permutation of a gather table that is a bijection on `0..n`.
fn invert(table: &[usize]) -> Vec<usize> {
    let mut inv = vec![GATHER_ZERO; table.len()];
    for (i, &j) in table.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `[side² × c]` grid to `[(side/2)² × 4c]`, gathering each 2×2 block.
fn space_to_depth_table(side: usize, c: usize) -> Vec<usize> {
    let half = side / 2;
    let mut t = Vec::with_capacity(side * side * c);
    for y in 0..half {
        for x in 0..half {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = (2 * y + dy) * side + 2 * x + dx;
                t.extend((0..c).map(|k| src * c + k));
            }
        }
    }
    t
}

pub const DENOISER_PREFIX: &str = "denoiser";

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let p = DENOISER_PREFIX;
        let side = cfg.image_size / cfg.patch;
        if !cfg.image_size.is_multiple_of(cfg.patch) || !side.is_multiple_of(2) {
            return Err(Error::Indivisible {
                width: cfg.image_size,
                height: cfg.image_size,
                patch: 2 * cfg.patch,
            });
        }
        let pdim = cfg.patch * cfg.patch * cfg.channels;
        let th = cfg.width1;
        let (w1, w2) = (cfg.width1, cfg.width2);
        let table = patch_table(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch)?;
        let s2d = space_to_depth_table(side, w1);
        let d2s = invert(&s2d);
        let from = invert(&table);
        let cross = |store: &mut ParamStore, name: &str, w: usize, rng: &mut Rng| -> Result<CrossBlock> {
            Ok(CrossBlock {
                attn: AttentionParams::rect(store, &format!("{p}.{name}"), w, cfg.context_dim, cfg.context_dim, true, rng)?,
            })
        };
        Ok(Self {
            time1: Linear::fan_in(store, &format!("{p}.time1"), cfg.time_dim, th, rng)?,
            time2: Linear::fan_in(store, &format!("{p}.time2"), th, th, rng)?,
            input: Linear::fan_in(store, &format!("{p}.input"), pdim, w1, rng)?,
            pos1: store.add_normal(format!("{p}.pos1"), &[side * side, w1], 0.1, rng)?,
            enc1: ConvBlock::new(store, &format!("{p}.enc1"), w1, th, rng)?,
            down: Linear::fan_in(store, &format!("{p}.down"), 4 * w1, w2, rng)?,
            pos2: store.add_normal(format!("{p}.pos2"), &[side * side / 4, w2], 0.1, rng)?,
            mid1: ConvBlock::new(store, &format!("{p}.mid1"), w2, th, rng)?,
            cross2: cross(store, "cross2", w2, rng)?,
            mid2: ConvBlock::new(store, &format!("{p}.mid2"), w2, th, rng)?,
            up: Linear::fan_in(store, &format!("{p}.up"), w2, 4 * w1, rng)?,
            dec1: ConvBlock::new(store, &format!("{p}.dec1"), w1, th, rng)?,
            cross1: cross(store, "cross1", w1, rng)?,
            readout: Linear::new(store, &format!("{p}.readout"), w1, pdim, 0.0, rng)?,
            to_patches: table.into(),
            from_patches: from.into(),
            space_to_depth: s2d.into(),
            depth_to_space: d2s.into(),
            cfg,
        })
    }

    pub fn side(&self) -> usize {
        self.cfg.image_size / self.cfg.patch
    }

    pub fn numel(&self) -> usize {
        self.cfg.image_size * self.cfg.image_size * self.cfg.channels
    }

    /// Predicted noise for the flat interleaved image `x_t`, as a `[1 × n]` node.
    pub fn forward(&self, g: &mut Graph, x_t: Var, t: usize, context: Var) -> Result<Var> {
        let (side, half) = (self.side(), self.side() / 2);
        let pdim = self.cfg.patch * self.cfg.patch * self.cfg.channels;
        let w1 = self.cfg.width1;

        let temb = g.input(timestep_embedding(t, self.cfg.time_dim));
        let temb = self.time1.apply(g, temb)?;
        let temb = g.silu(temb)?;
        let temb = self.time2.apply(g, temb)?;

        let patches = g.gather(x_t, self.to_patches.clone(), side * side, pdim)?;
        let h = self.input.apply(g, patches)?;
        let pos1 = g.param(self.pos1);
        let h = g.add(h, pos1)?;
        let skip = self.enc1.apply(g, h, temb, side)?;

        let d = g.gather(skip, self.space_to_depth.clone(), half * half, 4 * w1)?;
        let d = self.down.apply(g, d)?;
        let pos2 = g.param(self.pos2);
        let d = g.add(d, pos2)?;
        let d = self.mid1.apply(g, d, temb, half)?;
        let d = self.cross2.apply(g, d, context, "denoiser.cross2")?;
        let d = self.mid2.apply(g, d, temb, half)?;

        let u = self.up.apply(g, d)?;
        let u = g.gather(u, self.depth_to_space.clone(), side * side, w1)?;
        let h = g.add(u, skip)?;
        let h = self.dec1.apply(g, h, temb, side)?;
        let h = self.cross1.apply(g, h, context, "denoiser.cross1")?;
        let out = self.readout.apply(g, h)?;
        g.gather(out, self.from_patches.clone(), 1, self.numel())
    }

    /// Number of cross-attention layers.
    pub fn cross_layers(&self) -> usize {
        2
    }
}
