//! Noise-prediction training with AdamW.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autograd::{Graph, Var};
use crate::config::Precision;
use crate::error::{Error, Result};
use crate::fabric::FabricDb;
use crate::model::{to_model_range, Model, Request};
use crate::optim::AdamW;
use crate::rng::{derive_seed, Rng};
use crate::synth::Dataset;
use crate::tensor::Tensor;

const BATCH_STREAM: u64 = 0x2;
const PROBE_STREAM: u64 = 0x3;

/// A request plus its clean target in model range.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub request: Request,
    pub target: Vec<f64>,
}

pub fn prepare(model: &Model, data: &Dataset, db: &FabricDb) -> Result<Vec<TrainItem>> {
    data.samples
        .iter()
        .map(|s| {
            Ok(TrainItem {
                request: model.request(&s.sketch, &s.caption, db)?,
                target: to_model_range(&s.target),
            })
        })
        .collect()
}

/// One noising draw for one item.
#[derive(Clone, Debug)]
pub struct Draw {
    pub item: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Mean squared noise-prediction error over `draws`, as a scalar node.
pub fn draws_loss(g: &mut Graph, model: &Model, items: &[TrainItem], draws: &[Draw]) -> Result<Var> {
    if draws.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let arch = &model.arch;
    let hca = arch.cfg.hca();
    let mut total: Option<Var> = None;
    for d in draws {
        let item = &items[d.item];
        let c = arch.condition(g, &item.request, &hca)?;
        let xt = arch.schedule.forward_noise(&item.target, d.t, &d.eps)?;
        let xt = g.input(Tensor::matrix(1, xt.len(), xt)?);
        let pred = arch.denoiser.forward(g, xt, d.t, c.context)?;
        let eps = g.input(Tensor::matrix(1, d.eps.len(), d.eps.clone())?);
        let diff = g.sub(pred, eps)?;
        let sq = g.mul(diff, diff)?;
        let l = g.mean(sq)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    g.scale(total.unwrap(), 1.0 / draws.len() as f64)
}

/// Fixed draws for the probe loss: `per_item` per item, timesteps stratified
/// over `1..=T`.
pub fn probe_draws(model: &Model, items: usize, per_item: usize) -> Vec<Draw> {
    let cfg = &model.arch.cfg;
    let mut rng = Rng::new(derive_seed(cfg.seed, PROBE_STREAM));
    let n = model.arch.denoiser.numel();
    let total = cfg.timesteps;
    let mut out = Vec::new();
    for item in 0..items {
        for k in 0..per_item {
            let lo = k * total / per_item;
            let hi = (k + 1) * total / per_item;
            let t = 1 + lo + rng.below((hi - lo).max(1));
            out.push(Draw {
                item,
                t: t.min(total),
                eps: rng.normals(n),
            });
        }
    }
    out
}

/// Probe loss without gradients.
pub fn evaluate(model: &Model, items: &[TrainItem], draws: &[Draw]) -> Result<f64> {
    let mut sum = 0.0;
    for d in draws {
        let mut g = Graph::new(&model.store);
        let l = draws_loss(&mut g, model, items, std::slice::from_ref(d))?;
        sum += g.value(l).item();
    }
    Ok(sum / draws.len() as f64)
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub opt: AdamW,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    pub log: Vec<StepLog>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: &Model) -> Self {
        Self {
            opt: AdamW::for_store(model.arch.cfg.adamw(), &model.store),
            rng: Rng::new(derive_seed(model.arch.cfg.seed, BATCH_STREAM)),
            order: Vec::new(),
            cursor: 0,
            log: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Next batch of item indices, drawn epoch-wise without replacement.
    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One update; returns the batch loss before the update.
    pub fn step(&mut self, model: &mut Model, items: &[TrainItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Invalid("no training items".into()));
        }
        let cfg = model.arch.cfg.clone();
        let idx = self.next_batch(items.len(), cfg.batch_size);
        let n = model.arch.denoiser.numel();
        let draws: Vec<Draw> = idx
            .into_iter()
            .map(|item| Draw {
                item,
                t: 1 + self.rng.below(cfg.timesteps),
                eps: self.rng.normals(n),
            })
            .collect();
        let (loss, grads) = {
            let mut g = Graph::new(&model.store);
            let l = draws_loss(&mut g, model, items, &draws)?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            (loss, g.backward(l)?)
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store, 1.0);
        self.opt.step(&mut model.store)?;
        if cfg.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        if !model.store.all_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        let step = self.log.len();
        self.log.push(StepLog {
            step,
            loss,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(loss)
    }

    /// `step,loss,seconds` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss,seconds\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{:.9},{:.3}", r.step, r.loss, r.seconds);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub probe_initial: f64,
    pub probe_final: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Train for `cfg.steps` updates, measuring the probe loss before and after.
pub fn train(
    model: &mut Model,
    items: &[TrainItem],
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Trainer, TrainReport)> {
    let start = Instant::now();
    let probe = probe_draws(model, items.len().min(8), model.arch.cfg.probe_draws);
    let probe_initial = evaluate(model, items, &probe)?;
    let mut trainer = Trainer::new(model);
    for i in 0..model.arch.cfg.steps {
        let l = trainer.step(model, items)?;
        on_step(i, l);
    }
    let probe_final = evaluate(model, items, &probe)?;
    Ok((
        trainer,
        TrainReport {
            probe_initial,
            probe_final,
            steps: model.arch.cfg.steps,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
