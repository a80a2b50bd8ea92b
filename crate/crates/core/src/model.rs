//! The full conditioning stack plus denoiser, built from a [`RunConfig`].

use std::path::Path;

use serde::Serialize;

use crate::attention::AttentionParams;
use crate::autograd::{Graph, Var};
use crate::config::{Precision, RunConfig, Variant};
use crate::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use crate::encoders::{tokenize, ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::fabric::{FabricDb, FabricMention, Retrieval, RetrievalPath};
use crate::hca::{harmonize, HcaConfig, SimilaritySource};
use crate::image::Image;
use crate::mmse::{mmse, EnhancerParams, QFormerParams};
use crate::params::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1;

/// Parameter handles and fixed tables; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub sketch: ImageEncoder,
    pub swatch: ImageEncoder,
    pub qformer: QFormerParams,
    pub enhancer: EnhancerParams,
    pub hca: AttentionParams,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

/// The fabric sample chosen for a prompt, resolved outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FabricChoice {
    pub mention: FabricMention,
    pub retrieval: Retrieval,
    pub label_ids: Vec<usize>,
    pub image: Image,
}

/// Everything the graph needs for one request.
#[derive(Clone, Debug)]
pub struct Request {
    pub sketch: Image,
    pub prompt_ids: Vec<usize>,
    pub fabric: Option<FabricChoice>,
}

/// Graph handles of every intermediate.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub v: Var,
    pub t: Var,
    pub v2: Var,
    pub t2: Var,
    pub f: Option<Var>,
    pub s: Var,
    pub alpha: Var,
    pub z: Option<Var>,
    pub context: Var,
}

/// Numeric snapshot of one conditioning pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub v_prime: Tensor,
    pub t_prime: Tensor,
    pub f: Option<Tensor>,
    pub s: f64,
    pub alpha: f64,
    pub z: Option<Tensor>,
    pub context: Tensor,
    /// Attention weights by layer label.
    pub attention: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FabricTrace {
    pub term: Option<String>,
    pub recognized: bool,
    pub canonical: Option<String>,
    pub fallback_scores: Option<Vec<(String, f64)>>,
}

impl FabricTrace {
    pub fn of(choice: Option<&FabricChoice>) -> Self {
        match choice {
            None => Self {
                term: None,
                recognized: false,
                canonical: None,
                fallback_scores: None,
            },
            Some(c) => Self {
                term: Some(c.mention.term().to_string()),
                recognized: matches!(c.mention, FabricMention::Known(_)),
                canonical: Some(c.retrieval.canonical.clone()),
                fallback_scores: match &c.retrieval.path {
                    RetrievalPath::Exact => None,
                    RetrievalPath::Fallback { scores } => Some(scores.clone()),
                },
            },
        }
    }
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(derive_seed(cfg.seed, INIT_STREAM));
        let vocab = Vocabulary::grammar();
        let d = cfg.d_model;
        let text = TextEncoder::new(&mut store, "text", vocab.len(), d, cfg.max_prompt_len, cfg.subword_buckets, &mut rng)?;
        let sketch = ImageEncoder::new(&mut store, "sketch", cfg.image_size, 1, cfg.patch, d, &mut rng)?;
        let swatch = ImageEncoder::new(&mut store, "swatch", cfg.swatch_size, 3, cfg.patch, d, &mut rng)?;
        let qformer = QFormerParams::new(&mut store, "qformer", cfg.n_queries, d, &mut rng)?;
        let enhancer = EnhancerParams::new(&mut store, "enhance", d, &mut rng)?;
        let hca = crate::hca::new_params(&mut store, "hca", d, &mut rng)?;
        let denoiser = Denoiser::new(
            &mut store,
            DenoiserConfig {
                image_size: cfg.image_size,
                channels: 3,
                patch: cfg.denoiser_patch,
                width1: cfg.denoiser_width1,
                width2: cfg.denoiser_width2,
                time_dim: cfg.time_dim,
                context_dim: d,
            },
            &mut rng,
        )?;
        let schedule = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
        if cfg.freeze_denoiser {
            store.set_trainable(crate::diffusion::DENOISER_PREFIX, false);
        }
        if cfg.precision == Precision::F32 {
            store.round_to_f32();
        }
        Ok(Self {
            arch: Architecture {
                cfg: cfg.clone(),
                vocab,
                text,
                sketch,
                swatch,
                qformer,
                enhancer,
                hca,
                denoiser,
                schedule,
            },
            store,
        })
    }

    /// Model for `cfg` with parameter values from a checkpoint.
    pub fn load(cfg: &RunConfig, ckpt: &Path) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        crate::checkpoint::load_into(&mut m.store, ckpt)?;
        if !m.store.all_finite() {
            return Err(Error::NonFinite("checkpoint values"));
        }
        Ok(m)
    }

    /// Unit-norm term embedding in the text encoder's space.
    pub fn term_embedding(&self, word: &str) -> Vec<f64> {
        self.arch.text.term_embedding(&self.store, &self.arch.vocab, word)
    }

    /// Grammar database with keys from this model's text encoder.
    pub fn grammar_db(&self) -> Result<FabricDb> {
        FabricDb::from_grammar(self.arch.cfg.swatch_size, self.arch.cfg.seed, &|w| self.term_embedding(w))
    }

    /// The configured db file, or the grammar db when none is set.
    pub fn fabric_db(&self) -> Result<FabricDb> {
        if self.arch.cfg.db.is_empty() {
            self.grammar_db()
        } else {
            FabricDb::load(Path::new(&self.arch.cfg.db), &|w| self.term_embedding(w))
        }
    }

    pub fn resolve_fabric(&self, prompt: &str, db: &FabricDb) -> Result<Option<FabricChoice>> {
        let hit = db.lookup(prompt, &self.arch.vocab, &|w| self.term_embedding(w))?;
        Ok(hit.map(|(mention, retrieval)| {
            let entry = &db.entries[retrieval.index];
            FabricChoice {
                label_ids: tokenize(&entry.canonical, &self.arch.vocab),
                image: entry.image.clone(),
                mention,
                retrieval,
            }
        }))
    }

    pub fn request(&self, sketch: &Image, prompt: &str, db: &FabricDb) -> Result<Request> {
        let prompt_ids = tokenize(prompt, &self.arch.vocab);
        if prompt_ids.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let fabric = match self.arch.cfg.variant {
            Variant::NoMmse => None,
            _ => self.resolve_fabric(prompt, db)?,
        };
        Ok(Request {
            sketch: sketch.clone(),
            prompt_ids,
            fabric,
        })
    }

    /// Conditioning pass with attention capture, as numbers.
    pub fn build_conditioning(&self, req: &Request, hca: &HcaConfig) -> Result<ConditioningBundle> {
        let mut g = Graph::new(&self.store).with_capture();
        let c = self.arch.condition(&mut g, req, hca)?;
        let val = |v: Var| g.value(v).clone();
        Ok(ConditioningBundle {
            v_prime: val(c.v2),
            t_prime: val(c.t2),
            f: c.f.map(val),
            s: g.value(c.s).item(),
            alpha: g.value(c.alpha).item(),
            z: c.z.map(val),
            context: val(c.context),
            attention: g.taps().map(|(k, t)| (k.to_string(), t.clone())).collect(),
        })
    }
}

impl Architecture {
    /// Encode, enhance and harmonize; the returned `context` is what every
    /// denoiser cross-attention layer attends over.
    pub fn condition(&self, g: &mut Graph, req: &Request, hca: &HcaConfig) -> Result<CondVars> {
        let v = self.sketch.encode(g, &req.sketch)?;
        let t = self.text.encode(g, &req.prompt_ids)?;
        let (v2, t2, f) = match self.cfg.variant {
            Variant::NoMmse => (v, t, None),
            _ => {
                let fabric = match &req.fabric {
                    Some(fc) => {
                        let l = self.text.encode(g, &fc.label_ids)?;
                        let i = self.swatch.encode(g, &fc.image)?;
                        Some((l, i))
                    }
                    None => None,
                };
                let e = mmse(g, &self.qformer, &self.enhancer, v, t, fabric)?;
                (e.v, e.t, e.f)
            }
        };
        let sim = match hca.similarity {
            SimilaritySource::Raw => (v, t),
            SimilaritySource::Enhanced => (v2, t2),
        };
        match self.cfg.variant {
            Variant::NoHca => {
                let s = crate::hca::cosine_sim(g, sim.0, sim.1)?;
                let alpha = g.input(Tensor::matrix(1, 1, vec![1.0])?);
                let context = g.concat_rows(&[v2, t2])?;
                Ok(CondVars {
                    v,
                    t,
                    v2,
                    t2,
                    f,
                    s,
                    alpha,
                    z: None,
                    context,
                })
            }
            _ => {
                let h = harmonize(g, &self.hca, hca, sim, v2, t2)?;
                let context = g.concat_rows(&[h.z, t2])?;
                Ok(CondVars {
                    v,
                    t,
                    v2,
                    t2,
                    f,
                    s: h.s,
                    alpha: h.alpha,
                    z: Some(h.z),
                    context,
                })
            }
        }
    }
}

/// Pixels in [0, 1] to the model's [-1, 1] range, flat and interleaved.
pub fn to_model_range(img: &Image) -> Vec<f64> {
    img.data.iter().map(|x| 2.0 * x - 1.0).collect()
}

pub fn from_model_range(data: &[f64], size: usize) -> Result<Image> {
    let px = data.iter().map(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    Image::from_data(size, size, 3, px)
}
