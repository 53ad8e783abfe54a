//! Self-reconstruction training: each image is both the content and the
//! style input of its own sample.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::conditioning::{select_conditions, DropoutMode, DropoutProbs};
use crate::diffusion::{q_sample, Schedule};
use crate::error::{Error, Result};
use crate::networks::params::ParamStore;
use crate::networks::DualModel;
use crate::tensor::{Graph, Rng, Tensor};

use super::checkpoint::Checkpoint;
use super::ema::Ema;
use super::optimizer::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub p_content_only: f64,
    pub p_style_only: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Source content-only samples from the content family and the other
    /// modes from the style family.
    pub dual_corpus: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 16,
            iterations: 2000,
            p_content_only: 0.1,
            p_style_only: 0.5,
            ema_decay: 0.9999,
            ema_warmup: true,
            seed: 0,
            checkpoint_every: 0,
            dual_corpus: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        DropoutProbs::new(self.p_content_only, self.p_style_only)?;
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidArgument(format!("ema_decay must lie in (0,1), got {}", self.ema_decay)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Cached encoder outputs for the training images.
#[derive(Clone, Debug)]
pub struct TrainData {
    latents: Vec<Tensor>,
    features: Vec<Tensor>,
    content_pool: Vec<usize>,
    style_pool: Vec<usize>,
}

impl TrainData {
    /// Encode every image and extract its style row once. `content_family`
    /// marks images of the content family (used only with dual-corpus
    /// sourcing); pass `None` for a single corpus.
    pub fn prepare(model: &DualModel, images: &[Tensor], content_family: Option<&[bool]>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one image".into()));
        }
        let encoded: Vec<(Tensor, Tensor)> = images
            .par_iter()
            .map(|img| Ok((model.encode(img)?, model.style_features(img)?.to_tensor())))
            .collect::<Result<_>>()?;
        let (latents, features) = encoded.into_iter().unzip();
        let all: Vec<usize> = (0..images.len()).collect();
        let (content_pool, style_pool) = match content_family {
            None => (all.clone(), all),
            Some(flags) => {
                if flags.len() != images.len() {
                    return Err(Error::InvalidArgument("family flags must match the image count".into()));
                }
                let c: Vec<usize> = all.iter().copied().filter(|&i| flags[i]).collect();
                let s: Vec<usize> = all.iter().copied().filter(|&i| !flags[i]).collect();
                if c.is_empty() || s.is_empty() {
                    return Err(Error::InvalidArgument("dual corpus needs images of both families".into()));
                }
                (c, s)
            }
        };
        Ok(Self {
            latents,
            features,
            content_pool,
            style_pool,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent(&self, i: usize) -> &Tensor {
        &self.latents[i]
    }

    pub fn features(&self, i: usize) -> &Tensor {
        &self.features[i]
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f64,
    pub dual: usize,
    pub content_only: usize,
    pub style_only: usize,
}

#[derive(Clone, Debug)]
struct Draw {
    mode: DropoutMode,
    index: usize,
    t: usize,
    eps: Tensor,
}

pub struct Trainer<'m> {
    model: &'m DualModel,
    schedule: Schedule,
    cfg: TrainConfig,
    probs: DropoutProbs,
    params: ParamStore,
    opt: AdamW,
    ema: Ema,
    rng: Rng,
    iteration: u64,
    single_corpus: bool,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m DualModel, params: ParamStore, schedule: Schedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let probs = DropoutProbs::new(cfg.p_content_only, cfg.p_style_only)?;
        let opt = AdamW::new(cfg.adamw(), &params);
        let ema = Ema::new(&params, cfg.ema_decay, cfg.ema_warmup)?;
        let rng = Rng::with_stream(cfg.seed, 2);
        Ok(Self {
            model,
            schedule,
            single_corpus: !cfg.dual_corpus,
            cfg,
            probs,
            params,
            opt,
            ema,
            rng,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ema(&self) -> &ParamStore {
        self.ema.shadow()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn draw(&mut self, data: &TrainData) -> Draw {
        let mode = self.probs.draw(&mut self.rng);
        let pool = match (self.single_corpus, mode) {
            (true, _) | (false, DropoutMode::ContentOnly) => &data.content_pool,
            (false, _) => &data.style_pool,
        };
        let index = pool[self.rng.below(pool.len())];
        let t = 1 + self.rng.below(self.schedule.len());
        let eps = Tensor::randn(data.latents[index].shape(), &mut self.rng);
        Draw { mode, index, t, eps }
    }

    /// Per-sample loss and gradients in parameter order.
    fn sample_grads(&self, data: &TrainData, d: &Draw) -> Result<(f64, Vec<Tensor>)> {
        let model = self.model;
        let g = Graph::new();
        let p = self.params.bind(&g, true);
        let z0 = &data.latents[d.index];
        let z_t = g.constant(q_sample(z0, d.t, &d.eps, &self.schedule)?);
        let z_r = model.refiner.forward(&p, g.constant(z0.clone()))?;
        let f_s = g.constant(data.features[d.index].clone());
        let (style, content) = select_conditions(d.mode, f_s, z_r, model.null_style_var(&p));
        let eps_hat = model.denoiser.forward(&p, z_t, content, style, d.t)?;
        let loss = eps_hat.mse(g.constant(d.eps.clone()))?;
        g.backward(loss)?;
        Ok((loss.value().data()[0], p.grads()))
    }

    /// Draw a batch, average its gradients, take one AdamW and one EMA step.
    pub fn step(&mut self, data: &TrainData) -> Result<StepReport> {
        let draws: Vec<Draw> = (0..self.cfg.batch_size).map(|_| self.draw(data)).collect();
        let results: Vec<Result<(f64, Vec<Tensor>)>> = draws.par_iter().map(|d| self.sample_grads(data, d)).collect();
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for (d, r) in draws.iter().zip(results) {
            let diverged = || Error::Diverged {
                iteration: self.iteration,
                t: d.t,
                mode: d.mode.as_str(),
            };
            let (loss, grads) = match r {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let inv = 1.0 / self.cfg.batch_size as f64;
        let grads: Vec<Option<Tensor>> = total
            .expect("batch is non-empty")
            .into_iter()
            .map(|g| Some(g.scale(inv)))
            .collect();
        self.opt.step(&mut self.params, &grads).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iteration: self.iteration,
                t: 0,
                mode: "optimizer",
            },
            other => other,
        })?;
        self.ema.update(&self.params)?;
        let count = |m| draws.iter().filter(|d| d.mode == m).count();
        let report = StepReport {
            iteration: self.iteration,
            loss: loss_sum * inv,
            dual: count(DropoutMode::Dual),
            content_only: count(DropoutMode::ContentOnly),
            style_only: count(DropoutMode::StyleOnly),
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Run `cfg.iterations` steps; `on_step` sees every report (and may write
    /// checkpoints).
    pub fn run(&mut self, data: &TrainData, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        let mut log = Vec::with_capacity(self.cfg.iterations);
        for _ in 0..self.cfg.iterations {
            let r = self.step(data)?;
            on_step(self, &r)?;
            if r.iteration % 100 == 0 {
                log::info!("iteration {}: loss {:.5}", r.iteration, r.loss);
            }
            log.push(r);
        }
        Ok(log)
    }

    /// Snapshot live weights, EMA shadow, optimizer moments and codec.
    pub fn checkpoint(&self, config_text: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(config_text, self.iteration, self.opt.step_count());
        for (name, t) in self.params.iter() {
            c.insert(&format!("params.{name}"), t)?;
        }
        for (name, t) in self.ema.shadow().iter() {
            c.insert(&format!("ema.{name}"), t)?;
        }
        for ((name, _), (m, v)) in self
            .params
            .iter()
            .zip(self.opt.first_moments().iter().zip(self.opt.second_moments()))
        {
            c.insert(&format!("optim.m.{name}"), m)?;
            c.insert(&format!("optim.v.{name}"), v)?;
        }
        if let Some(codec) = self.model.codec.params() {
            for (name, t) in codec.iter() {
                c.insert(name, t)?;
            }
        }
        Ok(c)
    }
}

/// Rebuild a parameter store of `layout`'s shape from `prefix.*` tensors.
pub fn params_from_checkpoint(ckpt: &Checkpoint, prefix: &str, layout: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in layout.iter() {
        let full = format!("{prefix}{name}");
        let stored = ckpt
            .get(&full)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{full}`")))?;
        if stored.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: stored.shape().to_vec(),
            });
        }
        out.insert(name, stored.clone())?;
    }
    Ok(out)
}

/// CSV with columns `iteration,loss,dual,content_only,style_only`.
pub fn write_loss_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "iteration,loss,dual,content_only,style_only").expect("vec write");
    for r in log {
        writeln!(
            out,
            "{},{:e},{},{},{}",
            r.iteration, r.loss, r.dual, r.content_only, r.style_only
        )
        .expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
