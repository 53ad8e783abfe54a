//! End-to-end glue from a [`RunConfig`] to a trained checkpoint and back.

use crate::error::{Error, Result};
use crate::io::config::{parse_config, RunConfig};
use crate::io::corpus::{generate_toy_corpus, Family};
use crate::networks::codec::{train_autoencoder, Codec, CodecKind};
use crate::networks::params::ParamStore;
use crate::networks::DualModel;
use crate::tensor::Tensor;
use crate::training::{params_from_checkpoint, Checkpoint, StepReport, TrainData, Trainer};

/// Toy corpus as model-space tensors plus content-family flags.
pub fn corpus_tensors(cfg: &RunConfig) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let items = generate_toy_corpus(&cfg.corpus)?;
    Ok(items
        .iter()
        .map(|i| (i.image.to_tensor(), i.family() == Family::Content))
        .unzip())
}

/// Identity codec, or an autoencoder trained on `images`.
pub fn build_codec(cfg: &RunConfig, images: &[Tensor]) -> Result<Codec> {
    match cfg.codec.kind {
        CodecKind::Identity => Ok(Codec::identity(3)),
        CodecKind::Autoencoder => Ok(train_autoencoder(&cfg.codec, images)?.0),
    }
}

/// Result of a finished training run.
pub struct TrainOutcome {
    pub model: DualModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<StepReport>,
}

/// Train from scratch on the configured corpus. `on_checkpoint` receives
/// every periodic checkpoint (`checkpoint_every > 0`).
pub fn train(cfg: &RunConfig, images: &[Tensor], content_flags: &[bool], mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let codec = build_codec(cfg, images)?;
    let (model, params) = DualModel::build(&cfg.model, codec)?;
    let flags = cfg.train.dual_corpus.then_some(content_flags);
    let data = TrainData::prepare(&model, images, flags)?;
    let text = cfg.to_text();
    let (log, checkpoint) = {
        let mut trainer = Trainer::new(&model, params, cfg.schedule()?, cfg.train.clone())?;
        let every = cfg.train.checkpoint_every;
        let log = trainer.run(&data, |tr, r| {
            if every > 0 && (r.iteration + 1) % every as u64 == 0 {
                on_checkpoint(&tr.checkpoint(&text)?)?;
            }
            Ok(())
        })?;
        (log, trainer.checkpoint(&text)?)
    };
    Ok(TrainOutcome { model, checkpoint, log })
}

/// A model rebuilt from a checkpoint.
pub struct Restored {
    pub config: RunConfig,
    pub model: DualModel,
    pub live: ParamStore,
    pub ema: ParamStore,
    pub iteration: u64,
}

pub fn restore(ckpt: &Checkpoint) -> Result<Restored> {
    let config = parse_config(&ckpt.config_text)?;
    let mut codec = match config.codec.kind {
        CodecKind::Identity => Codec::identity(3),
        CodecKind::Autoencoder => Codec::autoencoder(&config.codec, 3)?,
    };
    if let Some(layout) = codec.params().cloned() {
        let stored = params_from_checkpoint(ckpt, "", &layout)?;
        codec.load_params(&stored)?;
    }
    let (model, layout) = DualModel::build(&config.model, codec)?;
    let live = params_from_checkpoint(ckpt, "params.", &layout)?;
    let ema = params_from_checkpoint(ckpt, "ema.", &layout)?;
    if ckpt.with_prefix("params.").count() != layout.len() {
        return Err(Error::InvalidArgument("checkpoint parameter table does not match the configuration".into()));
    }
    Ok(Restored {
        config,
        model,
        live,
        ema,
        iteration: ckpt.iteration,
    })
}
