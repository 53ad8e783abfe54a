//! The dual-conditional model: frozen codec and style extractor, trainable
//! content refiner, null style and denoiser.
//!
//! Trainable tensors live in one [`ParamStore`] under the prefixes
//! `refiner.`, `denoiser.` and the single name `null_style`. The model itself
//! only holds architecture handles, so the same [`DualModel`] evaluates live
//! weights during training and EMA weights during sampling.

pub mod codec;
pub mod denoiser;
pub mod params;

use crate::conditioning::{
    auto_refiner_channels, ContentRefiner, NullConditions, StyleExtractor, StyleExtractorConfig, StyleFeatures,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor};

use codec::Codec;
use denoiser::{Denoiser, DenoiserConfig};
use params::{Bound, ParamBuilder, ParamStore};

/// Architecture knobs that do not depend on the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `None` picks [`auto_refiner_channels`].
    pub refiner_channels: Option<usize>,
    /// Admit `C_r = C_z` (compression ablation only).
    pub refiner_allow_full: bool,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub norm_groups: usize,
    /// Add a zero-gated, embedding-modulated copy of `z_t` to the prediction.
    pub input_skip: bool,
    pub extractor: StyleExtractorConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            refiner_channels: None,
            refiner_allow_full: false,
            base_channels: 64,
            channel_mults: vec![1, 2],
            blocks_per_level: 2,
            embed_dim: 128,
            patch_size: 1,
            norm_groups: 8,
            input_skip: true,
            extractor: StyleExtractorConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualModel {
    pub codec: Codec,
    pub extractor: StyleExtractor,
    pub refiner: ContentRefiner,
    pub nulls: NullConditions,
    pub denoiser: Denoiser,
}

impl DualModel {
    /// Build the architecture around a (frozen) codec and return it with
    /// freshly initialised trainable parameters.
    pub fn build(cfg: &ModelConfig, codec: Codec) -> Result<(Self, ParamStore)> {
        let mut ext_cfg = cfg.extractor.clone();
        ext_cfg.image_channels = codec.image_channels();
        let extractor = StyleExtractor::new(ext_cfg)?;
        let c_z = codec.latent_channels();
        let c_r = cfg.refiner_channels.unwrap_or_else(|| auto_refiner_channels(c_z));
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.init_seed);
        let mut root = ParamBuilder::new(&mut store, &mut rng);
        let refiner = ContentRefiner::build(&mut root.sub("refiner"), c_z, c_r, cfg.refiner_allow_full)?;
        let nulls = NullConditions::build(&mut root, extractor.feature_len(), c_r)?;
        let denoiser = Denoiser::build(
            &mut root.sub("denoiser"),
            DenoiserConfig {
                latent_channels: c_z,
                content_channels: c_r,
                style_dim: extractor.feature_len(),
                base_channels: cfg.base_channels,
                channel_mults: cfg.channel_mults.clone(),
                blocks_per_level: cfg.blocks_per_level,
                embed_dim: cfg.embed_dim,
                patch_size: cfg.patch_size,
                norm_groups: cfg.norm_groups,
                input_skip: cfg.input_skip,
            },
        )?;
        Ok((
            Self {
                codec,
                extractor,
                refiner,
                nulls,
                denoiser,
            },
            store,
        ))
    }

    pub fn latent_channels(&self) -> usize {
        self.codec.latent_channels()
    }

    pub fn content_channels(&self) -> usize {
        self.refiner.content_channels()
    }

    pub fn style_dim(&self) -> usize {
        self.extractor.feature_len()
    }

    /// Style statistics of a pixel-space image `[1, C, H, W]`.
    pub fn style_features(&self, image: &Tensor) -> Result<StyleFeatures> {
        self.extractor.extract(image)
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.codec.encode(image)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.codec.decode(latent)
    }

    /// `z_r = refine(z_c)` with the given weights.
    pub fn refine(&self, params: &ParamStore, z_c: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        Ok(self.refiner.forward(&p, g.constant(z_c.clone()))?.value())
    }

    /// One denoiser evaluation. `content` is a refined `z_r` or `None` for
    /// `∅_c`; `style` is a `[1, L]` feature row or `None` for `∅_s`.
    pub fn predict_eps(
        &self,
        params: &ParamStore,
        z_t: &Tensor,
        content: Option<&Tensor>,
        style: Option<&Tensor>,
        t: usize,
    ) -> Result<Tensor> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let s = z_t.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "predict_eps",
                msg: format!("z_t must be rank 4, got {s:?}"),
            });
        }
        let c = match content {
            Some(c) => g.constant(c.clone()),
            None => g.constant(self.nulls.null_content(s[2], s[3])),
        };
        let f = match style {
            Some(f) => g.constant(f.clone()),
            None => p[self.nulls.null_style],
        };
        Ok(self.denoiser.forward(&p, g.constant(z_t.clone()), c, f, t)?.value())
    }

    /// `∅_s` as a `[1, L]` tensor.
    pub fn null_style<'a>(&self, params: &'a ParamStore) -> &'a Tensor {
        params.get(self.nulls.null_style)
    }

    /// Bound variant for training graphs.
    pub fn null_style_var<'g>(&self, p: &Bound<'g>) -> crate::tensor::Var<'g> {
        p[self.nulls.null_style]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            embed_dim: 8,
            norm_groups: 2,
            extractor: StyleExtractorConfig {
                channels: vec![2, 3],
                ..StyleExtractorConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_names_have_stable_prefixes() {
        let (model, store) = DualModel::build(&tiny(), Codec::identity(3)).unwrap();
        assert_eq!(model.content_channels(), 2);
        assert_eq!(model.style_dim(), 10);
        assert_eq!(store.by_name("null_style").unwrap().shape(), &[1, 10]);
        assert!(store.by_name("refiner.conv1.weight").is_some());
        assert!(store.by_name("denoiser.out_proj.weight").is_some());
        for (name, _) in store.iter() {
            assert!(name == "null_style" || name.starts_with("refiner.") || name.starts_with("denoiser."));
        }
    }

    #[test]
    fn all_null_combinations_are_finite_and_zero_at_init() {
        let (model, store) = DualModel::build(&tiny(), Codec::identity(3)).unwrap();
        let mut rng = Rng::new(3);
        let img = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let z = model.encode(&img).unwrap();
        let zr = model.refine(&store, &z).unwrap();
        let fs = model.style_features(&img).unwrap().to_tensor();
        for content in [Some(&zr), None] {
            for style in [Some(&fs), None] {
                let eps = model.predict_eps(&store, &z, content, style, 5).unwrap();
                assert_eq!(eps.shape(), z.shape());
                assert!(eps.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let (_, a) = DualModel::build(&tiny(), Codec::identity(3)).unwrap();
        let (_, b) = DualModel::build(&tiny(), Codec::identity(3)).unwrap();
        assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.bit_eq(y)));
    }
}
