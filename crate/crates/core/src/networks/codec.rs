//! First-stage codec between pixel space and the diffusion latent space.
//!
//! Identity mode passes images through unchanged. Autoencoder mode is a
//! small convolutional encoder/decoder with a spatial reduction of `factor`
//! (a power of two), trained once on reconstruction MSE and then frozen.
//! Latents are multiplied by a stored `latent_scale` so they have roughly
//! unit variance over the training images.

use log::info;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::training::optimizer::{AdamW, AdamWConfig};

use super::params::{Bound, Conv, Init, ParamBuilder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CodecKind {
    #[default]
    Identity,
    Autoencoder,
}

impl std::str::FromStr for CodecKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Self::Identity),
            "autoencoder" => Ok(Self::Autoencoder),
            _ => Err(format!("expected identity or autoencoder, got `{s}`")),
        }
    }
}

impl std::fmt::Display for CodecKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Autoencoder => "autoencoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            factor: 4,
            latent_channels: 16,
            hidden_channels: 32,
            iterations: 3000,
            batch_size: 16,
            lr: 2e-3,
            seed: 7,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == CodecKind::Autoencoder
            && (self.factor < 2 || !self.factor.is_power_of_two() || self.latent_channels == 0 || self.hidden_channels == 0)
        {
            return Err(Error::InvalidArgument(format!(
                "autoencoder needs a power-of-two factor >= 2 and positive widths, got factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Latent `[C_z, H/f, W/f]` for an image of `channels × size × size`.
    pub fn latent_shape(&self, channels: usize, size: usize) -> [usize; 3] {
        match self.kind {
            CodecKind::Identity => [channels, size, size],
            CodecKind::Autoencoder => [self.latent_channels, size / self.factor, size / self.factor],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    image_channels: usize,
    factor: usize,
    latent_channels: usize,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    params: ParamStore,
    latent_scale: f64,
}

#[derive(Clone, Debug)]
pub enum Codec {
    Identity { channels: usize },
    Autoencoder(Box<Autoencoder>),
}

impl Codec {
    pub fn identity(channels: usize) -> Self {
        Codec::Identity { channels }
    }

    /// Fresh, untrained autoencoder with weights from `cfg.seed`.
    pub fn autoencoder(cfg: &CodecConfig, image_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let mut b = b.sub("codec");
        let h = cfg.hidden_channels;
        let downs = cfg.factor.trailing_zeros() as usize;
        let width = |i: usize| if i == 0 { h } else { 2 * h };
        let mut enc = vec![b.conv("enc.0", image_channels, width(0), 3, Init::Scaled(1.6))?];
        for i in 1..=downs {
            enc.push(b.conv(&format!("enc.{i}"), width(i - 1), width(i), 3, Init::Scaled(1.6))?);
        }
        enc.push(b.conv(&format!("enc.{}", downs + 1), width(downs), cfg.latent_channels, 1, Init::Scaled(1.0))?);
        let mut dec = vec![b.conv("dec.0", cfg.latent_channels, width(downs), 3, Init::Scaled(1.0))?];
        for i in 1..=downs {
            let (from, to) = (width(downs + 1 - i), width(downs - i));
            dec.push(b.conv(&format!("dec.{i}"), from, to, 3, Init::Scaled(1.6))?);
        }
        dec.push(b.conv(&format!("dec.{}", downs + 1), width(0), image_channels, 3, Init::Scaled(1.0))?);
        params.insert("codec.latent_scale", Tensor::scalar(1.0))?;
        Ok(Codec::Autoencoder(Box::new(Autoencoder {
            image_channels,
            factor: cfg.factor,
            latent_channels: cfg.latent_channels,
            enc,
            dec,
            params,
            latent_scale: 1.0,
        })))
    }

    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity { .. } => CodecKind::Identity,
            Codec::Autoencoder(_) => CodecKind::Autoencoder,
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Identity { .. } => 1,
            Codec::Autoencoder(ae) => ae.factor,
        }
    }

    pub fn image_channels(&self) -> usize {
        match self {
            Codec::Identity { channels } => *channels,
            Codec::Autoencoder(ae) => ae.image_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity { channels } => *channels,
            Codec::Autoencoder(ae) => ae.latent_channels,
        }
    }

    /// Parameters to persist (empty in identity mode).
    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Codec::Identity { .. } => None,
            Codec::Autoencoder(ae) => Some(&ae.params),
        }
    }

    /// Replace the weights with a stored set of the same layout.
    pub fn load_params(&mut self, stored: &ParamStore) -> Result<()> {
        match self {
            Codec::Identity { .. } => Ok(()),
            Codec::Autoencoder(ae) => {
                ae.params.assign(stored)?;
                ae.latent_scale = ae.params.by_name("codec.latent_scale").expect("scale").data()[0];
                Ok(())
            }
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        match *image.shape() {
            [1, c, h, w] if c == self.image_channels() => {
                let f = self.factor();
                if h % f != 0 || w % f != 0 {
                    return Err(Error::InvalidShape {
                        op: "encode",
                        msg: format!("{h}×{w} not divisible by codec factor {f}"),
                    });
                }
                Ok((h, w))
            }
            _ => Err(Error::InvalidShape {
                op: "encode",
                msg: format!("expected [1, {}, H, W], got {:?}", self.image_channels(), image.shape()),
            }),
        }
    }

    /// `z0 = E(I)`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        match self {
            Codec::Identity { .. } => Ok(image.clone()),
            Codec::Autoencoder(ae) => {
                let g = Graph::new();
                let p = ae.params.bind(&g, false);
                let z = ae.encode_var(&p, g.constant(image.clone()))?;
                Ok(z.value().scale(ae.latent_scale))
            }
        }
    }

    /// `I = D(z)`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity { channels } => {
                if latent.rank() != 4 || latent.shape()[1] != *channels {
                    return Err(Error::InvalidShape {
                        op: "decode",
                        msg: format!("expected [1, {channels}, H, W], got {:?}", latent.shape()),
                    });
                }
                Ok(latent.clone())
            }
            Codec::Autoencoder(ae) => {
                if latent.rank() != 4 || latent.shape()[1] != ae.latent_channels {
                    return Err(Error::InvalidShape {
                        op: "decode",
                        msg: format!("expected [1, {}, h, w], got {:?}", ae.latent_channels, latent.shape()),
                    });
                }
                let g = Graph::new();
                let p = ae.params.bind(&g, false);
                let z = g.constant(latent.scale(1.0 / ae.latent_scale));
                Ok(ae.decode_var(&p, z)?.value())
            }
        }
    }
}

impl Autoencoder {
    fn encode_var<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let last = self.enc.len() - 1;
        let mut h = self.enc[0].forward(p, x)?.silu()?;
        for conv in &self.enc[1..last] {
            h = conv.forward(p, h.downsample2x()?)?.silu()?;
        }
        self.enc[last].forward(p, h)
    }

    fn decode_var<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let last = self.dec.len() - 1;
        let mut h = self.dec[0].forward(p, z)?.silu()?;
        for conv in &self.dec[1..last] {
            h = conv.forward(p, h.upsample2x_nearest()?)?.silu()?;
        }
        self.dec[last].forward(p, h)
    }
}

/// Train an autoencoder on reconstruction MSE, then fix its latent scale.
/// Returns the frozen codec and the per-iteration batch losses.
pub fn train_autoencoder(cfg: &CodecConfig, images: &[Tensor]) -> Result<(Codec, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("codec training needs images".into()));
    }
    let channels = images[0].shape()[1];
    let mut codec = Codec::autoencoder(cfg, channels)?;
    let Codec::Autoencoder(ae) = &mut codec else { unreachable!() };
    for img in images {
        codec_check(ae, img)?;
    }
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let scale_id = ae.params.id("codec.latent_scale").expect("scale");
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &ae.params,
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(images.len())).collect();
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for &i in &batch {
            let g = Graph::new();
            let p = ae.params.bind(&g, true);
            let x = g.constant(images[i].clone());
            let z = ae.encode_var(&p, x)?;
            let y = ae.decode_var(&p, z)?;
            let loss = y.mse(x)?;
            g.backward(loss)?;
            loss_sum += loss.value().data()[0];
            let grads = p.grads();
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Tensor>> = total.unwrap().into_iter().map(|g| Some(g.scale(inv))).collect();
        grads[scale_id.index()] = Some(Tensor::zeros(&[1]));
        opt.step(&mut ae.params, &grads)?;
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "codec training" });
        }
        if it % 500 == 0 {
            info!("codec iteration {it}: mse {loss:.5}");
        }
        losses.push(loss);
    }
    // Unit-variance latents over the training images.
    let mut n = 0usize;
    let (mut s, mut ss) = (0.0, 0.0);
    for img in images {
        let g = Graph::new();
        let p = ae.params.bind(&g, false);
        let z = ae.encode_var(&p, g.constant(img.clone()))?.value();
        n += z.numel();
        s += z.sum();
        ss += z.sq_norm();
    }
    let var = ss / n as f64 - (s / n as f64).powi(2);
    let scale = 1.0 / var.sqrt().max(1e-8);
    ae.latent_scale = scale;
    *ae.params.get_mut(scale_id) = Tensor::scalar(scale);
    Ok((codec, losses))
}

fn codec_check(ae: &Autoencoder, img: &Tensor) -> Result<()> {
    match *img.shape() {
        [1, c, h, w] if c == ae.image_channels && h % ae.factor == 0 && w % ae.factor == 0 => Ok(()),
        _ => Err(Error::InvalidShape {
            op: "train_autoencoder",
            msg: format!("image {:?} incompatible with factor {}", img.shape(), ae.factor),
        }),
    }
}

/// Mean squared reconstruction error of `decode(encode(x))`.
pub fn reconstruction_mse(codec: &Codec, images: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let rec = codec.decode(&codec.encode(img)?)?;
        total += crate::diffusion::simple_loss(img, &rec)?;
    }
    Ok(total / images.len().max(1) as f64)
}
