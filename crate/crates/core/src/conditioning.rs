//! Style statistics, the content refiner and the null conditions used for
//! classifier-free training.

use crate::error::{Error, Result};
use crate::networks::params::{Bound, Conv, Init, ParamBuilder, ParamId};
use crate::tensor::{kernels, Rng, Tensor, Var};

/// Frozen extractor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleExtractorConfig {
    pub image_channels: usize,
    /// Output channels per level; each level after the first runs at half
    /// the resolution of the one before.
    pub channels: Vec<usize>,
    /// Kernel size of the first level (3 normally; 1 makes level 1 a
    /// pointwise map).
    pub first_kernel: usize,
    pub seed: u64,
}

impl Default for StyleExtractorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            channels: vec![8, 16, 32, 64, 128],
            first_kernel: 3,
            seed: 1234,
        }
    }
}

impl StyleExtractorConfig {
    /// `2 · ΣC_l`.
    pub fn feature_len(&self) -> usize {
        2 * self.channels.iter().sum::<usize>()
    }
}

/// Concatenated `[means_1, vars_1, means_2, vars_2, …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatures {
    values: Vec<f64>,
}

impl StyleFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// As a `[1, L]` row.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.values.len()], self.values.clone()).expect("row shape")
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.to_vec())
    }
}

/// Seeded convolutions that are never trained.
#[derive(Clone, Debug)]
pub struct StyleExtractor {
    cfg: StyleExtractorConfig,
    weights: Vec<(Tensor, Tensor)>,
}

impl StyleExtractor {
    pub fn new(cfg: StyleExtractorConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) || cfg.image_channels == 0 {
            return Err(Error::InvalidArgument("style extractor needs positive channel counts".into()));
        }
        if cfg.first_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "style extractor kernel must be odd, got {}",
                cfg.first_kernel
            )));
        }
        let mut rng = Rng::new(cfg.seed);
        let mut weights = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.image_channels;
        for (level, &cout) in cfg.channels.iter().enumerate() {
            let k = if level == 0 { cfg.first_kernel } else { 3 };
            let fan_in = (cin * k * k) as f64;
            let w = Tensor::randn(&[cout, cin, k, k], &mut rng).scale(1.6 / fan_in.sqrt());
            let b = Tensor::randn(&[cout], &mut rng).scale(0.1);
            weights.push((w, b));
            cin = cout;
        }
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &StyleExtractorConfig {
        &self.cfg
    }

    pub fn feature_len(&self) -> usize {
        self.cfg.feature_len()
    }

    /// Per-level channel means and population variances of an image
    /// `[1, C, H, W]`; `H` and `W` must halve cleanly between levels.
    pub fn extract(&self, image: &Tensor) -> Result<StyleFeatures> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.cfg.image_channels {
            return Err(Error::InvalidShape {
                op: "extract_style_features",
                msg: format!("expected [1, {}, H, W], got {s:?}", self.cfg.image_channels),
            });
        }
        let div = 1usize << (self.cfg.channels.len() - 1);
        if !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) {
            return Err(Error::InvalidShape {
                op: "extract_style_features",
                msg: format!("{}×{} not divisible by {div}", s[2], s[3]),
            });
        }
        let (mut c, mut hgt, mut wid) = (s[1], s[2], s[3]);
        let mut x = image.data().to_vec();
        let mut stats = Vec::with_capacity(self.feature_len());
        for (level, (w, b)) in self.weights.iter().enumerate() {
            if level > 0 {
                x = kernels::avg_pool2(&x, c, hgt, wid);
                hgt /= 2;
                wid /= 2;
            }
            x = conv_replicate(&x, c, hgt, wid, w, b);
            c = w.shape()[0];
            for v in &mut x {
                *v /= 1.0 + (-*v).exp();
            }
            let plane = hgt * wid;
            let (means, vars): (Vec<f64>, Vec<f64>) = x.chunks(plane).map(shifted_moments).unzip();
            stats.extend(means);
            stats.extend(vars);
        }
        Ok(StyleFeatures::new(stats))
    }
}

/// Same-size convolution with edge replication. Every output pixel sums its
/// window in the same order, so a constant input gives a constant output.
fn conv_replicate(x: &[f64], cin: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let cout = weight.shape()[0];
    let k = weight.shape()[2];
    let r = (k / 2) as isize;
    let wd = weight.data();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[o];
                for ci in 0..cin {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    let kw = &wd[(o * cin + ci) * k * k..(o * cin + ci + 1) * k * k];
                    for ky in 0..k {
                        let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        for kx in 0..k {
                            let sx = (xx as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                            acc += kw[ky * k + kx] * plane[sy * w + sx];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Mean and population variance, shifted by the first sample so that a
/// constant channel yields exactly that constant and zero.
fn shifted_moments(p: &[f64]) -> (f64, f64) {
    let k = p[0];
    let n = p.len() as f64;
    let (s, ss) = p.iter().fold((0.0, 0.0), |(s, ss), &v| (s + (v - k), ss + (v - k) * (v - k)));
    let m = s / n;
    (k + m, (ss / n - m * m).max(0.0))
}

/// Channel count used for `z_r` when the config says `auto`: `⌊0.75·C_z⌋`,
/// at least 1.
pub fn auto_refiner_channels(latent_channels: usize) -> usize {
    (latent_channels * 3 / 4).max(1)
}

/// Two pointwise convolutions with a SiLU between: `C_z → C_z → C_r`.
#[derive(Clone, Debug)]
pub struct ContentRefiner {
    conv1: Conv,
    conv2: Conv,
    latent_channels: usize,
    content_channels: usize,
}

impl ContentRefiner {
    /// `allow_full` admits `C_r = C_z`, which only the compression ablation
    /// uses.
    pub fn build(b: &mut ParamBuilder<'_>, latent_channels: usize, content_channels: usize, allow_full: bool) -> Result<Self> {
        let ok = content_channels > 0
            && (content_channels < latent_channels || (allow_full && content_channels == latent_channels));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "refiner output {content_channels} must be below the latent channel count {latent_channels}"
            )));
        }
        let conv1 = b.conv("conv1", latent_channels, latent_channels, 1, Init::Scaled(1.6))?;
        let conv2 = b.conv("conv2", latent_channels, content_channels, 1, Init::Scaled(1.0))?;
        Ok(Self {
            conv1,
            conv2,
            latent_channels,
            content_channels,
        })
    }

    pub fn content_channels(&self) -> usize {
        self.content_channels
    }

    /// `z_r = conv2(silu(conv1(z_c)))`.
    pub fn forward<'g>(&self, p: &Bound<'g>, z_c: Var<'g>) -> Result<Var<'g>> {
        let s = z_c.shape();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(Error::InvalidShape {
                op: "refine_content",
                msg: format!("expected {} channels, got {s:?}", self.latent_channels),
            });
        }
        self.conv2.forward(p, self.conv1.forward(p, z_c)?.silu()?)
    }
}

/// `∅_s` is a trainable row; `∅_c` is zeros shaped like `z_r`.
#[derive(Clone, Copy, Debug)]
pub struct NullConditions {
    pub null_style: ParamId,
    pub content_channels: usize,
}

impl NullConditions {
    pub fn build(b: &mut ParamBuilder<'_>, style_dim: usize, content_channels: usize) -> Result<Self> {
        let null_style = b.tensor("null_style", &[1, style_dim], style_dim, Init::Zeros)?;
        Ok(Self {
            null_style,
            content_channels,
        })
    }

    pub fn null_content(&self, h: usize, w: usize) -> Tensor {
        Tensor::zeros(&[1, self.content_channels, h, w])
    }
}

/// Which conditions a training sample keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropoutMode {
    Dual,
    ContentOnly,
    StyleOnly,
}

impl DropoutMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dual => "dual",
            Self::ContentOnly => "content-only",
            Self::StyleOnly => "style-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutProbs {
    pub p_content_only: f64,
    pub p_style_only: f64,
}

impl DropoutProbs {
    pub fn new(p_content_only: f64, p_style_only: f64) -> Result<Self> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(p_content_only) || !ok(p_style_only) || p_content_only + p_style_only > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "dropout probabilities {p_content_only}, {p_style_only} must lie in [0,1] and sum to at most 1"
            )));
        }
        Ok(Self {
            p_content_only,
            p_style_only,
        })
    }

    /// One uniform draw: `[0, p_c)` content-only, `[p_c, p_c+p_s)` style-only,
    /// the rest dual.
    pub fn draw(&self, rng: &mut Rng) -> DropoutMode {
        let u = rng.uniform();
        if u < self.p_content_only {
            DropoutMode::ContentOnly
        } else if u < self.p_content_only + self.p_style_only {
            DropoutMode::StyleOnly
        } else {
            DropoutMode::Dual
        }
    }
}

/// Pick the (style, content) pair a mode feeds the denoiser.
pub fn select_conditions<'g>(mode: DropoutMode, f_s: Var<'g>, z_r: Var<'g>, null_style: Var<'g>) -> (Var<'g>, Var<'g>) {
    match mode {
        DropoutMode::Dual => (f_s, z_r),
        DropoutMode::ContentOnly => (null_style, z_r),
        DropoutMode::StyleOnly => {
            let g = z_r.graph();
            (f_s, g.constant(Tensor::zeros(&z_r.shape())))
        }
    }
}

/// Draw a mode and return the conditions it keeps.
pub fn apply_condition_dropout<'g>(
    rng: &mut Rng,
    probs: &DropoutProbs,
    f_s: Var<'g>,
    z_r: Var<'g>,
    null_style: Var<'g>,
) -> (Var<'g>, Var<'g>, DropoutMode) {
    let mode = probs.draw(rng);
    let (s, c) = select_conditions(mode, f_s, z_r, null_style);
    (s, c, mode)
}
