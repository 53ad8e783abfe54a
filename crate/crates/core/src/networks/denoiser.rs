//! The dual-conditional noise predictor.
//!
//! Layout: `concat(z_t, z_r)` is optionally folded space-to-depth by
//! `patch_size`, projected to `base_channels`, then run through a U-Net with
//! one level per channel multiplier. Each level has `blocks_per_level`
//! adaLN-Zero residual blocks on the way down and again on the way up
//! (the deepest level runs once). Levels are joined by 2× average pooling
//! plus a 1×1 projection going down, and nearest upsampling, skip
//! concatenation and a 1×1 projection coming up. The conditioning vector
//! `e = MLP_t(sinusoid(t)) + MLP_s(f_s)` drives every block. With
//! `input_skip`, the prediction also gets `gate(e) ⊙ z_t`, gate zero-initialised,
//! so the network learns a residual on top of a scaled copy of its input.
//!
//! Parameter names, relative to the `denoiser` prefix:
//!
//! | name | role |
//! |------|------|
//! | `time_mlp.{0,1}` | timestep MLP |
//! | `style_mlp.{0,1}` | style-feature MLP |
//! | `in_proj` | 3×3 input projection |
//! | `down.{level}.proj` | 1×1 width change entering `level > 0` |
//! | `down.{level}.block.{i}` | descending blocks |
//! | `up.{level}.merge` | 1×1 projection after skip concatenation |
//! | `up.{level}.block.{i}` | ascending blocks |
//! | `out_proj` | zero-initialised 3×3 output projection |
//! | `skip_gate` | zero-initialised input-skip gate (with `input_skip`) |
//!
//! Inside a block: `conv1`, `conv2` (the residual branch) and the
//! modulation heads `scale`, `shift`, `gate` (gate zero-initialised).

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::params::{Bound, Conv, Init, Linear, ParamBuilder};

const NORM_EPS: f64 = 1e-6;
const SILU_GAIN: f64 = 1.6;

/// Width knobs of the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Channels of `z_t` (and of the prediction).
    pub latent_channels: usize,
    /// Channels of the refined content `z_r`.
    pub content_channels: usize,
    /// Length of the style feature vector.
    pub style_dim: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub norm_groups: usize,
    pub input_skip: bool,
}

impl DenoiserConfig {
    fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.patch_size == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return bad("patch_size, base_channels and latent_channels must be positive".into());
        }
        for w in self.widths() {
            if w % self.norm_groups != 0 {
                return bad(format!("width {w} not divisible by norm_groups {}", self.norm_groups));
            }
        }
        Ok(())
    }

    /// Spatial size must survive patching and every pooling level.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = self.patch_size << (self.channel_mults.len() - 1);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::InvalidShape {
                op: "denoiser",
                msg: format!("latent {h}×{w} not divisible by {div}"),
            });
        }
        Ok(())
    }
}

/// Sinusoidal timestep features, interleaved as `[sin(t·f_0), cos(t·f_0), …]`
/// with `f_i = 10000^{−i/(dim/2)}`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("timestep embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::exp(-(10000f64).ln() * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out.push(libm::sin(arg));
        out.push(libm::cos(arg));
    }
    Tensor::new(&[1, dim], out)
}

/// Two affine layers with a SiLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn build(b: &mut ParamBuilder<'_>, name: &str, fin: usize, dim: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            fc1: s.linear("0", fin, dim, Init::Scaled(SILU_GAIN))?,
            fc2: s.linear("1", dim, dim, Init::Scaled(1.0))?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(p, x)?.silu()?;
        self.fc2.forward(p, h)
    }
}

/// Residual block with adaLN-Zero modulation:
/// `h + gate(e) ⊙ F(norm(h)·(1 + scale(e)) + shift(e))`.
#[derive(Clone, Debug)]
pub struct AdaLnZeroBlock {
    pub width: usize,
    groups: usize,
    conv1: Conv,
    conv2: Conv,
    scale: Linear,
    shift: Linear,
    gate: Linear,
}

impl AdaLnZeroBlock {
    pub fn build(b: &mut ParamBuilder<'_>, width: usize, embed_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            width,
            groups,
            conv1: b.conv("conv1", width, width, 3, Init::Scaled(SILU_GAIN))?,
            conv2: b.conv("conv2", width, width, 3, Init::Scaled(1.0))?,
            scale: b.linear("scale", embed_dim, width, Init::Scaled(0.1))?,
            shift: b.linear("shift", embed_dim, width, Init::Scaled(0.1))?,
            gate: b.linear("gate", embed_dim, width, Init::Zeros)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, h: Var<'g>, e: Var<'g>) -> Result<Var<'g>> {
        let shape = h.shape();
        if shape.len() != 4 || shape[1] != self.width {
            return Err(Error::InvalidShape {
                op: "adaln_zero_block",
                msg: format!("block width {} got input {shape:?}", self.width),
            });
        }
        let scale = self.scale.forward(p, e)?.add_scalar(1.0)?;
        let shift = self.shift.forward(p, e)?;
        let gate = self.gate.forward(p, e)?;
        let x = h
            .normalize_channels(self.groups, NORM_EPS)?
            .mul_channels(scale)?
            .add_channels(shift)?;
        let x = self.conv1.forward(p, x)?.silu()?;
        let x = self.conv2.forward(p, x)?;
        h.add(x.mul_channels(gate)?)
    }
}

#[derive(Clone, Debug)]
struct DownLevel {
    proj: Option<Conv>,
    blocks: Vec<AdaLnZeroBlock>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    merge: Conv,
    blocks: Vec<AdaLnZeroBlock>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time_mlp: Mlp,
    style_mlp: Mlp,
    in_proj: Conv,
    down: Vec<DownLevel>,
    up: Vec<UpLevel>,
    out_proj: Conv,
    skip_gate: Option<Linear>,
}

impl Denoiser {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let patch2 = cfg.patch_size * cfg.patch_size;
        let in_ch = (cfg.latent_channels + cfg.content_channels) * patch2;
        let time_mlp = Mlp::build(b, "time_mlp", cfg.embed_dim, cfg.embed_dim)?;
        let style_mlp = Mlp::build(b, "style_mlp", cfg.style_dim, cfg.embed_dim)?;
        let in_proj = b.conv("in_proj", in_ch, widths[0], 3, Init::Scaled(1.0))?;
        let mut down = Vec::with_capacity(widths.len());
        for (level, &w) in widths.iter().enumerate() {
            let mut lb = b.sub(&format!("down.{level}"));
            let proj = if level > 0 {
                Some(lb.conv("proj", widths[level - 1], w, 1, Init::Scaled(1.0))?)
            } else {
                None
            };
            let blocks = (0..cfg.blocks_per_level)
                .map(|i| AdaLnZeroBlock::build(&mut lb.sub(&format!("block.{i}")), w, cfg.embed_dim, cfg.norm_groups))
                .collect::<Result<_>>()?;
            down.push(DownLevel { proj, blocks });
        }
        let mut up = Vec::new();
        for level in (0..widths.len().saturating_sub(1)).rev() {
            let w = widths[level];
            let mut lb = b.sub(&format!("up.{level}"));
            let merge = lb.conv("merge", widths[level + 1] + w, w, 1, Init::Scaled(1.0))?;
            let blocks = (0..cfg.blocks_per_level)
                .map(|i| AdaLnZeroBlock::build(&mut lb.sub(&format!("block.{i}")), w, cfg.embed_dim, cfg.norm_groups))
                .collect::<Result<_>>()?;
            up.push(UpLevel { merge, blocks });
        }
        let out_proj = b.conv("out_proj", widths[0], cfg.latent_channels * patch2, 3, Init::Zeros)?;
        let skip_gate = if cfg.input_skip {
            Some(b.linear("skip_gate", cfg.embed_dim, cfg.latent_channels, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            time_mlp,
            style_mlp,
            in_proj,
            down,
            up,
            out_proj,
            skip_gate,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `e = MLP_t(sinusoid(t)) + MLP_s(style)`, with `style` shaped `[1, L]`.
    pub fn embedding<'g>(&self, p: &Bound<'g>, style: Var<'g>, t: usize) -> Result<Var<'g>> {
        let s = style.shape();
        if s != [1, self.cfg.style_dim] {
            return Err(Error::ShapeMismatch {
                op: "style_embedding",
                lhs: vec![1, self.cfg.style_dim],
                rhs: s,
            });
        }
        let sinus = p.graph().constant(timestep_embedding(t, self.cfg.embed_dim)?);
        let e_t = self.time_mlp.forward(p, sinus)?;
        style_embedding(p, &self.style_mlp, style, e_t)
    }

    /// `ε̂ = ε_θ(z_t, z_r, f_s, t)`; `z_t` is `[1, C_z, H, W]`, `content` is
    /// `[1, C_r, H, W]` (zeros for the null content) and `style` is `[1, L]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, z_t: Var<'g>, content: Var<'g>, style: Var<'g>, t: usize) -> Result<Var<'g>> {
        let zs = z_t.shape();
        let cs = content.shape();
        if zs.len() != 4 || zs[0] != 1 || zs[1] != self.cfg.latent_channels {
            return Err(Error::InvalidShape {
                op: "denoiser",
                msg: format!("z_t must be [1, {}, H, W], got {zs:?}", self.cfg.latent_channels),
            });
        }
        if cs.len() != 4 || cs[1] != self.cfg.content_channels || cs[0] != 1 || cs[2..] != zs[2..] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: zs,
                rhs: cs,
            });
        }
        self.cfg.check_spatial(zs[2], zs[3])?;
        let g: &Graph = p.graph();
        let e = self.embedding(p, style, t)?;

        let mut x = g.concat_channels(&[z_t, content])?;
        if self.cfg.patch_size > 1 {
            x = x.pixel_unshuffle(self.cfg.patch_size)?;
        }
        let mut h = self.in_proj.forward(p, x)?;
        let mut skips = Vec::new();
        for (level, d) in self.down.iter().enumerate() {
            if let Some(proj) = &d.proj {
                h = proj.forward(p, h.downsample2x()?)?;
            }
            for block in &d.blocks {
                h = block.forward(p, h, e)?;
            }
            if level + 1 < self.down.len() {
                skips.push(h);
            }
        }
        for u in &self.up {
            let skip = skips.pop().expect("one skip per upward level");
            h = h.upsample2x_nearest()?;
            h = u.merge.forward(p, g.concat_channels(&[h, skip])?)?;
            for block in &u.blocks {
                h = block.forward(p, h, e)?;
            }
        }
        let h = h.normalize_channels(self.cfg.norm_groups, NORM_EPS)?.silu()?;
        let mut out = self.out_proj.forward(p, h)?;
        if self.cfg.patch_size > 1 {
            out = out.pixel_shuffle(self.cfg.patch_size)?;
        }
        if let Some(gate) = &self.skip_gate {
            out = out.add(z_t.mul_channels(gate.forward(p, e)?)?)?;
        }
        Ok(out)
    }
}

/// `e = e_t + MLP(f_s)`.
pub fn style_embedding<'g>(p: &Bound<'g>, mlp: &Mlp, style: Var<'g>, e_t: Var<'g>) -> Result<Var<'g>> {
    let width = p[mlp.fc1.w].shape()[1];
    let s = style.shape();
    if s.len() != 2 || s[1] != width {
        return Err(Error::ShapeMismatch {
            op: "style_embedding",
            lhs: vec![1, width],
            rhs: s,
        });
    }
    e_t.add(mlp.forward(p, style)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::params::ParamStore;
    use crate::tensor::Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            content_channels: 2,
            style_dim: 6,
            base_channels: 4,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            embed_dim: 8,
            patch_size: 1,
            norm_groups: 2,
            input_skip: true,
        }
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(0, 8).unwrap();
        for (i, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(timestep_embedding(3, 7).is_err());
        assert!(timestep_embedding(42, 16).unwrap().bit_eq(&timestep_embedding(42, 16).unwrap()));
    }

    #[test]
    fn timestep_embeddings_are_distinct() {
        let embs: Vec<Tensor> = (1..=1000).map(|t| timestep_embedding(t, 8).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d = embs[i].sub(&embs[j]).unwrap().sq_norm();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn untrained_output_is_zero_and_shape_preserving() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let net = Denoiser::build(&mut ParamBuilder::new(&mut store, &mut rng).sub("denoiser"), tiny()).unwrap();
        let g = Graph::new();
        let p = store.bind(&g, false);
        let z = g.constant(Tensor::randn(&[1, 3, 4, 4], &mut rng));
        let c = g.constant(Tensor::randn(&[1, 2, 4, 4], &mut rng));
        let s = g.constant(Tensor::randn(&[1, 6], &mut rng));
        let out = net.forward(&p, z, c, s, 17).unwrap().value();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(net.forward(&p, z, bad, s, 1).is_err());
        let odd = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let oddc = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(net.forward(&p, odd, oddc, s, 1).is_err());
    }

    #[test]
    fn block_is_identity_at_init() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let block = AdaLnZeroBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 4, 8, 2).unwrap();
        let g = Graph::new();
        let p = store.bind(&g, false);
        let h = g.constant(Tensor::randn(&[1, 4, 5, 5], &mut rng));
        let e = g.constant(Tensor::randn(&[1, 8], &mut rng));
        assert!(block.forward(&p, h, e).unwrap().value().bit_eq(&h.value()));
        let wrong = g.constant(Tensor::zeros(&[1, 6, 5, 5]));
        assert!(block.forward(&p, wrong, e).is_err());
    }

    #[test]
    fn zero_embedding_leaves_only_head_biases() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let block = AdaLnZeroBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 4, 8, 2).unwrap();
        // Give the heads nonzero weights and biases as if trained.
        for name in ["gate", "scale", "shift"] {
            for part in ["weight", "bias"] {
                let id = store.id(&format!("{name}.{part}")).unwrap();
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(&shape, &mut rng);
            }
        }
        let g = Graph::new();
        let p = store.bind(&g, false);
        let zero = g.constant(Tensor::zeros(&[1, 8]));
        for name in ["gate", "scale", "shift"] {
            let head = match name {
                "gate" => block.gate,
                "scale" => block.scale,
                _ => block.shift,
            };
            let out = head.forward(&p, zero).unwrap().value();
            let bias = store.by_name(&format!("{name}.bias")).unwrap();
            assert!(out.reshape(&[4]).unwrap().bit_eq(bias));
        }
    }

    #[test]
    fn zeroed_style_mlp_passes_time_embedding_through() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let mlp = Mlp::build(&mut ParamBuilder::new(&mut store, &mut rng), "m", 5, 8).unwrap();
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let g = Graph::new();
        let p = store.bind(&g, false);
        let e_t = g.constant(Tensor::randn(&[1, 8], &mut rng));
        let f = g.constant(Tensor::randn(&[1, 5], &mut rng));
        let e = style_embedding(&p, &mlp, f, e_t).unwrap();
        assert!(e.value().bit_eq(&e_t.value()));
        let short = g.constant(Tensor::zeros(&[1, 4]));
        assert!(style_embedding(&p, &mlp, short, e_t).is_err());
    }
}
