//! Guided sampling: two-scale classifier-free guidance, stylization, style
//! visualization, noise interpolation between styles, masked blending and
//! scale grids.

use std::cell::Cell;

use rayon::prelude::*;

use crate::conditioning::StyleFeatures;
use crate::diffusion::{ddim_step, ddim_timesteps, ddpm_step, ReverseVariance, Schedule};
use crate::error::{Error, Result};
use crate::networks::params::ParamStore;
use crate::networks::DualModel;
use crate::tensor::{Rng, Tensor};

/// Content and style guidance strengths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub s_cnt: f64,
    pub s_sty: f64,
}

impl GuidanceScales {
    pub fn new(s_cnt: f64, s_sty: f64) -> Result<Self> {
        if !(s_cnt > 0.0 && s_sty > 0.0 && s_cnt.is_finite() && s_sty.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scales must be positive, got {s_cnt}, {s_sty}"
            )));
        }
        Ok(Self { s_cnt, s_sty })
    }
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self { s_cnt: 0.6, s_sty: 3.0 }
    }
}

/// `(s_cnt + s_sty − 1)·ε_dual − (s_cnt − 1)·ε_style − (s_sty − 1)·ε_content`.
pub fn cfg2d(eps_dual: &Tensor, eps_style_only: &Tensor, eps_content_only: &Tensor, scales: GuidanceScales) -> Result<Tensor> {
    eps_dual.check_same_shape(eps_style_only, "cfg2d")?;
    eps_dual.check_same_shape(eps_content_only, "cfg2d")?;
    let a = scales.s_cnt + scales.s_sty - 1.0;
    let b = scales.s_cnt - 1.0;
    let c = scales.s_sty - 1.0;
    let data = eps_dual
        .data()
        .iter()
        .zip(eps_style_only.data())
        .zip(eps_content_only.data())
        .map(|((&d, &s), &k)| a * d - b * s - c * k)
        .collect();
    Tensor::new(eps_dual.shape(), data)?.ensure_finite("cfg2d")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(format!("expected ddpm or ddim, got `{s}`")),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    pub variance: ReverseVariance,
    /// Clamp each step's `x̂_0` estimate to `[-b, b]` and re-derive the noise
    /// from it. Only meaningful when the chain runs in pixel space.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 250,
            seed: 0,
            variance: ReverseVariance::BetaTilde,
            clip_x0: None,
        }
    }
}

impl SamplerSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Noise consistent with `z_t` and the clamped `x̂_0` implied by `eps`.
fn clip_eps(z: &Tensor, eps: Tensor, alpha_bar: f64, bound: Option<f64>) -> Result<Tensor> {
    let Some(b) = bound else {
        return Ok(eps);
    };
    let (r, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let x0 = z.lincomb(1.0 / r, &eps, -s / r)?.map(|v| v.clamp(-b, b));
    z.lincomb(1.0 / s, &x0, -r / s)
}

/// Run a reverse chain from `N(0, I)` of `shape`. `eps_fn(z_t, t)` receives
/// the denoiser timestep.
pub fn run_chain(
    schedule: &Schedule,
    spec: &SamplerSpec,
    shape: &[usize],
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut rng = Rng::new(spec.seed);
    let mut z = Tensor::randn(shape, &mut rng);
    let ts = ddim_timesteps(schedule.len(), spec.steps)?;
    match spec.kind {
        SamplerKind::Ddim => {
            for w in ts.windows(2) {
                let eps = clip_eps(&z, eps_fn(&z, w[0])?, schedule.alpha_bar(w[0]), spec.clip_x0)?;
                z = ddim_step(&z, w[0], w[1], &eps, schedule)?;
            }
        }
        SamplerKind::Ddpm => {
            let mut asc: Vec<usize> = ts[..spec.steps].to_vec();
            asc.reverse();
            let sched = if spec.steps == schedule.len() {
                schedule.clone()
            } else {
                schedule.respaced(&asc)?
            };
            for i in (1..=sched.len()).rev() {
                let eps = clip_eps(&z, eps_fn(&z, sched.model_timestep(i))?, sched.alpha_bar(i), spec.clip_x0)?;
                z = ddpm_step(&z, i, &eps, &sched, &mut rng, spec.variance)?;
            }
        }
    }
    Ok(z)
}

/// Convex weights over style feature rows.
#[derive(Clone, Debug)]
pub struct StyleMix {
    entries: Vec<(Tensor, f64)>,
}

impl StyleMix {
    pub fn new(entries: Vec<(StyleFeatures, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("style mix needs at least one style".into()));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if entries.iter().any(|(_, w)| w.is_nan() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "style weights must be non-negative and sum to 1, got sum {total}"
            )));
        }
        let len = entries[0].0.len();
        if entries.iter().any(|(f, _)| f.len() != len) {
            return Err(Error::InvalidArgument("style feature lengths differ".into()));
        }
        Ok(Self {
            entries: entries.into_iter().map(|(f, w)| (f.to_tensor(), w)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Single-channel weights in `[0, 1]` at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SpatialMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                op: "spatial_mask",
                msg: format!("{} values for a {height}×{width} mask", values.len()),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Left-to-right ramp from 1 to 0 (left half follows style A).
    pub fn horizontal_gradient(height: usize, width: usize) -> Result<Self> {
        let denom = (width.max(2) - 1) as f64;
        let values = (0..height)
            .flat_map(|_| (0..width).map(move |x| 1.0 - x as f64 / denom))
            .collect();
        Self::new(height, width, values)
    }

    /// Average `factor × factor` blocks down to latent resolution.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::InvalidShape {
                op: "spatial_mask",
                msg: format!("{}×{} mask not divisible by {factor}", self.height, self.width),
            });
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut values = vec![0.0; h * w];
        let inv = 1.0 / (factor * factor) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                values[(y / factor) * w + x / factor] += self.values[y * self.width + x] * inv;
            }
        }
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(h, w, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `m ⊙ a + (1 − m) ⊙ b`, broadcast over channels; `m = 1` and `m = 0`
    /// select exactly.
    pub fn blend(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.check_same_shape(b, "spatial_blend")?;
        let s = a.shape();
        if s.len() != 4 || s[2] != self.height || s[3] != self.width {
            return Err(Error::InvalidShape {
                op: "spatial_blend",
                msg: format!("mask {}×{} against {s:?}", self.height, self.width),
            });
        }
        let plane = self.height * self.width;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(i, (&x, &y))| {
                let m = self.values[i % plane];
                if m == 1.0 {
                    x
                } else if m == 0.0 {
                    y
                } else {
                    m * x + (1.0 - m) * y
                }
            })
            .collect();
        Tensor::new(s, data)
    }
}

/// Denoiser evaluations spent by one sampling call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub evaluations: usize,
}

/// Sampling over fixed (typically EMA) weights.
pub struct Sampler<'a> {
    pub model: &'a DualModel,
    pub params: &'a ParamStore,
    pub schedule: &'a Schedule,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a DualModel, params: &'a ParamStore, schedule: &'a Schedule) -> Self {
        Self {
            model,
            params,
            schedule,
        }
    }

    fn eps(&self, count: &Cell<usize>, z: &Tensor, content: Option<&Tensor>, style: Option<&Tensor>, t: usize) -> Result<Tensor> {
        count.set(count.get() + 1);
        self.model.predict_eps(self.params, z, content, style, t)
    }

    fn finish(&self, z0: &Tensor, count: &Cell<usize>) -> Result<(Tensor, SampleStats)> {
        Ok((
            self.model.decode(z0)?,
            SampleStats {
                evaluations: count.get(),
            },
        ))
    }

    /// Refined content latent of a pixel-space image.
    pub fn content_of(&self, image: &Tensor) -> Result<Tensor> {
        self.model.refine(self.params, &self.model.encode(image)?)
    }

    fn latent_shape(&self, image: &Tensor) -> Result<Vec<usize>> {
        Ok(self.model.encode(image)?.shape().to_vec())
    }

    /// Guided sample for a content image and style features.
    pub fn stylize_features(
        &self,
        content: &Tensor,
        style: &StyleFeatures,
        scales: GuidanceScales,
        spec: &SamplerSpec,
    ) -> Result<(Tensor, SampleStats)> {
        let z_r = self.content_of(content)?;
        let f_s = style.to_tensor();
        let count = Cell::new(0);
        let shape = self.latent_shape(content)?;
        let z0 = run_chain(self.schedule, spec, &shape, |z, t| {
            let dual = self.eps(&count, z, Some(&z_r), Some(&f_s), t)?;
            let style_only = self.eps(&count, z, None, Some(&f_s), t)?;
            let content_only = self.eps(&count, z, Some(&z_r), None, t)?;
            cfg2d(&dual, &style_only, &content_only, scales)
        })?;
        self.finish(&z0, &count)
    }

    /// Restyle `content` after `style`; three evaluations per step.
    pub fn stylize(&self, content: &Tensor, style: &Tensor, scales: GuidanceScales, spec: &SamplerSpec) -> Result<(Tensor, SampleStats)> {
        let f_s = self.model.style_features(style)?;
        self.stylize_features(content, &f_s, scales, spec)
    }

    /// Sample with `∅_c` and the style only; no guidance mixing.
    pub fn style_visualize(&self, style: &Tensor, spec: &SamplerSpec) -> Result<(Tensor, SampleStats)> {
        let f_s = self.model.style_features(style)?.to_tensor();
        let count = Cell::new(0);
        let shape = self.latent_shape(style)?;
        let z0 = run_chain(self.schedule, spec, &shape, |z, t| self.eps(&count, z, None, Some(&f_s), t))?;
        self.finish(&z0, &count)
    }

    /// Per step, `Σ w_i · ε̃_i` over the guided prediction of each style.
    /// Zero-weight styles are skipped.
    pub fn interpolate_styles(&self, content: &Tensor, mix: &StyleMix, scales: GuidanceScales, spec: &SamplerSpec) -> Result<(Tensor, SampleStats)> {
        let z_r = self.content_of(content)?;
        let count = Cell::new(0);
        let shape = self.latent_shape(content)?;
        let z0 = run_chain(self.schedule, spec, &shape, |z, t| {
            let mut acc: Option<Tensor> = None;
            let mut content_only: Option<Tensor> = None;
            for (f_s, w) in &mix.entries {
                if *w == 0.0 {
                    continue;
                }
                let dual = self.eps(&count, z, Some(&z_r), Some(f_s), t)?;
                let style_only = self.eps(&count, z, None, Some(f_s), t)?;
                if content_only.is_none() {
                    content_only = Some(self.eps(&count, z, Some(&z_r), None, t)?);
                }
                let guided = cfg2d(&dual, &style_only, content_only.as_ref().unwrap(), scales)?;
                let term = guided.scale(*w);
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            acc.ok_or_else(|| Error::InvalidArgument("style mix has no positive weight".into()))
        })?;
        self.finish(&z0, &count)
    }

    /// Per step, `m ⊙ ε̃_A + (1 − m) ⊙ ε̃_B`. A mask at image resolution is
    /// averaged down to the latent grid.
    pub fn spatial_blend(
        &self,
        content: &Tensor,
        style_a: &Tensor,
        style_b: &Tensor,
        mask: &SpatialMask,
        scales: GuidanceScales,
        spec: &SamplerSpec,
    ) -> Result<(Tensor, SampleStats)> {
        let z_r = self.content_of(content)?;
        let shape = self.latent_shape(content)?;
        let mask = if mask.height() == shape[2] && mask.width() == shape[3] {
            mask.clone()
        } else {
            mask.downsample(self.model.codec.factor())?
        };
        let f_a = self.model.style_features(style_a)?.to_tensor();
        let f_b = self.model.style_features(style_b)?.to_tensor();
        let count = Cell::new(0);
        let z0 = run_chain(self.schedule, spec, &shape, |z, t| {
            let content_only = self.eps(&count, z, Some(&z_r), None, t)?;
            let mut guided = Vec::with_capacity(2);
            for f in [&f_a, &f_b] {
                let dual = self.eps(&count, z, Some(&z_r), Some(f), t)?;
                let style_only = self.eps(&count, z, None, Some(f), t)?;
                guided.push(cfg2d(&dual, &style_only, &content_only, scales)?);
            }
            mask.blend(&guided[0], &guided[1])
        })?;
        self.finish(&z0, &count)
    }

    /// One stylization per cell; cell `k` (row-major) uses seed
    /// `spec.seed + k`. Cells run in parallel.
    pub fn grid(&self, content: &Tensor, style: &Tensor, rows: &[Vec<GuidanceScales>], spec: &SamplerSpec) -> Result<Vec<Vec<Tensor>>> {
        let f_s = self.model.style_features(style)?;
        let cells: Vec<(usize, GuidanceScales)> = rows.iter().flatten().copied().enumerate().collect();
        let images: Vec<Tensor> = cells
            .par_iter()
            .map(|&(k, scales)| {
                let cell_spec = spec.with_seed(spec.seed.wrapping_add(k as u64));
                Ok(self.stylize_features(content, &f_s, scales, &cell_spec)?.0)
            })
            .collect::<Result<_>>()?;
        let mut it = images.into_iter();
        Ok(rows.iter().map(|r| it.by_ref().take(r.len()).collect()).collect())
    }
}

/// Content guidance values of the default montage's first row.
pub const GRID_CONTENT_SCALES: [f64; 7] = [0.15, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0];
/// Style guidance values of the default montage's second row.
pub const GRID_STYLE_SCALES: [f64; 7] = [0.15, 0.25, 0.5, 1.0, 3.0, 5.0, 7.0];

/// Two rows: content sweep with `s_sty = 1`, style sweep with `s_cnt = 1`.
pub fn grid_rows(content_scales: &[f64], style_scales: &[f64]) -> Result<Vec<Vec<GuidanceScales>>> {
    Ok(vec![
        content_scales
            .iter()
            .map(|&c| GuidanceScales::new(c, 1.0))
            .collect::<Result<_>>()?,
        style_scales
            .iter()
            .map(|&s| GuidanceScales::new(1.0, s))
            .collect::<Result<_>>()?,
    ])
}

/// Full lattice: row `i` is `s_cnt = content_scales[i]` against every style
/// scale.
pub fn grid_lattice(content_scales: &[f64], style_scales: &[f64]) -> Result<Vec<Vec<GuidanceScales>>> {
    content_scales
        .iter()
        .map(|&c| style_scales.iter().map(|&s| GuidanceScales::new(c, s)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn cfg2d_hand_example_and_identities() {
        let s = GuidanceScales::new(2.0, 3.0).unwrap();
        let out = cfg2d(&scalar(1.0), &scalar(2.0), &scalar(3.0), s).unwrap();
        assert_eq!(out.data(), &[-4.0]);
        // The same value from the three guidance equations taken separately.
        let (d, so, co) = (1.0, 2.0, 3.0);
        let cnt = so + 2.0 * (d - so);
        let sty = co + 3.0 * (d - co);
        assert_eq!(cnt + sty - d, -4.0);

        let mut rng = Rng::new(2);
        let a = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let b = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let c = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let unit = GuidanceScales::new(1.0, 1.0).unwrap();
        assert!(cfg2d(&a, &b, &c, unit).unwrap().bit_eq(&a));
        let content = GuidanceScales::new(2.5, 1.0).unwrap();
        let expected = a.lincomb(2.5, &b, -1.5).unwrap();
        assert!(cfg2d(&a, &b, &c, content).unwrap().max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(cfg2d(&a, &b, &scalar(0.0), unit).is_err());
        assert!(GuidanceScales::new(0.0, 1.0).is_err());
        assert!(GuidanceScales::new(0.15, 7.0).is_ok());
    }

    #[test]
    fn chain_lengths_and_determinism() {
        let sched = linear_schedule(20, 1e-4, 0.02).unwrap();
        for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
            for steps in [1, 5, 20] {
                let spec = SamplerSpec {
                    kind,
                    steps,
                    seed: 3,
                    variance: ReverseVariance::BetaTilde,
                    clip_x0: None,
                };
                let mut seen = Vec::new();
                let a = run_chain(&sched, &spec, &[1, 1, 2, 2], |z, t| {
                    seen.push(t);
                    Ok(z.scale(0.1))
                })
                .unwrap();
                assert_eq!(seen.len(), steps);
                assert_eq!(seen[0], 20);
                assert!(seen.windows(2).all(|w| w[0] > w[1]));
                let b = run_chain(&sched, &spec, &[1, 1, 2, 2], |z, _| Ok(z.scale(0.1))).unwrap();
                assert!(a.bit_eq(&b));
            }
        }
        let bad = SamplerSpec {
            steps: 21,
            ..SamplerSpec::default()
        };
        assert!(run_chain(&sched, &bad, &[1], |z, _| Ok(z.clone())).is_err());
    }

    #[test]
    fn clipped_ddim_lands_inside_the_bound() {
        let sched = linear_schedule(20, 1e-4, 0.02).unwrap();
        let spec = SamplerSpec {
            steps: 5,
            seed: 4,
            clip_x0: Some(0.5),
            ..SamplerSpec::default()
        };
        // A denoiser that always overshoots pushes x̂_0 far outside the bound.
        let out = run_chain(&sched, &spec, &[1, 1, 3, 3], |z, _| Ok(z.scale(-3.0))).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 0.5 + 1e-12));
        let free = run_chain(&sched, &SamplerSpec { clip_x0: None, ..spec }, &[1, 1, 3, 3], |z, _| Ok(z.scale(-3.0))).unwrap();
        assert!(free.data().iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn mask_rules() {
        assert!(SpatialMask::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(SpatialMask::new(2, 2, vec![0.0; 3]).is_err());
        let m = SpatialMask::new(2, 2, vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let d = m.downsample(2).unwrap();
        assert_eq!(d.values(), &[0.5]);
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[1, 3, 2, 2], &mut rng);
        let b = Tensor::randn(&[1, 3, 2, 2], &mut rng);
        let out = m.blend(&a, &b).unwrap();
        assert_eq!(out.data()[4], a.data()[4]);
        assert_eq!(out.data()[5], b.data()[5]);
        assert_eq!(out.data()[6], 0.25 * a.data()[6] + 0.75 * b.data()[6]);
        let g = SpatialMask::horizontal_gradient(1, 5).unwrap();
        assert_eq!(g.values(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn style_mix_validation() {
        let f = StyleFeatures::new(vec![0.0; 4]);
        assert!(StyleMix::new(vec![(f.clone(), 0.5), (f.clone(), 0.5)]).is_ok());
        assert!(StyleMix::new(vec![(f.clone(), 0.6), (f.clone(), 0.5)]).is_err());
        assert!(StyleMix::new(vec![(f.clone(), 1.5), (f.clone(), -0.5)]).is_err());
        assert!(StyleMix::new(vec![(f, 1.0), (StyleFeatures::new(vec![0.0; 3]), 0.0)]).is_err());
        assert!(StyleMix::new(vec![]).is_err());
    }

    #[test]
    fn default_rows_match_published_lists() {
        let rows = grid_rows(&GRID_CONTENT_SCALES, &GRID_STYLE_SCALES).unwrap();
        assert_eq!(rows.len(), 2);
        let cnt: Vec<f64> = rows[0].iter().map(|s| s.s_cnt).collect();
        let sty: Vec<f64> = rows[1].iter().map(|s| s.s_sty).collect();
        assert_eq!(cnt, [0.15, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sty, [0.15, 0.25, 0.5, 1.0, 3.0, 5.0, 7.0]);
        assert_eq!(grid_lattice(&[1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap()[1].len(), 3);
    }
}
