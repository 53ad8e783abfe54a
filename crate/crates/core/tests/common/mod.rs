//! Shared fixtures for integration tests and the acceptance suite.
#![allow(dead_code)]

use dualfusion::conditioning::{select_conditions, DropoutMode, StyleExtractorConfig};
use dualfusion::diffusion::{q_sample, Schedule};
use dualfusion::networks::codec::Codec;
use dualfusion::networks::params::ParamStore;
use dualfusion::networks::{DualModel, ModelConfig};
use dualfusion::tensor::{Graph, Padding, Rng, Tensor, Var};
use dualfusion::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Elementwise relative error with a small absolute floor, so entries whose
/// gradient is ~0 compare by absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between the tape gradient and central differences
/// of `f` with respect to every element of every input.
pub fn check_grads<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).unwrap().value().item().unwrap()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars).unwrap();
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x.data()[i] - FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Contract a tensor output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
pub fn project<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = Tensor::randn(&v.shape(), &mut Rng::new(seed));
    v.mul(g.constant(w))?.sum()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut Rng::new(seed))
}

/// Every differentiable op with a small random input, each reduced to a
/// scalar. Returns `(name, worst relative error)`.
pub fn op_gradient_suite() -> Vec<(&'static str, f64)> {
    let x = || randn(&[2, 3, 4, 4], 1);
    let y = || randn(&[2, 3, 4, 4], 2);
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            out.push(($name, check_grads(&$inputs, |$g, $v| $body)));
        };
    }
    case!("add", [x(), y()], |g, v| project(g, v[0].add(v[1])?, 9));
    case!("sub", [x(), y()], |g, v| project(g, v[0].sub(v[1])?, 9));
    case!("mul", [x(), y()], |g, v| project(g, v[0].mul(v[1])?, 9));
    case!("scale", [x()], |g, v| project(g, v[0].scale(-1.7)?, 9));
    case!("add_scalar", [x()], |g, v| project(g, v[0].add_scalar(0.3)?, 9));
    case!("matmul", [randn(&[3, 5], 3), randn(&[5, 4], 4)], |g, v| project(g, v[0].matmul(v[1])?, 9));
    case!("linear", [randn(&[3, 5], 3), randn(&[4, 5], 4), randn(&[4], 5)], |g, v| project(
        g,
        v[0].linear(v[1], Some(v[2]))?,
        9
    ));
    case!("linear_no_bias", [randn(&[3, 5], 3), randn(&[4, 5], 4)], |g, v| project(
        g,
        v[0].linear(v[1], None)?,
        9
    ));
    case!("conv2d_3x3_zero", [x(), randn(&[2, 3, 3, 3], 6), randn(&[2], 7)], |g, v| project(
        g,
        v[0].conv2d(v[1], Some(v[2]), Padding::Zero)?,
        9
    ));
    case!("conv2d_3x3_replicate", [x(), randn(&[2, 3, 3, 3], 6)], |g, v| project(
        g,
        v[0].conv2d(v[1], None, Padding::Replicate)?,
        9
    ));
    case!("conv2d_1x1", [x(), randn(&[5, 3, 1, 1], 6), randn(&[5], 7)], |g, v| project(
        g,
        v[0].conv2d(v[1], Some(v[2]), Padding::Zero)?,
        9
    ));
    case!("downsample2x", [x()], |g, v| project(g, v[0].downsample2x()?, 9));
    case!("upsample2x_nearest", [x()], |g, v| project(g, v[0].upsample2x_nearest()?, 9));
    case!("pixel_unshuffle", [x()], |g, v| project(g, v[0].pixel_unshuffle(2)?, 9));
    case!("pixel_shuffle", [randn(&[1, 8, 2, 3], 8)], |g, v| project(g, v[0].pixel_shuffle(2)?, 9));
    case!("channel_mean", [x()], |g, v| project(g, v[0].channel_mean()?, 9));
    case!("channel_var", [x()], |g, v| project(g, v[0].channel_var()?, 9));
    case!("sum", [x()], |_g, v| v[0].mul(v[0])?.sum());
    case!("mean", [x()], |_g, v| v[0].mul(v[0])?.mean());
    case!("silu", [x()], |g, v| project(g, v[0].silu()?, 9));
    case!("normalize_channels", [randn(&[2, 4, 3, 3], 10)], |g, v| project(
        g,
        v[0].normalize_channels(2, 1e-5)?,
        9
    ));
    case!("mul_channels", [x(), randn(&[2, 3], 11)], |g, v| project(g, v[0].mul_channels(v[1])?, 9));
    case!("add_channels", [x(), randn(&[2, 3], 11)], |g, v| project(g, v[0].add_channels(v[1])?, 9));
    case!("mse", [x(), y()], |_g, v| v[0].mse(v[1]));
    case!("reshape", [x()], |g, v| project(g, v[0].reshape(&[6, 16])?, 9));
    case!("concat_channels", [x(), randn(&[2, 1, 4, 4], 12)], |g, v| project(
        g,
        g.concat_channels(&[v[0], v[1]])?,
        9
    ));
    out
}

/// Tiny model for whole-network gradient checks (well under 5k scalars).
pub fn tiny_model() -> (DualModel, ParamStore) {
    let cfg = ModelConfig {
        refiner_channels: None,
        base_channels: 4,
        channel_mults: vec![1, 2],
        blocks_per_level: 1,
        embed_dim: 8,
        patch_size: 1,
        norm_groups: 2,
        extractor: StyleExtractorConfig {
            channels: vec![4, 4],
            ..StyleExtractorConfig::default()
        },
        ..ModelConfig::default()
    };
    DualModel::build(&cfg, Codec::identity(3)).unwrap()
}

/// Training loss of one sample for `mode` as a function of the parameters.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<'g>(
    model: &DualModel,
    p: &dualfusion::networks::params::Bound<'g>,
    z0: &Tensor,
    feats: &Tensor,
    eps: &Tensor,
    t: usize,
    mode: DropoutMode,
    sched: &Schedule,
) -> Result<Var<'g>> {
    let g = p.graph();
    let z_t = g.constant(q_sample(z0, t, eps, sched)?);
    let z_r = model.refiner.forward(p, g.constant(z0.clone()))?;
    let (style, content) = select_conditions(mode, g.constant(feats.clone()), z_r, model.null_style_var(p));
    model.denoiser.forward(p, z_t, content, style, t)?.mse(g.constant(eps.clone()))
}

/// Perturb every parameter so that zero-initialised heads carry gradient.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for t in store.tensors_mut() {
        let noise = Tensor::randn(t.shape(), &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += scale * n;
        }
    }
}

/// Worst relative error of the full denoiser loss gradient over every
/// parameter, for each dropout mode. Returns `(scalars checked, error)`.
pub fn denoiser_loss_gradient(sched: &Schedule) -> (usize, f64) {
    let (model, mut store) = tiny_model();
    perturb(&mut store, 0.3, 77);
    let image = randn(&[1, 3, 8, 8], 21).map(|v| v.tanh());
    let z0 = model.encode(&image).unwrap();
    let feats = model.style_features(&image).unwrap().to_tensor();
    let eps = randn(z0.shape(), 22);
    let t = sched.len() / 2;
    let mut worst: f64 = 0.0;
    for mode in [DropoutMode::Dual, DropoutMode::ContentOnly, DropoutMode::StyleOnly] {
        let loss_at = |s: &ParamStore| -> f64 {
            let g = Graph::new();
            let p = s.bind(&g, false);
            sample_loss(&model, &p, &z0, &feats, &eps, t, mode, sched)
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        let g = Graph::new();
        let p = store.bind(&g, true);
        let loss = sample_loss(&model, &p, &z0, &feats, &eps, t, mode, sched).unwrap();
        g.backward(loss).unwrap();
        let grads = p.grads();
        let mut probe = store.clone();
        for (k, grad) in grads.iter().enumerate() {
            for i in 0..grad.numel() {
                let orig = store.tensors()[k].data()[i];
                probe.tensors_mut()[k].data_mut()[i] = orig + FD_STEP;
                let up = loss_at(&probe);
                probe.tensors_mut()[k].data_mut()[i] = orig - FD_STEP;
                let down = loss_at(&probe);
                probe.tensors_mut()[k].data_mut()[i] = orig;
                worst = worst.max(rel_err(grad.data()[i], (up - down) / (2.0 * FD_STEP)));
            }
        }
    }
    (store.num_scalars(), worst)
}
