//! Property tests for cross-module invariants.

mod common;

use proptest::prelude::*;

use dualfusion::conditioning::{auto_refiner_channels, ContentRefiner, DropoutMode, DropoutProbs, StyleExtractor, StyleExtractorConfig};
use dualfusion::diffusion::{linear_schedule, predict_x0, q_sample};
use dualfusion::io::config::{parse_config, RunConfig};
use dualfusion::io::ppm::ImageBuffer;
use dualfusion::networks::codec::{Codec, CodecConfig, CodecKind};
use dualfusion::networks::params::{ParamBuilder, ParamStore};
use dualfusion::sampler::{cfg2d, run_chain, GuidanceScales, SamplerKind, SamplerSpec};
use dualfusion::tensor::{Graph, Padding, Rng, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    common::randn(shape, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rng_is_reproducible(seed in any::<u64>(), n in 1usize..64) {
        let a = Tensor::randn(&[n], &mut Rng::new(seed));
        let b = Tensor::randn(&[n], &mut Rng::new(seed));
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn forward_ops_leave_inputs_untouched(seed in any::<u64>()) {
        let x = tensor(&[1, 2, 4, 4], seed);
        let w = tensor(&[3, 2, 3, 3], seed ^ 1);
        let (x0, w0) = (x.to_vec(), w.to_vec());
        let g = Graph::new();
        let (vx, vw) = (g.param(x.clone()), g.param(w.clone()));
        let y = vx.conv2d(vw, None, Padding::Zero).unwrap().silu().unwrap();
        let loss = y.normalize_channels(1, 1e-5).unwrap().mul(y).unwrap().sum().unwrap();
        g.backward(loss).unwrap();
        prop_assert_eq!(x.to_vec(), x0);
        prop_assert_eq!(w.to_vec(), w0);
    }

    #[test]
    fn schedule_invariants(steps in 2usize..400, start in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = linear_schedule(steps, start, start + span).unwrap();
        prop_assert_eq!(s.posterior_var(1), 0.0);
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!(s.posterior_var(t) <= s.beta(t));
        }
    }

    #[test]
    fn predict_x0_inverts_q_sample(seed in any::<u64>(), t in 1usize..=50) {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let x0 = tensor(&[1, 2, 3, 3], seed);
        let eps = tensor(&[1, 2, 3, 3], seed ^ 7);
        let back = predict_x0(&q_sample(&x0, t, &eps, &s).unwrap(), t, &eps, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0).unwrap() < 1e-8);
    }

    #[test]
    fn ddim_chain_is_a_pure_function(seed in any::<u64>(), steps in 1usize..20) {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let spec = SamplerSpec { kind: SamplerKind::Ddim, steps, seed, ..SamplerSpec::default() };
        let run = || run_chain(&s, &spec, &[1, 1, 2, 2], |z, t| Ok(z.scale(0.01 * t as f64))).unwrap();
        prop_assert!(run().bit_eq(&run()));
    }

    #[test]
    fn cfg2d_unit_scales_return_dual(seed in any::<u64>()) {
        let (d, s, c) = (tensor(&[1, 2, 3, 3], seed), tensor(&[1, 2, 3, 3], seed ^ 1), tensor(&[1, 2, 3, 3], seed ^ 2));
        let out = cfg2d(&d, &s, &c, GuidanceScales::new(1.0, 1.0).unwrap()).unwrap();
        prop_assert!(out.bit_eq(&d));
    }

    #[test]
    fn cfg2d_is_linear(seed in any::<u64>(), sc in 0.1f64..5.0, ss in 0.1f64..8.0, lam in -3.0f64..3.0) {
        let scales = GuidanceScales::new(sc, ss).unwrap();
        let x: Vec<Tensor> = (0..3).map(|k| tensor(&[1, 2, 2, 2], seed.wrapping_add(k))).collect();
        let y: Vec<Tensor> = (0..3).map(|k| tensor(&[1, 2, 2, 2], seed.wrapping_add(10 + k))).collect();
        let mix: Vec<Tensor> = x.iter().zip(&y).map(|(a, b)| a.lincomb(lam, b, 1.0).unwrap()).collect();
        let f = |v: &[Tensor]| cfg2d(&v[0], &v[1], &v[2], scales).unwrap();
        let lhs = f(&mix);
        let rhs = f(&x).lincomb(lam, &f(&y), 1.0).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn level_one_statistics_ignore_pixel_order(seed in any::<u64>()) {
        let ext = StyleExtractor::new(StyleExtractorConfig {
            channels: vec![4, 4],
            first_kernel: 1,
            ..StyleExtractorConfig::default()
        }).unwrap();
        let img = tensor(&[1, 3, 4, 4], seed);
        let mut perm: Vec<usize> = (0..16).collect();
        let mut rng = Rng::new(seed ^ 99);
        for i in (1..16).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let mut shuffled = vec![0.0; 48];
        for c in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled[c * 16 + dst] = img.data()[c * 16 + src];
            }
        }
        let a = ext.extract(&img).unwrap();
        let b = ext.extract(&Tensor::new(&[1, 3, 4, 4], shuffled).unwrap()).unwrap();
        for (x, y) in a.values()[..8].iter().zip(&b.values()[..8]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn refiner_never_widens(c_z in 2usize..64, seed in any::<u64>()) {
        let c_r = auto_refiner_channels(c_z);
        prop_assert!(c_r >= 1 && c_r < c_z);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        prop_assert!(ContentRefiner::build(&mut b.sub("a"), c_z, c_z + 1, true).is_err());
        prop_assert!(ContentRefiner::build(&mut b.sub("one"), 1, 1, false).is_err());
        let r = ContentRefiner::build(&mut b.sub("b"), c_z, c_r, false).unwrap();
        prop_assert_eq!(r.content_channels(), c_r);
    }

    #[test]
    fn denoiser_preserves_shape_for_all_null_combinations(hw in 1usize..4, t in 1usize..1000, seed in any::<u64>()) {
        let (model, mut store) = common::tiny_model();
        common::perturb(&mut store, 0.1, seed);
        let size = 4 * hw;
        let image = tensor(&[1, 3, size, size], seed).map(|v| v.tanh());
        let z = model.encode(&image).unwrap();
        let z_r = model.refine(&store, &z).unwrap();
        let f = model.style_features(&image).unwrap().to_tensor();
        for (c, s) in [(Some(&z_r), Some(&f)), (None, Some(&f)), (Some(&z_r), None), (None, None)] {
            let out = model.predict_eps(&store, &z, c, s, t).unwrap();
            prop_assert_eq!(out.shape(), z.shape());
            prop_assert!(out.is_finite());
        }
    }

    #[test]
    fn codec_shapes_follow_the_factor(h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let cfg = CodecConfig { kind: CodecKind::Autoencoder, latent_channels: 4, hidden_channels: 8, ..CodecConfig::default() };
        let codec = Codec::autoencoder(&cfg, 3).unwrap();
        let image = tensor(&[1, 3, 4 * h, 4 * w], seed);
        let z = codec.encode(&image).unwrap();
        prop_assert_eq!(z.shape(), &[1, 4, h, w][..]);
        let back = codec.decode(&z).unwrap();
        prop_assert_eq!(back.shape(), image.shape());
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1e-2,
        batch in 1usize..64,
        iterations in 1usize..100_000,
        p_c in 0.0f64..0.5,
        p_s in 0.0f64..0.5,
        seed in any::<u64>(),
        s_cnt in 0.05f64..8.0,
        s_sty in 0.05f64..8.0,
        steps in 1usize..=1000,
        full in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.lr = lr;
        cfg.train.batch_size = batch;
        cfg.train.iterations = iterations;
        cfg.train.p_content_only = p_c;
        cfg.train.p_style_only = p_s;
        cfg.train.seed = seed;
        cfg.sampling.s_cnt = s_cnt;
        cfg.sampling.s_sty = s_sty;
        cfg.sampling.steps = steps;
        cfg.model.refiner_allow_full = full;
        prop_assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn pnm_round_trips(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
        let c = if gray { 1 } else { 3 };
        let mut rng = Rng::new(seed);
        let data: Vec<u8> = (0..w * h * c).map(|_| rng.below(256) as u8).collect();
        let img = ImageBuffer::new(w, h, c, data).unwrap();
        prop_assert_eq!(&ImageBuffer::decode(&img.encode(), c).unwrap(), &img);
        prop_assert_eq!(&ImageBuffer::from_tensor(&img.to_tensor()).unwrap(), &img);
    }

    #[test]
    fn dropout_frequencies_converge(p_c in 0.0f64..0.5, p_s in 0.0f64..0.5, seed in any::<u64>()) {
        let probs = DropoutProbs::new(p_c, p_s).unwrap();
        let mut rng = Rng::new(seed);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[match probs.draw(&mut rng) {
                DropoutMode::ContentOnly => 0,
                DropoutMode::StyleOnly => 1,
                DropoutMode::Dual => 2,
            }] += 1;
        }
        for (count, p) in counts.iter().zip([p_c, p_s, 1.0 - p_c - p_s]) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            prop_assert!((*count as f64 / n as f64 - p).abs() <= 5.0 * sd + 1e-12);
        }
    }
}
