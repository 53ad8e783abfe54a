//! Gaussian diffusion: variance schedules, forward noising, the two reverse
//! samplers, the noise-prediction loss, and a closed-form denoiser for
//! Gaussian data used to validate the samplers.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Per-step constants for `t = 1..=T`, with the `ᾱ_0 = 1` convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    /// Denoiser timestep for each schedule index (identity unless respaced).
    timesteps: Vec<usize>,
}

/// Which fixed variance the stochastic reverse step uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReverseVariance {
    Beta,
    #[default]
    BetaTilde,
}

impl std::str::FromStr for ReverseVariance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beta" => Ok(Self::Beta),
            "beta_tilde" => Ok(Self::BetaTilde),
            _ => Err(format!("expected beta or beta_tilde, got `{s}`")),
        }
    }
}

impl std::fmt::Display for ReverseVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Beta => "beta",
            Self::BetaTilde => "beta_tilde",
        })
    }
}

/// `β_t` evenly spaced from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Schedule::from_betas(betas)
}

impl Schedule {
    /// Build from explicit `β_1..β_T`, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let posterior_vars = betas
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let denom = 1.0 - alpha_bars[i + 1];
                if denom == 0.0 {
                    0.0
                } else {
                    (1.0 - alpha_bars[i]) / denom * b
                }
            })
            .collect();
        let timesteps = (1..=betas.len()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            posterior_vars,
            timesteps,
        })
    }

    /// A shorter chain over the ascending model timesteps `steps`, with
    /// `β'_i = 1 − ᾱ_{t_i} / ᾱ_{t_{i−1}}` so the marginals are preserved.
    pub fn respaced(&self, steps: &[usize]) -> Result<Self> {
        if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("respacing needs strictly ascending timesteps".into()));
        }
        self.check_t(*steps.last().unwrap())?;
        self.check_t(steps[0])?;
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(steps.len());
        for &t in steps {
            let ab = self.alpha_bars[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut out = Self::from_betas(betas)?;
        out.timesteps = steps.iter().map(|&t| self.timesteps[t - 1]).collect();
        Ok(out)
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_0..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// The timestep the denoiser sees at schedule index `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Invert [`q_sample`] for `x0` given a noise estimate.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (s, r) = ((1.0 - ab).sqrt(), ab.sqrt());
    x_t.zip_map(eps_hat, "predict_x0", |x, e| (x - s * e) / r)
}

/// Reverse-step mean `(1/√α_t)(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)`.
pub fn mu_theta(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let beta = sched.beta(t);
    let coef = if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - sched.alpha_bar(t)).sqrt()
    };
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_map(eps_hat, "mu_theta", |x, e| inv * (x - coef * e))
}

/// One ancestral step `x_{t−1} = μ_θ + σ_t·ξ`; the final step (`t = 1`)
/// adds no noise and draws nothing from `rng`.
pub fn ddpm_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &Schedule,
    rng: &mut Rng,
    variance: ReverseVariance,
) -> Result<Tensor> {
    let mean = mu_theta(x_t, t, eps_hat, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let var = match variance {
        ReverseVariance::Beta => sched.beta(t),
        ReverseVariance::BetaTilde => sched.posterior_var(t),
    };
    let sigma = var.sqrt();
    let noise = Tensor::randn(mean.shape(), rng);
    mean.lincomb(1.0, &noise, sigma)
}

/// Deterministic (η = 0) implicit step from `t` to `t_next < t`.
pub fn ddim_step(x_t: &Tensor, t: usize, t_next: usize, eps_hat: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_next >= t {
        return Err(Error::InvalidArgument(format!("ddim_step needs t_next < t, got {t_next} >= {t}")));
    }
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let ab = sched.alpha_bar(t_next);
    x0.lincomb(ab.sqrt(), eps_hat, (1.0 - ab).sqrt())
}

/// Evenly spaced DDIM timesteps `[T, …, 0]` (length `steps + 1`).
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..=steps)
        .map(|i| {
            let num = (total * (steps - i)) as f64 / steps as f64;
            num.round() as usize
        })
        .collect())
}

/// Mean squared error between true and predicted noise.
pub fn simple_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    eps.check_same_shape(eps_hat, "simple_loss")?;
    let n = eps.numel() as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Isotropic Gaussian data `N(μ0, σ0²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDataSpec {
    /// One value (broadcast) or one per element.
    pub mu0: Vec<f64>,
    pub sigma0: f64,
}

impl GaussianDataSpec {
    pub fn new(mu0: f64, sigma0: f64) -> Result<Self> {
        Self::with_mean(vec![mu0], sigma0)
    }

    pub fn with_mean(mu0: Vec<f64>, sigma0: f64) -> Result<Self> {
        if sigma0.is_nan() || sigma0 <= 0.0 || mu0.is_empty() {
            return Err(Error::InvalidArgument(format!("need sigma0 > 0 and a mean, got {sigma0}")));
        }
        Ok(Self { mu0, sigma0 })
    }

    fn mean_at(&self, i: usize) -> f64 {
        if self.mu0.len() == 1 {
            self.mu0[0]
        } else {
            self.mu0[i]
        }
    }
}

/// Posterior-mean noise predictor `E[ε | x_t]` for Gaussian data:
/// `√(1−ᾱ)(x_t − √ᾱ·μ0) / (ᾱσ0² + 1 − ᾱ)`.
pub fn gaussian_oracle_eps(x_t: &Tensor, t: usize, spec: &GaussianDataSpec, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if spec.mu0.len() != 1 && spec.mu0.len() != x_t.numel() {
        return Err(Error::InvalidArgument("mean length must be 1 or match x_t".into()));
    }
    let ab = sched.alpha_bar(t);
    let (ra, rs) = (ab.sqrt(), (1.0 - ab).sqrt());
    let denom = ab * spec.sigma0 * spec.sigma0 + 1.0 - ab;
    let data = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| rs * (x - ra * spec.mean_at(i)) / denom)
        .collect();
    Tensor::new(x_t.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!(approx(s.alpha_bar(1), 0.9, 1e-15));
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn four_step_schedule() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        for (b, want) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!(approx(*b, want, 1e-15));
        }
        for (t, want) in [0.9, 0.72, 0.504, 0.3024].iter().enumerate() {
            assert!(approx(s.alpha_bar(t + 1), *want, 1e-14));
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
        assert!(linear_schedule(10, 0.0, 0.2).is_err());
        assert!(linear_schedule(10, 0.3, 0.2).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_without_noise_scales_x0() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let zero = Tensor::zeros(&[3]);
        let x = q_sample(&x0, 7, &zero, &s).unwrap();
        assert!(x.bit_eq(&x0.scale(s.alpha_bar(7).sqrt())));
        assert!(matches!(q_sample(&x0, 11, &zero, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
    }

    #[test]
    fn q_sample_with_unit_alpha_bar_is_identity() {
        let s = Schedule::from_betas(vec![0.0, 0.0]).unwrap();
        let x0 = Tensor::from_vec(vec![0.25, -1.5]);
        let eps = Tensor::from_vec(vec![3.0, 4.0]);
        assert!(q_sample(&x0, 2, &eps, &s).unwrap().bit_eq(&x0));
    }

    #[test]
    fn predict_x0_without_noise_estimate() {
        let s = linear_schedule(5, 0.1, 0.3).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let p = predict_x0(&x, 3, &Tensor::zeros(&[2]), &s).unwrap();
        let want = x.scale(1.0 / s.alpha_bar(3).sqrt());
        assert!(p.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn mu_theta_hand_value() {
        // T=4, 0.1→0.4, t=2: α=0.8, ᾱ=0.72, x=1, ε̂=0.5.
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let mu = mu_theta(&Tensor::from_vec(vec![1.0]), 2, &Tensor::from_vec(vec![0.5]), &s).unwrap();
        let want = (1.0 / 0.8f64.sqrt()) * (1.0 - 0.2 / 0.28f64.sqrt() * 0.5);
        assert!(approx(mu.data()[0], want, 1e-14));
        assert!(approx(want, 0.906_745_425_067_765_7, 1e-12));
    }

    #[test]
    fn mu_theta_limits() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let x = Tensor::from_vec(vec![1.0, -3.0]);
        let mu = mu_theta(&x, 3, &Tensor::zeros(&[2]), &s).unwrap();
        assert!(mu.max_abs_diff(&x.scale(1.0 / s.alpha(3).sqrt())).unwrap() < 1e-15);
        let unit = Schedule::from_betas(vec![0.0]).unwrap();
        let mu = mu_theta(&x, 1, &Tensor::from_vec(vec![5.0, 5.0]), &unit).unwrap();
        assert!(mu.bit_eq(&x));
    }

    #[test]
    fn final_ddpm_step_is_noise_free() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let e = Tensor::from_vec(vec![0.1, 0.2]);
        let mu = mu_theta(&x, 1, &e, &s).unwrap();
        for v in [ReverseVariance::Beta, ReverseVariance::BetaTilde] {
            let mut rng = Rng::new(1);
            assert!(ddpm_step(&x, 1, &e, &s, &mut rng, v).unwrap().bit_eq(&mu));
        }
    }

    #[test]
    fn ddim_to_zero_returns_x0_estimate() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let e = Tensor::from_vec(vec![0.1, 0.2]);
        let x0 = predict_x0(&x, 4, &e, &s).unwrap();
        let a = ddim_step(&x, 4, 0, &e, &s).unwrap();
        assert!(a.bit_eq(&x0));
        assert!(ddim_step(&x, 4, 0, &e, &s).unwrap().bit_eq(&a));
        assert!(ddim_step(&x, 4, 4, &e, &s).is_err());
    }

    #[test]
    fn ddim_timesteps_are_evenly_spaced() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250, 0]);
        let ts = ddim_timesteps(1000, 250).unwrap();
        assert_eq!(ts.len(), 251);
        assert_eq!((ts[0], ts[1], ts[249], ts[250]), (1000, 996, 4, 0));
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn respacing_preserves_alpha_bar() {
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        let r = s.respaced(&[10, 40, 100]).unwrap();
        assert_eq!(r.len(), 3);
        assert!(approx(r.alpha_bar(2), s.alpha_bar(40), 1e-14));
        assert_eq!(r.model_timestep(3), 100);
        assert_eq!(r.posterior_var(1), 0.0);
    }

    #[test]
    fn simple_loss_values() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(simple_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(simple_loss(&z, &Tensor::ones(&[2])).unwrap(), 1.0);
        assert!(simple_loss(&z, &Tensor::ones(&[3])).is_err());
    }

    #[test]
    fn oracle_limits() {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let spec = GaussianDataSpec::new(2.0, 1e-9).unwrap();
        let t = 20;
        let ab = s.alpha_bar(t);
        let x = Tensor::from_vec(vec![0.5, 3.0]);
        let e = gaussian_oracle_eps(&x, t, &spec, &s).unwrap();
        for (xi, ei) in x.data().iter().zip(e.data()) {
            let exact = (xi - ab.sqrt() * 2.0) / (1.0 - ab).sqrt();
            assert!(approx(*ei, exact, 1e-9));
        }
        let centre = Tensor::from_vec(vec![ab.sqrt() * 2.0]);
        let spec = GaussianDataSpec::new(2.0, 0.5).unwrap();
        assert_eq!(gaussian_oracle_eps(&centre, t, &spec, &s).unwrap().data()[0], 0.0);
        assert!(GaussianDataSpec::new(0.0, 0.0).is_err());
    }

    #[test]
    fn oracle_matches_least_squares_fit() {
        // Regress ε on x_t over Monte-Carlo draws; the fitted slope and
        // intercept must reproduce the closed form.
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let spec = GaussianDataSpec::new(2.0, 0.5).unwrap();
        let mut rng = Rng::new(17);
        for t in [50, 300, 900] {
            let ab = s.alpha_bar(t);
            let n = 100_000;
            let (mut sx, mut se, mut sxx, mut sxe) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let x0 = 2.0 + 0.5 * rng.normal();
                let e = rng.normal();
                let x = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
                sx += x;
                se += e;
                sxx += x * x;
                sxe += x * e;
            }
            let nf = n as f64;
            let slope = (sxe / nf - sx / nf * se / nf) / (sxx / nf - (sx / nf).powi(2));
            let intercept = se / nf - slope * sx / nf;
            let at = |x: f64| gaussian_oracle_eps(&Tensor::from_vec(vec![x]), t, &spec, &s).unwrap().data()[0];
            let want_icpt = at(0.0);
            let want_slope = at(1.0) - want_icpt;
            assert!((slope - want_slope).abs() / want_slope < 0.02, "t={t} slope {slope} vs {want_slope}");
            assert!(
                (intercept - want_icpt).abs() < 0.02 * want_icpt.abs().max(want_slope),
                "t={t} intercept {intercept} vs {want_icpt}"
            );
        }
    }
}
