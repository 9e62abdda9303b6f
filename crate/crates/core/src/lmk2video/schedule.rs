//! Forward-diffusion schedule and the deterministic DDIM sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learning::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T ≥ 1 and 0 < β_start ≤ β_end < 1, got T = {t_steps}, β = [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// The usual 1e−4 … 0.02 betas for 1000 steps, stretched by `1000 / t_steps`
    /// so that a short schedule reaches the same total noise level.
    pub fn scaled_linear(t_steps: usize) -> Result<Self> {
        let scale = 1000.0 / t_steps.max(1) as f64;
        make_schedule(t_steps, 1e-4 * scale, 0.02 * scale)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 0..{}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(t)?;
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Evenly spaced descending timesteps `(T−1) − ⌊i·T/S⌋`, `i = 0..S`.
pub fn ddim_timesteps(t_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_steps {
        return Err(Error::InvalidArgument(format!(
            "DDIM steps must lie in 1..={t_steps}, got {steps}"
        )));
    }
    Ok((0..steps).map(|i| (t_steps - 1) - i * t_steps / steps).collect())
}

/// Deterministic DDIM (η = 0) starting from `x_start` at the largest
/// selected timestep. `denoiser(x_t, t)` predicts the noise. With `clip`,
/// every predicted clean sample is clamped to `[-clip, clip]`. The final step
/// returns the predicted clean sample.
pub fn ddim_sample_from<F>(
    x_start: Tensor,
    steps: usize,
    schedule: &NoiseSchedule,
    clip: Option<f64>,
    mut denoiser: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(schedule.len(), steps)?;
    let mut x = x_start;
    for (i, &t) in ts.iter().enumerate() {
        let eps = denoiser(&x, t)?;
        let (a, s) = schedule.coefficients(t)?;
        let mut x0 = x.zip_map(&eps, |xt, e| (xt - s * e) / a)?;
        if let Some(c) = clip {
            x0 = x0.map(|v| v.clamp(-c, c));
        }
        match ts.get(i + 1) {
            None => return Ok(x0),
            Some(&next) => {
                let (an, sn) = schedule.coefficients(next)?;
                x = x0.zip_map(&eps, |p, e| an * p + sn * e)?;
            }
        }
    }
    unreachable!("at least one step")
}

/// [`ddim_sample_from`] with a standard-normal start drawn from `seed`.
pub fn ddim_sample<F>(
    shape: &[usize],
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    clip: Option<f64>,
    denoiser: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    ddim_timesteps(schedule.len(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ddim_sample_from(Tensor::randn(shape, &mut rng), steps, schedule, clip, denoiser)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bars, vec![0.99]);
        assert!(make_schedule(0, 0.01, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn defaults_are_strictly_decreasing_and_conserve() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.alpha_bars[0], 1.0 - s.betas[0]);
        for t in 0..100 {
            let (a, b) = s.coefficients(t).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tenth_alpha_bar_is_product_of_first_ten_factors() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let mut want = 1.0;
        for i in 0..10 {
            let beta = 1e-3 + (0.2 - 1e-3) * i as f64 / 99.0;
            want *= 1.0 - beta;
        }
        assert!((s.alpha_bars[9] - want).abs() < 1e-12);
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule {
            betas: vec![0.25],
            alphas: vec![0.75],
            alpha_bars: vec![0.75],
        };
        let x = q_sample(&Tensor::zeros(&[2]), 0, &Tensor::ones(&[2]), &s).unwrap();
        assert!(x.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let one = NoiseSchedule {
            alpha_bars: vec![1.0],
            ..s.clone()
        };
        let x0 = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        assert_eq!(q_sample(&x0, 0, &Tensor::ones(&[2]), &one).unwrap(), x0);
        assert!(q_sample(&x0, 1, &x0, &s).is_err());
    }

    #[test]
    fn noise_can_be_recovered_from_sample() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[10], &mut rng);
        let eps = Tensor::randn(&[10], &mut rng);
        let t = 37;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let (a, b) = s.coefficients(t).unwrap();
        let solved = xt.zip_map(&x0, |x, z| (x - a * z) / b).unwrap();
        let again = q_sample(&x0, t, &solved, &s).unwrap();
        assert!(again.max_abs_diff(&xt) < 1e-6);
    }

    #[test]
    fn timestep_subsets() {
        assert_eq!(ddim_timesteps(100, 1).unwrap(), vec![99]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(100, 4).unwrap(), vec![99, 74, 49, 24]);
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    fn oracle_run(steps: usize) -> f64 {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 3], &mut rng);
        let start = q_sample(&x0, 99, &eps, &s).unwrap();
        let oracle = |x: &Tensor, t: usize| {
            let (a, b) = s.coefficients(t)?;
            x.zip_map(&x0, |xt, z| (xt - a * z) / b)
        };
        ddim_sample_from(start, steps, &s, None, oracle).unwrap().max_abs_diff(&x0)
    }

    #[test]
    fn oracle_denoiser_recovers_clean_sample() {
        assert!(oracle_run(1) < 1e-5);
        assert!(oracle_run(100) < 1e-5);
        assert!(oracle_run(20) < 1e-5);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let den = |x: &Tensor, _t: usize| Ok(x.map(|v| 0.5 * v));
        let a = ddim_sample(&[3, 2], 10, &s, 9, None, den).unwrap();
        let b = ddim_sample(&[3, 2], 10, &s, 9, None, den).unwrap();
        let c = ddim_sample(&[3, 2], 10, &s, 10, None, den).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(ddim_sample(&[3, 2], 51, &s, 9, None, den).is_err());
    }

    #[test]
    fn clipping_bounds_predictions() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let wild = |x: &Tensor, _t: usize| Ok(x.map(|v| -3.0 * v));
        let z = ddim_sample(&[8], 10, &s, 1, Some(1.0), wild).unwrap();
        assert!(z.data().iter().all(|v| v.abs() <= 1.0));
        let free = ddim_sample(&[8], 10, &s, 1, None, wild).unwrap();
        assert!(free.data().iter().any(|v| v.abs() > 1.0));
    }
}
