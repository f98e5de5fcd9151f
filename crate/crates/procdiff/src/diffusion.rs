//! The diffusion side of the model: noise schedule, forward process, the
//! x0-parameterized posterior step, and the reverse-chain samplers.
//!
//! The schedule is linear in the cumulative product, `alpha_bar(t) = 1 - t/T`,
//! which makes `alpha_bar(T)` exactly zero: the fully-noised state is a
//! standard Gaussian with no asymptotics involved.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{denoise_predict, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::types::Embedding;

/// Diffusion constants over `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha[t - 1]` is the per-step retention at step `t`, `t = 1..=T`.
    pub alpha: Vec<f64>,
    /// `alpha_bar[t]` is the cumulative product, `t = 0..=T`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior coefficients at step `t`: `(coeff of x0_hat, coeff of x_t,
    /// noise std)`.
    pub fn posterior_coeffs(&self, t: usize) -> (f64, f64, f64) {
        let a_t = self.alpha_at(t);
        let ab_t = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_at(t - 1);
        let c0 = ab_prev.sqrt() * (1.0 - a_t) / (1.0 - ab_t);
        let ct = a_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = (1.0 - ab_prev) * (1.0 - a_t) / (1.0 - ab_t);
        (c0, ct, var.sqrt())
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.t_max() {
            return Err(Error::invalid_input(format!(
                "diffusion step {t} outside {lo}..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// Build the linear-`alpha_bar` schedule: `alpha_bar(t) = 1 - t/T`.
pub fn make_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::invalid_config("schedule needs T >= 1"));
    }
    let alpha_bar: Vec<f64> =
        (0..=t_max).map(|t| (t_max - t) as f64 / t_max as f64).collect();
    let alpha: Vec<f64> = (1..=t_max).map(|t| alpha_bar[t] / alpha_bar[t - 1]).collect();
    Ok(NoiseSchedule { alpha, alpha_bar })
}

/// One forward noising step: `x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps`.
pub fn forward_step(
    x_prev: &Embedding,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut SeedRng,
) -> Result<Embedding> {
    sched.check_t(t, false)?;
    let a = sched.alpha_at(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let values = x_prev
        .values
        .iter()
        .map(|&x| sa * x + sn * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Embedding::new(values)
}

/// Closed-form marginal of `t` iterated forward steps with caller-supplied
/// noise: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_marginal(
    x0: &Embedding,
    t: usize,
    eps: &Embedding,
    sched: &NoiseSchedule,
) -> Result<Embedding> {
    sched.check_t(t, true)?;
    if eps.dim() != x0.dim() {
        return Err(Error::invalid_input("noise dim does not match x0"));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar_at(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values =
        x0.values.iter().zip(&eps.values).map(|(&x, &e)| sa * x + sn * e).collect();
    Embedding::new(values)
}

/// The reverse transition: diffuse a predicted `x0` back to `x_{t-1}`.
///
/// Mean and variance are the forward posterior's; passing a zero `noise`
/// yields the deterministic mean. At `t = 1` the posterior collapses to
/// `x0_hat` exactly.
pub fn posterior_step(
    x_t: &Embedding,
    x0_hat: &Embedding,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Embedding>,
) -> Result<Embedding> {
    sched.check_t(t, false)?;
    if x_t.dim() != x0_hat.dim() {
        return Err(Error::invalid_input("x_t and x0_hat dims differ"));
    }
    let (c0, ct, sigma) = sched.posterior_coeffs(t);
    let mut values: Vec<f64> = x0_hat
        .values
        .iter()
        .zip(&x_t.values)
        .map(|(&x0v, &xtv)| c0 * x0v + ct * xtv)
        .collect();
    if let Some(n) = noise {
        if n.dim() != x_t.dim() {
            return Err(Error::invalid_input("noise dim does not match x_t"));
        }
        for (v, &nv) in values.iter_mut().zip(&n.values) {
            *v += sigma * nv;
        }
    }
    Embedding::new(values)
}

/// How the reverse chain draws its noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// `x_T ~ N(0, I)` and fresh posterior noise at every step above 1.
    Stochastic,
    /// All noise replaced by zero vectors: fully deterministic, landing on
    /// the peak of each Gaussian.
    Approximate,
}

/// Run the reverse chain at one masked slot and return the final `x0`
/// prediction.
pub fn sample_chain(
    params: &DenoiserParams,
    context: &[(usize, Embedding)],
    mask_slot: usize,
    sched: &NoiseSchedule,
    mode: ChainMode,
    rng: &mut SeedRng,
) -> Result<Embedding> {
    let d = params.dim();
    let t_max = sched.t_max();
    let mut x_t = match mode {
        ChainMode::Stochastic => Embedding::new(
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?,
        ChainMode::Approximate => Embedding::zeros(d),
    };
    let mut x0_hat = Embedding::zeros(d);
    for t in (1..=t_max).rev() {
        x0_hat = denoise_predict(params, &x_t, context, mask_slot, t)?;
        let noise = match (mode, t) {
            (ChainMode::Stochastic, t) if t > 1 => Some(Embedding::new(
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            )?),
            _ => None,
        };
        x_t = posterior_step(&x_t, &x0_hat, t, sched, noise.as_ref())?;
    }
    Ok(x0_hat)
}

/// The approximate (zero-noise) reverse chain built on a tape, so gradients
/// flow through every denoiser call. Must match [`sample_chain`] in
/// approximate mode bit for bit.
pub fn approximate_chain_on_tape(
    tape: &mut crate::tape::Tape,
    binding: &crate::denoiser::DenoiserBinding,
    context: &[(usize, crate::tape::NodeId)],
    mask_slot: usize,
    sched: &NoiseSchedule,
    dim: usize,
) -> crate::tape::NodeId {
    use crate::denoiser::MaskedInput;
    let mut x_t = tape.constant(crate::mat::Mat::zeros(1, dim));
    let mut x0_hat = x_t;
    for t in (1..=sched.t_max()).rev() {
        x0_hat = binding.predict_masked(tape, context, mask_slot, MaskedInput::Noisy { x_t, t });
        if t > 1 {
            let (c0, ct, _) = sched.posterior_coeffs(t);
            let a = tape.scale(x0_hat, c0);
            let b = tape.scale(x_t, ct);
            x_t = tape.add(a, b);
        }
    }
    x0_hat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    #[test]
    fn schedule_t4_hand_values() {
        let s = make_schedule(4).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(s.alpha[0], 0.75);
        assert!((s.alpha[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.alpha[2], 0.5);
        assert_eq!(s.alpha[3], 0.0);
    }

    #[test]
    fn schedule_t1_is_single_step_to_noise() {
        let s = make_schedule(1).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0, 0.0]);
        assert_eq!(s.alpha, vec![0.0]);
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn cumulative_product_identity() {
        for t_max in 1..=12 {
            let s = make_schedule(t_max).unwrap();
            let mut prod = 1.0;
            for t in 1..=t_max {
                prod *= s.alpha_at(t);
                assert!(
                    (prod - s.alpha_bar_at(t)).abs() < 1e-12,
                    "T={t_max} t={t}: {prod} vs {}",
                    s.alpha_bar_at(t)
                );
            }
            for t in 1..=t_max {
                assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
                assert!((0.0..=1.0).contains(&s.alpha_at(t)));
            }
            assert_eq!(s.alpha_bar_at(t_max), 0.0);
        }
    }

    #[test]
    fn forward_step_alpha_one_is_identity() {
        // alpha = 1 never occurs in the linear schedule, so wire it directly
        let s = NoiseSchedule { alpha: vec![1.0], alpha_bar: vec![1.0, 1.0] };
        let x = Embedding::new(vec![0.4, -0.2, 1.0]).unwrap();
        let out = forward_step(&x, 1, &s, &mut sub_rng(30, 0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_step_alpha_zero_is_pure_noise() {
        let s = NoiseSchedule { alpha: vec![0.0], alpha_bar: vec![1.0, 0.0] };
        let x = Embedding::new(vec![100.0, -100.0]).unwrap();
        let a = forward_step(&x, 1, &s, &mut sub_rng(31, 0)).unwrap();
        let b = forward_step(
            &Embedding::new(vec![-5.0, 7.0]).unwrap(),
            1,
            &s,
            &mut sub_rng(31, 0),
        )
        .unwrap();
        // independent of input: same rng stream gives identical output
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn forward_step_moments_match_clt() {
        let s = make_schedule(4).unwrap();
        let x = Embedding::new(vec![0.8, -1.2, 0.1, 0.5, -0.3, 0.9, 0.0, -0.7]).unwrap();
        let n = 100_000;
        let mut rng = sub_rng(32, 0);
        let mut sums = vec![0.0; 8];
        let mut sq_sums = vec![0.0; 8];
        for _ in 0..n {
            let out = forward_step(&x, 1, &s, &mut rng).unwrap();
            for (c, &v) in out.values.iter().enumerate() {
                sums[c] += v;
                sq_sums[c] += v * v;
            }
        }
        let a = s.alpha_at(1);
        let var = 1.0 - a;
        let nf = n as f64;
        for c in 0..8 {
            let mean = sums[c] / nf;
            let expected_mean = a.sqrt() * x.values[c];
            let mean_bound = 3.0 * var.sqrt() / nf.sqrt();
            assert!((mean - expected_mean).abs() < mean_bound, "mean coord {c}");
            let sample_var = sq_sums[c] / nf - mean * mean;
            // variance of the sample variance of a normal: 2 var^2 / n
            let var_bound = 3.0 * (2.0 * var * var / nf).sqrt();
            assert!((sample_var - var).abs() < var_bound, "var coord {c}");
        }
    }

    #[test]
    fn marginal_endpoints() {
        let s = make_schedule(4).unwrap();
        let x0 = Embedding::new(vec![0.3, -0.9, 0.2]).unwrap();
        let eps = Embedding::new(vec![1.5, -0.5, 0.7]).unwrap();
        assert_eq!(forward_marginal(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(forward_marginal(&x0, 4, &eps, &s).unwrap(), eps);
        assert!(forward_marginal(&x0, 5, &eps, &s).is_err());
    }

    #[test]
    fn marginal_matches_iterated_steps_distribution() {
        // two-sample Kolmogorov-Smirnov per coordinate at p = 0.01
        let s = make_schedule(4).unwrap();
        let x0 = Embedding::new(vec![0.6, -0.4]).unwrap();
        let n = 20_000;
        let mut rng = sub_rng(33, 0);
        for t in 1..=4usize {
            let mut marginal: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 2];
            let mut iterated: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 2];
            for _ in 0..n {
                let eps = Embedding::new(
                    (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                )
                .unwrap();
                let m = forward_marginal(&x0, t, &eps, &s).unwrap();
                let mut it = x0.clone();
                for step in 1..=t {
                    it = forward_step(&it, step, &s, &mut rng).unwrap();
                }
                for c in 0..2 {
                    marginal[c].push(m.values[c]);
                    iterated[c].push(it.values[c]);
                }
            }
            for c in 0..2 {
                let d = ks_statistic(&mut marginal[c], &mut iterated[c]);
                // critical value at alpha = 0.01: 1.628 * sqrt((n + m) / (n m))
                let crit = 1.628 * ((2.0 * n as f64) / (n as f64 * n as f64)).sqrt();
                assert!(d < crit, "t={t} coord {c}: KS {d} >= {crit}");
            }
        }
    }

    fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d: f64 = 0.0;
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / a.len() as f64;
            let fb = j as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn posterior_collapses_at_t1() {
        let s = make_schedule(4).unwrap();
        let x1 = Embedding::new(vec![0.5, -0.5]).unwrap();
        let x0_hat = Embedding::new(vec![0.9, 0.1]).unwrap();
        let out = posterior_step(&x1, &x0_hat, 1, &s, None).unwrap();
        assert_eq!(out, x0_hat);
        assert!(posterior_step(&x1, &x0_hat, 0, &s, None).is_err());
    }

    #[test]
    fn posterior_matches_scalar_bayes() {
        // 1-D: q(x_{t-1} | x_t, x0) from precision addition
        let s = make_schedule(4).unwrap();
        let t = 2;
        let (x_t, x0) = (0.7, -0.4);
        let a_t = s.alpha_at(t);
        let ab_prev = s.alpha_bar_at(t - 1);
        let prec = a_t / (1.0 - a_t) + 1.0 / (1.0 - ab_prev);
        let bayes_var = 1.0 / prec;
        let bayes_mean =
            bayes_var * (a_t.sqrt() * x_t / (1.0 - a_t) + ab_prev.sqrt() * x0 / (1.0 - ab_prev));

        let xe = Embedding::new(vec![x_t]).unwrap();
        let x0e = Embedding::new(vec![x0]).unwrap();
        let mean = posterior_step(&xe, &x0e, t, &s, None).unwrap().values[0];
        assert!((mean - bayes_mean).abs() < 1e-12, "{mean} vs {bayes_mean}");

        let (_, _, sigma) = s.posterior_coeffs(t);
        assert!((sigma * sigma - bayes_var).abs() < 1e-12);
    }

    #[test]
    fn posterior_noise_is_additive() {
        let s = make_schedule(4).unwrap();
        let x_t = Embedding::new(vec![0.2, 0.4]).unwrap();
        let x0 = Embedding::new(vec![-0.1, 0.6]).unwrap();
        let noise = Embedding::new(vec![1.0, -2.0]).unwrap();
        let silent = posterior_step(&x_t, &x0, 3, &s, None).unwrap();
        let noisy = posterior_step(&x_t, &x0, 3, &s, Some(&noise)).unwrap();
        let (_, _, sigma) = s.posterior_coeffs(3);
        for c in 0..2 {
            let diff = noisy.values[c] - silent.values[c];
            assert!((diff - sigma * noise.values[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_contracts_toward_x0_in_expectation() {
        let s = make_schedule(4).unwrap();
        let x0 = Embedding::new(vec![0.9, -0.3, 0.5, 0.1]).unwrap();
        let mut rng = sub_rng(34, 0);
        let n = 4_000;
        for t in 2..=4usize {
            let mut before = 0.0;
            let mut after = 0.0;
            for _ in 0..n {
                let eps = Embedding::new(
                    (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                )
                .unwrap();
                let x_t = forward_marginal(&x0, t, &eps, &s).unwrap();
                let noise = Embedding::new(
                    (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                )
                .unwrap();
                let x_prev = posterior_step(&x_t, &x0, t, &s, Some(&noise)).unwrap();
                before += dist_sq(&x_t, &x0);
                after += dist_sq(&x_prev, &x0);
            }
            assert!(after < before, "t={t}: posterior should contract toward x0");
        }
    }

    fn dist_sq(a: &Embedding, b: &Embedding) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn tiny_denoiser(seed: u64) -> DenoiserParams {
        let config = crate::denoiser::DenoiserConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            t_max: 4,
        };
        DenoiserParams::init(config, &mut sub_rng(35, seed))
    }

    fn ctx(seed: u64) -> Vec<(usize, Embedding)> {
        let m = crate::mat::Mat::randn(2, 8, 1.0, &mut sub_rng(36, seed));
        vec![
            (0, Embedding::new(m.row(0).to_vec()).unwrap()),
            (1, Embedding::new(m.row(1).to_vec()).unwrap()),
        ]
    }

    #[test]
    fn approximate_chain_is_deterministic() {
        let params = tiny_denoiser(0);
        let s = make_schedule(4).unwrap();
        let context = ctx(0);
        let a =
            sample_chain(&params, &context, 2, &s, ChainMode::Approximate, &mut sub_rng(37, 0))
                .unwrap();
        let b =
            sample_chain(&params, &context, 2, &s, ChainMode::Approximate, &mut sub_rng(37, 99))
                .unwrap();
        assert_eq!(a, b, "approximate mode ignores the rng entirely");
    }

    #[test]
    fn stochastic_chain_is_seeded() {
        let params = tiny_denoiser(1);
        let s = make_schedule(4).unwrap();
        let context = ctx(1);
        let a = sample_chain(&params, &context, 2, &s, ChainMode::Stochastic, &mut sub_rng(38, 5))
            .unwrap();
        let b = sample_chain(&params, &context, 2, &s, ChainMode::Stochastic, &mut sub_rng(38, 5))
            .unwrap();
        let c = sample_chain(&params, &context, 2, &s, ChainMode::Stochastic, &mut sub_rng(38, 6))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tape_chain_matches_pure_approximate_chain() {
        use crate::denoiser::DenoiserBinding;
        use crate::tape::Tape;
        let params = tiny_denoiser(2);
        let s = make_schedule(4).unwrap();
        let context = ctx(2);
        let pure =
            sample_chain(&params, &context, 2, &s, ChainMode::Approximate, &mut sub_rng(39, 0))
                .unwrap();

        let mut tape = Tape::new();
        let binding = DenoiserBinding::bind_frozen(&mut tape, &params);
        let nodes: Vec<(usize, crate::tape::NodeId)> = context
            .iter()
            .map(|(slot, e)| {
                (*slot, tape.constant(crate::mat::Mat::row_vec(e.values.clone())))
            })
            .collect();
        let out = approximate_chain_on_tape(&mut tape, &binding, &nodes, 2, &s, 8);
        assert_eq!(tape.value(out).data, pure.values);
    }
}
