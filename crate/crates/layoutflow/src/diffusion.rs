//! Denoising-diffusion baseline.
//!
//! Shares the network, data pipeline and condition masks with the flow
//! engine so the two heads differ only in the regression target and the
//! reverse process. The network predicts the added noise; time enters as
//! `tau / T_train`. The auxiliary L1 term penalizes the geometry residual
//! of the layout implied by the noise prediction, which for a fixed
//! noising step is the noise error scaled by `sqrt((1-a)/a)` with `a` the
//! cumulative signal fraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionMask;
use crate::data::FlowVector;
use crate::error::{Error, Result};
use crate::flow::LossParts;
use crate::model::VectorFieldModel;
use crate::sampler::TrajectoryTrace;
use crate::scalar::{s, Scalar};

/// Training-time noising steps.
pub const DIFFUSION_T_TRAIN: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Linear noise schedule with precomputed cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[tau]` for `tau` in `0..=T`; index 0 is exactly 1.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Variances grow linearly from 1e-4 to 0.02 over `t_train` steps.
    pub fn linear(t_train: usize) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_train + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    /// Variance added at step `tau` (1-based).
    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    /// Cumulative signal fraction after `tau` steps; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    /// Network time input for step `tau`.
    pub fn model_time<S: Scalar>(&self, tau: usize) -> S {
        s(tau as f64 / self.t_train() as f64)
    }
}

/// Noises `x1` to step `tau`: `x = sqrt(a) x1 + sqrt(1-a) eps` with the
/// noise drawn only on real dimensions. Returns the noised state and the
/// noise (the regression target).
pub fn forward_diffuse<S: Scalar, R: Rng + ?Sized>(
    x1: &FlowVector<S>,
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(FlowVector<S>, Vec<S>)> {
    if tau == 0 || tau > schedule.t_train() {
        return Err(Error::domain(format!(
            "tau {tau} outside 1..={}",
            schedule.t_train()
        )));
    }
    let ab = schedule.alpha_bar(tau);
    let signal = s::<S>(ab.sqrt());
    let noise_scale = s::<S>((1.0 - ab).sqrt());
    let dims = x1.dims_per_element();
    let mut eps = vec![S::zero(); x1.len()];
    let mut data = x1.data().to_vec();
    for (d, (xd, ed)) in data.iter_mut().zip(eps.iter_mut()).enumerate() {
        if x1.is_real(d / dims) {
            *ed = S::standard_normal(rng);
            *xd = signal * *xd + noise_scale * *ed;
        }
    }
    let x_t = FlowVector::new(data, x1.pad_mask().to_vec(), x1.bits())?;
    Ok((x_t, eps))
}

/// One denoising regression point.
#[derive(Debug, Clone)]
pub struct DiffusionSample<S> {
    pub x_t: FlowVector<S>,
    pub tau: usize,
    pub eps_target: Vec<S>,
    /// True where the loss applies: real element and not a condition dim.
    pub loss_mask: Vec<bool>,
    /// `sqrt((1-a)/a)`: noise error to implied-layout error on geometry.
    pub l1_coeff: f64,
}

/// Draws `tau` uniformly, noises the layout, and pins condition
/// dimensions to their clean values (mirroring the flow setup: condition
/// content is visible, unsupervised, and held fixed).
pub fn make_diffusion_sample<S: Scalar, R: Rng + ?Sized>(
    x1: &FlowVector<S>,
    mask: &ConditionMask<S>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionSample<S>> {
    if !mask.matches(x1) {
        return Err(Error::contract("condition mask shape differs from data"));
    }
    let tau = rng.random_range(1..=schedule.t_train());
    let (mut x_t, eps) = forward_diffuse(x1, tau, schedule, rng)?;
    mask.pin(&mut x_t);
    let dims = x1.dims_per_element();
    let loss_mask: Vec<bool> =
        (0..x1.len()).map(|d| x1.is_real(d / dims) && !mask.is_given(d)).collect();
    let ab = schedule.alpha_bar(tau);
    Ok(DiffusionSample {
        x_t,
        tau,
        eps_target: eps,
        loss_mask,
        l1_coeff: ((1.0 - ab) / ab).sqrt(),
    })
}

/// Noise-prediction loss: mean squared noise error over supervised dims
/// plus `lambda` times the mean absolute implied-geometry error.
pub fn diffusion_loss<S: Scalar>(
    eps_hat: &[S],
    sample: &DiffusionSample<S>,
    lambda: f64,
) -> Result<LossParts> {
    if eps_hat.len() != sample.eps_target.len() {
        return Err(Error::contract("prediction length differs from target"));
    }
    let mut sq = 0.0;
    let mut n_sq = 0usize;
    let mut abs = 0.0;
    let mut n_abs = 0usize;
    for (d, &m) in sample.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        let r = (eps_hat[d] - sample.eps_target[d]).as_f64();
        sq += r * r;
        n_sq += 1;
        if sample.x_t.is_geometry_dim(d) {
            abs += r.abs();
            n_abs += 1;
        }
    }
    if n_sq == 0 {
        return Err(Error::domain("loss mask selects no dimensions"));
    }
    let mse = sq / n_sq as f64;
    let l1_geo = if n_abs == 0 { 0.0 } else { sample.l1_coeff * abs / n_abs as f64 };
    Ok(LossParts { total: mse + lambda * l1_geo, mse, l1_geo })
}

/// Gradient of [`diffusion_loss`] with respect to the prediction.
pub fn diffusion_loss_grad<S: Scalar>(
    eps_hat: &[S],
    sample: &DiffusionSample<S>,
    lambda: f64,
) -> Result<Vec<S>> {
    if eps_hat.len() != sample.eps_target.len() {
        return Err(Error::contract("prediction length differs from target"));
    }
    let n_sq = sample.loss_mask.iter().filter(|&&m| m).count();
    if n_sq == 0 {
        return Err(Error::domain("loss mask selects no dimensions"));
    }
    let n_abs = sample
        .loss_mask
        .iter()
        .enumerate()
        .filter(|&(d, &m)| m && sample.x_t.is_geometry_dim(d))
        .count();
    let inv_sq = s::<S>(2.0 / n_sq as f64);
    let l1 = if n_abs == 0 {
        S::zero()
    } else {
        s::<S>(lambda * sample.l1_coeff / n_abs as f64)
    };
    let mut grad = vec![S::zero(); eps_hat.len()];
    for (d, &m) in sample.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        let r = eps_hat[d] - sample.eps_target[d];
        grad[d] = inv_sq * r;
        if sample.x_t.is_geometry_dim(d) && r != S::zero() {
            grad[d] += if r > S::zero() { l1 } else { -l1 };
        }
    }
    Ok(grad)
}

/// Evenly strided denoising grid: `steps` values ending at `t_train`,
/// deduplicated, each at least 1, ascending.
pub(crate) fn stride_taus(t_train: usize, steps: usize) -> Vec<usize> {
    let mut taus: Vec<usize> = (1..=steps)
        .map(|j| ((t_train as f64 * j as f64 / steps as f64).round() as usize).max(1))
        .collect();
    taus.dedup();
    taus
}

/// One reverse update from `tau` (cumulative signal `ab_t`) to an earlier
/// step with cumulative signal `ab_p`, using the unified form that is the
/// ancestral sampler at `sigma^2 = (1-ab_p)/(1-ab_t) * (1-ab_t/ab_p)` and
/// the deterministic one at `sigma = 0`.
pub(crate) fn denoise_step<S: Scalar>(
    x: &[S],
    eps_hat: &[S],
    ab_t: f64,
    ab_p: f64,
    sigma: f64,
    noise: &[S],
) -> Vec<S> {
    let inv_signal = s::<S>(1.0 / ab_t.sqrt());
    let noise_scale = s::<S>((1.0 - ab_t).sqrt());
    let signal_p = s::<S>(ab_p.sqrt());
    let dir = s::<S>((1.0 - ab_p - sigma * sigma).max(0.0).sqrt());
    let sig = s::<S>(sigma);
    x.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((&xd, &ed), &zd)| {
            let x0_hat = (xd - noise_scale * ed) * inv_signal;
            signal_p * x0_hat + dir * ed + sig * zd
        })
        .collect()
}

/// Noise variance of the unified update; `eta = 1` recovers the
/// ancestral posterior, `eta = 0` is deterministic.
pub(crate) fn step_sigma(ab_t: f64, ab_p: f64, eta: f64) -> f64 {
    let var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
    eta * eta * var.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSampleConfig {
    /// Number of denoising steps (strided over the training grid).
    pub steps: usize,
    /// Stochasticity: 1 = ancestral, 0 = deterministic.
    pub eta: f64,
}

impl Default for DiffusionSampleConfig {
    fn default() -> Self {
        DiffusionSampleConfig { steps: 100, eta: 1.0 }
    }
}

/// Reverse-process sampler bound to a trained noise predictor.
pub struct DiffusionSampler<'a, S> {
    model: &'a VectorFieldModel<S>,
    schedule: NoiseSchedule,
    element_histogram: Vec<usize>,
}

impl<'a, S: Scalar> DiffusionSampler<'a, S> {
    pub fn new(
        model: &'a VectorFieldModel<S>,
        schedule: NoiseSchedule,
        element_histogram: &[usize],
    ) -> Result<Self> {
        if element_histogram.len() > model.config.nmax + 1 {
            return Err(Error::contract("histogram wider than the model"));
        }
        if element_histogram.iter().skip(1).sum::<usize>() == 0 {
            return Err(Error::contract("element histogram is empty"));
        }
        Ok(DiffusionSampler { model, schedule, element_histogram: element_histogram.to_vec() })
    }

    fn draw_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: usize = self.element_histogram.iter().skip(1).sum();
        let mut pick = rng.random_range(0..total);
        for (n, &count) in self.element_histogram.iter().enumerate().skip(1) {
            if pick < count {
                return n;
            }
            pick -= count;
        }
        unreachable!("histogram weights sum to total");
    }

    /// Standard-normal start state shaped for `mask` (the diffusion prior
    /// is always Gaussian).
    pub fn initial_state<R: Rng + ?Sized>(
        &self,
        mask: &ConditionMask<S>,
        rng: &mut R,
    ) -> Result<FlowVector<S>> {
        let cfg = &self.model.config;
        let pads: Vec<bool> = if mask.has_elements() {
            mask.pad_mask().to_vec()
        } else {
            let n = self.draw_count(rng);
            (0..cfg.nmax).map(|slot| slot < n).collect()
        };
        let dims = cfg.slot_dims();
        let mut data = vec![S::zero(); cfg.nmax * dims];
        for (d, xd) in data.iter_mut().enumerate() {
            if pads[d / dims] {
                *xd = S::standard_normal(rng);
            }
        }
        FlowVector::new(data, pads, cfg.bits)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        mask: &ConditionMask<S>,
        cfg: &DiffusionSampleConfig,
        rng: &mut R,
    ) -> Result<FlowVector<S>> {
        let x = self.initial_state(mask, rng)?;
        self.sample_from_state(x, mask, cfg, rng)
    }

    /// Like [`Self::sample`] but also returns the visited states, so
    /// denoising paths compare directly with flow trajectories.
    pub fn sample_with_trace<R: Rng + ?Sized>(
        &self,
        mask: &ConditionMask<S>,
        cfg: &DiffusionSampleConfig,
        rng: &mut R,
    ) -> Result<(FlowVector<S>, TrajectoryTrace<S>)> {
        let x = self.initial_state(mask, rng)?;
        let (x, trace) = self.run_chain(x, mask, cfg, rng, true)?;
        Ok((x, trace.expect("trace requested")))
    }

    /// Runs the reverse chain from an explicit start state. With
    /// `eta = 0` no randomness is consumed and the result depends only on
    /// the start state and the mask.
    pub fn sample_from_state<R: Rng + ?Sized>(
        &self,
        x: FlowVector<S>,
        mask: &ConditionMask<S>,
        cfg: &DiffusionSampleConfig,
        rng: &mut R,
    ) -> Result<FlowVector<S>> {
        Ok(self.run_chain(x, mask, cfg, rng, false)?.0)
    }

    fn run_chain<R: Rng + ?Sized>(
        &self,
        mut x: FlowVector<S>,
        mask: &ConditionMask<S>,
        cfg: &DiffusionSampleConfig,
        rng: &mut R,
        keep_trace: bool,
    ) -> Result<(FlowVector<S>, Option<TrajectoryTrace<S>>)> {
        if cfg.steps == 0 {
            return Err(Error::domain("sampling needs at least one step"));
        }
        if !(cfg.eta.is_finite() && cfg.eta >= 0.0) {
            return Err(Error::domain(format!("eta {} must be >= 0", cfg.eta)));
        }
        if !mask.matches(&x) {
            return Err(Error::contract("mask shape differs from the start state"));
        }
        let dims = x.dims_per_element();
        let taus = stride_taus(self.schedule.t_train(), cfg.steps);
        mask.pin(&mut x);
        let mut trace = if keep_trace {
            let free_mask = (0..x.len())
                .map(|d| x.is_real(d / dims) && !mask.is_given(d))
                .collect();
            Some(TrajectoryTrace {
                times: vec![taus[taus.len() - 1] as f64 / self.schedule.t_train() as f64],
                states: vec![x.clone()],
                free_mask,
            })
        } else {
            None
        };
        for i in (0..taus.len()).rev() {
            let tau = taus[i];
            let tau_prev = if i == 0 { 0 } else { taus[i - 1] };
            let t_model = self.schedule.model_time::<S>(tau);
            let (eps_hat, _) = self.model.forward(&x, t_model, mask)?;
            let ab_t = self.schedule.alpha_bar(tau);
            let ab_p = self.schedule.alpha_bar(tau_prev);
            let sigma = step_sigma(ab_t, ab_p, cfg.eta).sqrt();
            let mut noise = vec![S::zero(); x.len()];
            if sigma > 0.0 {
                for (d, zd) in noise.iter_mut().enumerate() {
                    if x.is_real(d / dims) {
                        *zd = S::standard_normal(rng);
                    }
                }
            }
            let next = denoise_step(x.data(), &eps_hat, ab_t, ab_p, sigma, &noise);
            x = FlowVector::new(next, x.pad_mask().to_vec(), x.bits())?;
            mask.pin(&mut x);
            if let Some(trace) = trace.as_mut() {
                trace.times.push(tau_prev as f64 / self.schedule.t_train() as f64);
                trace.states.push(x.clone());
            }
        }
        if !x.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("denoising produced non-finite values"));
        }
        Ok((x, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_mask, TaskKind};
    use crate::data::{layout_to_vector, CategorySet, Element, Layout};
    use crate::model::{ModelConfig, VectorFieldModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout_vector(n: usize, nmax: usize) -> FlowVector<f64> {
        let cats = CategorySet::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let layout = Layout::new(
            (0..n)
                .map(|i| Element {
                    category: i % 3,
                    cx: 0.25 + 0.1 * i as f64,
                    cy: 0.4,
                    w: 0.15,
                    h: 0.1,
                })
                .collect(),
        );
        layout_to_vector(&layout, &cats, nmax).unwrap()
    }

    #[test]
    fn schedule_has_the_documented_shape() {
        let sched = NoiseSchedule::linear(DIFFUSION_T_TRAIN).unwrap();
        assert_eq!(sched.t_train(), 1000);
        assert_eq!(sched.beta(1), 1e-4);
        assert_eq!(sched.beta(1000), 0.02);
        assert_eq!(sched.alpha_bar(0), 1.0);
        for tau in 1..=1000 {
            assert!(sched.alpha_bar(tau) < sched.alpha_bar(tau - 1), "signal must decay");
            assert!(sched.alpha_bar(tau) > 0.0);
        }
        assert!(sched.alpha_bar(1000) < 1e-3, "end state is near-pure noise");
    }

    #[test]
    fn forward_diffuse_matches_the_marginal_moments() {
        let x1 = layout_vector(2, 3);
        let sched = NoiseSchedule::linear(1000).unwrap();
        let tau = 400;
        let ab = sched.alpha_bar(tau);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 1; // cy of element 0
        let mut vals = Vec::new();
        for _ in 0..20_000 {
            let (x_t, _) = forward_diffuse(&x1, tau, &sched, &mut rng).unwrap();
            vals.push(x_t.data()[d]);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let expect_mean = ab.sqrt() * x1.data()[d];
        assert!((mean - expect_mean).abs() < 0.02, "mean {mean} vs {expect_mean}");
        assert!((var - (1.0 - ab)).abs() < 0.02, "var {var} vs {}", 1.0 - ab);
    }

    #[test]
    fn forward_diffuse_leaves_padding_at_zero() {
        let x1 = layout_vector(2, 5);
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x_t, eps) = forward_diffuse(&x1, 50, &sched, &mut rng).unwrap();
        let dims = x1.dims_per_element();
        for d in 2 * dims..x1.len() {
            assert_eq!(x_t.data()[d], 0.0);
            assert_eq!(eps[d], 0.0);
        }
    }

    #[test]
    fn perfect_noise_prediction_recovers_the_layout_exactly() {
        // Deterministic chain with the oracle noise consistent with the
        // current state keeps the implied layout fixed, so any stride
        // lands exactly on the clean layout.
        let x1 = layout_vector(3, 4);
        let sched = NoiseSchedule::linear(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t_end = sched.t_train();
        let (start, _) = forward_diffuse(&x1, t_end, &sched, &mut rng).unwrap();
        for steps in [1, 7, 50] {
            let taus = stride_taus(sched.t_train(), steps);
            assert_eq!(*taus.last().unwrap(), t_end);
            let mut x = start.data().to_vec();
            for i in (0..taus.len()).rev() {
                let tau = taus[i];
                let tau_prev = if i == 0 { 0 } else { taus[i - 1] };
                let ab_t = sched.alpha_bar(tau);
                let ab_p = sched.alpha_bar(tau_prev);
                // Oracle: the noise that explains x given the clean layout.
                let eps: Vec<f64> = x
                    .iter()
                    .zip(x1.data())
                    .map(|(&xt, &x0)| (xt - ab_t.sqrt() * x0) / (1.0 - ab_t).sqrt())
                    .collect();
                let zeros = vec![0.0; x.len()];
                x = denoise_step(&x, &eps, ab_t, ab_p, 0.0, &zeros);
            }
            for (a, b) in x.iter().zip(x1.data()) {
                assert!((a - b).abs() < 1e-9, "steps {steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn unified_variance_matches_the_ancestral_posterior() {
        // For single-step transitions, sigma^2 at eta = 1 must equal the
        // classic posterior variance (1-a_prev)/(1-a_t) * beta_t.
        let sched = NoiseSchedule::linear(1000).unwrap();
        for tau in 2..=1000 {
            let ab_t = sched.alpha_bar(tau);
            let ab_p = sched.alpha_bar(tau - 1);
            let got = step_sigma(ab_t, ab_p, 1.0);
            let reference = (1.0 - ab_p) / (1.0 - ab_t) * sched.beta(tau);
            assert!((got - reference).abs() < 1e-12, "tau {tau}: {got} vs {reference}");
        }
    }

    #[test]
    fn stride_grid_is_sane() {
        assert_eq!(stride_taus(1000, 4), vec![250, 500, 750, 1000]);
        assert_eq!(stride_taus(1000, 1), vec![1000]);
        let full = stride_taus(1000, 1000);
        assert_eq!(full.len(), 1000);
        assert_eq!(full[0], 1);
        // More steps than the grid supports collapses to the grid.
        let over = stride_taus(10, 25);
        assert!(over.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*over.last().unwrap(), 10);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_ddim_is_noise_free() {
        let cfg = ModelConfig { layers: 1, heads: 2, dim: 16, ff_dim: 24, nmax: 4, bits: 2, time_embed_dim: 8 };
        let model = VectorFieldModel::<f64>::new(cfg, 3).unwrap();
        let sched = NoiseSchedule::linear(100).unwrap();
        let sampler = DiffusionSampler::new(&model, sched, &[0, 1, 2]).unwrap();
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);

        let ddpm = DiffusionSampleConfig { steps: 10, eta: 1.0 };
        let draw = |seed: u64, sc: &DiffusionSampleConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sampler.sample(&mask, sc, &mut rng).unwrap()
        };
        assert_eq!(draw(1, &ddpm).data(), draw(1, &ddpm).data());
        assert_ne!(draw(1, &ddpm).data(), draw(2, &ddpm).data());

        // eta = 0: different rngs, same start state, same output.
        let ddim = DiffusionSampleConfig { steps: 10, eta: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = sampler.initial_state(&mask, &mut rng).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(100);
        let mut r2 = ChaCha8Rng::seed_from_u64(200);
        let a = sampler.sample_from_state(x0.clone(), &mask, &ddim, &mut r1).unwrap();
        let b = sampler.sample_from_state(x0, &mask, &ddim, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn traced_chains_record_every_visited_state() {
        let cfg = ModelConfig { layers: 1, heads: 2, dim: 16, ff_dim: 24, nmax: 4, bits: 2, time_embed_dim: 8 };
        let model = VectorFieldModel::<f64>::new(cfg, 3).unwrap();
        let sched = NoiseSchedule::linear(100).unwrap();
        let sampler = DiffusionSampler::new(&model, sched, &[0, 1, 2]).unwrap();
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let sc = DiffusionSampleConfig { steps: 10, eta: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (out, trace) = sampler.sample_with_trace(&mask, &sc, &mut rng).unwrap();
        assert_eq!(trace.states.len(), 11);
        assert_eq!(trace.times.len(), 11);
        assert_eq!(trace.times[0], 1.0);
        assert_eq!(*trace.times.last().unwrap(), 0.0);
        assert_eq!(trace.states.last().unwrap().data(), out.data());
        let s = trace.straightness();
        assert!(s > 0.0 && s <= 1.0, "straightness {s}");

        // The traced chain visits the same endpoint as the plain one.
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let plain = sampler.sample(&mask, &sc, &mut rng2).unwrap();
        assert_eq!(plain.data(), out.data());
    }

    #[test]
    fn condition_dimensions_survive_the_chain_exactly() {
        let cfg = ModelConfig { layers: 1, heads: 2, dim: 16, ff_dim: 24, nmax: 5, bits: 2, time_embed_dim: 8 };
        let model = VectorFieldModel::<f64>::new(cfg, 7).unwrap();
        let sched = NoiseSchedule::linear(200).unwrap();
        let sampler = DiffusionSampler::new(&model, sched, &[0, 1]).unwrap();
        let x1 = layout_vector(3, cfg.nmax);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = build_mask(TaskKind::GenTypeSize, &x1, &mut rng).unwrap();
        let out = sampler
            .sample(&mask, &DiffusionSampleConfig { steps: 8, eta: 1.0 }, &mut rng)
            .unwrap();
        for (d, &g) in mask.given().iter().enumerate() {
            if g {
                assert_eq!(out.data()[d], mask.values()[d]);
            }
        }
        let dims = out.dims_per_element();
        for d in 3 * dims..out.len() {
            assert_eq!(out.data()[d], 0.0, "padding stays zero");
        }
    }

    #[test]
    fn diffusion_loss_and_grad_are_consistent() {
        let x1 = layout_vector(2, 3);
        let sched = NoiseSchedule::linear(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mask = build_mask(TaskKind::UnGen, &x1, &mut rng).unwrap();
        let sample = make_diffusion_sample(&x1, &mask, &sched, &mut rng).unwrap();
        let lambda = 0.2;
        let eps_hat: Vec<f64> =
            (0..x1.len()).map(|_| f64::standard_normal(&mut rng)).collect();
        let grad = diffusion_loss_grad(&eps_hat, &sample, lambda).unwrap();
        let h = 1e-7;
        for d in 0..eps_hat.len() {
            let mut p = eps_hat.clone();
            let mut m = eps_hat.clone();
            p[d] += h;
            m[d] -= h;
            let fd = (diffusion_loss(&p, &sample, lambda).unwrap().total
                - diffusion_loss(&m, &sample, lambda).unwrap().total)
                / (2.0 * h);
            assert!((fd - grad[d]).abs() < 1e-5, "dim {d}: {fd} vs {}", grad[d]);
        }
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let x1 = layout_vector(2, 2);
        let sched = NoiseSchedule::linear(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mask = build_mask(TaskKind::UnGen, &x1, &mut rng).unwrap();
        let sample = make_diffusion_sample(&x1, &mask, &sched, &mut rng).unwrap();
        let parts = diffusion_loss(&sample.eps_target, &sample, 0.2).unwrap();
        assert_eq!(parts.total, 0.0);
        assert_eq!(parts.mse, 0.0);
        assert_eq!(parts.l1_geo, 0.0);
    }

    #[test]
    fn sample_pins_clean_condition_values() {
        let x1 = layout_vector(3, 4);
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mask = build_mask(TaskKind::GenType, &x1, &mut rng).unwrap();
        let sample = make_diffusion_sample(&x1, &mask, &sched, &mut rng).unwrap();
        let dims = x1.dims_per_element();
        for (d, &g) in mask.given().iter().enumerate() {
            if g {
                assert_eq!(sample.x_t.data()[d], x1.data()[d], "clean value pinned");
                assert!(!sample.loss_mask[d]);
            } else if x1.is_real(d / dims) {
                assert!(sample.loss_mask[d]);
            }
        }
    }
}
