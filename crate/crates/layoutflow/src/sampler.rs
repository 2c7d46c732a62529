//! Inference: integrate the learned field from prior noise at `t = 0` to
//! a layout at `t = 1`.
//!
//! Conditioning comes in two flavors. The default masking mode passes the
//! condition mask to the network (which was trained to see it) and
//! re-pins the given dimensions after every integrator sub-step, so
//! condition values are bit-exact in the result. The trajectory mode is
//! for unconditionally trained fields: the network sees a neutral mask
//! and the predicted field is overridden on condition dimensions with a
//! pull toward the condition for the first 80% of the steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{inference_condition_update, ConditionMask};
use crate::data::FlowVector;
use crate::error::{Error, Result};
use crate::model::VectorFieldModel;
use crate::prior::{sample_prior, PriorKind};
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// First order: one field evaluation per step.
    Euler,
    /// Second order predictor-corrector: two evaluations per step.
    Heun,
}

impl SolverKind {
    pub const ALL: [SolverKind; 2] = [SolverKind::Euler, SolverKind::Heun];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Number of uniform integration steps from 0 to 1.
    pub steps: usize,
    pub solver: SolverKind,
    /// Condition through field replacement instead of mask input and
    /// pinning (for unconditionally trained models).
    pub trajectory_conditioning: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 100, solver: SolverKind::Euler, trajectory_conditioning: false }
    }
}

/// Every intermediate state of one integration, for inspection.
#[derive(Debug, Clone)]
pub struct TrajectoryTrace<S> {
    /// `steps + 1` times from 0 to 1.
    pub times: Vec<f64>,
    /// State at each time, starting with the prior draw.
    pub states: Vec<FlowVector<S>>,
    /// Dimensions the flow actually moved: real element and not given.
    pub free_mask: Vec<bool>,
}

/// Mean absolute movement of the free dimensions in one step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceStepStats {
    pub step: usize,
    pub t: f64,
    pub mean_abs_step: f64,
}

impl<S: Scalar> TrajectoryTrace<S> {
    pub fn step_stats(&self) -> Vec<TraceStepStats> {
        let n_free = self.free_mask.iter().filter(|&&f| f).count().max(1);
        self.states
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let sum: f64 = self
                    .free_mask
                    .iter()
                    .enumerate()
                    .filter(|&(_, &f)| f)
                    .map(|(d, _)| (w[1].data()[d] - w[0].data()[d]).as_f64().abs())
                    .sum();
                TraceStepStats { step: k, t: self.times[k], mean_abs_step: sum / n_free as f64 }
            })
            .collect()
    }

    /// Net displacement over path length, averaged over free dimensions;
    /// 1.0 means every free dimension moved on a straight line.
    pub fn straightness(&self) -> f64 {
        let first = match self.states.first() {
            Some(f) => f,
            None => return 1.0,
        };
        let last = self.states.last().expect("trace holds at least one state");
        let mut ratios = Vec::new();
        for (d, &free) in self.free_mask.iter().enumerate() {
            if !free {
                continue;
            }
            let net = (last.data()[d] - first.data()[d]).as_f64().abs();
            let path: f64 = self
                .states
                .windows(2)
                .map(|w| (w[1].data()[d] - w[0].data()[d]).as_f64().abs())
                .sum();
            if path > 1e-12 {
                ratios.push(net / path);
            }
        }
        if ratios.is_empty() {
            1.0
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        }
    }
}

/// Field integrator bound to a trained model.
pub struct Sampler<'a, S> {
    model: &'a VectorFieldModel<S>,
    prior: PriorKind,
    element_histogram: Vec<usize>,
}

impl<'a, S: Scalar> Sampler<'a, S> {
    /// `element_histogram[n]` weights the element count `n` for
    /// unconditional draws (usually the training data histogram).
    pub fn new(
        model: &'a VectorFieldModel<S>,
        prior: PriorKind,
        element_histogram: &[usize],
    ) -> Result<Self> {
        if element_histogram.len() > model.config.nmax + 1 {
            return Err(Error::contract(format!(
                "histogram reaches {} elements, model fits {}",
                element_histogram.len() - 1,
                model.config.nmax
            )));
        }
        if element_histogram.iter().skip(1).sum::<usize>() == 0 {
            return Err(Error::contract("element histogram is empty"));
        }
        Ok(Sampler { model, prior, element_histogram: element_histogram.to_vec() })
    }

    pub fn prior(&self) -> PriorKind {
        self.prior
    }

    /// Draws an element count proportionally to the histogram.
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

    /// Prior draw shaped for `mask`: the mask's element pattern when it
    /// has one, otherwise the first `n` slots with `n` drawn from the
    /// histogram.
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
        let full = sample_prior::<S, _>(self.prior, cfg.nmax, cfg.bits, rng)?;
        FlowVector::new(full.data().to_vec(), pads, cfg.bits)
    }

    /// Draw a layout vector. Same seed, config and mask give bit-identical
    /// results.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mask: &ConditionMask<S>,
        cfg: &SampleConfig,
        rng: &mut R,
    ) -> Result<FlowVector<S>> {
        let x0 = self.initial_state(mask, rng)?;
        self.sample_from_state(x0, mask, cfg)
    }

    pub fn sample_with_trace<R: Rng + ?Sized>(
        &self,
        mask: &ConditionMask<S>,
        cfg: &SampleConfig,
        rng: &mut R,
    ) -> Result<(FlowVector<S>, TrajectoryTrace<S>)> {
        let x0 = self.initial_state(mask, rng)?;
        self.integrate(x0, mask, cfg, true)
    }

    /// Integration from an explicit start state (deterministic).
    pub fn sample_from_state(
        &self,
        x0: FlowVector<S>,
        mask: &ConditionMask<S>,
        cfg: &SampleConfig,
    ) -> Result<FlowVector<S>> {
        Ok(self.integrate(x0, mask, cfg, false)?.0)
    }

    pub fn trace_from_state(
        &self,
        x0: FlowVector<S>,
        mask: &ConditionMask<S>,
        cfg: &SampleConfig,
    ) -> Result<(FlowVector<S>, TrajectoryTrace<S>)> {
        self.integrate(x0, mask, cfg, true)
    }

    fn integrate(
        &self,
        mut x: FlowVector<S>,
        mask: &ConditionMask<S>,
        cfg: &SampleConfig,
        keep_trace: bool,
    ) -> Result<(FlowVector<S>, TrajectoryTrace<S>)> {
        if cfg.steps == 0 {
            return Err(Error::domain("sampling needs at least one step"));
        }
        if !mask.matches(&x) {
            return Err(Error::contract("mask shape differs from the start state"));
        }
        let total = cfg.steps;
        let h = s::<S>(1.0 / total as f64);
        let half_h = h * s::<S>(0.5);
        let dims = x.dims_per_element();
        let neutral = if cfg.trajectory_conditioning {
            let mut m = ConditionMask::un_gen(x.nmax(), x.bits());
            m.pad_mask = x.pad_mask().to_vec();
            Some(m)
        } else {
            None
        };
        let free_mask: Vec<bool> =
            (0..x.len()).map(|d| x.is_real(d / dims) && !mask.is_given(d)).collect();

        if neutral.is_none() {
            mask.pin(&mut x);
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        if keep_trace {
            times.push(0.0);
            states.push(x.clone());
        }

        for k in 0..total {
            let t_k = s::<S>(k as f64 / total as f64);
            let t_next = if k + 1 == total { S::one() } else { s::<S>((k + 1) as f64 / total as f64) };
            let u1 = self.field(&x, t_k, mask, neutral.as_ref(), k, total)?;
            match cfg.solver {
                SolverKind::Euler => {
                    let data = x.data_mut();
                    for (xi, ui) in data.iter_mut().zip(&u1) {
                        *xi += h * *ui;
                    }
                }
                SolverKind::Heun => {
                    let mut xp = x.clone();
                    {
                        let data = xp.data_mut();
                        for (xi, ui) in data.iter_mut().zip(&u1) {
                            *xi += h * *ui;
                        }
                    }
                    if neutral.is_none() {
                        mask.pin(&mut xp);
                    }
                    let u2 = self.field(&xp, t_next, mask, neutral.as_ref(), k, total)?;
                    let data = x.data_mut();
                    for (i, xi) in data.iter_mut().enumerate() {
                        *xi += half_h * (u1[i] + u2[i]);
                    }
                }
            }
            if neutral.is_none() {
                mask.pin(&mut x);
            }
            if keep_trace {
                times.push((k + 1) as f64 / total as f64);
                states.push(x.clone());
            }
        }

        if !x.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("integration produced non-finite values"));
        }
        let trace = TrajectoryTrace { times, states, free_mask };
        Ok((x, trace))
    }

    /// One field evaluation, with the conditioning mode applied.
    fn field(
        &self,
        x: &FlowVector<S>,
        t: S,
        mask: &ConditionMask<S>,
        neutral: Option<&ConditionMask<S>>,
        step: usize,
        total: usize,
    ) -> Result<Vec<S>> {
        match neutral {
            Some(neutral) => {
                let (u, _) = self.model.forward(x, t, neutral)?;
                inference_condition_update(&u, x, mask, step, total)
            }
            None => {
                let (u, _) = self.model.forward(x, t, mask)?;
                Ok(u)
            }
        }
    }
}
