//! Batched training loop over a layout dataset.
//!
//! Determinism contract: a finished run is a pure function of the
//! dataset, the config, and the starting model/optimizer state. Each
//! step derives its randomness from the global step counter, and
//! per-sample seeds are drawn sequentially before the batch fans out to
//! worker threads, so results do not depend on thread count or
//! scheduling. Resuming from a checkpoint at step `k` and training to
//! step `n` reproduces an uninterrupted `n`-step run exactly.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Head};
use crate::conditioning::{build_mask, sample_training_task, ConditionMask};
use crate::data::{layout_to_vector, vector_to_layout, Dataset, Layout};
use crate::diffusion::{
    diffusion_loss, diffusion_loss_grad, make_diffusion_sample, DiffusionSampleConfig,
    DiffusionSampler, NoiseSchedule, DIFFUSION_T_TRAIN,
};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, cfm_loss_grad, make_training_sample, LossParts, TrajectoryKind};
use crate::metrics::{frechet_layout_distance, SetStats};
use crate::model::{ModelParameters, VectorFieldModel};
use crate::optimizer::{AdamState, AdamWConfig};
use crate::prior::{sample_prior, PriorKind};
use crate::sampler::{SampleConfig, Sampler};
use crate::scalar::{s, Scalar};

/// Reference layouts used for periodic evaluation are capped here.
const EVAL_REFERENCE_CAP: usize = 256;
/// Integration/denoising steps used for periodic evaluation draws.
const EVAL_SAMPLE_STEPS: usize = 50;

/// Mixes a base seed with a stream index (splitmix64 finalizer), so each
/// training step and each sample gets an independent, reproducible
/// stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps; a resumed run continues toward this count.
    pub steps: u64,
    pub batch_size: usize,
    /// Weight of the geometry L1 term in the loss.
    pub lambda: f64,
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub prior: PriorKind,
    pub head: Head,
    /// Include the refinement task in the training mix.
    pub train_refinement: bool,
    pub optimizer: AdamWConfig,
    /// Emit a log line every this many steps (0 = only the final step).
    pub log_every: u64,
    /// Run a sampling evaluation every this many steps (0 = never).
    pub eval_every: u64,
    /// Unconditional draws per evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            lambda: 0.2,
            seed: 0,
            trajectory: TrajectoryKind::Linear,
            prior: PriorKind::Gaussian,
            head: Head::Flow,
            train_refinement: false,
            optimizer: AdamWConfig::default(),
            log_every: 50,
            eval_every: 0,
            eval_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("training needs at least one step"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::domain(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.eval_every > 0 && self.eval_samples == 0 {
            return Err(Error::domain("evaluation needs at least one sample"));
        }
        if self.head == Head::Diffusion && self.prior != PriorKind::Gaussian {
            return Err(Error::domain(
                "the diffusion head defines its process on Gaussian noise",
            ));
        }
        self.optimizer.validate()
    }
}

/// Output plumbing: a JSONL log sink and an optional checkpoint file
/// that is rewritten in place every `checkpoint_every` steps and at the
/// end of the run.
#[derive(Default)]
pub struct TrainIo<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_path: Option<&'a Path>,
    pub checkpoint_every: u64,
}

/// One JSONL log record. Loss fields are batch means; the `eval_*`
/// fields appear only on evaluation steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub l1_geo: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_frechet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_alignment: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_overlap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps_done: u64,
    pub last_loss: LossParts,
    /// Samples whose condition left nothing to supervise (e.g. a
    /// completion draw that retained every element).
    pub skipped_samples: u64,
    pub wall_ms_total: f64,
}

enum HeadState {
    Flow,
    Diffusion(NoiseSchedule),
}

/// Runs the training loop, mutating the model and optimizer in place.
/// `opt.step` is the global step counter: pass a fresh state to start
/// from zero or a checkpointed one to resume.
pub fn train<S: Scalar>(
    model: &mut VectorFieldModel<S>,
    opt: &mut AdamState<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    io: &mut TrainIo<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let nmax = model.config.nmax;
    let bits = model.config.bits;
    if dataset.max_elements() > nmax {
        return Err(Error::domain(format!(
            "dataset holds layouts with {} elements, model fits {nmax}",
            dataset.max_elements()
        )));
    }
    if dataset.categories().bits() != bits {
        return Err(Error::contract(format!(
            "dataset categories need {} analog bits, model carries {bits}",
            dataset.categories().bits()
        )));
    }
    let head = match cfg.head {
        Head::Flow => HeadState::Flow,
        Head::Diffusion => HeadState::Diffusion(NoiseSchedule::linear(DIFFUSION_T_TRAIN)?),
    };

    // Encode once: every step draws from these by index.
    let encoded: Vec<crate::data::FlowVector<S>> = dataset
        .layouts()
        .iter()
        .map(|l| layout_to_vector(l, dataset.categories(), nmax))
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let mut last_loss = LossParts { total: 0.0, mse: 0.0, l1_geo: 0.0 };
    let mut skipped_total = 0u64;

    while opt.step < cfg.steps {
        let step_start = Instant::now();
        let step = opt.step;
        let mut step_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step));
        let sample_seeds: Vec<u64> =
            (0..cfg.batch_size).map(|_| step_rng.random()).collect();

        let results: Vec<Result<Option<(LossParts, ModelParameters<S>)>>> = sample_seeds
            .par_iter()
            .map(|&sample_seed| one_sample(model, &encoded, cfg, &head, sample_seed))
            .collect();

        let mut sum = LossParts { total: 0.0, mse: 0.0, l1_geo: 0.0 };
        let mut grads = ModelParameters::<S>::zeros(&model.config);
        let mut used = 0usize;
        for res in results {
            match res? {
                None => skipped_total += 1,
                Some((loss, g)) => {
                    sum.total += loss.total;
                    sum.mse += loss.mse;
                    sum.l1_geo += loss.l1_geo;
                    grads.add_assign(&g);
                    used += 1;
                }
            }
        }
        // A fully skipped batch still counts as a (decay-only) step so
        // the loop always terminates; the loss means stay at zero.
        if used > 0 {
            let inv = s::<S>(1.0 / used as f64);
            grads.scale(inv);
            sum.total /= used as f64;
            sum.mse /= used as f64;
            sum.l1_geo /= used as f64;
        }
        if !(sum.total.is_finite() && sum.mse.is_finite() && sum.l1_geo.is_finite()) {
            return Err(Error::numeric(format!(
                "loss diverged at step {step} (total {}); the last written checkpoint is intact",
                sum.total
            )));
        }
        opt.apply(&mut model.params, &grads, &cfg.optimizer)?;
        let done = opt.step;
        last_loss = sum;

        let eval = if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            Some(run_eval(model, dataset, cfg, &head, done)?)
        } else {
            None
        };
        if let Some(log) = io.log.as_deref_mut() {
            let should_log = done == cfg.steps
                || (cfg.log_every > 0 && done % cfg.log_every == 0)
                || eval.is_some();
            if should_log {
                let entry = LogEntry {
                    step: done,
                    loss: sum.total,
                    mse: sum.mse,
                    l1_geo: sum.l1_geo,
                    wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
                    eval_frechet: eval.map(|e| e.0),
                    eval_alignment: eval.map(|e| e.1),
                    eval_overlap: eval.map(|e| e.2),
                };
                writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            }
        }
        if let Some(path) = io.checkpoint_path {
            if io.checkpoint_every > 0 && done % io.checkpoint_every == 0 && done != cfg.steps {
                write_checkpoint(model, opt, dataset, cfg, path)?;
            }
        }
    }

    if let Some(path) = io.checkpoint_path {
        write_checkpoint(model, opt, dataset, cfg, path)?;
    }
    Ok(TrainReport {
        steps_done: opt.step,
        last_loss,
        skipped_samples: skipped_total,
        wall_ms_total: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One sample's loss and parameter gradients, or `None` when the drawn
/// condition leaves nothing to supervise.
fn one_sample<S: Scalar>(
    model: &VectorFieldModel<S>,
    encoded: &[crate::data::FlowVector<S>],
    cfg: &TrainConfig,
    head: &HeadState,
    sample_seed: u64,
) -> Result<Option<(LossParts, ModelParameters<S>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let x1 = &encoded[rng.random_range(0..encoded.len())];
    let task = sample_training_task(&mut rng, cfg.train_refinement);
    let mask = build_mask(task, x1, &mut rng)?;
    match head {
        HeadState::Flow => {
            let x0 = sample_prior::<S, _>(cfg.prior, x1.nmax(), x1.bits(), &mut rng)?;
            let t = S::unit_uniform(&mut rng);
            let sample = make_training_sample(&x0, x1, t, &mask, cfg.trajectory)?;
            if !sample.loss_mask.iter().any(|&m| m) {
                return Ok(None);
            }
            let (u, trace) = model.forward(&sample.x_t, sample.t, &mask)?;
            let loss = cfm_loss(&u, &sample, cfg.lambda)?;
            let d_out = cfm_loss_grad(&u, &sample, cfg.lambda)?;
            let grads = model.backward(&trace, &d_out)?;
            Ok(Some((loss, grads)))
        }
        HeadState::Diffusion(schedule) => {
            let sample = make_diffusion_sample(x1, &mask, schedule, &mut rng)?;
            if !sample.loss_mask.iter().any(|&m| m) {
                return Ok(None);
            }
            let t = schedule.model_time::<S>(sample.tau);
            let (eps_hat, trace) = model.forward(&sample.x_t, t, &mask)?;
            let loss = diffusion_loss(&eps_hat, &sample, cfg.lambda)?;
            let d_out = diffusion_loss_grad(&eps_hat, &sample, cfg.lambda)?;
            let grads = model.backward(&trace, &d_out)?;
            Ok(Some((loss, grads)))
        }
    }
}

/// Draws `eval_samples` unconditional layouts and compares them with a
/// slice of the training set: (Fréchet distance, alignment, overlap).
fn run_eval<S: Scalar>(
    model: &VectorFieldModel<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    head: &HeadState,
    step: u64,
) -> Result<(f64, f64, f64)> {
    // Stream indices with the top bit set never collide with training
    // steps.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, (1 << 63) | step));
    let mask = ConditionMask::<S>::un_gen(model.config.nmax, model.config.bits);
    let mut generated = Vec::with_capacity(cfg.eval_samples);
    match head {
        HeadState::Flow => {
            let sampler = Sampler::new(model, cfg.prior, dataset.histogram())?;
            let sc = SampleConfig { steps: EVAL_SAMPLE_STEPS, ..SampleConfig::default() };
            for _ in 0..cfg.eval_samples {
                let v = sampler.sample(&mask, &sc, &mut rng)?;
                generated.push(vector_to_layout(&v, dataset.categories())?);
            }
        }
        HeadState::Diffusion(schedule) => {
            let sampler = DiffusionSampler::new(model, schedule.clone(), dataset.histogram())?;
            let sc = DiffusionSampleConfig { steps: EVAL_SAMPLE_STEPS, eta: 1.0 };
            for _ in 0..cfg.eval_samples {
                let v = sampler.sample(&mask, &sc, &mut rng)?;
                generated.push(vector_to_layout(&v, dataset.categories())?);
            }
        }
    }
    let reference: Vec<Layout> =
        dataset.layouts().iter().take(EVAL_REFERENCE_CAP).cloned().collect();
    let frechet = frechet_layout_distance(
        &generated,
        &reference,
        model.config.nmax,
        dataset.categories().len(),
    )?;
    let stats = SetStats::of(&generated);
    Ok((frechet, stats.alignment, stats.overlap))
}

fn write_checkpoint<S: Scalar>(
    model: &VectorFieldModel<S>,
    opt: &AdamState<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    Checkpoint::new(
        cfg.head,
        model,
        cfg.prior,
        cfg.trajectory,
        dataset.categories(),
        dataset.histogram(),
        opt.step,
        Some(opt),
    )?
    .save(path)
}
