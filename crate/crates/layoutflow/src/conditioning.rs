//! Conditional generation tasks and their dimension masks.
//!
//! Every task is expressed as a [`ConditionMask`]: per-dimension `given`
//! flags, the condition values for those dimensions, and per-element
//! embedding flags (`m_pos`, `m_type`) that tell the network which
//! channels carry condition content. Condition dimensions are pinned to
//! their values along the whole trajectory and excluded from the loss;
//! free dimensions are what the flow generates.
//!
//! Refinement is the odd one out: nothing is pinned and the loss covers
//! every dimension, but a noisy copy of the layout rides along in
//! `values` and is routed into the element embeddings as side input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FlowVector, GEOMETRY_DIMS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry noise scale for the refinement task.
pub const DEFAULT_REFINEMENT_SIGMA: f64 = 0.01;

/// Fraction of solver steps during which trajectory conditioning steers
/// toward the condition (the tail runs free).
pub const TRAJECTORY_GUIDANCE_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Unconditional generation.
    #[serde(rename = "un-gen")]
    UnGen,
    /// Category of every element is given.
    #[serde(rename = "gen-type")]
    GenType,
    /// Category and size of every element are given.
    #[serde(rename = "gen-typesize")]
    GenTypeSize,
    /// A subset of elements is fully given; the rest are generated.
    #[serde(rename = "completion")]
    Completion,
    /// A noisy layout is supplied as side input; everything stays free.
    #[serde(rename = "refinement")]
    Refinement,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::UnGen => "un-gen",
            TaskKind::GenType => "gen-type",
            TaskKind::GenTypeSize => "gen-typesize",
            TaskKind::Completion => "completion",
            TaskKind::Refinement => "refinement",
        }
    }
}

/// Which elements the completion task keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionVariant {
    /// Keep 80-100% of the elements (generate the small remainder).
    MostlyGiven,
    /// Keep 0-20% of the elements (generate almost everything).
    MostlyMissing,
}

/// A task instance over one layout slot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMask<S> {
    pub task: TaskKind,
    pub(crate) bits: usize,
    /// Real-element flags; all-false means "element count decided at
    /// sampling time" (unconditional generation).
    pub(crate) pad_mask: Vec<bool>,
    /// Per-dimension condition flags, element-major like the vectors.
    pub(crate) given: Vec<bool>,
    /// Condition values for given dimensions (zero elsewhere). For
    /// refinement this instead holds the noisy side-input layout.
    pub(crate) values: Vec<S>,
    /// Per-element flag: geometry channel carries condition content.
    pub(crate) m_pos: Vec<bool>,
    /// Per-element flag: type channel carries condition content.
    pub(crate) m_type: Vec<bool>,
}

impl<S: Scalar> ConditionMask<S> {
    /// Unconditional mask for inference; the sampler draws the element
    /// count from the checkpoint histogram.
    pub fn un_gen(nmax: usize, bits: usize) -> Self {
        let dims = (GEOMETRY_DIMS + bits) * nmax;
        ConditionMask {
            task: TaskKind::UnGen,
            bits,
            pad_mask: vec![false; nmax],
            given: vec![false; dims],
            values: vec![S::zero(); dims],
            m_pos: vec![false; nmax],
            m_type: vec![false; nmax],
        }
    }

    pub fn nmax(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dims_per_element(&self) -> usize {
        GEOMETRY_DIMS + self.bits
    }

    /// Real-element flags carried over from the conditioning layout.
    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn has_elements(&self) -> bool {
        self.pad_mask.iter().any(|&m| m)
    }

    pub fn given(&self) -> &[bool] {
        &self.given
    }

    pub fn is_given(&self, dim: usize) -> bool {
        self.given[dim]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn m_pos(&self) -> &[bool] {
        &self.m_pos
    }

    pub fn m_type(&self) -> &[bool] {
        &self.m_type
    }

    /// True when `values` is side input for the embeddings rather than
    /// pinned ground truth (the refinement task).
    pub fn routes_values(&self) -> bool {
        self.task == TaskKind::Refinement
    }

    /// Overwrites the given dimensions of `x` with the condition values.
    pub fn pin(&self, x: &mut FlowVector<S>) {
        let data = x.data_mut();
        for (d, &g) in self.given.iter().enumerate() {
            if g {
                data[d] = self.values[d];
            }
        }
    }

    /// Free-dimension flags: real element and not given.
    pub fn free_dims(&self) -> Vec<bool> {
        let dims = self.dims_per_element();
        (0..self.given.len())
            .map(|d| self.pad_mask[d / dims] && !self.given[d])
            .collect()
    }

    pub fn matches(&self, x: &FlowVector<S>) -> bool {
        self.nmax() == x.nmax() && self.bits == x.bits()
    }
}

/// Draws a task uniformly from the training mix. Refinement joins the
/// mix only when requested.
pub fn sample_training_task<R: Rng + ?Sized>(rng: &mut R, include_refinement: bool) -> TaskKind {
    const BASE: [TaskKind; 4] = [
        TaskKind::UnGen,
        TaskKind::GenType,
        TaskKind::GenTypeSize,
        TaskKind::Completion,
    ];
    if include_refinement {
        const ALL: [TaskKind; 5] = [
            TaskKind::UnGen,
            TaskKind::GenType,
            TaskKind::GenTypeSize,
            TaskKind::Completion,
            TaskKind::Refinement,
        ];
        ALL[rng.random_range(0..ALL.len())]
    } else {
        BASE[rng.random_range(0..BASE.len())]
    }
}

/// Builds the mask for `task` against the complete layout vector `x1`.
/// Completion uses the mostly-given variant; see
/// [`build_completion_mask`] for the supplementary mostly-missing one.
pub fn build_mask<S: Scalar, R: Rng + ?Sized>(
    task: TaskKind,
    x1: &FlowVector<S>,
    rng: &mut R,
) -> Result<ConditionMask<S>> {
    match task {
        TaskKind::UnGen => {
            let mut mask = ConditionMask::un_gen(x1.nmax(), x1.bits());
            mask.pad_mask = x1.pad_mask().to_vec();
            Ok(mask)
        }
        TaskKind::GenType => Ok(per_element_mask(x1, false)),
        TaskKind::GenTypeSize => Ok(per_element_mask(x1, true)),
        TaskKind::Completion => build_completion_mask(x1, CompletionVariant::MostlyGiven, rng),
        TaskKind::Refinement => refinement_mask(x1, DEFAULT_REFINEMENT_SIGMA, rng),
    }
}

/// Marks category bits (and, when `with_size`, the `w`/`h` dims) of
/// every real element as given, copying the values from `x1`.
fn per_element_mask<S: Scalar>(x1: &FlowVector<S>, with_size: bool) -> ConditionMask<S> {
    let nmax = x1.nmax();
    let dims = x1.dims_per_element();
    let mut mask = ConditionMask::un_gen(nmax, x1.bits());
    mask.task = if with_size { TaskKind::GenTypeSize } else { TaskKind::GenType };
    mask.pad_mask = x1.pad_mask().to_vec();
    for slot in 0..nmax {
        if !x1.is_real(slot) {
            continue;
        }
        mask.m_type[slot] = true;
        mask.m_pos[slot] = with_size;
        let base = slot * dims;
        for d in GEOMETRY_DIMS..dims {
            mask.given[base + d] = true;
        }
        if with_size {
            mask.given[base + 2] = true; // w
            mask.given[base + 3] = true; // h
        }
    }
    copy_given_values(&mut mask, x1);
    mask
}

/// Completion: a uniformly drawn subset of elements is fully given. The
/// mostly-given variant keeps 80-100% of the elements, the mostly-missing
/// one 0-20%.
pub fn build_completion_mask<S: Scalar, R: Rng + ?Sized>(
    x1: &FlowVector<S>,
    variant: CompletionVariant,
    rng: &mut R,
) -> Result<ConditionMask<S>> {
    let real: Vec<usize> = (0..x1.nmax()).filter(|&k| x1.is_real(k)).collect();
    let n = real.len();
    if n == 0 {
        return Err(Error::domain("completion needs a non-empty layout"));
    }
    let retained = match variant {
        CompletionVariant::MostlyGiven => {
            let lo = (0.8 * n as f64).ceil() as usize;
            rng.random_range(lo..=n)
        }
        CompletionVariant::MostlyMissing => {
            let hi = (0.2 * n as f64).floor() as usize;
            rng.random_range(0..=hi)
        }
    };
    // Partial Fisher-Yates over the real slots picks the retained set.
    let mut pool = real;
    for i in 0..retained.min(n.saturating_sub(1)) {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let dims = x1.dims_per_element();
    let mut mask = ConditionMask::un_gen(x1.nmax(), x1.bits());
    mask.task = TaskKind::Completion;
    mask.pad_mask = x1.pad_mask().to_vec();
    for &slot in &pool[..retained] {
        mask.m_pos[slot] = true;
        mask.m_type[slot] = true;
        for d in 0..dims {
            mask.given[slot * dims + d] = true;
        }
    }
    copy_given_values(&mut mask, x1);
    Ok(mask)
}

/// Completion mask with an explicit retained set (the inference path:
/// the caller says which slots to keep). Retained slots must be real.
pub fn completion_mask_for<S: Scalar>(
    x1: &FlowVector<S>,
    retained: &[usize],
) -> Result<ConditionMask<S>> {
    let dims = x1.dims_per_element();
    let mut mask = ConditionMask::un_gen(x1.nmax(), x1.bits());
    mask.task = TaskKind::Completion;
    mask.pad_mask = x1.pad_mask().to_vec();
    for &slot in retained {
        if slot >= x1.nmax() || !x1.is_real(slot) {
            return Err(Error::domain(format!("retained slot {slot} is not a real element")));
        }
        mask.m_pos[slot] = true;
        mask.m_type[slot] = true;
        for d in 0..dims {
            mask.given[slot * dims + d] = true;
        }
    }
    copy_given_values(&mut mask, x1);
    Ok(mask)
}

/// Adds `N(0, sigma^2)` noise to the geometry of every real element,
/// leaving analog bits and padding untouched. Returns a full-length
/// values vector.
pub fn perturb_for_refinement<S: Scalar, R: Rng + ?Sized>(
    x1: &FlowVector<S>,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<S>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::domain(format!("refinement sigma {sigma} must be >= 0")));
    }
    let dims = x1.dims_per_element();
    let mut values = x1.data().to_vec();
    let sig = crate::scalar::s::<S>(sigma);
    for slot in 0..x1.nmax() {
        if !x1.is_real(slot) {
            continue;
        }
        for d in 0..GEOMETRY_DIMS {
            values[slot * dims + d] += sig * S::standard_normal(rng);
        }
    }
    Ok(values)
}

fn refinement_mask<S: Scalar, R: Rng + ?Sized>(
    x1: &FlowVector<S>,
    sigma: f64,
    rng: &mut R,
) -> Result<ConditionMask<S>> {
    let mut mask = ConditionMask::un_gen(x1.nmax(), x1.bits());
    mask.task = TaskKind::Refinement;
    mask.pad_mask = x1.pad_mask().to_vec();
    mask.values = perturb_for_refinement(x1, sigma, rng)?;
    // Nothing is pinned, but the embedding flags mark the side input so
    // the network can tell a refinement draw from a plain one.
    for slot in 0..x1.nmax() {
        if x1.is_real(slot) {
            mask.m_pos[slot] = true;
            mask.m_type[slot] = true;
        }
    }
    Ok(mask)
}

/// Builds a refinement mask around an explicit noisy layout vector (the
/// inference path: the caller has only the coarse layout).
pub fn refinement_mask_from_noisy<S: Scalar>(noisy: &FlowVector<S>) -> ConditionMask<S> {
    let mut mask = ConditionMask::un_gen(noisy.nmax(), noisy.bits());
    mask.task = TaskKind::Refinement;
    mask.pad_mask = noisy.pad_mask().to_vec();
    mask.values = noisy.data().to_vec();
    for slot in 0..noisy.nmax() {
        if noisy.is_real(slot) {
            mask.m_pos[slot] = true;
            mask.m_type[slot] = true;
        }
    }
    mask
}

fn copy_given_values<S: Scalar>(mask: &mut ConditionMask<S>, x1: &FlowVector<S>) {
    for (d, &g) in mask.given.iter().enumerate() {
        if g {
            mask.values[d] = x1.data()[d];
        }
    }
}

/// Trajectory conditioning: while `step < 0.8 * total_steps`, condition
/// dimensions of the predicted field are replaced by the pull
/// `values - x`, steering the state toward the condition; afterwards the
/// field passes through untouched. Used with unconditionally trained
/// models as the masking alternative.
pub fn inference_condition_update<S: Scalar>(
    u: &[S],
    x: &FlowVector<S>,
    mask: &ConditionMask<S>,
    step: usize,
    total_steps: usize,
) -> Result<Vec<S>> {
    if u.len() != x.len() || !mask.matches(x) {
        return Err(Error::contract("field/state/mask shapes differ"));
    }
    if total_steps == 0 {
        return Err(Error::domain("total_steps must be positive"));
    }
    let guided = (step as f64) < TRAJECTORY_GUIDANCE_FRACTION * total_steps as f64;
    if !guided {
        return Ok(u.to_vec());
    }
    Ok(u.iter()
        .enumerate()
        .map(|(d, &ud)| {
            if mask.is_given(d) {
                mask.values()[d] - x.data()[d]
            } else {
                ud
            }
        })
        .collect())
}
