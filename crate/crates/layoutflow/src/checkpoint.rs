//! Self-contained JSON checkpoints.
//!
//! A checkpoint carries everything needed to resume training or run
//! inference: the head kind, model shape, prior and trajectory choices,
//! the category vocabulary, the element-count histogram of the training
//! data (used to draw layout sizes for unconditional sampling), the step
//! counter, the flattened parameters in canonical tensor order, and
//! optionally the optimizer moments. Parameters are widened to `f64` on
//! save, so an `f32` model round-trips exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CategorySet;
use crate::error::{Error, Result};
use crate::flow::TrajectoryKind;
use crate::model::{ModelConfig, ModelParameters, VectorFieldModel};
use crate::optimizer::AdamState;
use crate::prior::PriorKind;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "layoutflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which generative head the parameters drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Flow matching: the network predicts a velocity field.
    Flow,
    /// Denoising baseline: the network predicts the added noise.
    Diffusion,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Flow => "flow",
            Head::Diffusion => "diffusion",
        }
    }
}

/// Optimizer moments, flattened like `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub head: Head,
    pub model: ModelConfig,
    pub prior: PriorKind,
    pub trajectory: TrajectoryKind,
    pub categories: Vec<String>,
    /// `element_histogram[n]` counts training layouts with `n` elements.
    pub element_histogram: Vec<u64>,
    pub step: u64,
    /// Parameters in canonical tensor order, widened to `f64`.
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        head: Head,
        model: &VectorFieldModel<S>,
        prior: PriorKind,
        trajectory: TrajectoryKind,
        categories: &CategorySet,
        element_histogram: &[usize],
        step: u64,
        opt: Option<&AdamState<S>>,
    ) -> Result<Self> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            head,
            model: model.config,
            prior,
            trajectory,
            categories: categories.names().to_vec(),
            element_histogram: element_histogram.iter().map(|&c| c as u64).collect(),
            step,
            params: model.params.to_flat_f64(),
            opt: opt.map(|state| OptimizerSnapshot {
                m: state.m.to_flat_f64(),
                v: state.v.to_flat_f64(),
            }),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::format(format!(
                "not a {CHECKPOINT_FORMAT} file (format field is {:?})",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} unsupported (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        let cats = CategorySet::new(self.categories.clone())?;
        if cats.bits() != self.model.bits {
            return Err(Error::format(format!(
                "{} categories need {} analog bits, model has {}",
                cats.len(),
                cats.bits(),
                self.model.bits
            )));
        }
        if self.head == Head::Diffusion && self.prior != PriorKind::Gaussian {
            return Err(Error::format("diffusion checkpoints require the gaussian prior"));
        }
        if self.element_histogram.len() > self.model.nmax + 1 {
            return Err(Error::format(format!(
                "histogram covers up to {} elements, model fits {}",
                self.element_histogram.len().saturating_sub(1),
                self.model.nmax
            )));
        }
        if self.element_histogram.iter().skip(1).all(|&c| c == 0) {
            return Err(Error::format("element histogram holds no non-empty layouts"));
        }
        if self.element_histogram.first().is_some_and(|&c| c > 0) {
            return Err(Error::format("element histogram counts empty layouts"));
        }
        let expected = ModelParameters::<f64>::zeros(&self.model).num_params();
        if self.params.len() != expected {
            return Err(Error::format(format!(
                "checkpoint holds {} parameters, model shape needs {expected}",
                self.params.len()
            )));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::format("checkpoint contains non-finite parameters"));
        }
        if let Some(opt) = &self.opt {
            if opt.m.len() != expected || opt.v.len() != expected {
                return Err(Error::format("optimizer moments do not match the parameter count"));
            }
        }
        Ok(())
    }

    pub fn to_model<S: Scalar>(&self) -> Result<VectorFieldModel<S>> {
        let params = ModelParameters::<S>::from_flat_f64(&self.model, &self.params)?;
        VectorFieldModel::from_parts(self.model, params)
    }

    /// Rebuilds the optimizer state; the step counter continues from the
    /// checkpoint so bias correction stays consistent across a resume.
    pub fn optimizer_state<S: Scalar>(&self) -> Result<Option<AdamState<S>>> {
        match &self.opt {
            None => Ok(None),
            Some(snapshot) => Ok(Some(AdamState {
                m: ModelParameters::from_flat_f64(&self.model, &snapshot.m)?,
                v: ModelParameters::from_flat_f64(&self.model, &snapshot.v)?,
                step: self.step,
            })),
        }
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        CategorySet::new(self.categories.clone())
    }

    pub fn histogram_usize(&self) -> Vec<usize> {
        self.element_histogram.iter().map(|&c| c as usize).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::format(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("malformed checkpoint {}: {e}", path.display())))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
