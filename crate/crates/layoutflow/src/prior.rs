//! Source distributions the flow transports to the data distribution.
//!
//! Three priors are supported: all-Gaussian, all-uniform (geometry on
//! `[0, 1]`, analog bits on `[-1, 1]`), and a mixture that keeps the
//! Gaussian for geometry but draws analog bits uniformly from their
//! natural range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FlowVector, GEOMETRY_DIMS};
use crate::error::Result;
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Every dimension from `N(0, 1)`.
    #[default]
    Gaussian,
    /// Geometry from `U[0, 1]`, analog bits from `U[-1, 1]`.
    Uniform,
    /// Geometry from `N(0, 1)`, analog bits from `U[-1, 1]`.
    Mixture,
}

impl PriorKind {
    pub const ALL: [PriorKind; 3] = [PriorKind::Gaussian, PriorKind::Uniform, PriorKind::Mixture];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Gaussian => "gaussian",
            PriorKind::Uniform => "uniform",
            PriorKind::Mixture => "mixture",
        }
    }
}

/// Draws a source vector with every slot marked real; callers narrow the
/// padding mask to match their data.
pub fn sample_prior<S: Scalar, R: Rng + ?Sized>(
    kind: PriorKind,
    nmax: usize,
    bits: usize,
    rng: &mut R,
) -> Result<FlowVector<S>> {
    let mut v = FlowVector::<S>::zeros(nmax, bits)?;
    let dims = v.dims_per_element();
    let data = v.data_mut();
    for slot in 0..nmax {
        for d in 0..dims {
            let geometry = d < GEOMETRY_DIMS;
            data[slot * dims + d] = match (kind, geometry) {
                (PriorKind::Gaussian, _) | (PriorKind::Mixture, true) => S::standard_normal(rng),
                (PriorKind::Uniform, true) => S::uniform(S::zero(), S::one(), rng),
                (PriorKind::Uniform, false) | (PriorKind::Mixture, false) => {
                    S::uniform(s(-1.0), S::one(), rng)
                }
            };
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split_moments(kind: PriorKind, draws: usize) -> ((f64, f64), (f64, f64), (f64, f64)) {
        // Returns (mean, var) for geometry dims and bounds+moments for bits.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut geo = Vec::new();
        let mut bits = Vec::new();
        for _ in 0..draws {
            let v = sample_prior::<f64, _>(kind, 4, 2, &mut rng).unwrap();
            for slot in 0..4 {
                let e = v.element(slot);
                geo.extend_from_slice(&e[..4]);
                bits.extend_from_slice(&e[4..]);
            }
        }
        let stats = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            (mean, var)
        };
        let bounds = |xs: &[f64]| {
            xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
        };
        (stats(&geo), stats(&bits), bounds(&bits))
    }

    #[test]
    fn gaussian_prior_moments() {
        let ((gm, gv), (bm, bv), _) = split_moments(PriorKind::Gaussian, 2_000);
        assert!(gm.abs() < 0.02 && (gv - 1.0).abs() < 0.03, "geometry {gm} {gv}");
        assert!(bm.abs() < 0.02 && (bv - 1.0).abs() < 0.03, "bits {bm} {bv}");
    }

    #[test]
    fn uniform_prior_ranges_and_moments() {
        let ((gm, gv), (bm, bv), (blo, bhi)) = split_moments(PriorKind::Uniform, 2_000);
        assert!((gm - 0.5).abs() < 0.01 && (gv - 1.0 / 12.0).abs() < 0.005);
        assert!(bm.abs() < 0.02 && (bv - 1.0 / 3.0).abs() < 0.01);
        assert!(blo >= -1.0 && bhi <= 1.0);
    }

    #[test]
    fn mixture_prior_splits_by_channel() {
        let ((gm, gv), (_, bv), (blo, bhi)) = split_moments(PriorKind::Mixture, 2_000);
        assert!(gm.abs() < 0.02 && (gv - 1.0).abs() < 0.03, "geometry {gm} {gv}");
        assert!((bv - 1.0 / 3.0).abs() < 0.01 && blo >= -1.0 && bhi <= 1.0);
    }

    #[test]
    fn same_seed_same_vector() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for kind in PriorKind::ALL {
            assert_eq!(
                sample_prior::<f32, _>(kind, 6, 3, &mut a).unwrap(),
                sample_prior::<f32, _>(kind, 6, 3, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn serialized_names_are_lowercase() {
        for (kind, name) in [
            (PriorKind::Gaussian, "\"gaussian\""),
            (PriorKind::Uniform, "\"uniform\""),
            (PriorKind::Mixture, "\"mixture\""),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), name);
            assert_eq!(serde_json::from_str::<PriorKind>(name).unwrap(), kind);
        }
    }
}
