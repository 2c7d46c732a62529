//! Flow-matching core: training trajectories, their conditional vector
//! fields, and the regression loss.
//!
//! A trajectory prescribes where a sample sits at time `t` between a
//! source draw `x0` and a data point `x1`; its time derivative is the
//! regression target for the network. The loss is a masked MSE over all
//! supervised dimensions plus an L1 term over supervised geometry
//! dimensions, weighted by `lambda`.

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionMask;
use crate::data::FlowVector;
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrajectoryKind {
    /// Straight line: `x_t = (1-t) x0 + t x1`.
    #[default]
    #[serde(rename = "linear")]
    Linear,
    /// Quarter circle: `x_t = cos(pi t / 2) x0 + sin(pi t / 2) x1`.
    #[serde(rename = "sincos")]
    SineCosine,
    /// Eased line: `x_t = (1 - sin(pi t / 2)) x0 + sin(pi t / 2) x1`.
    #[serde(rename = "sine")]
    Sine,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] =
        [TrajectoryKind::Linear, TrajectoryKind::SineCosine, TrajectoryKind::Sine];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Linear => "linear",
            TrajectoryKind::SineCosine => "sincos",
            TrajectoryKind::Sine => "sine",
        }
    }

    /// Blend weights `(a, b)` so that `x_t = a x0 + b x1`.
    fn weights<S: Scalar>(self, t: S) -> (S, S) {
        let half_pi = S::FRAC_PI_2();
        match self {
            TrajectoryKind::Linear => (S::one() - t, t),
            TrajectoryKind::SineCosine => ((half_pi * t).cos(), (half_pi * t).sin()),
            TrajectoryKind::Sine => {
                let sin = (half_pi * t).sin();
                (S::one() - sin, sin)
            }
        }
    }

    /// Blend weights `(da, db)` of the time derivative, so that
    /// `v_t = da x0 + db x1`.
    fn derivative_weights<S: Scalar>(self, t: S) -> (S, S) {
        let half_pi = S::FRAC_PI_2();
        match self {
            TrajectoryKind::Linear => (-S::one(), S::one()),
            TrajectoryKind::SineCosine => {
                (-half_pi * (half_pi * t).sin(), half_pi * (half_pi * t).cos())
            }
            TrajectoryKind::Sine => {
                let c = half_pi * (half_pi * t).cos();
                (-c, c)
            }
        }
    }
}

fn check_pair<S: Scalar>(x0: &FlowVector<S>, x1: &FlowVector<S>, t: S) -> Result<()> {
    if !x0.same_shape(x1) || x0.pad_mask() != x1.pad_mask() {
        return Err(Error::contract("trajectory endpoints must share shape and padding"));
    }
    if !(t >= S::zero() && t <= S::one()) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Position on the trajectory at time `t`. Endpoints are exact: `t = 0`
/// returns `x0` and `t = 1` returns `x1` bit for bit (the trig forms
/// would otherwise leak rounding like `cos(pi/2) != 0`).
pub fn interpolate<S: Scalar>(
    x0: &FlowVector<S>,
    x1: &FlowVector<S>,
    t: S,
    kind: TrajectoryKind,
) -> Result<FlowVector<S>> {
    check_pair(x0, x1, t)?;
    if t == S::zero() {
        return Ok(x0.clone());
    }
    if t == S::one() {
        return Ok(x1.clone());
    }
    let (a, b) = kind.weights(t);
    let mut out = x0.clone();
    for (o, &y) in out.data_mut().iter_mut().zip(x1.data()) {
        *o = a * *o + b * y;
    }
    out.zero_padding();
    Ok(out)
}

/// Time derivative of the trajectory at `t`: the regression target the
/// network learns. Padded slots are zero.
pub fn conditional_vector_field<S: Scalar>(
    x0: &FlowVector<S>,
    x1: &FlowVector<S>,
    t: S,
    kind: TrajectoryKind,
) -> Result<FlowVector<S>> {
    check_pair(x0, x1, t)?;
    let (da, db) = kind.derivative_weights(t);
    let mut out = x0.clone();
    for (o, &y) in out.data_mut().iter_mut().zip(x1.data()) {
        *o = da * *o + db * y;
    }
    out.zero_padding();
    Ok(out)
}

/// One supervised regression point: the state the network sees, the time,
/// the target field, and which dimensions the loss covers.
#[derive(Debug, Clone)]
pub struct TrainingSample<S> {
    pub x_t: FlowVector<S>,
    pub t: S,
    pub v_target: FlowVector<S>,
    /// True where the loss applies: real element and not a condition dim.
    pub loss_mask: Vec<bool>,
}

/// Assembles a training sample. The source draw is narrowed to `x1`'s
/// padding, condition dimensions of the state are pinned to their values
/// for every `t`, and the target field is zeroed there (those dims are
/// not supervised and must not move during sampling).
pub fn make_training_sample<S: Scalar>(
    x0: &FlowVector<S>,
    x1: &FlowVector<S>,
    t: S,
    mask: &ConditionMask<S>,
    kind: TrajectoryKind,
) -> Result<TrainingSample<S>> {
    if !mask.matches(x1) {
        return Err(Error::contract("condition mask shape differs from data"));
    }
    let x0 = x0.masked_like(x1)?;
    let mut x_t = interpolate(&x0, x1, t, kind)?;
    mask.pin(&mut x_t);
    let mut v_target = conditional_vector_field(&x0, x1, t, kind)?;
    for (d, &g) in mask.given().iter().enumerate() {
        if g {
            v_target.data_mut()[d] = S::zero();
        }
    }
    let dims = x1.dims_per_element();
    let loss_mask = (0..x1.len())
        .map(|d| x1.is_real(d / dims) && !mask.is_given(d))
        .collect();
    Ok(TrainingSample { x_t, t, v_target, loss_mask })
}

/// Loss values for one sample or one batch (means of per-sample parts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub l1_geo: f64,
}

/// Flow-matching loss: mean squared error over supervised dimensions
/// plus `lambda` times the mean absolute geometry error. Values in
/// padded or condition dimensions of `u` never contribute.
pub fn cfm_loss<S: Scalar>(u: &[S], sample: &TrainingSample<S>, lambda: f64) -> Result<LossParts> {
    if u.len() != sample.v_target.len() {
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
        let r = (u[d] - sample.v_target.data()[d]).as_f64();
        sq += r * r;
        n_sq += 1;
        if sample.v_target.is_geometry_dim(d) {
            abs += r.abs();
            n_abs += 1;
        }
    }
    if n_sq == 0 {
        return Err(Error::domain("loss mask selects no dimensions"));
    }
    let mse = sq / n_sq as f64;
    let l1_geo = if n_abs == 0 { 0.0 } else { abs / n_abs as f64 };
    Ok(LossParts { total: mse + lambda * l1_geo, mse, l1_geo })
}

/// Gradient of [`cfm_loss`] with respect to the prediction `u`.
pub fn cfm_loss_grad<S: Scalar>(
    u: &[S],
    sample: &TrainingSample<S>,
    lambda: f64,
) -> Result<Vec<S>> {
    if u.len() != sample.v_target.len() {
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
        .filter(|&(d, &m)| m && sample.v_target.is_geometry_dim(d))
        .count();
    let mut grad = vec![S::zero(); u.len()];
    let inv_sq = s::<S>(2.0 / n_sq as f64);
    let l1_coeff = if n_abs == 0 { S::zero() } else { s::<S>(lambda / n_abs as f64) };
    for (d, &m) in sample.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        let r = u[d] - sample.v_target.data()[d];
        grad[d] = inv_sq * r;
        if sample.v_target.is_geometry_dim(d) {
            grad[d] += l1_coeff * r.signum_or_zero();
        }
    }
    Ok(grad)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<S: Scalar> SignumOrZero for S {
    /// `signum` with the subgradient convention `sign(0) = 0`.
    fn signum_or_zero(self) -> Self {
        if self == S::zero() {
            S::zero()
        } else {
            self.signum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_mask, TaskKind};
    use crate::data::{layout_to_vector, CategorySet, Element, Layout};
    use crate::prior::{sample_prior, PriorKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(nmax: usize) -> (FlowVector<f64>, FlowVector<f64>) {
        let cats = CategorySet::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let layout = Layout::new(vec![
            Element { category: 1, cx: 0.25, cy: 0.75, w: 0.5, h: 0.25 },
            Element { category: 2, cx: 0.5, cy: 0.25, w: 0.25, h: 0.5 },
        ]);
        let x1 = layout_to_vector(&layout, &cats, nmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = sample_prior(PriorKind::Gaussian, nmax, cats.bits(), &mut rng)
            .unwrap()
            .masked_like(&x1)
            .unwrap();
        (x0, x1)
    }

    #[test]
    fn endpoints_are_bitwise_exact() {
        let (x0, x1) = pair(4);
        for kind in TrajectoryKind::ALL {
            assert_eq!(interpolate(&x0, &x1, 0.0, kind).unwrap(), x0, "{kind:?} at 0");
            assert_eq!(interpolate(&x0, &x1, 1.0, kind).unwrap(), x1, "{kind:?} at 1");
        }
    }

    #[test]
    fn linear_midpoint_is_the_average() {
        let (x0, x1) = pair(3);
        let mid = interpolate(&x0, &x1, 0.5, TrajectoryKind::Linear).unwrap();
        for d in 0..x0.len() {
            let expect = 0.5 * (x0.data()[d] + x1.data()[d]);
            assert!((mid.data()[d] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sincos_midpoint_matches_quarter_turn() {
        // Scalar case x0 = 1, x1 = 0 at t = 1/2: cos(pi/4).
        let x0 = FlowVector::new(vec![1.0, 0.0, 0.0, 0.0, -1.0], vec![true], 1).unwrap();
        let x1 = FlowVector::new(vec![0.0; 5], vec![true], 1).unwrap();
        let mid = interpolate(&x0, &x1, 0.5, TrajectoryKind::SineCosine).unwrap();
        assert!((mid.data()[0] - std::f64::consts::FRAC_PI_4.cos()).abs() < 1e-15);
        assert!((mid.data()[0] - 0.707_106_781_186_547_6).abs() < 1e-12);
    }

    #[test]
    fn field_matches_central_differences() {
        let (x0, x1) = pair(4);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in TrajectoryKind::ALL {
            for _ in 0..200 {
                let t: f64 = rng.random_range(h..(1.0 - h));
                let v = conditional_vector_field(&x0, &x1, t, kind).unwrap();
                let plus = interpolate(&x0, &x1, t + h, kind).unwrap();
                let minus = interpolate(&x0, &x1, t - h, kind).unwrap();
                for d in 0..v.len() {
                    let fd = (plus.data()[d] - minus.data()[d]) / (2.0 * h);
                    assert!(
                        (v.data()[d] - fd).abs() < 1e-6,
                        "{kind:?} t={t} dim {d}: field {} vs fd {fd}",
                        v.data()[d]
                    );
                }
            }
        }
    }

    #[test]
    fn linear_field_is_displacement() {
        let (x0, x1) = pair(4);
        let v = conditional_vector_field(&x0, &x1, 0.3, TrajectoryKind::Linear).unwrap();
        for d in 0..v.len() {
            assert_eq!(v.data()[d], x1.data()[d] - x0.data()[d]);
        }
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let (x0, x1) = pair(3);
        for t in [-0.1, 1.1, f64::NAN] {
            assert!(interpolate(&x0, &x1, t, TrajectoryKind::Linear).is_err(), "t={t}");
            assert!(
                conditional_vector_field(&x0, &x1, t, TrajectoryKind::Linear).is_err(),
                "t={t}"
            );
        }
    }

    #[test]
    fn training_sample_pins_conditions_and_masks_loss() {
        let (x0, x1) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = build_mask(TaskKind::GenType, &x1, &mut rng).unwrap();
        for t in [0.0, 0.25, 0.9] {
            let sample =
                make_training_sample(&x0, &x1, t, &mask, TrajectoryKind::Linear).unwrap();
            let dims = x1.dims_per_element();
            for d in 0..x1.len() {
                let real = x1.is_real(d / dims);
                if mask.is_given(d) {
                    assert_eq!(sample.x_t.data()[d], x1.data()[d], "pinned at t={t}");
                    assert_eq!(sample.v_target.data()[d], 0.0);
                    assert!(!sample.loss_mask[d]);
                } else {
                    assert_eq!(sample.loss_mask[d], real);
                }
                if !real {
                    assert_eq!(sample.x_t.data()[d], 0.0);
                    assert_eq!(sample.v_target.data()[d], 0.0);
                }
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (x0, x1) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = build_mask(TaskKind::UnGen, &x1, &mut rng).unwrap();
        let sample = make_training_sample(&x0, &x1, 0.4, &mask, TrajectoryKind::Sine).unwrap();
        let loss = cfm_loss(sample.v_target.data(), &sample, 0.2).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.mse, 0.0);
        assert_eq!(loss.l1_geo, 0.0);
    }

    #[test]
    fn loss_means_count_only_masked_dims() {
        let (x0, x1) = pair(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = build_mask(TaskKind::UnGen, &x1, &mut rng).unwrap();
        let sample = make_training_sample(&x0, &x1, 0.5, &mask, TrajectoryKind::Linear).unwrap();
        // Prediction off by +0.5 everywhere supervised.
        let u: Vec<f64> = sample
            .v_target
            .data()
            .iter()
            .enumerate()
            .map(|(d, &v)| if sample.loss_mask[d] { v + 0.5 } else { 123.0 })
            .collect();
        let loss = cfm_loss(&u, &sample, 0.2).unwrap();
        assert!((loss.mse - 0.25).abs() < 1e-12);
        assert!((loss.l1_geo - 0.5).abs() < 1e-12);
        assert!((loss.total - (0.25 + 0.2 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_unmasked_junk() {
        let (x0, x1) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = build_mask(TaskKind::GenTypeSize, &x1, &mut rng).unwrap();
        let sample = make_training_sample(&x0, &x1, 0.3, &mask, TrajectoryKind::Linear).unwrap();
        let mut u: Vec<f64> = sample.v_target.data().to_vec();
        let base = cfm_loss(&u, &sample, 0.2).unwrap();
        for (d, &m) in sample.loss_mask.iter().enumerate() {
            if !m {
                u[d] = 1e6;
            }
        }
        assert_eq!(cfm_loss(&u, &sample, 0.2).unwrap(), base);
    }

    #[test]
    fn empty_loss_mask_is_an_error() {
        let (x0, x1) = pair(2);
        // Keep every element: nothing left to supervise.
        let mask = crate::conditioning::build_completion_mask(
            &x1,
            crate::conditioning::CompletionVariant::MostlyGiven,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let sample = make_training_sample(&x0, &x1, 0.5, &mask, TrajectoryKind::Linear);
        if let Ok(sample) = sample {
            if sample.loss_mask.iter().all(|&m| !m) {
                assert!(matches!(
                    cfm_loss(sample.v_target.data(), &sample, 0.2),
                    Err(Error::Domain(_))
                ));
            }
        }
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let (x0, x1) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mask = build_mask(TaskKind::GenType, &x1, &mut rng).unwrap();
        let sample = make_training_sample(&x0, &x1, 0.6, &mask, TrajectoryKind::Linear).unwrap();
        let u: Vec<f64> = sample
            .v_target
            .data()
            .iter()
            .map(|&v| v + 0.3 * f64::standard_normal(&mut rng))
            .collect();
        let grad = cfm_loss_grad(&u, &sample, 0.2).unwrap();
        let h = 1e-7;
        for d in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[d] += h;
            dn[d] -= h;
            let fd = (cfm_loss(&up, &sample, 0.2).unwrap().total
                - cfm_loss(&dn, &sample, 0.2).unwrap().total)
                / (2.0 * h);
            assert!((grad[d] - fd).abs() < 1e-6, "dim {d}: {} vs {fd}", grad[d]);
        }
    }

    #[test]
    fn trajectory_names_serialize() {
        for (kind, name) in [
            (TrajectoryKind::Linear, "\"linear\""),
            (TrajectoryKind::SineCosine, "\"sincos\""),
            (TrajectoryKind::Sine, "\"sine\""),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), name);
            assert_eq!(serde_json::from_str::<TrajectoryKind>(name).unwrap(), kind);
        }
    }
}
