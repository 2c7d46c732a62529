//! Forward evaluation of the vector-field network.
//!
//! Real element slots are compacted into a dense token list before any
//! linear algebra runs, so padded slots cannot influence attention or
//! normalization statistics; their output entries are written as exact
//! zeros at the end.

use super::ops::{gelu, layer_norm_fwd, linear_fwd_batch, softmax_row, LnTrace};
use super::{time_features, VectorFieldModel};
use crate::conditioning::ConditionMask;
use crate::data::{FlowVector, GEOMETRY_DIMS};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

/// Activations retained from one forward call.
///
/// Opaque to callers; feed it back to [`VectorFieldModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// Slot index of each compacted token.
    pub(crate) tokens: Vec<usize>,
    pub(crate) geom_in: Vec<S>,
    pub(crate) type_in: Vec<S>,
    pub(crate) routed: bool,
    pub(crate) routed_geom: Vec<S>,
    pub(crate) routed_type: Vec<S>,
    pub(crate) m_pos: Vec<bool>,
    pub(crate) m_type: Vec<bool>,
    pub(crate) fuse_in: Vec<S>,
    pub(crate) time_feats: Vec<S>,
    pub(crate) time_h_pre: Vec<S>,
    pub(crate) time_h: Vec<S>,
    pub(crate) layers: Vec<LayerTrace<S>>,
    pub(crate) final_ln: LnTrace<S>,
    pub(crate) final_normed: Vec<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<S> {
    pub(crate) ln1: LnTrace<S>,
    pub(crate) xn1: Vec<S>,
    pub(crate) q: Vec<S>,
    pub(crate) k: Vec<S>,
    pub(crate) v: Vec<S>,
    /// Attention weights, `heads x n x n`.
    pub(crate) probs: Vec<S>,
    pub(crate) ctx: Vec<S>,
    pub(crate) ln2: LnTrace<S>,
    pub(crate) xn2: Vec<S>,
    pub(crate) ff_pre: Vec<S>,
    pub(crate) ff_act: Vec<S>,
}

impl<S> ForwardTrace<S> {
    pub(crate) fn num_tokens(&self) -> usize {
        self.tokens.len()
    }
}

pub(super) fn run<S: Scalar>(
    model: &VectorFieldModel<S>,
    x: &FlowVector<S>,
    t: S,
    mask: &ConditionMask<S>,
) -> Result<(Vec<S>, ForwardTrace<S>)> {
    let cfg = &model.config;
    let p = &model.params;
    if x.nmax() != cfg.nmax || x.bits() != cfg.bits {
        return Err(Error::contract(format!(
            "state is {}x{} slots/bits, model expects {}x{}",
            x.nmax(),
            x.bits(),
            cfg.nmax,
            cfg.bits
        )));
    }
    if !mask.matches(x) {
        return Err(Error::contract("condition mask shape does not match the state"));
    }
    if !(t >= S::zero() && t <= S::one()) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }

    let dims = cfg.slot_dims();
    let dim = cfg.dim;
    let half = cfg.half();
    let tokens: Vec<usize> = (0..x.nmax()).filter(|&i| x.is_real(i)).collect();
    let n = tokens.len();
    let routed = mask.routes_values();

    // Per-token slot content and (for refinement) the routed condition
    // values, gathered into dense token-major buffers.
    let mut geom_in = vec![S::zero(); n * GEOMETRY_DIMS];
    let mut type_in = vec![S::zero(); n * cfg.bits];
    let mut routed_geom = vec![S::zero(); if routed { n * GEOMETRY_DIMS } else { 0 }];
    let mut routed_type = vec![S::zero(); if routed { n * cfg.bits } else { 0 }];
    let mut m_pos = vec![false; n];
    let mut m_type = vec![false; n];
    for (tok, &slot) in tokens.iter().enumerate() {
        let el = x.element(slot);
        geom_in[tok * GEOMETRY_DIMS..(tok + 1) * GEOMETRY_DIMS]
            .copy_from_slice(&el[..GEOMETRY_DIMS]);
        type_in[tok * cfg.bits..(tok + 1) * cfg.bits].copy_from_slice(&el[GEOMETRY_DIMS..]);
        m_pos[tok] = mask.m_pos()[slot];
        m_type[tok] = mask.m_type()[slot];
        if routed {
            let val = &mask.values()[slot * dims..(slot + 1) * dims];
            routed_geom[tok * GEOMETRY_DIMS..(tok + 1) * GEOMETRY_DIMS]
                .copy_from_slice(&val[..GEOMETRY_DIMS]);
            routed_type[tok * cfg.bits..(tok + 1) * cfg.bits].copy_from_slice(&val[GEOMETRY_DIMS..]);
        }
    }

    // Two-half embedding -> fuse into the token stream.
    let geom_part = linear_fwd_batch(&p.geom_embed, &geom_in, n);
    let type_part = linear_fwd_batch(&p.type_embed, &type_in, n);
    let mut fuse_in = vec![S::zero(); n * dim];
    for tok in 0..n {
        let g = &mut fuse_in[tok * dim..tok * dim + half];
        g.copy_from_slice(&geom_part[tok * half..(tok + 1) * half]);
        let pm = &p.pos_mask_embed[m_pos[tok] as usize];
        for (gi, mi) in g.iter_mut().zip(pm) {
            *gi += *mi;
        }
        let ty = &mut fuse_in[tok * dim + half..(tok + 1) * dim];
        ty.copy_from_slice(&type_part[tok * half..(tok + 1) * half]);
        let tm = &p.type_mask_embed[m_type[tok] as usize];
        for (ti, mi) in ty.iter_mut().zip(tm) {
            *ti += *mi;
        }
    }
    if routed {
        let rg = linear_fwd_batch(&p.geom_embed, &routed_geom, n);
        let rt = linear_fwd_batch(&p.type_embed, &routed_type, n);
        for tok in 0..n {
            for i in 0..half {
                fuse_in[tok * dim + i] += rg[tok * half + i];
                fuse_in[tok * dim + half + i] += rt[tok * half + i];
            }
        }
    }
    let mut stream = linear_fwd_batch(&p.fuse, &fuse_in, n);

    // Shared time conditioning, added after every attention block.
    let time_feats = time_features(t, cfg.time_embed_dim);
    let time_h_pre = linear_fwd_batch(&p.time_mlp1, &time_feats, 1);
    let time_h: Vec<S> = time_h_pre.iter().map(|&v| gelu(v)).collect();
    let time_out = linear_fwd_batch(&p.time_mlp2, &time_h, 1);

    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = s::<S>(1.0 / (hd as f64).sqrt());
    let mut layer_traces = Vec::with_capacity(cfg.layers);

    for layer in &p.layers {
        let (xn1, ln1) = layer_norm_fwd(&layer.ln1, &stream, n);
        let q = linear_fwd_batch(&layer.wq, &xn1, n);
        let k = linear_fwd_batch(&layer.wk, &xn1, n);
        let v = linear_fwd_batch(&layer.wv, &xn1, n);

        let mut probs = vec![S::zero(); heads * n * n];
        let mut ctx = vec![S::zero(); n * dim];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let qrow = &q[i * dim + off..i * dim + off + hd];
                let prow = &mut probs[h * n * n + i * n..h * n * n + (i + 1) * n];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let krow = &k[j * dim + off..j * dim + off + hd];
                    let mut dot = S::zero();
                    for (a, b) in qrow.iter().zip(krow) {
                        dot += *a * *b;
                    }
                    *pj = dot * scale;
                }
                softmax_row(prow);
                let crow = &mut ctx[i * dim + off..i * dim + off + hd];
                for (j, pj) in prow.iter().enumerate() {
                    let vrow = &v[j * dim + off..j * dim + off + hd];
                    for (c, vv) in crow.iter_mut().zip(vrow) {
                        *c += *pj * *vv;
                    }
                }
            }
        }
        let attn = linear_fwd_batch(&layer.wo, &ctx, n);
        for tok in 0..n {
            for i in 0..dim {
                stream[tok * dim + i] += attn[tok * dim + i] + time_out[i];
            }
        }

        let (xn2, ln2) = layer_norm_fwd(&layer.ln2, &stream, n);
        let ff_pre = linear_fwd_batch(&layer.ff1, &xn2, n);
        let ff_act: Vec<S> = ff_pre.iter().map(|&v| gelu(v)).collect();
        let ff_out = linear_fwd_batch(&layer.ff2, &ff_act, n);
        for (si, fi) in stream.iter_mut().zip(&ff_out) {
            *si += *fi;
        }

        layer_traces.push(LayerTrace { ln1, xn1, q, k, v, probs, ctx, ln2, xn2, ff_pre, ff_act });
    }

    let (final_normed, final_ln) = layer_norm_fwd(&p.final_ln, &stream, n);
    let out_tok = linear_fwd_batch(&p.output, &final_normed, n);

    // Scatter token outputs back to their slots; padding stays zero.
    let mut out = vec![S::zero(); x.len()];
    for (tok, &slot) in tokens.iter().enumerate() {
        out[slot * dims..(slot + 1) * dims].copy_from_slice(&out_tok[tok * dims..(tok + 1) * dims]);
    }

    let trace = ForwardTrace {
        tokens,
        geom_in,
        type_in,
        routed,
        routed_geom,
        routed_type,
        m_pos,
        m_type,
        fuse_in,
        time_feats,
        time_h_pre,
        time_h,
        layers: layer_traces,
        final_ln,
        final_normed,
    };
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use crate::conditioning::{refinement_mask_from_noisy, ConditionMask};
    use crate::data::FlowVector;
    use crate::model::{ModelConfig, VectorFieldModel};
    use crate::prior::{sample_prior, PriorKind};
    use crate::scalar::Scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { layers: 2, heads: 2, dim: 16, ff_dim: 24, nmax: 6, bits: 3, time_embed_dim: 8 }
    }

    fn random_state(nmax: usize, bits: usize, n_real: usize, seed: u64) -> FlowVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = 4 + bits;
        let mut data = vec![0.0; nmax * dims];
        let mut pad = vec![false; nmax];
        for slot in 0..n_real {
            pad[slot] = true;
            for d in 0..dims {
                data[slot * dims + d] = f64::standard_normal(&mut rng);
            }
        }
        FlowVector::new(data, pad, bits).unwrap()
    }

    #[test]
    fn forward_zeroes_padded_slots_exactly() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 1).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 4, 2);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let (out, _) = model.forward(&x, 0.3, &mask).unwrap();
        let dims = cfg.slot_dims();
        for slot in 4..cfg.nmax {
            assert!(out[slot * dims..(slot + 1) * dims].iter().all(|&v| v == 0.0));
        }
        for slot in 0..4 {
            assert!(out[slot * dims..(slot + 1) * dims].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 1).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 5, 3);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let (a, _) = model.forward(&x, 0.7, &mask).unwrap();
        let (b, _) = model.forward(&x, 0.7, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_depends_on_time() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 1).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 3, 4);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let (a, _) = model.forward(&x, 0.1, &mask).unwrap();
        let (b, _) = model.forward(&x, 0.9, &mask).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_time_outside_unit_interval() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 1).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 3, 4);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        assert!(model.forward(&x, -0.01, &mask).is_err());
        assert!(model.forward(&x, 1.01, &mask).is_err());
        assert!(model.forward(&x, f64::NAN, &mask).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 1).unwrap();
        let x = random_state(cfg.nmax + 1, cfg.bits, 3, 4);
        let mask = ConditionMask::un_gen(cfg.nmax + 1, cfg.bits);
        assert!(model.forward(&x, 0.5, &mask).is_err());
    }

    #[test]
    fn tokens_commute_with_slot_permutation() {
        // Permuting element slots (state + mask together) must permute
        // the outputs identically: there is no positional channel.
        let cfg = small_config();
        let dims = cfg.slot_dims();
        let model = VectorFieldModel::<f64>::new(cfg, 5).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, cfg.nmax, 6);
        let mut mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        // Give slot 1 a condition so the mask channel also permutes.
        mask.pad_mask = vec![true; cfg.nmax];
        for d in 0..dims {
            mask.given[dims + d] = true;
            mask.values[dims + d] = 0.25 * d as f64;
        }
        mask.m_pos[1] = true;
        mask.m_type[1] = true;
        let (out, _) = model.forward(&x, 0.4, &mask).unwrap();

        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let mut pdata = vec![0.0; x.len()];
        let mut pgiven = vec![false; x.len()];
        let mut pvalues = vec![0.0; x.len()];
        let mut pm_pos = vec![false; cfg.nmax];
        let mut pm_type = vec![false; cfg.nmax];
        for (new, &old) in perm.iter().enumerate() {
            pdata[new * dims..(new + 1) * dims].copy_from_slice(&x.data()[old * dims..(old + 1) * dims]);
            pgiven[new * dims..(new + 1) * dims]
                .copy_from_slice(&mask.given[old * dims..(old + 1) * dims]);
            pvalues[new * dims..(new + 1) * dims]
                .copy_from_slice(&mask.values[old * dims..(old + 1) * dims]);
            pm_pos[new] = mask.m_pos[old];
            pm_type[new] = mask.m_type[old];
        }
        let px = FlowVector::new(pdata, vec![true; cfg.nmax], cfg.bits).unwrap();
        let pmask = ConditionMask {
            task: mask.task,
            bits: mask.bits,
            pad_mask: vec![true; cfg.nmax],
            given: pgiven,
            values: pvalues,
            m_pos: pm_pos,
            m_type: pm_type,
        };
        let (pout, _) = model.forward(&px, 0.4, &pmask).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for d in 0..dims {
                let diff = (pout[new * dims + d] - out[old * dims + d]).abs();
                assert!(diff < 1e-12, "slot {old}->{new} dim {d}: diff {diff}");
            }
        }
    }

    #[test]
    fn condition_values_only_enter_for_refinement() {
        // With routing off, the `values` buffer must be invisible to the
        // network; with a refinement mask it must change the output.
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 9).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 4, 10);
        let base = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let mut poked = base.clone();
        for v in poked.values.iter_mut() {
            *v = 7.5;
        }
        let (a, _) = model.forward(&x, 0.5, &base).unwrap();
        let (b, _) = model.forward(&x, 0.5, &poked).unwrap();
        assert_eq!(a, b, "non-refinement tasks must ignore condition values");

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = sample_prior::<f64, _>(PriorKind::Gaussian, cfg.nmax, cfg.bits, &mut rng).unwrap();
        let refine = refinement_mask_from_noisy(&noisy);
        let mut refine2 = refine.clone();
        for (i, v) in refine2.values.iter_mut().enumerate() {
            if refine2.pad_mask[i / cfg.slot_dims()] {
                *v += 0.1;
            }
        }
        let mask_x = {
            // Refinement masks carry the noisy layout's pad pattern; use
            // a state with the same real slots.
            let mut data = x.data().to_vec();
            let pads = noisy.pad_mask().to_vec();
            for (slot, &real) in pads.iter().enumerate() {
                if !real {
                    for d in 0..cfg.slot_dims() {
                        data[slot * cfg.slot_dims() + d] = 0.0;
                    }
                }
            }
            FlowVector::new(data, pads, cfg.bits).unwrap()
        };
        let (c, _) = model.forward(&mask_x, 0.5, &refine).unwrap();
        let (d, _) = model.forward(&mask_x, 0.5, &refine2).unwrap();
        assert_ne!(c, d, "refinement must route condition values into the embedding");
    }

    #[test]
    fn mask_flags_shift_the_embedding() {
        let cfg = small_config();
        let model = VectorFieldModel::<f64>::new(cfg, 13).unwrap();
        let x = random_state(cfg.nmax, cfg.bits, 3, 14);
        let a = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let mut b = a.clone();
        b.m_pos[0] = true;
        let (ya, _) = model.forward(&x, 0.5, &a).unwrap();
        let (yb, _) = model.forward(&x, 0.5, &b).unwrap();
        assert_ne!(ya, yb, "mask state must be visible to the network");
    }
}
