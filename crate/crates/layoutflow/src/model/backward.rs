//! Hand-rolled reverse-mode differentiation of the forward pass.
//!
//! Walks the computation in exact reverse order, consuming the retained
//! activations and accumulating parameter adjoints into a zeroed
//! [`ModelParameters`] of the same shape. Residual connections add
//! adjoints; the shared time MLP collects contributions from every layer
//! and every token before its own backward step runs once at the end.

use super::forward::ForwardTrace;
use super::ops::{gelu_grad, layer_norm_bwd, linear_bwd, linear_bwd_batch};
use super::{ModelParameters, VectorFieldModel};
use crate::data::GEOMETRY_DIMS;
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

pub(super) fn run<S: Scalar>(
    model: &VectorFieldModel<S>,
    trace: &ForwardTrace<S>,
    d_out: &[S],
) -> Result<ModelParameters<S>> {
    let cfg = &model.config;
    let p = &model.params;
    let dims = cfg.slot_dims();
    if d_out.len() != cfg.nmax * dims {
        return Err(Error::contract(format!(
            "output adjoint holds {} values, model produces {}",
            d_out.len(),
            cfg.nmax * dims
        )));
    }
    if trace.layers.len() != cfg.layers {
        return Err(Error::contract("trace does not belong to this model"));
    }
    let n = trace.num_tokens();
    let dim = cfg.dim;
    let half = cfg.half();
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = s::<S>(1.0 / (hd as f64).sqrt());
    let mut g = ModelParameters::zeros(cfg);

    // Adjoints of padded slots are meaningless (those outputs are
    // constant zero); gather only the real tokens.
    let mut d_tok = vec![S::zero(); n * dims];
    for (tok, &slot) in trace.tokens.iter().enumerate() {
        d_tok[tok * dims..(tok + 1) * dims].copy_from_slice(&d_out[slot * dims..(slot + 1) * dims]);
    }

    let d_final_normed = linear_bwd_batch(&p.output, &mut g.output, &trace.final_normed, &d_tok, n);
    let mut d_stream =
        layer_norm_bwd(&p.final_ln, &mut g.final_ln, &trace.final_ln, &d_final_normed, n);

    // Time-MLP output is added after every attention block; its adjoint
    // accumulates across layers and tokens.
    let mut d_time_out = vec![S::zero(); dim];

    for li in (0..cfg.layers).rev() {
        let layer = &p.layers[li];
        let lt = &trace.layers[li];
        let gl = &mut g.layers[li];

        // Feed-forward branch; afterwards d_stream is the adjoint at the
        // post-attention state.
        let d_ff_act = linear_bwd_batch(&layer.ff2, &mut gl.ff2, &lt.ff_act, &d_stream, n);
        let mut d_ff_pre = d_ff_act;
        for (dp, &pre) in d_ff_pre.iter_mut().zip(&lt.ff_pre) {
            *dp *= gelu_grad(pre);
        }
        let d_xn2 = linear_bwd_batch(&layer.ff1, &mut gl.ff1, &lt.xn2, &d_ff_pre, n);
        let d_mid_extra = layer_norm_bwd(&layer.ln2, &mut gl.ln2, &lt.ln2, &d_xn2, n);
        for (dm, de) in d_stream.iter_mut().zip(&d_mid_extra) {
            *dm += *de;
        }

        for tok in 0..n {
            for i in 0..dim {
                d_time_out[i] += d_stream[tok * dim + i];
            }
        }

        // Attention branch.
        let d_ctx = linear_bwd_batch(&layer.wo, &mut gl.wo, &lt.ctx, &d_stream, n);
        let mut d_q = vec![S::zero(); n * dim];
        let mut d_k = vec![S::zero(); n * dim];
        let mut d_v = vec![S::zero(); n * dim];
        let mut d_prow = vec![S::zero(); n];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let prow = &lt.probs[h * n * n + i * n..h * n * n + (i + 1) * n];
                let dctx_i = &d_ctx[i * dim + off..i * dim + off + hd];
                for (j, dpj) in d_prow.iter_mut().enumerate() {
                    let vrow = &lt.v[j * dim + off..j * dim + off + hd];
                    let mut dot = S::zero();
                    for (a, b) in dctx_i.iter().zip(vrow) {
                        dot += *a * *b;
                    }
                    *dpj = dot;
                    let dvrow = &mut d_v[j * dim + off..j * dim + off + hd];
                    for (dv, dc) in dvrow.iter_mut().zip(dctx_i) {
                        *dv += prow[j] * *dc;
                    }
                }
                // Softmax Jacobian: dS_j = P_j (dP_j - sum_k P_k dP_k).
                let mut inner = S::zero();
                for (pj, dpj) in prow.iter().zip(&d_prow) {
                    inner += *pj * *dpj;
                }
                for j in 0..n {
                    let ds = prow[j] * (d_prow[j] - inner) * scale;
                    for idx in 0..hd {
                        d_q[i * dim + off + idx] += ds * lt.k[j * dim + off + idx];
                        d_k[j * dim + off + idx] += ds * lt.q[i * dim + off + idx];
                    }
                }
            }
        }
        let mut d_xn1 = linear_bwd_batch(&layer.wq, &mut gl.wq, &lt.xn1, &d_q, n);
        for (acc, v) in d_xn1
            .iter_mut()
            .zip(linear_bwd_batch(&layer.wk, &mut gl.wk, &lt.xn1, &d_k, n))
        {
            *acc += v;
        }
        for (acc, v) in d_xn1
            .iter_mut()
            .zip(linear_bwd_batch(&layer.wv, &mut gl.wv, &lt.xn1, &d_v, n))
        {
            *acc += v;
        }
        let d_in_extra = layer_norm_bwd(&layer.ln1, &mut gl.ln1, &lt.ln1, &d_xn1, n);
        for (dm, de) in d_stream.iter_mut().zip(&d_in_extra) {
            *dm += *de;
        }
    }

    // Embedding stack.
    let d_fuse_in = linear_bwd_batch(&p.fuse, &mut g.fuse, &trace.fuse_in, &d_stream, n);
    let mut d_geom_part = vec![S::zero(); n * half];
    let mut d_type_part = vec![S::zero(); n * half];
    for tok in 0..n {
        for i in 0..half {
            let dg = d_fuse_in[tok * dim + i];
            d_geom_part[tok * half + i] = dg;
            g.pos_mask_embed[trace.m_pos[tok] as usize][i] += dg;
            let dt = d_fuse_in[tok * dim + half + i];
            d_type_part[tok * half + i] = dt;
            g.type_mask_embed[trace.m_type[tok] as usize][i] += dt;
        }
    }
    let bits = cfg.bits;
    for tok in 0..n {
        let dg = &d_geom_part[tok * half..(tok + 1) * half];
        let dt = &d_type_part[tok * half..(tok + 1) * half];
        linear_bwd(
            &p.geom_embed,
            &mut g.geom_embed,
            &trace.geom_in[tok * GEOMETRY_DIMS..(tok + 1) * GEOMETRY_DIMS],
            dg,
            None,
        );
        linear_bwd(
            &p.type_embed,
            &mut g.type_embed,
            &trace.type_in[tok * bits..(tok + 1) * bits],
            dt,
            None,
        );
        if trace.routed {
            // The same embedding layers run twice in the routed case
            // (state and side input), so weights and biases accumulate
            // a second contribution.
            linear_bwd(
                &p.geom_embed,
                &mut g.geom_embed,
                &trace.routed_geom[tok * GEOMETRY_DIMS..(tok + 1) * GEOMETRY_DIMS],
                dg,
                None,
            );
            linear_bwd(
                &p.type_embed,
                &mut g.type_embed,
                &trace.routed_type[tok * bits..(tok + 1) * bits],
                dt,
                None,
            );
        }
    }

    // Shared time MLP, once.
    let d_time_h = linear_bwd_batch(&p.time_mlp2, &mut g.time_mlp2, &trace.time_h, &d_time_out, 1);
    let mut d_time_pre = d_time_h;
    for (dp, &pre) in d_time_pre.iter_mut().zip(&trace.time_h_pre) {
        *dp *= gelu_grad(pre);
    }
    linear_bwd_batch(&p.time_mlp1, &mut g.time_mlp1, &trace.time_feats, &d_time_pre, 1);

    Ok(g)
}

#[cfg(test)]
mod tests {
    use crate::conditioning::{build_mask, refinement_mask_from_noisy, ConditionMask, TaskKind};
    use crate::data::{layout_to_vector, CategorySet, Element, FlowVector, Layout};
    use crate::model::{ModelConfig, ModelParameters, VectorFieldModel};
    use crate::scalar::Scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { layers: 1, heads: 2, dim: 8, ff_dim: 12, nmax: 4, bits: 2, time_embed_dim: 4 }
    }

    fn layout_vector(n: usize, nmax: usize) -> FlowVector<f64> {
        let cats = CategorySet::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let layout = Layout::new(
            (0..n)
                .map(|i| Element {
                    category: i % 3,
                    cx: 0.2 + 0.15 * i as f64,
                    cy: 0.6 - 0.1 * i as f64,
                    w: 0.1 + 0.02 * i as f64,
                    h: 0.15,
                })
                .collect(),
        );
        layout_to_vector(&layout, &cats, nmax).unwrap()
    }

    /// Scalar probe objective: fixed random co-vector dotted with the
    /// network output.
    fn probe_loss(model: &VectorFieldModel<f64>, x: &FlowVector<f64>, t: f64, mask: &ConditionMask<f64>, d_out: &[f64]) -> f64 {
        let (out, _) = model.forward(x, t, mask).unwrap();
        out.iter().zip(d_out).map(|(a, b)| a * b).sum()
    }

    fn gradcheck(mask_for: impl Fn(&FlowVector<f64>, &mut ChaCha8Rng) -> ConditionMask<f64>) {
        let cfg = tiny_config();
        let model = VectorFieldModel::<f64>::new(cfg, 21).unwrap();
        let x = layout_vector(3, cfg.nmax);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mask = mask_for(&x, &mut rng);
        let t = 0.37;
        let d_out: Vec<f64> =
            (0..x.len()).map(|_| f64::standard_normal(&mut rng)).collect();

        let (_, trace) = model.forward(&x, t, &mask).unwrap();
        let analytic = model.backward(&trace, &d_out).unwrap().to_flat_f64();

        let flat = model.params.to_flat_f64();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (i, &base) in flat.iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] = base + h;
            let mp = VectorFieldModel::from_parts(
                cfg,
                ModelParameters::from_flat_f64(&cfg, &plus).unwrap(),
            )
            .unwrap();
            let mut minus = flat.clone();
            minus[i] = base - h;
            let mm = VectorFieldModel::from_parts(
                cfg,
                ModelParameters::from_flat_f64(&cfg, &minus).unwrap(),
            )
            .unwrap();
            let fd = (probe_loss(&mp, &x, t, &mask, &d_out)
                - probe_loss(&mm, &x, t, &mask, &d_out))
                / (2.0 * h);
            let diff = (fd - analytic[i]).abs();
            let rel = diff / fd.abs().max(analytic[i].abs()).max(1.0);
            worst = worst.max(rel);
            assert!(
                rel < 1e-6,
                "param {i}: finite difference {fd} vs reverse-mode {}",
                analytic[i]
            );
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_unconditional() {
        gradcheck(|x, rng| build_mask(TaskKind::UnGen, x, rng).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences_completion() {
        gradcheck(|x, rng| build_mask(TaskKind::Completion, x, rng).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences_refinement() {
        // Routed side input exercises the double embedding accumulation.
        gradcheck(|x, rng| build_mask(TaskKind::Refinement, x, rng).unwrap());
    }

    #[test]
    fn padded_slot_adjoints_are_ignored() {
        let cfg = tiny_config();
        let model = VectorFieldModel::<f64>::new(cfg, 31).unwrap();
        let x = layout_vector(2, cfg.nmax);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut d_out: Vec<f64> =
            (0..x.len()).map(|_| f64::standard_normal(&mut rng)).collect();
        let (_, trace) = model.forward(&x, 0.5, &mask).unwrap();
        let g1 = model.backward(&trace, &d_out).unwrap();
        let dims = cfg.slot_dims();
        for slot in 2..cfg.nmax {
            for d in 0..dims {
                d_out[slot * dims + d] = 1e9;
            }
        }
        let g2 = model.backward(&trace, &d_out).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn refinement_side_input_reaches_embedding_gradients() {
        let cfg = tiny_config();
        let model = VectorFieldModel::<f64>::new(cfg, 41).unwrap();
        let x = layout_vector(3, cfg.nmax);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d_out: Vec<f64> = (0..x.len()).map(|_| f64::standard_normal(&mut rng)).collect();

        let plain = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let (_, trace_plain) = model.forward(&x, 0.4, &plain).unwrap();
        let g_plain = model.backward(&trace_plain, &d_out).unwrap();

        let mut noisy_data = x.data().to_vec();
        noisy_data[0] += 0.3;
        let noisy = FlowVector::new(noisy_data, x.pad_mask().to_vec(), cfg.bits).unwrap();
        let refine = refinement_mask_from_noisy(&noisy);
        let (_, trace_r) = model.forward(&x, 0.4, &refine).unwrap();
        let g_r = model.backward(&trace_r, &d_out).unwrap();

        assert_ne!(g_plain.geom_embed.w, g_r.geom_embed.w);
    }

    #[test]
    fn wrong_adjoint_length_is_rejected() {
        let cfg = tiny_config();
        let model = VectorFieldModel::<f64>::new(cfg, 51).unwrap();
        let x = layout_vector(2, cfg.nmax);
        let mask = ConditionMask::un_gen(cfg.nmax, cfg.bits);
        let (_, trace) = model.forward(&x, 0.5, &mask).unwrap();
        assert!(model.backward(&trace, &vec![0.0; 3]).is_err());
    }
}
