//! Cached forward pass and reverse-mode gradients for adapters and head.
//!
//! Frozen weights never receive gradients. Blocks below the lowest adapted
//! block are run without caching and are not back-propagated through.

use super::layers::{
    attention_cached, gelu_grad, head_slice, layer_norm, layer_norm_backward, mean_rows, mlp_cached, write_head_slice,
    AttentionCache, MlpCache, NormCache,
};
use super::{block_forward, head_logits, BlockWeights, PriorNetModel};
use crate::clip::ClipTensor;
use crate::error::Result;
use crate::lora::QkvAdapters;
use crate::numerics::{gemm, Tensor};

/// Everything the backward pass needs from one clip's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    first_cached: usize,
    blocks: Vec<(AttentionCache, MlpCache)>,
    final_norm: NormCache,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients for every trainable array, laid out like [`PriorNetModel::trainable_slices_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    /// Per block: `(dA, dB)` for Q, K and V.
    pub adapters: Vec<Option<[(Tensor, Tensor); 3]>>,
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &PriorNetModel) -> Self {
        let adapters = model
            .adapters
            .iter()
            .map(|slot| {
                slot.as_ref().map(|qkv| {
                    let z = |a: &crate::lora::LoraAdapter| (Tensor::zeros(a.a.shape()), Tensor::zeros(a.b.shape()));
                    [z(&qkv.q), z(&qkv.k), z(&qkv.v)]
                })
            })
            .collect();
        Self {
            adapters,
            head_w: Tensor::zeros(model.head.weight.shape()),
            head_b: vec![0.0; model.head.bias.len()],
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in self.adapters.iter().flatten() {
            for (da, db) in g {
                out.push(da.data());
                out.push(db.data());
            }
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for g in self.adapters.iter_mut().flatten() {
            for (da, db) in g.iter_mut() {
                out.push(da.data_mut());
                out.push(db.data_mut());
            }
        }
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl PriorNetModel {
    fn first_adapted_block(&self) -> Option<usize> {
        self.adapters.iter().position(Option::is_some)
    }

    /// Trainable arrays in a fixed order: per adapted block `q.A, q.B, k.A, k.B, v.A, v.B`,
    /// then head weight and head bias.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for qkv in self.adapters.iter_mut().flatten() {
            for ad in qkv.iter_mut() {
                out.push(ad.a.data_mut());
                out.push(ad.b.data_mut());
            }
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    /// Tokens entering the lowest adapted block, or the final norm when no
    /// block is adapted. Depends on frozen weights only, so it can be cached
    /// across training steps.
    pub fn frozen_prefix(&self, clip: &ClipTensor) -> Result<Tensor> {
        let mut x = self.input_tokens(clip)?;
        let first = self.first_adapted_block().unwrap_or(self.config.num_blocks);
        for block in &self.frozen.blocks[..first] {
            x = block_forward(&x, block, None);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, clip: &ClipTensor) -> Result<ForwardCache> {
        Ok(self.forward_from_prefix(&self.frozen_prefix(clip)?))
    }

    /// Cached forward pass starting from [`Self::frozen_prefix`] output.
    pub fn forward_from_prefix(&self, prefix: &Tensor) -> ForwardCache {
        let first_cached = self.first_adapted_block().unwrap_or(self.config.num_blocks);
        let mut x = prefix.clone();
        let mut blocks = Vec::with_capacity(self.config.num_blocks - first_cached);
        for (block, adapters) in self.frozen.blocks.iter().zip(&self.adapters).skip(first_cached) {
            let (x1, attn) = attention_cached(&x, block, adapters.as_ref());
            let (x2, mlp) = mlp_cached(&x1, block);
            blocks.push((attn, mlp));
            x = x2;
        }
        let (normed, final_norm) = layer_norm(&x, &self.frozen.final_norm);
        let feature = mean_rows(&normed);
        let logits = head_logits(&self.head, &feature);
        ForwardCache {
            first_cached,
            blocks,
            final_norm,
            feature,
            logits,
        }
    }

    /// Pooled feature from [`Self::frozen_prefix`] output, without caching.
    pub fn feature_from_prefix(&self, prefix: &Tensor) -> Vec<f64> {
        let first = self.first_adapted_block().unwrap_or(self.config.num_blocks);
        let mut x = prefix.clone();
        for (block, adapters) in self.frozen.blocks.iter().zip(&self.adapters).skip(first) {
            x = block_forward(&x, block, adapters.as_ref());
        }
        mean_rows(&layer_norm(&x, &self.frozen.final_norm).0)
    }

    /// Head-only gradient for a precomputed feature.
    pub fn backward_head(&self, feature: &[f64], dlogits: &[f64], grads: &mut ModelGrads) {
        for (i, &f) in feature.iter().enumerate() {
            for (g, d) in grads.head_w.row_mut(i).iter_mut().zip(dlogits) {
                *g += f * d;
            }
        }
        for (b, d) in grads.head_b.iter_mut().zip(dlogits) {
            *b += d;
        }
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut ModelGrads) {
        self.backward_head(&cache.feature, dlogits, grads);
        if cache.blocks.is_empty() {
            return;
        }
        let d = self.config.d_model;
        let tokens = cache.final_norm.xhat.rows();
        let mut dfeature = vec![0.0; d];
        for (i, df) in dfeature.iter_mut().enumerate() {
            let row = self.head.weight.row(i);
            *df = row.iter().zip(dlogits).map(|(w, g)| w * g).sum::<f64>() / tokens as f64;
        }
        let mut dnormed = Tensor::zeros(&[tokens, d]);
        for r in 0..tokens {
            dnormed.row_mut(r).copy_from_slice(&dfeature);
        }
        let mut dx = layer_norm_backward(&dnormed, &self.frozen.final_norm, &cache.final_norm);

        for (offset, (attn, mlp)) in cache.blocks.iter().enumerate().rev() {
            let index = cache.first_cached + offset;
            let block = &self.frozen.blocks[index];
            dx = mlp_backward(dx, block, mlp);
            let need_input_grad = offset > 0;
            let adapter_grads = grads.adapters[index].as_mut();
            dx = attention_backward(dx, block, self.adapters[index].as_ref(), attn, adapter_grads, need_input_grad);
        }
    }
}

fn mlp_backward(dout: Tensor, block: &BlockWeights, cache: &MlpCache) -> Tensor {
    let mut dpre = dout.product(&block.w2, false, true);
    for (g, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g *= gelu_grad(p);
    }
    let dh = dpre.product(&block.w1, false, true);
    let mut dx = layer_norm_backward(&dh, &block.norm2, &cache.norm);
    dx.add_scaled(&dout, 1.0).expect("same shape");
    dx
}

fn attention_backward(
    dout: Tensor,
    block: &BlockWeights,
    adapters: Option<&QkvAdapters>,
    cache: &AttentionCache,
    mut adapter_grads: Option<&mut [(Tensor, Tensor); 3]>,
    need_input_grad: bool,
) -> Tensor {
    let (tokens, d) = (dout.rows(), dout.cols());
    let heads = block.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dconcat = dout.product(&block.wo, false, true);
    let mut dq = Tensor::zeros(&[tokens, d]);
    let mut dk = Tensor::zeros(&[tokens, d]);
    let mut dv = Tensor::zeros(&[tokens, d]);
    for head in 0..heads {
        let probs = &cache.probs[head];
        let (qh, kh, vh) = (
            head_slice(&cache.q, head, dh),
            head_slice(&cache.k, head, dh),
            head_slice(&cache.v, head, dh),
        );
        let doh = head_slice(&dconcat, head, dh);
        let mut dscores = doh.product(&vh, false, true);
        let dvh = probs.product(&doh, true, false);
        for r in 0..tokens {
            let p = probs.row(r);
            let g = dscores.row_mut(r);
            let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gj, pj) in g.iter_mut().zip(p) {
                *gj = pj * (*gj - dot);
            }
        }
        let mut dqh = Tensor::zeros(&[tokens, dh]);
        gemm(scale, &dscores, false, &kh, false, 0.0, &mut dqh);
        let mut dkh = Tensor::zeros(&[tokens, dh]);
        gemm(scale, &dscores, true, &qh, false, 0.0, &mut dkh);
        write_head_slice(&mut dq, &dqh, head, dh);
        write_head_slice(&mut dk, &dkh, head, dh);
        write_head_slice(&mut dv, &dvh, head, dh);
    }

    let mut dh_in = Tensor::zeros(&[tokens, d]);
    let projections = [(&dq, &block.wq), (&dk, &block.wk), (&dv, &block.wv)];
    for (slot, (dp, w)) in projections.into_iter().enumerate() {
        if need_input_grad {
            gemm(1.0, dp, false, w, true, 1.0, &mut dh_in);
        }
        let (Some(qkv), Some(xa), Some(g)) = (adapters, cache.xa[slot].as_ref(), adapter_grads.as_deref_mut()) else {
            continue;
        };
        let ad = match slot {
            0 => &qkv.q,
            1 => &qkv.k,
            _ => &qkv.v,
        };
        let s = ad.scale();
        let t = dp.product(&ad.b, false, true);
        let (da, db) = &mut g[slot];
        gemm(s, xa, true, dp, false, 1.0, db);
        gemm(s, &cache.h, true, &t, false, 1.0, da);
        if need_input_grad {
            gemm(s, &t, false, &ad.a, true, 1.0, &mut dh_in);
        }
    }
    if !need_input_grad {
        return dout;
    }
    let mut dx = layer_norm_backward(&dh_in, &block.norm1, &cache.norm);
    dx.add_scaled(&dout, 1.0).expect("same shape");
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::lora::{attach_adapters, LoraConfig, PlacementPolicy};
    use crate::numerics::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn setup(policy: PlacementPolicy) -> (PriorNetModel, ClipTensor) {
        let cfg = EncoderConfig {
            d_model: 8,
            num_blocks: 3,
            heads: 2,
            tubelet: [2, 4, 4],
            mlp_ratio: 2,
            num_classes: 3,
            clip_len: 4,
            image_size: 8,
            seed: 11,
        };
        let mut model = PriorNetModel::new(cfg).unwrap();
        attach_adapters(&mut model, &LoraConfig { rank: 2, alpha: Some(3.0), policy }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // move B off zero and scale weights up so every path carries signal
        for qkv in model.adapters.iter_mut().flatten() {
            for ad in qkv.iter_mut() {
                ad.b = Tensor::randn(ad.b.shape(), 0.3, &mut rng);
            }
        }
        for b in &mut model.frozen.blocks {
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                *w = w.scaled(20.0);
            }
        }
        model.head.weight = model.head.weight.scaled(30.0);
        let clip = ClipTensor {
            frames: Tensor::randn(&[4, 8, 8, 3], 1.0, &mut rng),
            placeholder_mask: vec![false; 4],
        };
        (model, clip)
    }

    /// Loss `Σ wₖ·logitₖ` with fixed weights, checked against central differences
    /// over every trainable coordinate.
    fn check(policy: PlacementPolicy) {
        let (model, clip) = setup(policy);
        let dlogits = [0.7, -1.3, 0.4];
        let cache = model.forward_cached(&clip).unwrap();
        assert_eq!(cache.logits, model.logits(&clip).unwrap());
        let prefix = model.frozen_prefix(&clip).unwrap();
        assert_eq!(model.feature_from_prefix(&prefix), model.encode(&clip).unwrap());
        let mut grads = ModelGrads::zeros_like(&model);
        model.backward(&cache, &dlogits, &mut grads);
        let analytic: Vec<f64> = grads.slices().concat();

        let mut flat_model = model.clone();
        let params: Vec<f64> = flat_model.trainable_slices_mut().iter().flat_map(|s| s.to_vec()).collect();
        assert_eq!(params.len(), analytic.len());
        let numeric = finite_difference_gradient(
            |x: &[f64]| {
                let mut m = model.clone();
                let mut offset = 0;
                for s in m.trainable_slices_mut() {
                    let n = s.len();
                    s.copy_from_slice(&x[offset..offset + n]);
                    offset += n;
                }
                let l = m.logits(&clip).unwrap();
                Ok::<_, Infallible>(l.iter().zip(&dlogits).map(|(a, b)| a * b).sum())
            },
            &params,
            1e-5,
        )
        .unwrap();
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(scale > 1e-3);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!((a - n).abs() <= 1e-6 * scale.max(1.0), "coord {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn gradients_every_other() {
        check(PlacementPolicy::EveryOther);
    }

    #[test]
    fn gradients_single_upper_block() {
        check(PlacementPolicy::Explicit { layers: vec![1] });
    }

    #[test]
    fn gradients_head_only() {
        check(PlacementPolicy::Explicit { layers: vec![] });
    }
}
