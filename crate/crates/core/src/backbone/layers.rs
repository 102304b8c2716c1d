use super::{add_row_bias, BlockWeights, LayerNorm, TokenMatrix};
use crate::error::{Error, Result};
use crate::lora::{project, QkvAdapters};
use crate::numerics::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Tensor, norm: &LayerNorm) -> (Tensor, NormCache) {
    let (rows, d) = (x.rows(), x.cols());
    let mut xhat = x.clone();
    let mut out = Tensor::zeros(&[rows, d]);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        rstd.push(s);
        let src = xhat.row(r);
        let dst = out.row_mut(r);
        for j in 0..d {
            dst[j] = norm.gamma[j] * src[j] + norm.beta[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(dy: &Tensor, norm: &LayerNorm, cache: &NormCache) -> Tensor {
    let (rows, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[rows, d]);
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dxhat[j] = g[j] * norm.gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = cache.rstd[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

pub(crate) fn mean_rows(x: &Tensor) -> Vec<f64> {
    let (rows, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

fn softmax_rows(s: &mut Tensor) {
    let cols = s.cols();
    for row in s.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub(crate) fn head_slice(x: &Tensor, head: usize, dh: usize) -> Tensor {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[head * dh..(head + 1) * dh]);
    }
    Tensor::matrix(rows, dh, out).expect("head slice")
}

pub(crate) fn write_head_slice(dst: &mut Tensor, src: &Tensor, head: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// Intermediates of one attention sub-layer.
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    pub norm: NormCache,
    pub h: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `h·A` per adapted projection, in Q/K/V order.
    pub xa: [Option<Tensor>; 3],
    /// Row-stochastic attention weights per head.
    pub probs: Vec<Tensor>,
}

/// `X + Attn(LN(X))·W_o`, caching what the backward pass needs.
pub(crate) fn attention_cached(x: &Tensor, block: &BlockWeights, adapters: Option<&QkvAdapters>) -> (Tensor, AttentionCache) {
    let (h, norm) = layer_norm(x, &block.norm1);
    let (q, xa_q) = project(&h, &block.wq, adapters.map(|a| &a.q));
    let (k, xa_k) = project(&h, &block.wk, adapters.map(|a| &a.k));
    let (v, xa_v) = project(&h, &block.wv, adapters.map(|a| &a.v));
    let (tokens, d) = (x.rows(), x.cols());
    let dh = d / block.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Tensor::zeros(&[tokens, d]);
    let mut probs = Vec::with_capacity(block.heads);
    for head in 0..block.heads {
        let (qh, kh, vh) = (head_slice(&q, head, dh), head_slice(&k, head, dh), head_slice(&v, head, dh));
        let mut scores = Tensor::zeros(&[tokens, tokens]);
        gemm(scale, &qh, false, &kh, true, 0.0, &mut scores);
        softmax_rows(&mut scores);
        let oh = scores.product(&vh, false, false);
        write_head_slice(&mut concat, &oh, head, dh);
        probs.push(scores);
    }
    let mut out = x.clone();
    gemm(1.0, &concat, false, &block.wo, false, 1.0, &mut out);
    let cache = AttentionCache {
        norm,
        h,
        q,
        k,
        v,
        xa: [xa_q, xa_k, xa_v],
        probs,
    };
    (out, cache)
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache {
    pub norm: NormCache,
    pub pre: Tensor,
}

pub(crate) fn mlp_cached(x: &Tensor, block: &BlockWeights) -> (Tensor, MlpCache) {
    let (h, norm) = layer_norm(x, &block.norm2);
    let mut pre = h.product(&block.w1, false, false);
    add_row_bias(&mut pre, &block.b1);
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut out = x.clone();
    gemm(1.0, &act, false, &block.w2, false, 1.0, &mut out);
    add_row_bias(&mut out, &block.b2);
    (out, MlpCache { norm, pre })
}

fn check_tokens(x: &Tensor, block: &BlockWeights) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != block.wq.rows() || x.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            left: x.shape().to_vec(),
            right: block.wq.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pre-norm multi-head self-attention with residual: `X + Attn(LN(X))`.
///
/// Q, K and V use `X(W + ΔW)` when adapters are supplied.
pub fn attention_forward(x: &TokenMatrix, block: &BlockWeights, adapters: Option<&QkvAdapters>) -> Result<TokenMatrix> {
    check_tokens(&x.tokens, block)?;
    if let Some(a) = adapters {
        for (_, ad) in a.iter() {
            if ad.dim() != x.tokens.cols() {
                return Err(Error::ShapeMismatch {
                    op: "attention_forward",
                    left: x.tokens.shape().to_vec(),
                    right: ad.a.shape().to_vec(),
                });
            }
        }
    }
    Ok(TokenMatrix {
        tokens: attention_cached(&x.tokens, block, adapters).0,
    })
}

/// Attention sub-layer followed by the MLP sub-layer.
pub fn block_forward(x: &Tensor, block: &BlockWeights, adapters: Option<&QkvAdapters>) -> Tensor {
    let (x1, _) = attention_cached(x, block, adapters);
    mlp_cached(&x1, block).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{EncoderConfig, FrozenWeights, PriorNetModel};
    use crate::lora::{attach_adapters, merge_adapter, LoraConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_and_adapters() -> (BlockWeights, QkvAdapters) {
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            tubelet: [2, 4, 4],
            clip_len: 4,
            image_size: 8,
            ..EncoderConfig::default()
        };
        let mut model = PriorNetModel::new(cfg).unwrap();
        attach_adapters(&mut model, &LoraConfig { rank: 2, ..LoraConfig::default() }, 1).unwrap();
        let block = FrozenWeights::init(&model.config).blocks.remove(0);
        let mut adapters = model.adapters[0].clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ad in adapters.iter_mut() {
            ad.b = Tensor::randn(&[2, 8], 0.5, &mut rng);
        }
        (block, adapters)
    }

    #[test]
    fn zero_branch_matches_no_adapter() {
        let (block, mut adapters) = block_and_adapters();
        for ad in adapters.iter_mut() {
            ad.b.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = TokenMatrix { tokens: Tensor::randn(&[6, 8], 1.0, &mut rng) };
        let a = attention_forward(&x, &block, None).unwrap();
        let b = attention_forward(&x, &block, Some(&adapters)).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) <= 1e-12);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (block, adapters) = block_and_adapters();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let (out, cache) = attention_cached(&x, &block, Some(&adapters));
        assert!(cache.probs.iter().all(|p| p.data() == [1.0]));
        let (h, _) = layer_norm(&x, &block.norm1);
        let wv = merge_adapter(&block.wv, &adapters.v).unwrap();
        let mut expected = x.clone();
        expected.add_scaled(&h.matmul(&wv).unwrap().matmul(&block.wo).unwrap(), 1.0).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let (block, adapters) = block_and_adapters();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 8]);
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(p));
        }
        let out = attention_forward(&TokenMatrix { tokens: x }, &block, Some(&adapters)).unwrap().tokens;
        let outp = attention_forward(&TokenMatrix { tokens: xp }, &block, Some(&adapters)).unwrap().tokens;
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((outp.at(i, j) - out.at(p, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let (block, _) = block_and_adapters();
        let x = TokenMatrix { tokens: Tensor::zeros(&[3, 5]) };
        assert!(attention_forward(&x, &block, None).is_err());
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
