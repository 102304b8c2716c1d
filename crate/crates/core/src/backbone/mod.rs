//! Frozen spatio-temporal transformer encoder with injectable Q/K/V adapters.
//!
//! Clips are cut into non-overlapping `t × h × w` tubelets, linearly embedded,
//! offset by a fixed sinusoidal position code, and passed through pre-norm
//! attention blocks. The feature is the token mean after a final layer norm;
//! a linear head maps it to class logits.

mod checkpoint;
mod layers;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::ClipTensor;
use crate::error::{Error, Result};
use crate::lora::QkvAdapters;
use crate::numerics::Tensor;
use crate::rng::{domain, keyed};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, ModelHeader, CHECKPOINT_MAGIC};
pub use layers::{attention_forward, block_forward, gelu};
pub use train::{ForwardCache, ModelGrads};

pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub heads: usize,
    /// Tubelet extent `[frames, rows, cols]`.
    pub tubelet: [usize; 3],
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub clip_len: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_blocks: 8,
            heads: 4,
            tubelet: [2, 8, 8],
            mlp_ratio: 4,
            num_classes: 4,
            clip_len: 16,
            image_size: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Smaller encoder for multi-seed experiments on a single core.
    pub fn compact() -> Self {
        Self {
            d_model: 32,
            num_blocks: 4,
            heads: 4,
            tubelet: [4, 16, 16],
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// Dimensions of a ViT-L-sized video encoder; used for parameter accounting only.
    pub fn large() -> Self {
        Self {
            d_model: 1024,
            num_blocks: 24,
            heads: 16,
            tubelet: [2, 16, 16],
            mlp_ratio: 4,
            num_classes: 4,
            clip_len: 16,
            image_size: 224,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.num_blocks < 2 {
            return Err(Error::invalid("the encoder needs at least two blocks"));
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(Error::invalid("need at least two classes and a positive MLP ratio"));
        }
        let [t, h, w] = self.tubelet;
        let divides = |part: usize, whole: usize| part > 0 && whole > 0 && whole.is_multiple_of(part);
        if !(divides(t, self.clip_len) && divides(h, self.image_size) && divides(w, self.image_size)) {
            return Err(Error::invalid(format!(
                "tubelet {:?} must divide the clip extent ({}, {}, {})",
                self.tubelet, self.clip_len, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn patch_len(&self) -> usize {
        self.tubelet.iter().product::<usize>() * 3
    }

    /// `(N/t)·(H/h)·(W/w)`.
    pub fn num_tokens(&self) -> usize {
        let [t, h, w] = self.tubelet;
        (self.clip_len / t) * (self.image_size / h) * (self.image_size / w)
    }
}

/// Tokens entering or leaving an attention block, `L × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
}

impl TokenMatrix {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2: LayerNorm,
    /// `d × hidden`
    pub w1: Tensor,
    pub b1: Vec<f64>,
    /// `hidden × d`
    pub w2: Tensor,
    pub b2: Vec<f64>,
    pub heads: usize,
}

/// Every backbone parameter that training must leave untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenWeights {
    /// `patch_len × d`
    pub embed_w: Tensor,
    pub embed_b: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNorm,
}

impl FrozenWeights {
    pub fn init(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let hidden = cfg.mlp_hidden();
        let mut rng = keyed(cfg.seed, &[domain::BACKBONE]);
        let std = WEIGHT_INIT_STD;
        let mut vec = |n: usize| Tensor::randn(&[n], std, &mut rng).into_data();
        let embed_b = vec(d);
        let mut rng = keyed(cfg.seed, &[domain::BACKBONE, 1]);
        let embed_w = Tensor::randn(&[cfg.patch_len(), d], std, &mut rng);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut rng = keyed(cfg.seed, &[domain::BACKBONE, 2, i as u64]);
                let mut mat = |r: usize, c: usize| Tensor::randn(&[r, c], std, &mut rng);
                let (wq, wk, wv, wo) = (mat(d, d), mat(d, d), mat(d, d), mat(d, d));
                let (w1, w2) = (mat(d, hidden), mat(hidden, d));
                let b1 = mat(1, hidden).into_data();
                let b2 = mat(1, d).into_data();
                BlockWeights {
                    norm1: LayerNorm::identity(d),
                    wq,
                    wk,
                    wv,
                    wo,
                    norm2: LayerNorm::identity(d),
                    w1,
                    b1,
                    w2,
                    b2,
                    heads: cfg.heads,
                }
            })
            .collect();
        Self {
            embed_w,
            embed_b,
            blocks,
            final_norm: LayerNorm::identity(d),
        }
    }

    /// Named views of every frozen array, in a fixed order.
    pub fn named_arrays(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out: Vec<(String, &[f64], Vec<usize>)> = vec![
            ("embed.w".into(), self.embed_w.data(), self.embed_w.shape().to_vec()),
            ("embed.b".into(), &self.embed_b, vec![self.embed_b.len()]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let vecs: [(&str, &[f64]); 6] = [
                ("norm1.gamma", &b.norm1.gamma),
                ("norm1.beta", &b.norm1.beta),
                ("norm2.gamma", &b.norm2.gamma),
                ("norm2.beta", &b.norm2.beta),
                ("mlp.b1", &b.b1),
                ("mlp.b2", &b.b2),
            ];
            for (name, v) in vecs {
                out.push((format!("block{i}.{name}"), v, vec![v.len()]));
            }
            for (name, t) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo), ("mlp.w1", &b.w1), ("mlp.w2", &b.w2)] {
                out.push((format!("block{i}.{name}"), t.data(), t.shape().to_vec()));
            }
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma, vec![self.final_norm.gamma.len()]));
        out.push(("final_norm.beta".into(), &self.final_norm.beta, vec![self.final_norm.beta.len()]));
        out
    }

    /// SHA-256 over every frozen value's little-endian bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, data, _) in self.named_arrays() {
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Trainable linear classifier on the pooled feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `d × C`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = keyed(cfg.seed, &[domain::BACKBONE, 3]);
        Self {
            weight: Tensor::randn(&[cfg.d_model, cfg.num_classes], WEIGHT_INIT_STD, &mut rng),
            bias: vec![0.0; cfg.num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

/// Backbone, optional per-block adapters and the classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorNetModel {
    pub config: EncoderConfig,
    pub frozen: FrozenWeights,
    /// One slot per block; `None` leaves the block unadapted.
    pub adapters: Vec<Option<QkvAdapters>>,
    pub head: ClassifierHead,
    positions: Tensor,
}

impl PriorNetModel {
    /// Freshly initialised backbone with no adapters.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let frozen = FrozenWeights::init(&config);
        let head = ClassifierHead::init(&config);
        Ok(Self::from_parts(config, frozen, vec![], head))
    }

    pub fn from_parts(
        config: EncoderConfig,
        frozen: FrozenWeights,
        mut adapters: Vec<Option<QkvAdapters>>,
        head: ClassifierHead,
    ) -> Self {
        adapters.resize(config.num_blocks, None);
        let positions = sinusoidal_positions(config.num_tokens(), config.d_model);
        Self {
            config,
            frozen,
            adapters,
            head,
            positions,
        }
    }

    pub fn num_adapters(&self) -> usize {
        3 * self.adapters.iter().flatten().count()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.iter().any(Option::is_some)
    }

    /// The same backbone and head with all adapters removed.
    pub fn without_adapters(&self) -> Self {
        Self {
            adapters: vec![None; self.config.num_blocks],
            ..self.clone()
        }
    }

    pub fn frozen_checksum(&self) -> String {
        self.frozen.checksum()
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let c = &self.config;
        if clip.num_frames() != c.clip_len || clip.height() != c.image_size || clip.width() != c.image_size {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: clip.frames.shape().to_vec(),
                right: vec![c.clip_len, c.image_size, c.image_size, 3],
            });
        }
        Ok(())
    }

    /// Patch matrix `L × patch_len` in token order `(t, row, col)`.
    pub fn patches(&self, clip: &ClipTensor) -> Result<Tensor> {
        self.check_clip(clip)?;
        Ok(extract_patches(clip, self.config.tubelet))
    }

    /// Linear tubelet embedding, without the position code.
    pub fn tubelet_embed(&self, clip: &ClipTensor) -> Result<TokenMatrix> {
        let patches = self.patches(clip)?;
        let mut tokens = patches.product(&self.frozen.embed_w, false, false);
        add_row_bias(&mut tokens, &self.frozen.embed_b);
        Ok(TokenMatrix { tokens })
    }

    pub(crate) fn input_tokens(&self, clip: &ClipTensor) -> Result<Tensor> {
        let mut tokens = self.tubelet_embed(clip)?.tokens;
        tokens.add_scaled(&self.positions, 1.0)?;
        Ok(tokens)
    }

    /// Pooled `d`-dimensional feature.
    pub fn encode(&self, clip: &ClipTensor) -> Result<Vec<f64>> {
        let mut x = self.input_tokens(clip)?;
        for (block, adapters) in self.frozen.blocks.iter().zip(&self.adapters) {
            x = block_forward(&x, block, adapters.as_ref());
        }
        let (normed, _) = layers::layer_norm(&x, &self.frozen.final_norm);
        Ok(layers::mean_rows(&normed))
    }

    pub fn classify(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if feature.len() != d {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: vec![feature.len()],
                right: vec![d],
            });
        }
        Ok(head_logits(&self.head, feature))
    }

    pub fn logits(&self, clip: &ClipTensor) -> Result<Vec<f64>> {
        let f = self.encode(clip)?;
        self.classify(&f)
    }
}

pub(crate) fn head_logits(head: &ClassifierHead, feature: &[f64]) -> Vec<f64> {
    let c = head.num_classes();
    let mut out = head.bias.clone();
    for (i, &f) in feature.iter().enumerate() {
        let row = head.weight.row(i);
        for k in 0..c {
            out[k] += f * row[k];
        }
    }
    out
}

pub(crate) fn add_row_bias(x: &mut Tensor, bias: &[f64]) {
    let cols = x.cols();
    for row in x.data_mut().chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn extract_patches(clip: &ClipTensor, tubelet: [usize; 3]) -> Tensor {
    let [t, ph, pw] = tubelet;
    let (n, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let (nt, nh, nw) = (n / t, h / ph, w / pw);
    let patch_len = t * ph * pw * 3;
    let src = clip.frames.data();
    let mut out = Vec::with_capacity(nt * nh * nw * patch_len);
    for ti in 0..nt {
        for hi in 0..nh {
            for wi in 0..nw {
                for dt in 0..t {
                    let frame = ti * t + dt;
                    for dy in 0..ph {
                        let row = hi * ph + dy;
                        let start = ((frame * h + row) * w + wi * pw) * 3;
                        out.extend_from_slice(&src[start..start + pw * 3]);
                    }
                }
            }
        }
    }
    Tensor::matrix(nt * nh * nw, patch_len, out).expect("patch layout")
}

/// Standard sine/cosine code over token positions.
pub fn sinusoidal_positions(num_tokens: usize, d: usize) -> Tensor {
    let mut pos = Tensor::zeros(&[num_tokens, d]);
    for i in 0..num_tokens {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = i as f64 * freq;
            pos.set(i, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_adapters, LoraConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(cfg: &EncoderConfig, seed: u64) -> ClipTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::randn(&[cfg.clip_len, cfg.image_size, cfg.image_size, 3], 0.3, &mut rng);
        ClipTensor {
            frames,
            placeholder_mask: vec![false; cfg.clip_len],
        }
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            num_blocks: 2,
            heads: 2,
            tubelet: [2, 4, 4],
            mlp_ratio: 2,
            num_classes: 3,
            clip_len: 4,
            image_size: 8,
            seed: 5,
        }
    }

    #[test]
    fn token_count() {
        assert_eq!(EncoderConfig::default().num_tokens(), 128);
        let model = PriorNetModel::new(EncoderConfig::default()).unwrap();
        let clip = random_clip(&model.config, 0);
        assert_eq!(model.tubelet_embed(&clip).unwrap().len(), 128);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { num_blocks: 1, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { tubelet: [3, 4, 4], ..tiny() }.validate().is_err());
        assert!(EncoderConfig::compact().validate().is_ok());
        assert!(EncoderConfig::large().validate().is_ok());
    }

    #[test]
    fn zero_clip_embeds_to_bias() {
        let model = PriorNetModel::new(tiny()).unwrap();
        let clip = ClipTensor::placeholders(4, 8, 8);
        let tokens = model.tubelet_embed(&clip).unwrap().tokens;
        for r in 0..tokens.rows() {
            assert_eq!(tokens.row(r), model.frozen.embed_b.as_slice());
        }
    }

    #[test]
    fn one_tubelet_changes_one_token() {
        let model = PriorNetModel::new(tiny()).unwrap();
        let a = random_clip(&model.config, 1);
        let mut b = a.clone();
        // pixel (frame 3, row 5, col 6) lies in tubelet (1, 1, 1) → token 1·4 + 1·2 + 1 = 7
        let idx = ((3 * 8 + 5) * 8 + 6) * 3 + 1;
        b.frames.data_mut()[idx] += 1.0;
        let (ta, tb) = (model.tubelet_embed(&a).unwrap().tokens, model.tubelet_embed(&b).unwrap().tokens);
        let changed: Vec<usize> = (0..ta.rows()).filter(|&r| ta.row(r) != tb.row(r)).collect();
        assert_eq!(changed, vec![7]);
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let model = PriorNetModel::new(tiny()).unwrap();
        let clip = random_clip(&model.config, 2);
        let f1 = model.encode(&clip).unwrap();
        assert_eq!(f1.len(), 16);
        assert_eq!(f1, model.encode(&clip).unwrap());
        for seed in 0..100 {
            let f = model.encode(&random_clip(&model.config, seed)).unwrap();
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn classify_is_affine() {
        let model = PriorNetModel::new(tiny()).unwrap();
        let f = model.encode(&random_clip(&model.config, 3)).unwrap();
        let zero = model.classify(&[0.0; 16]).unwrap();
        assert_eq!(zero, model.head.bias);
        let one = model.classify(&f).unwrap();
        assert_eq!(one.len(), 3);
        let f2: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        let two = model.classify(&f2).unwrap();
        for k in 0..3 {
            assert!(((two[k] - one[k]) - (one[k] - zero[k])).abs() < 1e-12);
        }
        assert!(model.classify(&[1.0]).is_err());
    }

    #[test]
    fn zero_init_adapters_leave_logits_unchanged() {
        let base = PriorNetModel::new(tiny()).unwrap();
        let mut adapted = base.clone();
        attach_adapters(&mut adapted, &LoraConfig { rank: 2, ..LoraConfig::default() }, 9).unwrap();
        assert_eq!(adapted.num_adapters(), 3);
        for seed in 0..10 {
            let clip = random_clip(&base.config, seed);
            let a = base.logits(&clip).unwrap();
            let b = adapted.logits(&clip).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
        assert_eq!(base.frozen_checksum(), adapted.frozen_checksum());
    }

    #[test]
    fn checksum_detects_any_frozen_change() {
        let model = PriorNetModel::new(tiny()).unwrap();
        let mut changed = model.clone();
        changed.frozen.blocks[1].norm2.beta[3] += 1e-12;
        assert_ne!(model.frozen_checksum(), changed.frozen_checksum());
        let mut head_only = model.clone();
        head_only.head.bias[0] = 1.0;
        assert_eq!(model.frozen_checksum(), head_only.frozen_checksum());
    }

    #[test]
    fn clip_shape_mismatch() {
        let model = PriorNetModel::new(tiny()).unwrap();
        assert!(model.encode(&ClipTensor::placeholders(4, 16, 16)).is_err());
    }
}
