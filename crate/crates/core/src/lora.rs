//! Low-rank residual adapters on the frozen query/key/value projections.
//!
//! Each adapted projection computes `X·W + (α/r)·(X·A)·B` with `A ∈ ℝ^{d×r}`
//! and `B ∈ ℝ^{r×d}`. `B` starts at zero, so a freshly placed adapter leaves
//! the backbone's output unchanged.

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, PriorNetModel};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Tensor};
use crate::rng::{domain, keyed};

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d × r`
    pub a: Tensor,
    /// `r × d`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Gaussian `A` (std 0.02) and all-zero `B`.
pub fn init_adapter(d: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if rank < 1 || rank > d {
        return Err(Error::invalid(format!("rank {rank} must lie in [1, {d}]")));
    }
    let mut rng = keyed(seed, &[domain::ADAPTER]);
    Ok(LoraAdapter {
        a: Tensor::randn(&[d, rank], ADAPTER_INIT_STD, &mut rng),
        b: Tensor::zeros(&[rank, d]),
        rank,
        alpha,
    })
}

/// Dense `ΔW = (α/r)·A·B`.
pub fn delta_weight(adapter: &LoraAdapter) -> Tensor {
    adapter.a.product(&adapter.b, false, false).scaled(adapter.scale())
}

fn check_projection(x: &Tensor, w: &Tensor, adapter: Option<&LoraAdapter>) -> Result<()> {
    let mismatch = |right: &Tensor| Error::ShapeMismatch {
        op: "apply_adapted_projection",
        left: x.shape().to_vec(),
        right: right.shape().to_vec(),
    };
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(mismatch(w));
    }
    if let Some(ad) = adapter {
        if ad.a.shape() != [w.rows(), ad.rank] || ad.b.shape() != [ad.rank, w.cols()] {
            return Err(mismatch(&ad.a));
        }
    }
    Ok(())
}

/// `X·W + (α/r)·(X·A)·B`, never forming `ΔW`.
pub fn apply_adapted_projection(x: &Tensor, w: &Tensor, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
    check_projection(x, w, adapter)?;
    Ok(project(x, w, adapter).0)
}

/// Projection plus the `X·A` intermediate that the backward pass needs.
pub(crate) fn project(x: &Tensor, w: &Tensor, adapter: Option<&LoraAdapter>) -> (Tensor, Option<Tensor>) {
    let mut out = x.product(w, false, false);
    let xa = adapter.map(|ad| {
        let xa = x.product(&ad.a, false, false);
        gemm(ad.scale(), &xa, false, &ad.b, false, 1.0, &mut out);
        xa
    });
    (out, xa)
}

/// `W + ΔW`.
pub fn merge_adapter(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = delta_weight(adapter);
    let mut merged = w.clone();
    merged.add_scaled(&delta, 1.0)?;
    Ok(merged)
}

/// Which attention blocks receive adapters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlacementPolicy {
    /// Blocks 0, 2, 4, ...
    #[default]
    EveryOther,
    All,
    Explicit { layers: Vec<usize> },
}

impl PlacementPolicy {
    pub fn adapted_layer_indices(&self, num_blocks: usize) -> Result<Vec<usize>> {
        match self {
            Self::EveryOther => Ok((0..num_blocks).step_by(2).collect()),
            Self::All => Ok((0..num_blocks).collect()),
            Self::Explicit { layers } => {
                if let Some(&bad) = layers.iter().find(|&&i| i >= num_blocks) {
                    return Err(Error::invalid(format!("block {bad} out of range for {num_blocks} blocks")));
                }
                let mut sorted = layers.clone();
                sorted.sort_unstable();
                sorted.dedup();
                Ok(sorted)
            }
        }
    }
}

/// Adapter hyperparameters. `alpha` defaults to `rank` (unit scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: Option<f64>,
    pub policy: PlacementPolicy,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            policy: PlacementPolicy::EveryOther,
        }
    }
}

impl LoraConfig {
    /// Rank 16 on every other block; the setting used with `EncoderConfig::large`.
    pub fn large() -> Self {
        Self {
            rank: 16,
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

/// One adapter each for Q, K and V of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkvAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

impl QkvAdapters {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &LoraAdapter)> {
        [("q", &self.q), ("k", &self.k), ("v", &self.v)].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        [&mut self.q, &mut self.k, &mut self.v].into_iter()
    }
}

/// Attaches zero-output Q/K/V adapters to the blocks selected by `lora.policy`,
/// replacing any adapters already present. `seed` keys the `A` initialisation.
pub fn attach_adapters(model: &mut PriorNetModel, lora: &LoraConfig, seed: u64) -> Result<()> {
    let d = model.config.d_model;
    let selected = lora.policy.adapted_layer_indices(model.config.num_blocks)?;
    model.adapters = vec![None; model.config.num_blocks];
    for i in selected {
        let key = |proj: u64| {
            let mut rng = keyed(seed, &[domain::ADAPTER, i as u64, proj]);
            rand::RngCore::next_u64(&mut rng)
        };
        model.adapters[i] = Some(QkvAdapters {
            q: init_adapter(d, lora.rank, lora.alpha(), key(0))?,
            k: init_adapter(d, lora.rank, lora.alpha(), key(1))?,
            v: init_adapter(d, lora.rank, lora.alpha(), key(2))?,
        });
    }
    Ok(())
}

/// Builds the frozen backbone for `cfg` and attaches adapters per `lora`.
pub fn place_adapters(cfg: &EncoderConfig, lora: &LoraConfig, seed: u64) -> Result<PriorNetModel> {
    let mut model = PriorNetModel::new(cfg.clone())?;
    attach_adapters(&mut model, lora, seed)?;
    Ok(model)
}

/// Exact parameter counts for a backbone configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Q, K, V, O and the two MLP matrices over all blocks.
    pub block_matrices: usize,
    /// Everything else that stays frozen: embedding, biases, norms.
    pub other_frozen: usize,
    pub adapters: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn for_config(cfg: &EncoderConfig, lora: Option<&LoraConfig>) -> Result<Self> {
        let d = cfg.d_model;
        let hidden = cfg.mlp_hidden();
        let per_block_matrices = 4 * d * d + 2 * d * hidden;
        // two norms (γ, β) plus the two MLP biases
        let per_block_other = 4 * d + hidden + d;
        let embed = cfg.patch_len() * d + d;
        let final_norm = 2 * d;
        let adapters = match lora {
            Some(l) => {
                if l.rank < 1 || l.rank > d {
                    return Err(Error::invalid("adapter rank out of range"));
                }
                l.policy.adapted_layer_indices(cfg.num_blocks)?.len() * 3 * 2 * d * l.rank
            }
            None => 0,
        };
        Ok(Self {
            block_matrices: cfg.num_blocks * per_block_matrices,
            other_frozen: cfg.num_blocks * per_block_other + embed + final_norm,
            adapters,
            head: d * cfg.num_classes + cfg.num_classes,
        })
    }

    pub fn for_model(model: &PriorNetModel) -> Self {
        let mut counts = Self::for_config(&model.config, None).expect("valid model config");
        counts.adapters = model
            .adapters
            .iter()
            .flatten()
            .flat_map(|qkv| qkv.iter().map(|(_, a)| a.num_params()).collect::<Vec<_>>())
            .sum();
        counts
    }

    pub fn backbone(&self) -> usize {
        self.block_matrices + self.other_frozen
    }

    /// `(adapters + head) / backbone`.
    pub fn trainable_fraction(&self) -> f64 {
        (self.adapters + self.head) as f64 / self.backbone() as f64
    }

    /// `adapters / backbone`, head excluded.
    pub fn adapter_fraction(&self) -> f64 {
        self.adapters as f64 / self.backbone() as f64
    }
}

pub fn trainable_fraction(model: &PriorNetModel) -> f64 {
    ParamCounts::for_model(model).trainable_fraction()
}
