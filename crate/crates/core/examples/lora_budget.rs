//! Adapter placement, zero-init behaviour and the trainable-parameter budget.

use priornet::backbone::{EncoderConfig, PriorNetModel};
use priornet::clip::ClipTensor;
use priornet::lora::{attach_adapters, delta_weight, LoraConfig, ParamCounts, PlacementPolicy};

fn main() -> priornet::Result<()> {
    let big = EncoderConfig::large();
    for (name, policy) in [("every other", PlacementPolicy::EveryOther), ("all", PlacementPolicy::All)] {
        for rank in [4, 8, 16, 32] {
            let lora = LoraConfig {
                rank,
                policy: policy.clone(),
                ..LoraConfig::default()
            };
            let c = ParamCounts::for_config(&big, Some(&lora))?;
            println!(
                "d={} L={} {name:>11} r={rank:>2}: {:>9} adapter params, {:.3}% of the backbone",
                big.d_model,
                big.num_blocks,
                c.adapters,
                100.0 * c.adapter_fraction()
            );
        }
    }

    let cfg = EncoderConfig::compact();
    let mut model = PriorNetModel::new(cfg.clone())?;
    let clip = ClipTensor::placeholders(cfg.clip_len, cfg.image_size, cfg.image_size);
    let before = model.logits(&clip)?;
    attach_adapters(&mut model, &LoraConfig::default(), 0)?;
    println!("adapted blocks: {:?}", PlacementPolicy::EveryOther.adapted_layer_indices(cfg.num_blocks)?);
    let after = model.logits(&clip)?;
    let q = &model.adapters[0].as_ref().expect("block 0 is adapted").q;
    println!("‖ΔW_q‖∞ at init: {}", delta_weight(q).max_abs());
    println!("logits unchanged by zero-init adapters: {}", before == after);
    Ok(())
}
