//! All eight component combinations for one or more seeds.
//!
//! `cargo run --release --example ablation_grid -- [seeds] [epochs]`

use priornet::backbone::EncoderConfig;
use priornet::clip::MissingnessGroup;
use priornet::harness::{run_ablation_on, TrainConfig};

fn main() -> priornet::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("arguments are integers"));
    let seeds = args.next().unwrap_or(1);
    let epochs = args.next().unwrap_or(30);
    let base = TrainConfig {
        encoder: EncoderConfig::compact(),
        epochs,
        ..TrainConfig::default()
    };
    let mut best = 0;
    for seed in 0..seeds as u64 {
        let cfg = base.reseeded(seed);
        let run = run_ablation_on(&cfg, &cfg.load_data()?)?;
        println!("seed {seed}");
        println!("  {:<38} {:>6} {:>6} {:>6} {:>6} {:>6}", "variant", "acc", "F1", "Low", "Med", "High");
        for r in &run.rows {
            println!(
                "  {:<38} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                r.variant,
                r.accuracy,
                r.weighted_f1,
                r.group(MissingnessGroup::Low).accuracy,
                r.group(MissingnessGroup::Medium).accuracy,
                r.group(MissingnessGroup::High).accuracy
            );
        }
        best += usize::from(run.full_is_best());
    }
    println!("full model best in {best}/{seeds} seeds");
    Ok(())
}
