//! Where do zero-frame placeholders help? Accuracy by missing-face group for
//! the full model against the same model fed repeated frames instead.

use priornet::backbone::EncoderConfig;
use priornet::harness::{missingness_diagnostic, train_on, Toggles, TrainConfig};

fn main() -> priornet::Result<()> {
    let base = TrainConfig {
        encoder: EncoderConfig::compact(),
        ..TrainConfig::default()
    };
    let data = base.load_data()?;
    let with = train_on(&base, &data)?;
    let without_cfg = base.with_toggles(Toggles::new(false, true, true));
    let without = train_on(&without_cfg, &data)?;

    let held_out = data.subset(&with.split.eval);
    let report = missingness_diagnostic(&with.model, true, &without.model, false, &held_out)?;
    println!("{:<8} {:>5} {:>13} {:>13} {:>7}", "group", "clips", "placeholders", "repeat frame", "delta");
    for g in &report.groups {
        println!("{:<8} {:>5} {:>13.3} {:>13.3} {:>+7.3}", format!("{:?}", g.group), g.count, g.accuracy_a, g.accuracy_b, g.delta);
    }
    Ok(())
}
