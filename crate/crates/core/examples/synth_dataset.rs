//! Generate the default synthetic engagement dataset and summarise it.

use std::collections::BTreeMap;

use priornet::clip::{missingness_group, write_dataset};
use priornet::synth::{generate_dataset, SynthSpec};

fn main() -> priornet::Result<()> {
    let spec = SynthSpec::default();
    let (clips, metas) = generate_dataset(&spec)?;
    println!("{} clips of {}×{}×{}×3", clips.len(), spec.clip_len, spec.height, spec.width);
    for class in 0..spec.num_classes {
        let of_class: Vec<_> = metas.iter().filter(|m| m.label == class).collect();
        let rate = of_class.iter().map(|m| m.missing_rate).sum::<f64>() / of_class.len() as f64;
        println!("class {class}: {} clips, mean missing rate {rate:.3} (target {})", of_class.len(), spec.missing_rates[class]);
    }
    let mut groups = BTreeMap::new();
    for m in &metas {
        *groups.entry(missingness_group(m.missing_rate)).or_insert(0) += 1;
    }
    println!("missingness groups: {groups:?}");

    if let Some(dir) = std::env::args().nth(1) {
        let paths = write_dataset(&dir, &clips, &metas)?;
        println!("wrote {} clip files to {dir}", paths.len());
    }
    Ok(())
}
