//! Save a trained model, read it back and confirm identical predictions.

use priornet::backbone::{read_checkpoint, write_checkpoint, EncoderConfig};
use priornet::harness::{predict, train, DataSource, TrainConfig};
use priornet::synth::SynthSpec;

fn main() -> priornet::Result<()> {
    let config = TrainConfig {
        data: DataSource::Synth(SynthSpec {
            clips_per_class: 25,
            subjects: 5,
            ..SynthSpec::default()
        }),
        encoder: EncoderConfig::compact(),
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&config)?;
    let dir = std::env::temp_dir().join("priornet-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.pnmd");
    write_checkpoint(&path, &out.model, config.toggles.placeholders)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let (restored, header) = read_checkpoint(&path)?;
    println!("frozen checksum {} (placeholders: {})", header.frozen_checksum, header.placeholders);
    let clips = config.load_data()?.clips;
    let same = predict(&out.model, &clips)? == predict(&restored, &clips)?;
    println!("predictions identical on {} clips: {same}", clips.len());
    Ok(())
}
