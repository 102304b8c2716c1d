//! Sample 16 frames from a 90-frame video, crop detected faces and insert
//! zero frames where the detector failed.

use priornet::clip::{assemble_clip, missingness_group, plan_frame_indices, BoundingBox, DetectionRecord};
use priornet::numerics::Tensor;

fn main() -> priornet::Result<()> {
    let (total, h, w) = (90, 120, 160);
    let frames: Vec<Tensor> = (0..total)
        .map(|t| {
            let data = (0..h * w * 3).map(|i| ((i / 3 + 7 * t) % 256) as f64).collect();
            Tensor::new(vec![h, w, 3], data)
        })
        .collect::<priornet::Result<_>>()?;
    // the detector loses the face between frames 30 and 50
    let detections: Vec<DetectionRecord> = (1..=total)
        .map(|t| DetectionRecord {
            frame_index: t,
            bbox: (!(30..=50).contains(&t)).then(|| BoundingBox::new(40, 20, 64, 64)),
        })
        .collect();

    let plan = plan_frame_indices(total, 16)?;
    println!("sampled frames: {:?}", plan.indices);
    let (clip, meta) = assemble_clip(&frames, &detections, &plan, 32, 2, "s007")?;
    println!("placeholder mask: {:?}", clip.placeholder_mask.iter().map(|&m| u8::from(m)).collect::<Vec<_>>());
    println!(
        "{} of {} frames missing (rate {:.3}, group {:?})",
        meta.missing_count,
        clip.num_frames(),
        meta.missing_rate,
        missingness_group(meta.missing_rate)
    );
    let zero_sum: f64 = clip.placeholder_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| clip.frame(i).iter().sum::<f64>()).sum();
    println!("pixel sum over placeholder frames: {zero_sum}");

    // a short video repeats frames rather than failing
    println!("T = 5: {:?}", plan_frame_indices(5, 16)?.indices);
    Ok(())
}
