//! Frame sampling, face-crop assembly with zero-frame placeholders, and
//! missing-face diagnostics.

mod frames;
mod image_ops;
mod sidecar;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use frames::{load_frame, load_frame_dir, save_frame};
pub use image_ops::{bilinear_resize, crop, BoundingBox};
pub use sidecar::{parse_detection_sidecar, read_detection_sidecar, write_detection_sidecar};
pub use store::{decode_clip, encode_clip, read_clip, read_dataset, write_clip, write_dataset, CLIP_MAGIC, CLIP_VERSION};

/// Uniformly spaced 1-based frame indices for one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndexPlan {
    pub total_frames: usize,
    pub clip_len: usize,
    pub indices: Vec<usize>,
}

/// `tᵢ = ⌊(i−1)(T−1)/(N−1)⌋ + 1` for `i = 1..=N`. Repeats indices when `T < N`.
pub fn plan_frame_indices(total_frames: usize, clip_len: usize) -> Result<FrameIndexPlan> {
    if total_frames < 1 {
        return Err(Error::invalid("a video needs at least one frame"));
    }
    if clip_len < 2 {
        return Err(Error::invalid("clip length must be at least 2"));
    }
    let indices = (0..clip_len)
        .map(|i| i * (total_frames - 1) / (clip_len - 1) + 1)
        .collect();
    Ok(FrameIndexPlan {
        total_frames,
        clip_len,
        indices,
    })
}

/// Detector output for one frame; `bbox == None` is a failed detection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_index: usize,
    pub bbox: Option<BoundingBox>,
}

/// N frames of `height × width × 3` network input plus the placeholder mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTensor {
    /// Shape `[N, H, W, 3]`.
    pub frames: Tensor,
    pub placeholder_mask: Vec<bool>,
}

impl ClipTensor {
    /// All-zero clip with every frame marked as a placeholder.
    pub fn placeholders(n: usize, height: usize, width: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[n, height, width, 3]),
            placeholder_mask: vec![true; n],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame_len(&self) -> usize {
        self.height() * self.width() * 3
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.frames.data_mut()[i * n..(i + 1) * n]
    }

    pub fn missing_count(&self) -> usize {
        self.placeholder_mask.iter().filter(|&&m| m).count()
    }

    /// Copy in which each placeholder frame repeats the nearest detected frame
    /// (earlier frame on ties). A clip with no detected frame is returned unchanged.
    /// The mask is kept so diagnostics can still group the clip by missingness.
    pub fn repeat_nearest_detected(&self) -> ClipTensor {
        let detected: Vec<usize> = (0..self.num_frames()).filter(|&i| !self.placeholder_mask[i]).collect();
        let mut out = self.clone();
        if detected.is_empty() {
            return out;
        }
        for i in 0..self.num_frames() {
            if !self.placeholder_mask[i] {
                continue;
            }
            let src = *detected
                .iter()
                .min_by_key(|&&j| (j.abs_diff(i), j))
                .expect("non-empty");
            let len = self.frame_len();
            out.frames.data_mut()[i * len..(i + 1) * len].copy_from_slice(self.frame(src));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub missing_count: usize,
    pub missing_rate: f64,
    pub label: usize,
    pub subject_id: String,
}

impl ClipMeta {
    pub fn for_clip(clip: &ClipTensor, label: usize, subject_id: impl Into<String>) -> Self {
        let missing_count = clip.missing_count();
        Self {
            missing_count,
            missing_rate: missing_count as f64 / clip.num_frames() as f64,
            label,
            subject_id: subject_id.into(),
        }
    }
}

/// Scale from raw 8-bit pixel values to network input.
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

/// Builds one clip from raw `[0, 255]` frames (indexed by `frame_index − 1`).
///
/// Detected frames are cropped, resized to `target × target` and scaled to
/// `[0, 1]`; failed detections become exact zero frames with the mask set.
pub fn assemble_clip(
    frames: &[Tensor],
    detections: &[DetectionRecord],
    plan: &FrameIndexPlan,
    target: usize,
    label: usize,
    subject_id: &str,
) -> Result<(ClipTensor, ClipMeta)> {
    if target == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    let mut clip = ClipTensor::placeholders(plan.clip_len, target, target);
    for (slot, &t) in plan.indices.iter().enumerate() {
        let record = detections
            .iter()
            .find(|d| d.frame_index == t)
            .ok_or(Error::MissingDetection(t))?;
        let Some(bbox) = record.bbox else {
            continue;
        };
        let raw = frames
            .get(t - 1)
            .ok_or_else(|| Error::invalid(format!("planned frame {t} exceeds the {} available", frames.len())))?;
        let face = bilinear_resize(&crop(raw, bbox)?, target, target)?;
        for (dst, src) in clip.frame_mut(slot).iter_mut().zip(face.data()) {
            *dst = src * PIXEL_SCALE;
        }
        clip.placeholder_mask[slot] = false;
    }
    let meta = ClipMeta::for_clip(&clip, label, subject_id);
    Ok((clip, meta))
}

/// Diagnostic bucket by the fraction of sampled frames without a face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MissingnessGroup {
    Low,
    Medium,
    High,
}

impl MissingnessGroup {
    pub const ALL: [MissingnessGroup; 3] = [Self::Low, Self::Medium, Self::High];
    pub const LOW_MAX: f64 = 2.0 / 16.0;
    pub const MEDIUM_MAX: f64 = 6.0 / 16.0;
}

pub fn missingness_group(rate: f64) -> MissingnessGroup {
    if rate <= MissingnessGroup::LOW_MAX {
        MissingnessGroup::Low
    } else if rate <= MissingnessGroup::MEDIUM_MAX {
        MissingnessGroup::Medium
    } else {
        MissingnessGroup::High
    }
}
