//! Labeled synthetic clips whose class controls both a moving grating and the
//! rate at which frames lose their face detection.
//!
//! Every clip mixes its own class grating with small random amounts of every
//! class grating (clip-level `pattern_noise`), plus per-pixel Gaussian noise.
//! Frames are masked independently with the class missing rate and replaced by
//! exact zeros.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::{ClipMeta, ClipTensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{domain, keyed};

/// Parameters of one class grating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    /// Cycles across the frame width.
    pub frequency: f64,
    /// Stripe direction in radians.
    pub orientation: f64,
    pub base_intensity: f64,
    /// Phase advance per frame, radians.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub subjects: usize,
    /// Per-class probability that a frame is missing.
    pub missing_rates: Vec<f64>,
    pub patterns: Vec<PatternParams>,
    /// Per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Std of the per-clip random weight given to each class grating.
    pub pattern_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let patterns = (0..4)
            .map(|c| PatternParams {
                frequency: 1.0 + 0.5 * c as f64,
                orientation: c as f64 * PI / 4.0,
                base_intensity: 0.5,
                drift: 0.3 + 0.1 * c as f64,
            })
            .collect();
        Self {
            num_classes: 4,
            clips_per_class: 200,
            clip_len: 16,
            height: 32,
            width: 32,
            subjects: 20,
            missing_rates: vec![0.02, 0.10, 0.25, 0.45],
            patterns,
            noise_std: 0.05,
            pattern_noise: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.clips_per_class == 0 || self.subjects == 0 {
            return Err(Error::invalid("need ≥ 2 classes, ≥ 1 clip per class and ≥ 1 subject"));
        }
        if self.clip_len == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("clip extent must be positive"));
        }
        if self.missing_rates.len() != self.num_classes || self.patterns.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "expected {} missing rates and patterns, got {} and {}",
                self.num_classes,
                self.missing_rates.len(),
                self.patterns.len()
            )));
        }
        if let Some(mu) = self.missing_rates.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::invalid(format!("missing rate {mu} outside [0, 1]")));
        }
        for p in &self.patterns {
            let finite = [p.frequency, p.orientation, p.drift].iter().all(|v| v.is_finite());
            if !finite || !(0.0..=1.0).contains(&p.base_intensity) {
                return Err(Error::invalid(format!("bad pattern parameters {p:?}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.pattern_noise >= 0.0 && self.noise_std.is_finite() && self.pattern_noise.is_finite())
        {
            return Err(Error::invalid("noise levels must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.num_classes * self.clips_per_class
    }
}

/// Grayscale grating broadcast to RGB, shape `[h, w, 3]`, values in `[0, 1]`.
pub fn class_pattern(class: usize, frame_index: usize, height: usize, width: usize, params: &PatternParams) -> Tensor {
    let amplitude = params.base_intensity.min(1.0 - params.base_intensity);
    let (s, c) = params.orientation.sin_cos();
    let k = 2.0 * PI * params.frequency / width as f64;
    // classes start at distinct phases so equal-frequency gratings still differ
    let phase = params.drift * frame_index as f64 + class as f64 * PI / 3.0;
    let mut data = Vec::with_capacity(height * width * 3);
    for row in 0..height {
        for col in 0..width {
            let v = params.base_intensity + amplitude * (k * (col as f64 * c + row as f64 * s) + phase).sin();
            let v = v.clamp(0.0, 1.0);
            data.extend_from_slice(&[v, v, v]);
        }
    }
    Tensor::new(vec![height, width, 3], data).expect("pattern shape")
}

pub fn subject_name(index: usize) -> String {
    format!("s{index:03}")
}

fn generate_clip(spec: &SynthSpec, index: usize, label: usize) -> (ClipTensor, ClipMeta) {
    let (n, h, w) = (spec.clip_len, spec.height, spec.width);
    let mut clip_rng = keyed(spec.seed, &[domain::SYNTH_CLIP, index as u64]);
    let mut weights = vec![0.0; spec.num_classes];
    weights[label] = 1.0;
    if spec.pattern_noise > 0.0 {
        let normal = Normal::new(0.0, spec.pattern_noise).expect("finite std");
        for wk in &mut weights {
            *wk += normal.sample(&mut clip_rng);
        }
    }

    let mut clip = ClipTensor::placeholders(n, h, w);
    let pixel_noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));
    for f in 0..n {
        let mut rng = keyed(spec.seed, &[domain::SYNTH_FRAME, index as u64, f as u64]);
        let missing = rng.gen::<f64>() < spec.missing_rates[label];
        clip.placeholder_mask[f] = missing;
        if missing {
            continue;
        }
        let frame = clip.frame_mut(f);
        frame.fill(0.5);
        for (k, params) in spec.patterns.iter().enumerate() {
            if weights[k] == 0.0 {
                continue;
            }
            let pattern = class_pattern(k, f, h, w, params);
            for (px, v) in frame.iter_mut().zip(pattern.data()) {
                *px += weights[k] * (v - params.base_intensity);
            }
        }
        for px in frame.iter_mut() {
            if let Some(noise) = &pixel_noise {
                *px += noise.sample(&mut rng);
            }
            *px = px.clamp(0.0, 1.0);
        }
    }
    let meta = ClipMeta::for_clip(&clip, label, subject_name(index % spec.subjects));
    (clip, meta)
}

/// Class-major clip order; subjects are assigned round-robin over the global clip index.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Vec<ClipTensor>, Vec<ClipMeta>)> {
    spec.validate()?;
    let mut clips = Vec::with_capacity(spec.num_clips());
    let mut metas = Vec::with_capacity(spec.num_clips());
    for label in 0..spec.num_classes {
        for j in 0..spec.clips_per_class {
            let (c, m) = generate_clip(spec, label * spec.clips_per_class + j, label);
            clips.push(c);
            metas.push(m);
        }
    }
    Ok((clips, metas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::encode_clip;

    fn small() -> SynthSpec {
        SynthSpec {
            clips_per_class: 6,
            clip_len: 8,
            height: 8,
            width: 8,
            subjects: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn byte_identical_across_runs() {
        let spec = small();
        let (a, ma) = generate_dataset(&spec).unwrap();
        let (b, mb) = generate_dataset(&spec).unwrap();
        for (((ca, ma), cb), mb) in a.iter().zip(&ma).zip(&b).zip(&mb) {
            assert_eq!(encode_clip(ca, ma).unwrap(), encode_clip(cb, mb).unwrap());
        }
        let (c, _) = generate_dataset(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balance_and_subjects() {
        let spec = small();
        let (_, metas) = generate_dataset(&spec).unwrap();
        for c in 0..4 {
            assert_eq!(metas.iter().filter(|m| m.label == c).count(), 6);
        }
        assert_eq!(metas[0].subject_id, "s000");
        assert_eq!(metas[5].subject_id, "s001");
        let mut subjects: Vec<_> = metas.iter().map(|m| m.subject_id.clone()).collect();
        subjects.sort();
        subjects.dedup();
        assert_eq!(subjects.len(), 4);
    }

    #[test]
    fn zero_rates_mean_no_placeholders() {
        let spec = SynthSpec {
            missing_rates: vec![0.0; 4],
            ..small()
        };
        let (clips, metas) = generate_dataset(&spec).unwrap();
        assert!(clips.iter().all(|c| c.missing_count() == 0));
        assert!(metas.iter().all(|m| m.missing_rate == 0.0));
    }

    #[test]
    fn empirical_missing_rate() {
        let spec = SynthSpec {
            clips_per_class: 200,
            height: 4,
            width: 4,
            missing_rates: vec![0.02, 0.10, 0.25, 0.5],
            ..SynthSpec::default()
        };
        let (_, metas) = generate_dataset(&spec).unwrap();
        let class3: Vec<f64> = metas.iter().filter(|m| m.label == 3).map(|m| m.missing_rate).collect();
        assert_eq!(class3.len(), 200);
        let mean = class3.iter().sum::<f64>() / 200.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn masked_frames_are_zero_and_values_in_range() {
        let (clips, _) = generate_dataset(&small()).unwrap();
        for clip in &clips {
            for f in 0..clip.num_frames() {
                let frame = clip.frame(f);
                if clip.placeholder_mask[f] {
                    assert!(frame.iter().all(|&v| v == 0.0));
                } else {
                    assert!(frame.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn patterns_in_range_and_distinct() {
        let spec = SynthSpec::default();
        let imgs: Vec<Tensor> = (0..4).map(|c| class_pattern(c, 3, 32, 32, &spec.patterns[c])).collect();
        assert_eq!(imgs[1], class_pattern(1, 3, 32, 32, &spec.patterns[1]));
        for img in &imgs {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let differing = imgs[a].data().iter().zip(imgs[b].data()).filter(|(x, y)| (*x - *y).abs() > 0.1).count();
                assert!(differing as f64 >= 0.1 * imgs[a].len() as f64, "classes {a} and {b}");
            }
        }
    }

    /// Plug-in mutual information between label and the missing count.
    #[test]
    fn mask_carries_label_information() {
        let spec = SynthSpec {
            clips_per_class: 100,
            height: 4,
            width: 4,
            ..SynthSpec::default()
        };
        let (_, metas) = generate_dataset(&spec).unwrap();
        let n = metas.len() as f64;
        let mut joint = vec![[0.0f64; 17]; 4];
        for m in &metas {
            joint[m.label][m.missing_count] += 1.0 / n;
        }
        let py: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let pm: Vec<f64> = (0..17).map(|k| joint.iter().map(|r| r[k]).sum()).collect();
        let mut mi = 0.0;
        for (y, row) in joint.iter().enumerate() {
            for (k, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    mi += p * (p / (py[y] * pm[k])).ln();
                }
            }
        }
        assert!(mi > 0.2, "{mi}");
    }

    #[test]
    fn validation() {
        assert!(SynthSpec { missing_rates: vec![0.1, 1.2, 0.0, 0.0], ..small() }.validate().is_err());
        assert!(SynthSpec { clips_per_class: 0, ..small() }.validate().is_err());
        assert!(SynthSpec { missing_rates: vec![0.1; 3], ..small() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }
}
