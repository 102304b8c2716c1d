//! Binary clip store.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PNCL" | version: u16 | N: u16 | H: u16 | W: u16
//! N·H·W·3 × f32, frame-major
//! N × u8 placeholder mask (0 or 1)
//! ClipMeta as JSON until end of file
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{ClipMeta, ClipTensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"PNCL";
pub const CLIP_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        kind: "clip",
        message: message.into(),
    }
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit the clip header")))
}

pub fn encode_clip(clip: &ClipTensor, meta: &ClipMeta) -> Result<Vec<u8>> {
    let (n, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let mut buf = Vec::with_capacity(HEADER_LEN + clip.frames.len() * 4 + n + 128);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for (v, what) in [(n, "N"), (h, "H"), (w, "W")] {
        buf.extend_from_slice(&dim_u16(v, what)?.to_le_bytes());
    }
    for &v in clip.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend(clip.placeholder_mask.iter().map(|&m| m as u8));
    buf.extend_from_slice(&serde_json::to_vec(meta)?);
    Ok(buf)
}

pub fn decode_clip(bytes: &[u8]) -> Result<(ClipTensor, ClipMeta)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != CLIP_MAGIC {
        return Err(format_err("missing PNCL magic"));
    }
    let u16_at = |off: usize| u16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let version = u16_at(4);
    if version != CLIP_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let (n, h, w) = (u16_at(6) as usize, u16_at(8) as usize, u16_at(10) as usize);
    let values = n * h * w * 3;
    let mask_start = HEADER_LEN + values * 4;
    let meta_start = mask_start + n;
    if bytes.len() < meta_start {
        return Err(format_err("truncated payload"));
    }
    let data = bytes[HEADER_LEN..mask_start]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let frames = Tensor::new(vec![n, h, w, 3], data).map_err(|e| format_err(e.to_string()))?;
    let placeholder_mask = bytes[mask_start..meta_start]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format_err(format!("mask byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: ClipMeta = serde_json::from_slice(&bytes[meta_start..])?;
    Ok((
        ClipTensor {
            frames,
            placeholder_mask,
        },
        meta,
    ))
}

pub fn write_clip(path: impl AsRef<Path>, clip: &ClipTensor, meta: &ClipMeta) -> Result<()> {
    fs::write(path, encode_clip(clip, meta)?)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<(ClipTensor, ClipMeta)> {
    decode_clip(&fs::read(path)?)
}

/// Writes `clip_00000.pncl`, `clip_00001.pncl`, ... into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, clips: &[ClipTensor], metas: &[ClipMeta]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if clips.len() != metas.len() {
        return Err(Error::invalid("clip and metadata counts differ"));
    }
    fs::create_dir_all(dir)?;
    clips
        .iter()
        .zip(metas)
        .enumerate()
        .map(|(i, (c, m))| {
            let path = dir.join(format!("clip_{i:05}.pncl"));
            write_clip(&path, c, m)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.pncl` file in `dir`, in file-name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<ClipTensor>, Vec<ClipMeta>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pncl"))
        .collect();
    paths.sort();
    let mut clips = Vec::with_capacity(paths.len());
    let mut metas = Vec::with_capacity(paths.len());
    for p in paths {
        let (c, m) = read_clip(&p)?;
        clips.push(c);
        metas.push(m);
    }
    Ok((clips, metas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_clip() -> (ClipTensor, ClipMeta) {
        let mut clip = ClipTensor::placeholders(4, 2, 3);
        for i in [0, 2] {
            clip.frame_mut(i).iter_mut().enumerate().for_each(|(k, v)| *v = k as f64 / 32.0);
            clip.placeholder_mask[i] = false;
        }
        let meta = ClipMeta::for_clip(&clip, 2, "subject-7");
        (clip, meta)
    }

    #[test]
    fn header_layout() {
        let (clip, meta) = sample_clip();
        let bytes = encode_clip(&clip, &meta).unwrap();
        assert_eq!(&bytes[..4], b"PNCL");
        assert_eq!(&bytes[4..12], &[1, 0, 4, 0, 2, 0, 3, 0]);
        let mask_start = 12 + 4 * 2 * 3 * 3 * 4;
        assert_eq!(&bytes[mask_start..mask_start + 4], &[0, 1, 0, 1]);
        assert_eq!(bytes[mask_start + 4], b'{');
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (clip, meta) = sample_clip();
        let mut bytes = encode_clip(&clip, &meta).unwrap();
        assert!(decode_clip(&bytes[..20]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_clip(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, meta) = sample_clip();
        write_dataset(dir.path(), &[clip.clone(), clip.clone()], &[meta.clone(), meta.clone()]).unwrap();
        let (clips, metas) = read_dataset(dir.path()).unwrap();
        assert_eq!(clips, vec![clip.clone(), clip]);
        assert_eq!(metas, vec![meta.clone(), meta]);
    }

    proptest! {
        #[test]
        fn f32_representable_clips_round_trip(
            mask in proptest::collection::vec(any::<bool>(), 1..6),
            raw in proptest::collection::vec(0u8..=255, 12),
        ) {
            let n = mask.len();
            let mut clip = ClipTensor::placeholders(n, 2, 2);
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    clip.frame_mut(i).iter_mut().zip(&raw).for_each(|(v, &r)| *v = r as f64 / 256.0);
                }
                clip.placeholder_mask[i] = m;
            }
            let meta = ClipMeta::for_clip(&clip, 1, "s");
            let decoded = decode_clip(&encode_clip(&clip, &meta).unwrap()).unwrap();
            prop_assert_eq!(decoded, (clip, meta));
        }
    }
}
