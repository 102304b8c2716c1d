//! JSON-Lines detection sidecars: one `{"frame": int, "box": [x, y, w, h] | null}` per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, DetectionRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    frame: usize,
    #[serde(rename = "box")]
    bbox: Option<[usize; 4]>,
}

pub fn read_detection_sidecar(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_detection_sidecar(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses sidecar text; errors carry the 1-based line number.
pub fn parse_detection_sidecar(text: &str) -> std::result::Result<Vec<DetectionRecord>, (usize, String)> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: SidecarLine = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
        if parsed.frame == 0 {
            return Err((i + 1, "frame indices are 1-based".into()));
        }
        let bbox = match parsed.bbox {
            Some([_, _, w, h]) if w == 0 || h == 0 => {
                return Err((i + 1, "box width and height must be positive".into()))
            }
            Some([x, y, w, h]) => Some(BoundingBox::new(x, y, w, h)),
            None => None,
        };
        records.push(DetectionRecord {
            frame_index: parsed.frame,
            bbox,
        });
    }
    Ok(records)
}

pub fn write_detection_sidecar(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = SidecarLine {
            frame: r.frame_index,
            bbox: r.bbox.map(|b| [b.x, b.y, b.w, b.h]),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detected_and_failed_lines() {
        let recs = parse_detection_sidecar("{\"frame\":3,\"box\":[10,12,50,60]}\n{\"frame\":4,\"box\":null}\n").unwrap();
        assert_eq!(recs[0].frame_index, 3);
        assert_eq!(recs[0].bbox, Some(BoundingBox::new(10, 12, 50, 60)));
        assert_eq!(recs[1].frame_index, 4);
        assert_eq!(recs[1].bbox, None);
    }

    #[test]
    fn empty_file() {
        assert!(parse_detection_sidecar("").unwrap().is_empty());
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_detection_sidecar("{\"frame\":1,\"box\":null}\n\n{\"frame\":2,\"box\":[1,2]}\n").unwrap_err();
        assert_eq!(err.0, 3);
        let err = parse_detection_sidecar("{\"frame\":1,\"box\":[0,0,0,4]}").unwrap_err();
        assert_eq!(err.0, 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        let recs = vec![
            DetectionRecord { frame_index: 1, bbox: Some(BoundingBox::new(0, 1, 2, 3)) },
            DetectionRecord { frame_index: 2, bbox: None },
        ];
        write_detection_sidecar(&path, &recs).unwrap();
        assert_eq!(read_detection_sidecar(&path).unwrap(), recs);
        assert!(matches!(read_detection_sidecar(dir.path().join("absent")), Err(Error::Io(_))));
    }
}
