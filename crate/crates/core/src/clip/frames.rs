//! Raw frame directories: one image per frame, ordered by file name.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FRAME_EXTENSIONS: [&str; 1] = ["png"];

/// Decodes an image to an `[h, w, 3]` tensor of raw `[0, 255]` values.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f64::from).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Writes an `[h, w, 3]` tensor of `[0, 255]` values as PNG, rounding and clamping.
pub fn save_frame(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let &[h, w, 3] = frame.shape() else {
        return Err(Error::invalid(format!("expected an [h, w, 3] frame, got {:?}", frame.shape())));
    };
    let bytes: Vec<u8> = frame.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches");
    img.save(path)?;
    Ok(())
}

/// Every PNG in `dir` sorted by file name; element `t − 1` is frame `t`.
pub fn load_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", dir.as_ref().display())));
    }
    paths.sort();
    paths.iter().map(load_frame).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("f002.png", 200.0), ("f001.png", 10.0), ("notes.txt", 0.0)] {
            let path = dir.path().join(name);
            if name.ends_with(".png") {
                let mut t = Tensor::zeros(&[3, 4, 3]);
                t.fill(v);
                t.data_mut()[5] = 255.0;
                save_frame(&path, &t).unwrap();
            } else {
                fs::write(&path, "x").unwrap();
            }
        }
        let frames = load_frame_dir(dir.path()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].shape(), &[3, 4, 3]);
        assert_eq!(frames[0].data()[0], 10.0);
        assert_eq!(frames[1].data()[0], 200.0);
        assert_eq!(frames[1].data()[5], 255.0);
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_frame_dir(dir.path()).is_err());
    }
}
