use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in pixel units; `x` is the column, `y` the row of the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, 3] => Ok((h, w)),
        other => Err(Error::invalid(format!("expected an H×W×3 image, got shape {other:?}"))),
    }
}

/// Copies the region inside `bbox` out of an H×W×3 image.
pub fn crop(image: &Tensor, bbox: BoundingBox) -> Result<Tensor> {
    let (height, width) = image_dims(image)?;
    if !bbox.fits(height, width) {
        return Err(Error::invalid(format!(
            "box {bbox:?} lies outside a {height}×{width} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(bbox.h * bbox.w * 3);
    for r in bbox.y..bbox.y + bbox.h {
        let start = (r * width + bbox.x) * 3;
        out.extend_from_slice(&src[start..start + bbox.w * 3]);
    }
    Tensor::new(vec![bbox.h, bbox.w, 3], out)
}

/// Source sample positions and weights along one axis, half-pixel centred with edge clamping.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `out_h × out_w`.
pub fn bilinear_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (height, width) = image_dims(image)?;
    if height == 0 || width == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize extents must be at least 1"));
    }
    let rows = axis_taps(height, out_h);
    let cols = axis_taps(width, out_w);
    let src = image.data();
    let px = |r: usize, c: usize, ch: usize| src[(r * width + c) * 3 + ch];
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            for ch in 0..3 {
                let top = px(r0, c0, ch) * (1.0 - fc) + px(r0, c1, ch) * fc;
                let bottom = px(r1, c0, ch) * (1.0 - fc) + px(r1, c1, ch) * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}
