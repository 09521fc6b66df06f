//! Binary PGM/PPM writers for inspecting images.

use std::fs;
use std::path::Path;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1,H,W]`/`[H,W]` image as P5 or a `[3,H,W]` image as P6.
/// Values are clamped to `[0, 1]` and scaled to 255.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return dim_err(format!("cannot encode image of shape {:?}", img.shape())),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    let hw = h * w;
    for i in 0..hw {
        for ch in 0..c {
            out.push(to_byte(d[ch * hw + i]));
        }
    }
    Ok(out)
}

pub fn write_pnm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pnm(img)?)?;
    Ok(())
}
