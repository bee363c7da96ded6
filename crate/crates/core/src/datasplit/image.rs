use std::path::Path;

use image::ImageReader;

use crate::error::{CctError, Result};
use crate::numerics::{Element, Tensor};

/// Bilinear resize of a `[C,H,W]` buffer with half-pixel centres: output
/// pixel `y` samples source row `(y + 0.5)·H/H' − 0.5`, clamped to the edge.
/// Same-size resizes are exact copies.
pub fn bilinear_resize(src: &[f64], channels: usize, from: [usize; 2], to: [usize; 2]) -> Vec<f64> {
    let [h, w] = from;
    let [oh, ow] = to;
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = axis(oh, h);
    let cols = axis(ow, w);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, ty) in &rows {
            for &(x0, x1, tx) in &cols {
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

/// Decode a PNG or JPEG, convert to 1 (luma) or 3 (RGB) channels, resize to
/// `size` = `[H, W]`, and scale to `[0,1]`. Returns `[C,H,W]`.
pub fn load_image<T: Element>(path: &Path, size: [usize; 2], channels: usize) -> Result<Tensor<T>> {
    if channels != 1 && channels != 3 {
        return Err(CctError::Parameter(format!("images must have 1 or 3 channels, got {channels}")));
    }
    let decode_err = |source| CctError::Decode { path: path.to_path_buf(), source };
    let img = ImageReader::open(path)
        .map_err(|e| CctError::io(format!("opening image {}", path.display()), e))?
        .with_guessed_format()
        .map_err(|e| CctError::io(format!("reading image {}", path.display()), e))?
        .decode()
        .map_err(decode_err)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = if channels == 1 { img.to_luma8().into_raw() } else { img.to_rgb8().into_raw() };
    let mut planar = vec![0.0; channels * h * w];
    for (i, px) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * h * w + i] = v as f64;
        }
    }
    let resized = bilinear_resize(&planar, channels, [h, w], size);
    let data = resized.into_iter().map(|v| T::from_f64(v / 255.0)).collect();
    Tensor::new(vec![channels, size[0], size[1]], data)
}
