//! Binary portable graymap (P5) output for slice inspection.

use std::fs;
use std::path::Path;

use cleftnet::Tensor;

use crate::CliError;

const GAP: usize = 2;

/// One z-slice of several `(d, h, w)` volumes placed side by side, each
/// panel mapped to 0..=255 by `to_gray`.
pub fn write_panels(path: &Path, panels: &[(&Tensor<f32>, f32)], z: usize) -> Result<(), CliError> {
    let [_, h, w] = *panels[0].0.shape() else {
        return Err(CliError::Data("slice export expects (d, h, w) volumes".into()));
    };
    let width = panels.len() * w + (panels.len() - 1) * GAP;
    let mut pixels = vec![0u8; width * h];
    for (p, (vol, scale)) in panels.iter().enumerate() {
        if vol.shape() != panels[0].0.shape() {
            return Err(CliError::Data("slice panels differ in shape".into()));
        }
        let x0 = p * (w + GAP);
        let plane = &vol.data()[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * w + x] * scale).round().clamp(0.0, 255.0);
                pixels[y * width + x0 + x] = v as u8;
            }
        }
    }
    let mut bytes = format!("P5\n{width} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `n` evenly spaced slice indices in `0..depth`.
pub fn slice_indices(depth: usize, n: usize) -> Vec<usize> {
    let n = n.min(depth);
    (0..n).map(|i| (2 * i + 1) * depth / (2 * n)).collect()
}
