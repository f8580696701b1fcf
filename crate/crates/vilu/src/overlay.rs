//! PNG slices of an image with its label map blended on top.

use std::path::Path;

use image::{Rgb, RgbImage};
use vilu_core::data::{LabelMap, Volume, CLIP_HIGH, CLIP_LOW};

use crate::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [145, 30, 180], [70, 240, 240]];
const ALPHA: f64 = 0.5;

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[(class as usize - 1) % PALETTE.len()]
}

/// Number of slices along the last axis (1 for 2-D grids).
pub fn slice_count(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[2]
    } else {
        1
    }
}

/// Renders slice `z` (axis 2) as RGB. Intensities already in `[0, 1]` are
/// shown as they are; anything else goes through the CT clip window first.
pub fn render(image: &Volume, labels: Option<&LabelMap>, z: usize) -> Result<RgbImage> {
    let shape = image.shape();
    if z >= slice_count(shape) {
        return Err(Error::Usage(format!("slice {z} out of range for shape {shape:?}")));
    }
    if let Some(l) = labels {
        if l.shape() != shape {
            return Err(Error::Usage(format!("label shape {:?} differs from image {:?}", l.shape(), shape)));
        }
    }
    let (w, h) = (shape[0], shape[1]);
    let unit = image.data.iter().all(|&v| (0.0..=1.0).contains(&v));
    let gray = |v: f32| -> f64 {
        let v = v as f64;
        if unit {
            v
        } else {
            (v.clamp(CLIP_LOW, CLIP_HIGH) - CLIP_LOW) / (CLIP_HIGH - CLIP_LOW)
        }
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    let base = z * w * h;
    for y in 0..h {
        for x in 0..w {
            let i = base + y * w + x;
            let g = gray(image.data[i]) * 255.0;
            let px = match labels.map(|l| l.data[i]) {
                Some(c) if c > 0 => {
                    let col = class_color(c);
                    let mix = |k: usize| ((1.0 - ALPHA) * g + ALPHA * col[k] as f64).round() as u8;
                    [mix(0), mix(1), mix(2)]
                }
                _ => {
                    let g = g.round() as u8;
                    [g, g, g]
                }
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.into(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vilu_core::data::Geometry;

    #[test]
    fn blends_foreground_only() {
        let g = Geometry::new(&[2, 1, 2], &[1.0; 3]).unwrap();
        let img = Volume::new(g.clone(), vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        let lab = LabelMap::new(g, vec![0, 1, 0, 2], 3).unwrap();
        let s0 = render(&img, Some(&lab), 0).unwrap();
        assert_eq!(s0.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(s0.get_pixel(1, 0).0, [243, 140, 165]);
        let s1 = render(&img, Some(&lab), 1).unwrap();
        assert_eq!(s1.get_pixel(1, 0).0, [94, 154, 101]);
        assert!(render(&img, None, 2).is_err());
    }
}
