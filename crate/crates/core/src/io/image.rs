//! 8-bit image input/output (PNG and PPM) for source corpora and developed
//! photographs.

use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::autodiff::{Real, Tensor};
use crate::{Error, Result};

/// Load an image as an `(h, w, 3)` tensor in [0, 1].
pub fn load_image<E: Real>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?;
    let rgb: RgbImage = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw();
    Tensor::from_fn(&[h, w, 3], |i| E::from_f64(data[i] as f64 / 255.0))
}

/// Save an `(h, w, 3)` or `(h, w, 1)` tensor as an 8-bit image; values are
/// clamped to [0, 1] and rounded.
pub fn save_image<E: Real>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || (s[2] != 3 && s[2] != 1) {
        return Err(Error::Shape(format!("image tensor must be (h, w, 1|3), got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let quant = |v: E| -> u8 { (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8 };
    let d = t.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        if c == 3 {
            buf.extend_from_slice(&[quant(d[i * 3]), quant(d[i * 3 + 1]), quant(d[i * 3 + 2])]);
        } else {
            let g = quant(d[i]);
            buf.extend_from_slice(&[g, g, g]);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    DynamicImage::ImageRgb8(img)
        .save_with_format(path, format)
        .map_err(|e| Error::Input(format!("cannot write image {}: {e}", path.display())))?;
    Ok(())
}

/// Load every PNG/PPM in a directory, sorted by file name for determinism.
pub fn load_image_dir<E: Real>(dir: &Path) -> Result<Vec<Tensor<E>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("ppm") | Some("pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no PNG/PPM images in {}", dir.display())));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 3], |i| (i % 256) as f64 / 255.0).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_on_the_8_bit_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let t = ramp(9, 7);
        save_image(&path, &t).unwrap();
        let back: Tensor<f64> = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[9, 7, 3]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let t = ramp(5, 4);
        save_image(&path, &t).unwrap();
        let back: Tensor<f64> = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[5, 4, 3]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_tensors_broadcast_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let t = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64 / 15.0).unwrap();
        save_image(&path, &t).unwrap();
        let back: Tensor<f64> = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[4, 4, 3]);
        assert_eq!(back.at3(2, 1, 0), back.at3(2, 1, 2));
    }

    #[test]
    fn directory_listing_is_sorted_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&dir.path().join("b.png"), &ramp(4, 4)).unwrap();
        save_image(&dir.path().join("a.png"), &ramp(4, 4)).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "skip me").unwrap();
        let imgs: Vec<Tensor<f64>> = load_image_dir(dir.path()).unwrap();
        assert_eq!(imgs.len(), 2);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir::<f64>(empty.path()), Err(Error::Input(_))));
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let t = Tensor::<f64>::from_fn(&[4, 4, 3], |i| if i % 2 == 0 { -0.5 } else { 1.7 }).unwrap();
        save_image(&path, &t).unwrap();
        let back: Tensor<f64> = load_image(&path).unwrap();
        for (i, v) in back.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }
}
