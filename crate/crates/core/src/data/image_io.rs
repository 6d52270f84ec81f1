//! PNG / PPM images as `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::DataError;
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(p.0[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| image_err(path, e))
}

/// Writes PNG or binary PPM depending on the extension; values are clamped
/// to `[0, 1]` and rounded to 8 bits.
pub fn save_image(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(image_err(path, format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if e == "ppm" || e == "pnm" => ImageFormat::Pnm,
        _ => return Err(image_err(path, "output must end in .png or .ppm")),
    };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = image.data()[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, format).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[3, 5, 7], |k| ((k * 37) % 256) as f64 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &t).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(save_image(&dir.path().join("a.bmp"), &t).is_err());
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }
}
