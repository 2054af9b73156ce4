//! Decoding and encoding image files (PNG, PGM/PPM) to and from the
//! float pixel buffers the pipeline works with.

use std::path::Path;

use image::ImageReader;
use indret_core::patching::Image;

use crate::error::{AppError, Result};

/// Loads a PNG or PNM file into a float image in [0,1]. RGB inputs keep
/// their three channels; everything else is converted to grayscale.
pub fn load_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| AppError::Ingest(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| AppError::Ingest(format!("{}: {e}", path.display())))?;
    let decoded = reader
        .decode()
        .map_err(|e| AppError::Ingest(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match decoded.color().channel_count() {
        3 | 4 => (3, decoded.into_rgb8().into_raw()),
        _ => (1, decoded.into_luma8().into_raw()),
    };
    let pixels = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(w, h, channels, pixels)
        .map_err(|e| AppError::Ingest(format!("{}: {e}", path.display())))
}

/// Saves a single-channel image as 8-bit grayscale; the extension picks
/// the container (`.png` or `.pgm`).
pub fn save_gray(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(AppError::Validation(
            "grayscale output requires a single-channel image".into(),
        ));
    }
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path)
        .map_err(|e| AppError::Persistence(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn png_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let pixels: Vec<f64> = (0..64).map(|i| (i * 4) as f64 / 255.0).collect();
        let img = Image::new(8, 8, 1, pixels).unwrap();
        save_gray(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.width, 8);
        assert_eq!(back.channels, 1);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "P5\n4 2\n255\n").unwrap();
        f.write_all(&[0, 64, 128, 255, 10, 20, 30, 40]).unwrap();
        drop(f);
        let img = load_image(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (4, 2, 1));
        assert!((img.pixels[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_file_is_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("g.png");
        let img = Image::new(8, 8, 1, vec![0.5; 64]).unwrap();
        save_gray(&good, &img).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let bad = dir.path().join("b.png");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        match load_image(&bad) {
            Err(AppError::Ingest(_)) => {}
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_ingest_error() {
        assert!(matches!(
            load_image(Path::new("/nonexistent/file.png")),
            Err(AppError::Ingest(_))
        ));
    }
}
