use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

/// A decodable PNG on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedImage {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl RenderedImage {
    /// Opens a PNG file, decoding it once to check it is well formed.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, String> {
        let path = path.into();
        let img = decode_png(&path)?;
        if img.width() == 0 || img.height() == 0 {
            return Err("image has a zero dimension".into());
        }
        Ok(Self {
            width: img.width(),
            height: img.height(),
            path,
        })
    }

    pub fn rgba(&self) -> Result<RgbaImage, String> {
        decode_png(&self.path)
    }

    /// Pixels with alpha composited over white.
    pub fn rgb(&self) -> Result<RgbImage, String> {
        Ok(composite_over_white(&self.rgba()?))
    }
}

fn decode_png(path: &Path) -> Result<RgbaImage, String> {
    let mut reader = ImageReader::open(path).map_err(|e| e.to_string())?;
    reader.set_format(ImageFormat::Png);
    reader
        .decode()
        .map(|d| d.to_rgba8())
        .map_err(|e| e.to_string())
}

pub fn composite_over_white(img: &RgbaImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        let a = u32::from(p[3]);
        let blend = |c: u8| ((u32::from(c) * a + 255 * (255 - a) + 127) / 255) as u8;
        image::Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConstraints {
    pub min_side: u32,
    pub max_side: u32,
    pub max_blank_fraction: f64,
    /// Per-channel tolerance around the modal color when counting blank pixels.
    pub blank_epsilon: u8,
}

impl Default for ImageConstraints {
    fn default() -> Self {
        Self {
            min_side: 256,
            max_side: 4096,
            max_blank_fraction: 0.98,
            blank_epsilon: 8,
        }
    }
}

impl ImageConstraints {
    pub fn check(&self) -> Result<(), String> {
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(format!(
                "need 0 < min_side ({}) <= max_side ({})",
                self.min_side, self.max_side
            ));
        }
        if !(0.0..=1.0).contains(&self.max_blank_fraction) {
            return Err(format!(
                "max_blank_fraction {} outside [0, 1]",
                self.max_blank_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationFailure {
    #[error("min-side: shorter side is {measured}px, need at least {limit}px")]
    MinSide { measured: u32, limit: u32 },
    #[error("max-side: longer side is {measured}px, limit is {limit}px")]
    MaxSide { measured: u32, limit: u32 },
    #[error("blank-fraction: {measured:.4} of pixels match the modal color, limit is {limit}")]
    BlankFraction { measured: f64, limit: f64 },
    #[error("undecodable: {0}")]
    Undecodable(String),
}

impl ValidationFailure {
    pub fn constraint(&self) -> &'static str {
        match self {
            ValidationFailure::MinSide { .. } => "min-side",
            ValidationFailure::MaxSide { .. } => "max-side",
            ValidationFailure::BlankFraction { .. } => "blank-fraction",
            ValidationFailure::Undecodable(_) => "decodable",
        }
    }
}

pub fn validate_image(
    img: &RenderedImage,
    constraints: &ImageConstraints,
) -> Result<(), ValidationFailure> {
    check_sides(img.width, img.height, constraints)?;
    let pixels = img.rgb().map_err(ValidationFailure::Undecodable)?;
    validate_pixels(&pixels, constraints)
}

pub fn validate_pixels(
    img: &RgbImage,
    constraints: &ImageConstraints,
) -> Result<(), ValidationFailure> {
    check_sides(img.width(), img.height(), constraints)?;
    let measured = blank_fraction(img, constraints.blank_epsilon);
    if measured > constraints.max_blank_fraction {
        return Err(ValidationFailure::BlankFraction {
            measured,
            limit: constraints.max_blank_fraction,
        });
    }
    Ok(())
}

fn check_sides(w: u32, h: u32, c: &ImageConstraints) -> Result<(), ValidationFailure> {
    let (short, long) = (w.min(h), w.max(h));
    if short < c.min_side {
        return Err(ValidationFailure::MinSide {
            measured: short,
            limit: c.min_side,
        });
    }
    if long > c.max_side {
        return Err(ValidationFailure::MaxSide {
            measured: long,
            limit: c.max_side,
        });
    }
    Ok(())
}

/// Fraction of pixels whose channels all lie within `epsilon` of the most
/// frequent color (ties broken by the smaller color value).
pub fn blank_fraction(img: &RgbImage, epsilon: u8) -> f64 {
    let total = u64::from(img.width()) * u64::from(img.height());
    if total == 0 {
        return 1.0;
    }
    let mut counts: HashMap<[u8; 3], u64> = HashMap::new();
    for p in img.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, _)| *c)
        .unwrap_or([255; 3]);
    let near = counts
        .iter()
        .filter(|(c, _)| c.iter().zip(modal).all(|(&a, b)| a.abs_diff(b) <= epsilon))
        .map(|(_, n)| n)
        .sum::<u64>();
    near as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]))
    }

    #[test]
    fn forty_percent_modal_passes() {
        let mut img = solid(512, 512);
        for (i, p) in img.pixels_mut().enumerate() {
            // 60% of pixels get one of several distinct non-white colors
            if i % 10 >= 4 {
                let k = (i % 10) as u8;
                *p = image::Rgb([k * 20, 0, 100]);
            }
        }
        assert!(validate_pixels(&img, &ImageConstraints::default()).is_ok());
    }

    #[test]
    fn uniform_image_is_blank() {
        let err = validate_pixels(&solid(512, 512), &ImageConstraints::default()).unwrap_err();
        assert_eq!(
            err,
            ValidationFailure::BlankFraction {
                measured: 1.0,
                limit: 0.98
            }
        );
        assert_eq!(err.constraint(), "blank-fraction");
    }

    #[test]
    fn narrow_image_fails_min_side() {
        let err = validate_pixels(&solid(64, 512), &ImageConstraints::default()).unwrap_err();
        assert_eq!(
            err,
            ValidationFailure::MinSide {
                measured: 64,
                limit: 256
            }
        );
    }

    #[test]
    fn huge_side_fails_max_side() {
        let c = ImageConstraints {
            max_side: 300,
            ..Default::default()
        };
        let err = validate_pixels(&solid(301, 256), &c).unwrap_err();
        assert_eq!(err.constraint(), "max-side");
    }

    #[test]
    fn near_modal_colors_count_as_blank() {
        let mut img = solid(10, 10);
        img.put_pixel(0, 0, image::Rgb([250, 247, 255]));
        img.put_pixel(1, 0, image::Rgb([0, 0, 0]));
        assert!((blank_fraction(&img, 8) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn alpha_composites_over_white() {
        let mut img = RgbaImage::new(2, 1);
        img.put_pixel(0, 0, image::Rgba([0, 0, 0, 0]));
        img.put_pixel(1, 0, image::Rgba([0, 0, 0, 255]));
        let rgb = composite_over_white(&img);
        assert_eq!(rgb.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(rgb.get_pixel(1, 0).0, [0, 0, 0]);
    }

    #[test]
    fn constraint_sanity() {
        assert!(ImageConstraints::default().check().is_ok());
        let bad = ImageConstraints {
            min_side: 500,
            max_side: 400,
            ..Default::default()
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn open_rejects_non_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(RenderedImage::open(&p).is_err());
    }
}
