//! Pointing annotations: markers drawn by an edited program are located in
//! the re-rendered image and reported as normalized coordinates.

use image::RgbImage;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::StageError;
use crate::llm::{parse, Bindings, Gateway, ModelRoute, Placeholder, PromptTemplate, StageCall};
use crate::render::fixture::format_color;
use crate::render::CodeArtifact;

pub const DEFAULT_MARKER: [u8; 3] = [255, 0, 255];
/// Tried in order when the default marker color already occurs in the image.
pub const FALLBACK_MARKERS: [[u8; 3]; 2] = [[0, 255, 255], [255, 128, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub color: [u8; 3],
    /// Maximum Euclidean RGB distance still counted as marker.
    pub tolerance: f64,
    pub min_area: usize,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            color: DEFAULT_MARKER,
            tolerance: 30.0,
            min_area: 4,
        }
    }
}

impl MarkerSpec {
    pub fn with_color(self, color: [u8; 3]) -> Self {
        Self { color, ..self }
    }

    pub fn hex(&self) -> String {
        format_color(self.color)
    }

    fn matches(&self, p: [u8; 3]) -> bool {
        let d2: f64 = p
            .iter()
            .zip(self.color)
            .map(|(&a, b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        d2 <= self.tolerance * self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PointingError {
    #[error("no marker-colored component found")]
    ZeroMarkersFound,
    #[error("point ({px}, {py}) lies outside a {width}x{height} image")]
    OutOfRange {
        px: f64,
        py: f64,
        width: u32,
        height: u32,
    },
    #[error("every candidate marker color already occurs in the original image")]
    NoFreeMarkerColor,
    #[error("image not decodable: {0}")]
    Undecodable(String),
    #[error("edited render is {edited:?}, original is {original:?}")]
    SizeMismatch {
        original: [u32; 2],
        edited: [u32; 2],
    },
}

impl PointingError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            PointingError::ZeroMarkersFound
                | PointingError::Undecodable(_)
                | PointingError::SizeMismatch { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerCheck {
    Pass,
    Collision { pixels: u64 },
}

/// Collision iff some pixel lies within the marker's tolerance.
pub fn check_marker_absence(original: &RgbImage, marker: &MarkerSpec) -> MarkerCheck {
    let pixels = original.pixels().filter(|p| marker.matches(p.0)).count() as u64;
    if pixels == 0 {
        MarkerCheck::Pass
    } else {
        MarkerCheck::Collision { pixels }
    }
}

/// First of the default and fallback colors absent from `original`.
pub fn choose_marker(original: &RgbImage, base: &MarkerSpec) -> Result<MarkerSpec, PointingError> {
    std::iter::once(base.color)
        .chain(FALLBACK_MARKERS)
        .map(|c| base.with_color(c))
        .find(|m| check_marker_absence(original, m) == MarkerCheck::Pass)
        .ok_or(PointingError::NoFreeMarkerColor)
}

/// Centroids (x, y) of 8-connected marker components with at least
/// `min_area` pixels, in pixel-index coordinates, sorted by (y, x).
pub fn extract_points(
    img: &RgbImage,
    marker: &MarkerSpec,
) -> Result<Vec<(f64, f64)>, PointingError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask: Vec<bool> = img.pixels().map(|p| marker.matches(p.0)).collect();
    let mut points = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] {
            continue;
        }
        mask[start] = false;
        stack.push(start);
        let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            sx += x as u64;
            sy += y as u64;
            n += 1;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if mask[j] {
                        mask[j] = false;
                        stack.push(j);
                    }
                }
            }
        }
        if n as usize >= marker.min_area {
            points.push((sx as f64 / n as f64, sy as f64 / n as f64));
        }
    }
    if points.is_empty() {
        return Err(PointingError::ZeroMarkersFound);
    }
    points.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    Ok(points)
}

/// Maps a pixel position to the closed [0, 100] range on each axis.
pub fn normalize_coords(
    px: f64,
    py: f64,
    width: u32,
    height: u32,
) -> Result<(f64, f64), PointingError> {
    let (w, h) = (f64::from(width), f64::from(height));
    let inside = width >= 1 && height >= 1 && (0.0..=w).contains(&px) && (0.0..=h).contains(&py);
    if !inside {
        return Err(PointingError::OutOfRange {
            px,
            py,
            width,
            height,
        });
    }
    Ok((
        (100.0 * px / w).clamp(0.0, 100.0),
        (100.0 * py / h).clamp(0.0, 100.0),
    ))
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn serialize_points<S: Serializer>(points: &[[f64; 2]], s: S) -> Result<S::Ok, S::Error> {
    let rounded: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [round2(p[0]), round2(p[1])])
        .collect();
    rounded.serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub question: String,
    /// Normalized (x, y), each in [0, 100]; serialized with 2 decimals.
    #[serde(serialize_with = "serialize_points")]
    pub points: Vec<[f64; 2]>,
    #[serde(serialize_with = "serialize_points")]
    pub pixel_points: Vec<[f64; 2]>,
    pub image_size: [u32; 2],
    /// Marker color actually used, `#rrggbb`.
    pub marker: String,
}

impl PointAnnotation {
    pub fn from_pixels(
        question: String,
        pixel_points: &[(f64, f64)],
        width: u32,
        height: u32,
        marker: &MarkerSpec,
    ) -> Result<Self, PointingError> {
        if pixel_points.is_empty() {
            return Err(PointingError::ZeroMarkersFound);
        }
        let points = pixel_points
            .iter()
            .map(|&(x, y)| normalize_coords(x, y, width, height).map(|(a, b)| [a, b]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            question,
            points,
            pixel_points: pixel_points.iter().map(|&(x, y)| [x, y]).collect(),
            image_size: [width, height],
            marker: marker.hex(),
        })
    }

    /// Extracts markers from the edited render and builds the annotation.
    pub fn extract(
        question: String,
        edited: &RgbImage,
        marker: &MarkerSpec,
    ) -> Result<Self, PointingError> {
        let px = extract_points(edited, marker)?;
        Self::from_pixels(question, &px, edited.width(), edited.height(), marker)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointEditContext<'a> {
    pub code: &'a CodeArtifact,
    pub topic: &'a str,
    pub figure_type: &'a str,
}

/// Asks the model for a pointing question plus an edited program drawing
/// markers in `marker.color`. The edited artifact keeps the original tool.
pub fn generate_point_edit(
    ctx: PointEditContext<'_>,
    marker: &MarkerSpec,
    template: &PromptTemplate,
    gateway: &Gateway,
    route: &ModelRoute,
    seed: u64,
) -> Result<((String, CodeArtifact), StageCall), (StageError, Option<StageCall>)> {
    let bindings = Bindings::new()
        .with(Placeholder::Code, ctx.code.source.as_str())
        .with(Placeholder::Topic, ctx.topic)
        .with(Placeholder::FigureType, ctx.figure_type)
        .with(Placeholder::MarkerColor, marker.hex());
    let call = gateway
        .call_template(template, &bindings, route, seed)
        .map_err(|e| (e, None))?;
    let parsed = parse::parse_point_edit(&call.response.text, ctx.code.tool.fence_tag())
        .map_err(StageError::from)
        .and_then(|(q, code)| Ok((q, CodeArtifact::from_fenced(ctx.code.tool, code)?)));
    match parsed {
        Ok(v) => Ok((v, call)),
        Err(e) => Err((e, Some(call))),
    }
}
