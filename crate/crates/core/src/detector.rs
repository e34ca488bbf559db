//! Ulcer localisation.
//!
//! [`Detector`] is the seam where a trained model can be plugged in. The
//! bundled [`RednessDetector`] is a deterministic stand-in: it thresholds a
//! per-pixel redness score, labels 4-connected blobs, and reports each
//! surviving blob's bounding box.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decoded RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self, DetectError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(DetectError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = rgb;
    }

    /// Paints `rgb` over the given rectangle, clipped to the image.
    pub fn fill_rect(&mut self, rect: BoundingBox, rgb: [u8; 3]) {
        let x_end = (rect.left + rect.width).min(self.width);
        let y_end = (rect.top + rect.height).min(self.height);
        for y in rect.top..y_end {
            for x in rect.left..x_end {
                self.set(x, y, rgb);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub const fn new(left: u32, top: u32, width: u32, height: u32) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.left + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.top + self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Option<BoundingBox> {
        let left = u32::try_from(self.left as i64 + dx).ok()?;
        let top = u32::try_from(self.top as i64 + dy).ok()?;
        Some(BoundingBox { left, top, ..*self })
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width >= 1 && self.height >= 1 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub(a.left.max(b.left)) as u64;
    let iy = a.bottom().min(b.bottom()).saturating_sub(a.top.max(b.top)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Self {
        Self { bbox, confidence }
    }
}

/// Canonical detection order: confidence descending, then `(top, left)`.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.top.cmp(&b.bbox.top))
        .then(a.bbox.left.cmp(&b.bbox.left))
}

pub fn sort_detections(detections: &mut [Detection]) {
    detections.sort_by(detection_order);
}

/// Greedy non-maximum suppression. A detection is dropped when its IoU with
/// an already kept, higher-ranked detection exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut ranked = detections.to_vec();
    sort_detections(&mut ranked);
    let mut kept: Vec<Detection> = Vec::with_capacity(ranked.len());
    for candidate in ranked {
        if kept.iter().all(|k| iou(&k.bbox, &candidate.bbox) <= iou_threshold) {
            kept.push(candidate);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Minimum per-pixel redness for a pixel to belong to a lesion.
    pub redness_threshold: f64,
    pub min_red_channel: u8,
    /// Minimum blob area as a fraction of the image area.
    pub min_area_fraction: f64,
    /// Absolute minimum blob area in pixels.
    pub min_area_floor: u32,
    /// Detections below this confidence are not reported.
    pub report_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            redness_threshold: 0.15,
            min_red_channel: 80,
            min_area_fraction: 0.0005,
            min_area_floor: 25,
            report_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        let closed_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !open_unit(self.redness_threshold) {
            return Err(DetectError::InvalidConfig("redness_threshold must lie in (0, 1)"));
        }
        if !closed_unit(self.report_threshold) {
            return Err(DetectError::InvalidConfig("report_threshold must lie in [0, 1]"));
        }
        if !closed_unit(self.nms_iou) {
            return Err(DetectError::InvalidConfig("nms_iou must lie in [0, 1]"));
        }
        if !closed_unit(self.min_area_fraction) {
            return Err(DetectError::InvalidConfig("min_area_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Smallest blob area, in pixels, that survives filtering for an image
    /// of the given size.
    pub fn min_area(&self, width: u32, height: u32) -> f64 {
        let scaled = self.min_area_fraction * width as f64 * height as f64;
        scaled.max(self.min_area_floor as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("image has zero width or height")]
    ZeroSizeImage,
    #[error("pixel buffer holds {actual} pixels, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(&'static str),
}

/// Anything that turns a photo into ranked ulcer localisations.
pub trait Detector: Send + Sync {
    /// Stable name recorded alongside every result.
    fn id(&self) -> &str;

    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, DetectError>;
}

/// The deterministic reference detector.
#[derive(Debug, Clone, Default)]
pub struct RednessDetector {
    config: DetectorConfig,
}

impl RednessDetector {
    pub const ID: &'static str = "redness-blob-v1";

    pub fn new(config: DetectorConfig) -> Result<Self, DetectError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }
}

impl Detector for RednessDetector {
    fn id(&self) -> &str {
        Self::ID
    }

    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, DetectError> {
        detect(image, &self.config)
    }
}

/// `R/255 - max(G, B)/255`, in `[-1, 1]`.
pub fn redness(rgb: [u8; 3]) -> f64 {
    redness_numerator(rgb) as f64 / 255.0
}

/// `R - max(G, B)`. Sums of this stay exact, so blobs with equal mean
/// redness get bit-identical confidences and tie-break by position.
fn redness_numerator([r, g, b]: [u8; 3]) -> i32 {
    r as i32 - g.max(b) as i32
}

struct Blob {
    area: u64,
    min_x: u32,
    min_y: u32,
    max_x: u32,
    max_y: u32,
    redness_sum: i64,
}

/// Runs the reference redness-blob algorithm.
pub fn detect(image: &RasterImage, config: &DetectorConfig) -> Result<Vec<Detection>, DetectError> {
    config.validate()?;
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(DetectError::ZeroSizeImage);
    }

    let score: Vec<i32> = image.pixels.iter().map(|&p| redness_numerator(p)).collect();
    let is_candidate: Vec<bool> = image
        .pixels
        .iter()
        .zip(&score)
        .map(|(p, &s)| s as f64 / 255.0 >= config.redness_threshold && p[0] >= config.min_red_channel)
        .collect();

    let blobs = label_blobs(w, h, &is_candidate, &score);
    let min_area = config.min_area(w, h);

    let raw: Vec<Detection> = blobs
        .into_iter()
        .filter(|b| b.area as f64 >= min_area)
        .map(|b| {
            let bbox = BoundingBox::new(b.min_x, b.min_y, b.max_x - b.min_x + 1, b.max_y - b.min_y + 1);
            let mean = b.redness_sum as f64 / (255.0 * b.area as f64);
            let confidence = (2.0 * mean).min(1.0);
            Detection::new(bbox, confidence)
        })
        .collect();

    let mut kept = nms(&raw, config.nms_iou);
    kept.retain(|d| d.confidence >= config.report_threshold);
    sort_detections(&mut kept);
    Ok(kept)
}

/// 4-connected labelling over the candidate mask with an explicit stack.
fn label_blobs(w: u32, h: u32, mask: &[bool], score: &[i32]) -> Vec<Blob> {
    let width = w as usize;
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut blobs = Vec::new();

    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut blob = Blob {
            area: 0,
            min_x: u32::MAX,
            min_y: u32::MAX,
            max_x: 0,
            max_y: 0,
            redness_sum: 0,
        };
        while let Some(idx) = stack.pop() {
            let x = (idx % width) as u32;
            let y = (idx / width) as u32;
            blob.area += 1;
            blob.redness_sum += score[idx] as i64;
            blob.min_x = blob.min_x.min(x);
            blob.max_x = blob.max_x.max(x);
            blob.min_y = blob.min_y.min(y);
            blob.max_y = blob.max_y.max(y);

            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - width);
            }
            if y + 1 < h {
                visit(idx + width);
            }
        }
        blobs.push(blob);
    }
    blobs
}
