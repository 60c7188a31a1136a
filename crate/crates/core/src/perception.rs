//! Editing masks and depth conditions.
//!
//! Estimators are pluggable: a [`ConceptDetector`] proposes boxes for a
//! concept, a [`Segmenter`] turns a box into a soft mask, a [`DepthEstimator`]
//! produces raw depth. [`OracleEstimator`] implements all three for synthetic
//! frames whose objects are painted in known colours.

use std::collections::VecDeque;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{mock, BackendError, DiffusionBackend};
use crate::imaging;

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ATTENTION_THRESHOLD: f64 = 0.35;
pub const DEFAULT_DILATION_RADIUS: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PerceptionError {
    #[error("estimator unavailable: {0}")]
    EstimatorUnavailable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("frame {frame_index}: no instance {instance_id} among the detected candidates")]
    UnknownInstance { frame_index: usize, instance_id: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

pub trait ConceptDetector: Send + Sync {
    fn detect(&self, image: &RgbImage, concept: &str) -> Result<Vec<Detection>, PerceptionError>;
}

pub trait Segmenter: Send + Sync {
    /// Soft mask in [0, 1] at the image's resolution.
    fn segment(&self, image: &RgbImage, bbox: &BoundingBox) -> Result<Array2<f64>, PerceptionError>;
}

pub trait DepthEstimator: Send + Sync {
    /// Unnormalized depth at the image's resolution.
    fn estimate(&self, image: &RgbImage) -> Result<Array2<f64>, PerceptionError>;
}

/// Selected or candidate mask for one concept instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub frame_index: usize,
    pub concept: String,
    /// `(height, width)` at pixel resolution.
    pub mask: Array2<bool>,
    pub confidence: f64,
    pub instance_id: usize,
}

impl ConceptMask {
    pub fn empty(frame_index: usize, concept: &str, height: usize, width: usize) -> Self {
        ConceptMask {
            frame_index,
            concept: concept.to_string(),
            mask: Array2::from_elem((height, width), false),
            confidence: 0.0,
            instance_id: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// The mask chosen for a frame together with every candidate, so callers can
/// override the choice when detections overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    pub frame_index: usize,
    pub selected: ConceptMask,
    pub candidates: Vec<ConceptMask>,
    pub warning: Option<String>,
}

impl MaskSelection {
    pub fn with_instance(&self, instance_id: usize) -> Result<MaskSelection, PerceptionError> {
        let chosen = self
            .candidates
            .iter()
            .find(|c| c.instance_id == instance_id)
            .ok_or(PerceptionError::UnknownInstance {
                frame_index: self.frame_index,
                instance_id,
            })?;
        Ok(MaskSelection {
            selected: chosen.clone(),
            ..self.clone()
        })
    }
}

/// Highest confidence wins; ties go to the lowest instance id.
pub fn select_instance(candidates: &[ConceptMask]) -> Option<&ConceptMask> {
    candidates.iter().reduce(|best, c| {
        if c.confidence > best.confidence
            || (c.confidence == best.confidence && c.instance_id < best.instance_id)
        {
            c
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub frame_index: usize,
    /// Values in [0, 1].
    pub depth: Array2<f64>,
}

/// Min-max normalization; constant maps become 0.5 everywhere.
pub fn normalize_depth(raw: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Array2::from_elem(raw.raw_dim(), 0.5);
    }
    raw.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Morphological dilation with a `(2r + 1)`-square structuring element.
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    // Separable: the square element is a horizontal pass then a vertical one.
    let mut horiz = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            horiz[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|yy| horiz[[yy, x]]);
        }
    }
    out
}

pub fn dilate_mask(mask: &ConceptMask, radius: usize) -> ConceptMask {
    ConceptMask {
        mask: dilate(&mask.mask, radius),
        ..mask.clone()
    }
}

pub fn binarize(soft: &Array2<f64>, threshold: f64) -> Array2<bool> {
    soft.mapv(|v| v >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColorMatch {
    Exact([u8; 3]),
    /// Anything [`mock::is_subject_pixel`] accepts.
    MockSubject,
}

impl ColorMatch {
    fn matches(&self, p: &Rgb<u8>) -> bool {
        match self {
            ColorMatch::Exact(c) => p.0 == *c,
            ColorMatch::MockSubject => mock::is_subject_pixel(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorKey {
    /// `None` answers for every concept without a dedicated key.
    pub concept: Option<String>,
    pub color: ColorMatch,
    pub confidence: f64,
}

/// Ground-truth estimator for synthetic frames.
///
/// Each connected region of a key colour is one detection scored with the
/// key's confidence. Segmentation returns every key-coloured pixel inside the
/// box. Depth is pixel luminance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimator {
    keys: Vec<ColorKey>,
}

impl Default for OracleEstimator {
    /// Treats the mock backend's subject rectangle as any concept.
    fn default() -> Self {
        OracleEstimator {
            keys: vec![ColorKey {
                concept: None,
                color: ColorMatch::MockSubject,
                confidence: 0.9,
            }],
        }
    }
}

impl OracleEstimator {
    pub fn new(keys: Vec<ColorKey>) -> Self {
        OracleEstimator { keys }
    }

    pub fn with_key(mut self, key: ColorKey) -> Self {
        self.keys.push(key);
        self
    }

    fn keys_for(&self, concept: &str) -> Vec<&ColorKey> {
        let dedicated: Vec<_> = self
            .keys
            .iter()
            .filter(|k| k.concept.as_deref() == Some(concept))
            .collect();
        if dedicated.is_empty() {
            self.keys.iter().filter(|k| k.concept.is_none()).collect()
        } else {
            dedicated
        }
    }
}

/// 4-connected components of pixels satisfying `pred`, as bounding boxes in
/// scan order.
fn components(image: &RgbImage, pred: impl Fn(&Rgb<u8>) -> bool) -> Vec<BoundingBox> {
    let (w, h) = image.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut boxes = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if seen[idx] || !pred(image.get_pixel(x, y)) {
                continue;
            }
            seen[idx] = true;
            let mut bbox = BoundingBox { x0: x, y0: y, x1: x, y1: y };
            let mut queue = VecDeque::from([(x, y)]);
            while let Some((cx, cy)) = queue.pop_front() {
                bbox.x0 = bbox.x0.min(cx);
                bbox.y0 = bbox.y0.min(cy);
                bbox.x1 = bbox.x1.max(cx);
                bbox.y1 = bbox.y1.max(cy);
                let neighbours = [
                    (cx.wrapping_sub(1), cy),
                    (cx + 1, cy),
                    (cx, cy.wrapping_sub(1)),
                    (cx, cy + 1),
                ];
                for (nx, ny) in neighbours {
                    if nx < w && ny < h {
                        let nidx = (ny * w + nx) as usize;
                        if !seen[nidx] && pred(image.get_pixel(nx, ny)) {
                            seen[nidx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            boxes.push(bbox);
        }
    }
    boxes
}

impl ConceptDetector for OracleEstimator {
    fn detect(&self, image: &RgbImage, concept: &str) -> Result<Vec<Detection>, PerceptionError> {
        Ok(self
            .keys_for(concept)
            .into_iter()
            .flat_map(|key| {
                components(image, |p| key.color.matches(p))
                    .into_iter()
                    .map(|bbox| Detection {
                        bbox,
                        score: key.confidence,
                    })
            })
            .collect())
    }
}

impl Segmenter for OracleEstimator {
    fn segment(&self, image: &RgbImage, bbox: &BoundingBox) -> Result<Array2<f64>, PerceptionError> {
        let (w, h) = image.dimensions();
        Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            let (x, y) = (x as u32, y as u32);
            let p = image.get_pixel(x, y);
            if bbox.contains(x, y) && self.keys.iter().any(|k| k.color.matches(p)) {
                1.0
            } else {
                0.0
            }
        }))
    }
}

impl DepthEstimator for OracleEstimator {
    fn estimate(&self, image: &RgbImage) -> Result<Array2<f64>, PerceptionError> {
        let (w, h) = image.dimensions();
        Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            imaging::luminance(image.get_pixel(x as u32, y as u32))
        }))
    }
}

/// Always fails; stands in for estimators that are not installed.
#[derive(Debug, Clone, Default)]
pub struct UnavailableEstimator;

impl ConceptDetector for UnavailableEstimator {
    fn detect(&self, _: &RgbImage, _: &str) -> Result<Vec<Detection>, PerceptionError> {
        Err(PerceptionError::EstimatorUnavailable("no detector configured".into()))
    }
}

impl Segmenter for UnavailableEstimator {
    fn segment(&self, _: &RgbImage, _: &BoundingBox) -> Result<Array2<f64>, PerceptionError> {
        Err(PerceptionError::EstimatorUnavailable("no segmenter configured".into()))
    }
}

impl DepthEstimator for UnavailableEstimator {
    fn estimate(&self, _: &RgbImage) -> Result<Array2<f64>, PerceptionError> {
        Err(PerceptionError::EstimatorUnavailable("no depth estimator configured".into()))
    }
}

#[derive(Clone)]
pub struct Perception {
    pub detector: Arc<dyn ConceptDetector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub depth: Arc<dyn DepthEstimator>,
    pub binarize_threshold: f64,
}

impl std::fmt::Debug for Perception {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perception")
            .field("binarize_threshold", &self.binarize_threshold)
            .finish_non_exhaustive()
    }
}

impl Perception {
    pub fn oracle() -> Self {
        Perception::from_oracle(OracleEstimator::default())
    }

    pub fn from_oracle(oracle: OracleEstimator) -> Self {
        let oracle = Arc::new(oracle);
        Perception {
            detector: oracle.clone(),
            segmenter: oracle.clone(),
            depth: oracle,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
        }
    }

    /// One selection per frame. Frames without the concept get an empty mask
    /// with confidence 0 and a warning.
    pub fn extract_masks(
        &self,
        frames: &[RgbImage],
        concept: &str,
    ) -> Result<Vec<MaskSelection>, PerceptionError> {
        if concept.trim().is_empty() {
            return Err(PerceptionError::InvalidArgument("empty concept".into()));
        }
        frames
            .iter()
            .enumerate()
            .map(|(frame_index, image)| {
                let candidates = self
                    .detector
                    .detect(image, concept)?
                    .into_iter()
                    .enumerate()
                    .map(|(instance_id, det)| {
                        let soft = self.segmenter.segment(image, &det.bbox)?;
                        Ok(ConceptMask {
                            frame_index,
                            concept: concept.to_string(),
                            mask: binarize(&soft, self.binarize_threshold),
                            confidence: det.score.clamp(0.0, 1.0),
                            instance_id,
                        })
                    })
                    .collect::<Result<Vec<_>, PerceptionError>>()?;
                let (selected, warning) = match select_instance(&candidates) {
                    Some(best) => (best.clone(), None),
                    None => (
                        ConceptMask::empty(
                            frame_index,
                            concept,
                            image.height() as usize,
                            image.width() as usize,
                        ),
                        Some(format!("no {concept:?} detected in frame {frame_index}")),
                    ),
                };
                Ok(MaskSelection {
                    frame_index,
                    selected,
                    candidates,
                    warning,
                })
            })
            .collect()
    }

    pub fn extract_depth(&self, frames: &[RgbImage]) -> Result<Vec<DepthMap>, PerceptionError> {
        if frames.is_empty() {
            return Err(PerceptionError::InvalidArgument("no frames".into()));
        }
        frames
            .iter()
            .enumerate()
            .map(|(frame_index, image)| {
                Ok(DepthMap {
                    frame_index,
                    depth: normalize_depth(&self.depth.estimate(image)?),
                })
            })
            .collect()
    }
}

/// Masks from the backend's cross-attention: cells above `threshold` times
/// the frame's peak response, upsampled to pixel resolution.
pub fn attention_masks(
    frames: &[RgbImage],
    concept: &str,
    backend: &dyn DiffusionBackend,
    threshold: f64,
) -> Result<Vec<ConceptMask>, PerceptionError> {
    if concept.trim().is_empty() {
        return Err(PerceptionError::InvalidArgument("empty concept".into()));
    }
    let scale = backend.scale_factor();
    frames
        .iter()
        .enumerate()
        .map(|(frame_index, image)| {
            let attention = backend.cross_attention(image, concept)?;
            let peak = attention.iter().cloned().fold(0.0f64, f64::max);
            let cut = threshold * peak;
            let (h, w) = (image.height() as usize, image.width() as usize);
            let (ah, aw) = attention.dim();
            if ah * scale != h || aw * scale != w {
                return Err(PerceptionError::Backend(BackendError::Shape(format!(
                    "attention {:?} x{scale} does not cover frame {h}x{w}",
                    attention.dim()
                ))));
            }
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                peak > 0.0 && attention[[y / scale, x / scale]] > cut
            });
            Ok(ConceptMask {
                frame_index,
                concept: concept.to_string(),
                mask,
                confidence: peak.clamp(0.0, 1.0),
                instance_id: 0,
            })
        })
        .collect()
}
