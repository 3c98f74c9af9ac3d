//! Inference: dense maps to refined, scored face detections.

use alloc::vec::Vec;

use crate::geometry::{BoundingBox, Ellipse, Keypoints2D, MeanFace3D};
use crate::losses::bbox_decode;
use crate::network::{configuration_pooling, FeatureMap, Forward, Model};
use crate::proposals::{nms, proposals_from_dense, FaceProposal, DEFAULT_KEYPOINT_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::training::pad_to_stride;
use crate::{Error, Result, GRID_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub keypoint_threshold: f64,
    pub nms_threshold: f64,
    /// Keep at most this many proposals per image after NMS.
    pub max_detections: usize,
    /// Apply the bounding-box head to the proposal boxes.
    pub refine: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            keypoint_threshold: DEFAULT_KEYPOINT_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            max_detections: 50,
            refine: true,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.keypoint_threshold) {
            return Err(Error::InvalidArgument("keypoint_threshold must lie in [0, 1)".into()));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::InvalidArgument("nms_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A detected face in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub ellipse: Option<Ellipse>,
    pub keypoints: Keypoints2D,
    /// The box before refinement.
    pub proposal: BoundingBox,
}

fn run(model: &Model, face: &MeanFace3D, image: &FeatureMap, config: &DetectConfig) -> Result<(Forward, Vec<FaceProposal>)> {
    config.validate()?;
    let input = pad_to_stride(image, model.config().stride());
    let fwd = model.forward(&input)?;
    let mut kept = nms(&proposals_from_dense(&fwd.dense, face, config.keypoint_threshold), config.nms_threshold);
    kept.truncate(config.max_detections);
    Ok((fwd, kept))
}

/// Proposals after NMS, best first, capped at `max_detections`.
pub fn propose(model: &Model, face: &MeanFace3D, image: &FeatureMap, config: &DetectConfig) -> Result<Vec<FaceProposal>> {
    Ok(run(model, face, image, config)?.1)
}

/// Full pipeline on one image of any size; the image is padded at the top
/// and right to the backbone stride.
pub fn detect(model: &Model, face: &MeanFace3D, image: &FeatureMap, config: &DetectConfig) -> Result<Vec<Detection>> {
    let (fwd, kept) = run(model, face, image, config)?;
    kept.into_iter()
        .map(|p| {
            let bbox = if config.refine {
                let pooled = configuration_pooling(&fwd.features, &p.keypoints.map(|q| q * (1.0 / GRID_SCALE)));
                let (delta, _) = model.bbox_head(&pooled)?;
                let b = bbox_decode(&p.bbox, &delta);
                if b.is_valid() { b } else { p.bbox }
            } else {
                p.bbox
            };
            let ellipse = p.ellipse.map(|e| follow_box(&e, &p.bbox, &bbox));
            Ok(Detection { bbox, score: p.score, ellipse, keypoints: p.keypoints, proposal: p.bbox })
        })
        .collect()
}

/// Moves an ellipse with its box: centre shifted, axes scaled by the mean
/// size ratio.
fn follow_box(e: &Ellipse, from: &BoundingBox, to: &BoundingBox) -> Ellipse {
    let (fc, tc) = (from.center(), to.center());
    let s = libm::sqrt((to.w / from.w) * (to.h / from.h));
    Ellipse::new(e.cx + tc.x - fc.x, e.cy + tc.y - fc.y, e.ra * s, e.rb * s, e.theta).unwrap_or(*e)
}
