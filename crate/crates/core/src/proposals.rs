//! Dense network outputs to scored face proposals.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::geometry::{face_bbox, face_ellipse, overlap_asym, project, BoundingBox, Ellipse, Keypoints2D, MeanFace3D, Point2, TransformParams};
use crate::{Error, Result, GRID_SCALE, NUM_CLASSES, NUM_KEYPOINTS};

/// Default minimum probability for a cell to spawn a proposal.
pub const DEFAULT_KEYPOINT_THRESHOLD: f64 = 0.5;
/// Default NMS overlap threshold.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

/// A cell of the working grid. `y` counts rows from the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn to_point(self) -> Point2 {
        Point2::new(self.x as f64, self.y as f64)
    }

    /// Row-major order: by row, then column.
    pub fn row_major_cmp(&self, other: &GridPos) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

/// Per-cell class distribution and transform estimate on the half-resolution
/// grid. Cells are stored row-major with row 0 at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutputs {
    pub width: usize,
    pub height: usize,
    pub class_probs: Vec<[f64; NUM_CLASSES]>,
    pub transform: Vec<TransformParams>,
}

impl DenseOutputs {
    pub fn new(
        width: usize,
        height: usize,
        class_probs: Vec<[f64; NUM_CLASSES]>,
        transform: Vec<TransformParams>,
    ) -> Result<Self> {
        let cells = width * height;
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch("empty grid".into()));
        }
        for len in [class_probs.len(), transform.len()] {
            if len != cells {
                return Err(Error::LengthMismatch { expected: cells, found: len });
            }
        }
        for (i, p) in class_probs.iter().enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("cell {i} is not a probability distribution")));
            }
        }
        Ok(Self { width, height, class_probs, transform })
    }

    /// Every cell background with probability one, zero transforms.
    pub fn background(width: usize, height: usize) -> Self {
        let mut bg = [0.0; NUM_CLASSES];
        bg[0] = 1.0;
        Self {
            width,
            height,
            class_probs: alloc::vec![bg; width * height],
            transform: alloc::vec![TransformParams::default(); width * height],
        }
    }

    pub fn index(&self, pos: GridPos) -> usize {
        pos.y * self.width + pos.x
    }

    pub fn position(&self, index: usize) -> GridPos {
        GridPos::new(index % self.width, index / self.width)
    }

    pub fn probs(&self, pos: GridPos) -> &[f64; NUM_CLASSES] {
        &self.class_probs[self.index(pos)]
    }

    /// Most probable class; ties go to the lowest label.
    pub fn argmax(&self, pos: GridPos) -> usize {
        argmax(self.probs(pos))
    }

    /// Nearest cell to an image-space point, clamped to the grid.
    pub fn nearest_cell(&self, p: Point2) -> GridPos {
        let clamp = |v: f64, n: usize| {
            let r = libm::round(v / GRID_SCALE);
            if r.is_nan() || r <= 0.0 {
                0
            } else {
                (r as usize).min(n - 1)
            }
        };
        GridPos::new(clamp(p.x, self.width), clamp(p.y, self.height))
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceProposal {
    /// Predicted keypoints in image coordinates.
    pub keypoints: Keypoints2D,
    pub source: GridPos,
    /// Faceness: summed log probability of the keypoints, never positive.
    pub score: f64,
    pub bbox: BoundingBox,
    pub ellipse: Option<Ellipse>,
}

/// Keypoints proposed by the cell `pos`, in grid coordinates: the transform's
/// translation is an offset from the cell.
pub fn anchored_keypoints(face: &MeanFace3D, pos: GridPos, t: &TransformParams) -> Keypoints2D {
    let origin = pos.to_point();
    project(face, t).map(|p| p + origin)
}

/// One proposal per cell whose arg-max class is a keypoint with probability
/// at least `keypoint_threshold`. Cells whose keypoints give a degenerate box
/// are skipped.
pub fn proposals_from_dense(d: &DenseOutputs, face: &MeanFace3D, keypoint_threshold: f64) -> Vec<FaceProposal> {
    let mut out = Vec::new();
    for (idx, probs) in d.class_probs.iter().enumerate() {
        let label = argmax(probs);
        if label == 0 || probs[label] < keypoint_threshold {
            continue;
        }
        let pos = d.position(idx);
        if let Some(p) = proposal_at(d, face, pos) {
            out.push(p);
        }
    }
    out
}

/// The proposal generated at a single cell, regardless of its class.
pub fn proposal_at(d: &DenseOutputs, face: &MeanFace3D, pos: GridPos) -> Option<FaceProposal> {
    let t = &d.transform[d.index(pos)];
    if !t.is_finite() {
        return None;
    }
    let keypoints = anchored_keypoints(face, pos, t).map(|p| p * GRID_SCALE);
    let bbox = face_bbox(&keypoints, true).ok()?;
    Some(FaceProposal {
        score: faceness_score(&keypoints, d),
        ellipse: face_ellipse(&keypoints).ok(),
        keypoints,
        source: pos,
        bbox,
    })
}

/// `sum_i ln p_i(cell(k_i))`: each keypoint reads its own label channel at the
/// nearest grid cell.
pub fn faceness_score(k: &Keypoints2D, d: &DenseOutputs) -> f64 {
    (0..NUM_KEYPOINTS)
        .map(|i| libm::log(d.probs(d.nearest_cell(k.points[i]))[i + 1]))
        .sum()
}

/// Score descending, ties broken by source cell in row-major order.
pub fn rank_cmp(a: &FaceProposal, b: &FaceProposal) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.source.row_major_cmp(&b.source))
}

/// Greedy NMS with the asymmetric overlap `|kept ∩ c| / |c|`: a candidate is
/// dropped once a stronger kept proposal covers at least `threshold` of it.
pub fn nms(proposals: &[FaceProposal], threshold: f64) -> Vec<FaceProposal> {
    let mut ranked: Vec<&FaceProposal> = proposals.iter().collect();
    ranked.sort_by(|a, b| rank_cmp(a, b));
    let mut kept: Vec<FaceProposal> = Vec::new();
    for cand in ranked {
        if kept.iter().all(|k| overlap_asym(&k.bbox, &cand.bbox) < threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(width: usize, height: usize) -> DenseOutputs {
        DenseOutputs {
            width,
            height,
            class_probs: alloc::vec![[1.0 / NUM_CLASSES as f64; NUM_CLASSES]; width * height],
            transform: alloc::vec![TransformParams::IDENTITY; width * height],
        }
    }

    fn one_hot(label: usize) -> [f64; NUM_CLASSES] {
        let mut p = [0.0; NUM_CLASSES];
        p[label] = 1.0;
        p
    }

    #[test]
    fn background_map_has_no_proposals() {
        let d = DenseOutputs::background(8, 6);
        assert!(proposals_from_dense(&d, &MeanFace3D::default(), 0.5).is_empty());
        // uniform probabilities tie-break to background as well
        assert!(proposals_from_dense(&uniform(4, 4), &MeanFace3D::default(), 0.0).is_empty());
    }

    #[test]
    fn single_cell_identity_transform() {
        let face = MeanFace3D::default();
        let mut d = DenseOutputs::background(16, 16);
        let pos = GridPos::new(7, 9);
        let idx = d.index(pos);
        d.class_probs[idx] = one_hot(3);
        d.transform[idx] = TransformParams::IDENTITY;
        let props = proposals_from_dense(&d, &face, 0.5);
        assert_eq!(props.len(), 1);
        let p = &props[0];
        assert_eq!(p.source, pos);
        for (kp, m) in p.keypoints.points.iter().zip(face.points()) {
            assert!((kp.x - 2.0 * (m[0] + 7.0)).abs() < 1e-12);
            assert!((kp.y - 2.0 * (m[1] + 9.0)).abs() < 1e-12);
        }
        assert!(p.score <= 0.0);
    }

    #[test]
    fn threshold_filters_cells() {
        let mut d = DenseOutputs::background(8, 8);
        let idx = d.index(GridPos::new(4, 4));
        let mut p = [0.0; NUM_CLASSES];
        p[2] = 0.45;
        p[0] = 0.3;
        p[5] = 0.25;
        d.class_probs[idx] = p;
        d.transform[idx] = TransformParams::IDENTITY;
        assert_eq!(proposals_from_dense(&d, &MeanFace3D::default(), 0.4).len(), 1);
        assert!(proposals_from_dense(&d, &MeanFace3D::default(), 0.5).is_empty());
    }

    #[test]
    fn faceness_values() {
        let kp = Keypoints2D::new([Point2::new(4.0, 4.0); NUM_KEYPOINTS]);
        let mut d = uniform(6, 6);
        let expected = 10.0 * libm::log(1.0 / 11.0);
        assert!((faceness_score(&kp, &d) - expected).abs() < 1e-12);
        assert!((expected + 23.9789).abs() < 1e-4);

        let idx = d.index(GridPos::new(2, 2));
        d.class_probs[idx] = [1.0; NUM_CLASSES];
        assert_eq!(faceness_score(&kp, &d), 0.0);

        let e = libm::exp(-1.0);
        d.class_probs[idx] = [e; NUM_CLASSES];
        assert!((faceness_score(&kp, &d) + 10.0).abs() < 1e-12);

        d.class_probs[idx] = [0.0; NUM_CLASSES];
        assert_eq!(faceness_score(&kp, &d), f64::NEG_INFINITY);
    }

    #[test]
    fn faceness_clamps_off_grid() {
        let mut d = uniform(4, 4);
        d.class_probs[0] = [1.0; NUM_CLASSES];
        let kp = Keypoints2D::new([Point2::new(-30.0, -0.9); NUM_KEYPOINTS]);
        assert_eq!(faceness_score(&kp, &d), 0.0);
    }

    fn boxed(x: f64, y: f64, w: f64, h: f64, score: f64, source: GridPos) -> FaceProposal {
        FaceProposal {
            keypoints: Keypoints2D::new([Point2::default(); NUM_KEYPOINTS]),
            source,
            score,
            bbox: BoundingBox::new(x, y, w, h).unwrap(),
            ellipse: None,
        }
    }

    #[test]
    fn nms_basic_cases() {
        let a = boxed(0.0, 0.0, 10.0, 10.0, -2.0, GridPos::new(0, 0));
        assert_eq!(nms(core::slice::from_ref(&a), 0.7), alloc::vec![a.clone()]);

        let b = boxed(0.0, 0.0, 10.0, 10.0, -1.0, GridPos::new(1, 0));
        let kept = nms(&[a.clone(), b.clone()], 0.7);
        assert_eq!(kept, alloc::vec![b]);
    }

    #[test]
    fn nms_suppresses_contained_not_container() {
        let big = boxed(0.0, 0.0, 20.0, 20.0, -5.0, GridPos::new(0, 0));
        let small = boxed(5.0, 5.0, 4.0, 4.0, -1.0, GridPos::new(1, 0));
        // the small strong box covers only 4% of the big one
        assert_eq!(nms(&[big.clone(), small.clone()], 0.7).len(), 2);
        // the big strong box covers all of the small one
        let big_strong = FaceProposal { score: -0.5, ..big };
        assert_eq!(nms(&[big_strong.clone(), small], 0.7), alloc::vec![big_strong]);
    }

    #[test]
    fn nms_breaks_ties_row_major() {
        let a = boxed(0.0, 0.0, 10.0, 10.0, -1.0, GridPos::new(5, 1));
        let b = boxed(0.0, 0.0, 10.0, 10.0, -1.0, GridPos::new(0, 2));
        assert_eq!(nms(&[b, a.clone()], 0.7), alloc::vec![a]);
    }

    fn arb_proposals() -> impl Strategy<Value = Vec<FaceProposal>> {
        proptest::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64, -30.0..0.0f64, 0usize..8, 0usize..8),
            0..30,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s, gx, gy)| boxed(x, y, w, h, s, GridPos::new(gx, gy)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_properties(props in arb_proposals(), t in 0.05..1.0f64) {
            let kept = nms(&props, t);
            prop_assert!(kept.iter().all(|k| props.contains(k)));
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(overlap_asym(&kept[i].bbox, &kept[j].bbox) < t);
                }
            }
            prop_assert_eq!(nms(&kept, t), kept);
        }

        #[test]
        fn faceness_monotone(
            probs in proptest::collection::vec(0.01..1.0f64, NUM_CLASSES),
            label in 1usize..NUM_CLASSES,
            bump in 0.0..1.0f64,
        ) {
            let mut d = uniform(3, 3);
            let kp = Keypoints2D::new([Point2::new(2.0, 2.0); NUM_KEYPOINTS]);
            let idx = d.index(GridPos::new(1, 1));
            d.class_probs[idx].copy_from_slice(&probs);
            let before = faceness_score(&kp, &d);
            d.class_probs[idx][label] += bump;
            prop_assert!(faceness_score(&kp, &d) >= before);
        }

        #[test]
        fn proposals_come_from_keypoint_cells(
            labels in proptest::collection::vec(0usize..NUM_CLASSES, 36),
            shift in proptest::array::uniform8(-2.0..2.0f64),
        ) {
            let face = MeanFace3D::default();
            let mut d = DenseOutputs::background(6, 6);
            for (i, l) in labels.iter().enumerate() {
                d.class_probs[i] = one_hot(*l);
                let mut t = TransformParams::IDENTITY.to_array();
                for (v, s) in t.iter_mut().zip(shift) { *v += s; }
                d.transform[i] = TransformParams::from_array(t);
            }
            let props = proposals_from_dense(&d, &face, 0.5);
            prop_assert!(props.len() <= 36);
            for p in &props {
                prop_assert!(d.argmax(p.source) >= 1);
                prop_assert!(p.score <= 0.0);
                let grown = BoundingBox { x: p.bbox.x - 1e-9, y: p.bbox.y - 1e-9, w: p.bbox.w + 2e-9, h: p.bbox.h + 2e-9 };
                for k in p.keypoints.points.iter() {
                    prop_assert!(grown.contains(*k));
                }
            }
        }
    }
}
