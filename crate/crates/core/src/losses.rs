//! The multi-task objective: keypoint classification, keypoint location and
//! box regression, with analytic gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{BoundingBox, Keypoints2D, Point2};
use crate::proposals::{DenseOutputs, GridPos};
use crate::{Error, Result, NUM_CLASSES, NUM_KEYPOINTS};

/// A labelled grid cell. Positives carry the index of the face they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePoint {
    pub pos: GridPos,
    pub label: usize,
    pub face: Option<usize>,
}

/// Cells sampled from one image: expanded keypoint cells and an equal number
/// of background cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingPoints {
    pub positives: Vec<SamplePoint>,
    pub negatives: Vec<SamplePoint>,
}

impl TrainingPoints {
    pub fn m(&self) -> usize {
        self.positives.len()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &SamplePoint> {
        self.positives.iter().chain(self.negatives.iter())
    }
}

/// Center offsets scaled by the reference size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn from_array(v: [f64; 4]) -> Self {
        Self { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

/// A ground-truth keypoint with its label in `1..=10`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub label: usize,
    pub point: Point2,
}

/// The three loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub loc_pt: f64,
    pub loc_box: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        total_loss(self.cls, self.loc_pt, self.loc_box)
    }
}

/// Mean negative log probability of the true label over every sampled cell.
///
/// The gradient is with respect to the pre-softmax class scores, one entry
/// per grid cell (zero where nothing was sampled).
pub fn cls_loss(d: &DenseOutputs, pts: &TrainingPoints) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    let n = pts.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let inv = 1.0 / n as f64;
    let mut grad = vec![[0.0; NUM_CLASSES]; d.width * d.height];
    let mut loss = 0.0;
    for sp in pts.iter() {
        if sp.pos.x >= d.width || sp.pos.y >= d.height {
            return Err(Error::InvalidArgument(alloc::format!("sample {:?} outside the grid", sp.pos)));
        }
        if sp.label >= NUM_CLASSES {
            return Err(Error::InvalidArgument(alloc::format!("label {} out of range", sp.label)));
        }
        let idx = d.index(sp.pos);
        let p = &d.class_probs[idx];
        loss -= libm::log(p[sp.label]);
        let g = &mut grad[idx];
        for (c, gc) in g.iter_mut().enumerate() {
            let target = if c == sp.label { 1.0 } else { 0.0 };
            *gc += inv * (p[c] - target);
        }
    }
    Ok((loss * inv, grad))
}

/// `0.5 a^2` inside the unit interval, `|a| - 0.5` outside.
pub fn smooth_l1(a: f64) -> f64 {
    if a.abs() < 1.0 {
        0.5 * a * a
    } else {
        a.abs() - 0.5
    }
}

pub fn smooth_l1_grad(a: f64) -> f64 {
    if a.abs() < 1.0 {
        a
    } else {
        a.signum()
    }
}

/// `1/m^2 sum_i sum_j sum_{x,y} smooth_l1(t_i - t_hat_{i,j})`, where
/// `t_hat_{i,j}` is proposal `j`'s prediction of the keypoint labelled like
/// ground truth `i`. Returns the gradient with respect to every predicted
/// coordinate.
pub fn keypoint_loc_loss(gt: &[LabeledPoint], predicted: &[Keypoints2D]) -> Result<(f64, Vec<Keypoints2D>)> {
    let m = gt.len();
    if m == 0 {
        return Err(Error::EmptySample);
    }
    if predicted.len() != m {
        return Err(Error::LengthMismatch { expected: m, found: predicted.len() });
    }
    if let Some(bad) = gt.iter().find(|g| g.label == 0 || g.label > NUM_KEYPOINTS) {
        return Err(Error::InvalidArgument(alloc::format!("keypoint label {} out of range", bad.label)));
    }
    let scale = 1.0 / (m * m) as f64;
    let mut loss = 0.0;
    let mut grads = vec![Keypoints2D::new([Point2::default(); NUM_KEYPOINTS]); m];
    for (pred, grad) in predicted.iter().zip(grads.iter_mut()) {
        for g in gt {
            let k = g.label - 1;
            let dx = g.point.x - pred.points[k].x;
            let dy = g.point.y - pred.points[k].y;
            loss += smooth_l1(dx) + smooth_l1(dy);
            grad.points[k].x -= scale * smooth_l1_grad(dx);
            grad.points[k].y -= scale * smooth_l1_grad(dy);
        }
    }
    Ok((loss * scale, grads))
}

/// Regression target taking `proposal` onto `gt`.
pub fn bbox_encode(proposal: &BoundingBox, gt: &BoundingBox) -> Result<BoxDelta> {
    if !proposal.is_valid() || !gt.is_valid() {
        return Err(Error::DegenerateBox);
    }
    let (pc, gc) = (proposal.center(), gt.center());
    Ok(BoxDelta {
        tx: (gc.x - pc.x) / proposal.w,
        ty: (gc.y - pc.y) / proposal.h,
        tw: libm::log(gt.w / proposal.w),
        th: libm::log(gt.h / proposal.h),
    })
}

/// Inverse of [`bbox_encode`].
pub fn bbox_decode(proposal: &BoundingBox, delta: &BoxDelta) -> BoundingBox {
    let pc = proposal.center();
    let w = proposal.w * libm::exp(delta.tw);
    let h = proposal.h * libm::exp(delta.th);
    let cx = pc.x + delta.tx * proposal.w;
    let cy = pc.y + delta.ty * proposal.h;
    BoundingBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }
}

/// Mean over proposals of the summed per-coordinate smooth-L1; the gradient
/// is with respect to the predicted deltas.
pub fn bbox_loss(predicted: &[BoxDelta], target: &[BoxDelta]) -> Result<(f64, Vec<BoxDelta>)> {
    let k = predicted.len();
    if k == 0 {
        return Err(Error::EmptySample);
    }
    if target.len() != k {
        return Err(Error::LengthMismatch { expected: k, found: target.len() });
    }
    let inv = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(k);
    for (p, t) in predicted.iter().zip(target) {
        let (p, t) = (p.to_array(), t.to_array());
        let mut g = [0.0; 4];
        for i in 0..4 {
            let a = p[i] - t[i];
            loss += smooth_l1(a);
            g[i] = inv * smooth_l1_grad(a);
        }
        grads.push(BoxDelta::from_array(g));
    }
    Ok((loss * inv, grads))
}

/// Unit-weight sum of the three terms.
pub fn total_loss(cls: f64, loc_pt: f64, loc_box: f64) -> f64 {
    cls + loc_pt + loc_box
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TransformParams;
    use proptest::prelude::*;

    fn dense_with(probs: [f64; NUM_CLASSES], w: usize, h: usize) -> DenseOutputs {
        DenseOutputs {
            width: w,
            height: h,
            class_probs: vec![probs; w * h],
            transform: vec![TransformParams::default(); w * h],
        }
    }

    fn pt(x: usize, y: usize, label: usize) -> SamplePoint {
        SamplePoint { pos: GridPos::new(x, y), label, face: None }
    }

    #[test]
    fn cls_loss_values() {
        let pts = TrainingPoints { positives: vec![pt(0, 0, 3)], negatives: vec![pt(1, 1, 0)] };
        let mut d = dense_with([1.0 / 11.0; NUM_CLASSES], 2, 2);
        let (l, _) = cls_loss(&d, &pts).unwrap();
        assert!((l - libm::log(11.0)).abs() < 1e-12);
        assert!((l - 2.3979).abs() < 1e-4);

        let mut p3 = [0.0; NUM_CLASSES];
        p3[3] = 1.0;
        let mut p0 = [0.0; NUM_CLASSES];
        p0[0] = 1.0;
        d.class_probs[0] = p3;
        d.class_probs[3] = p0;
        let (l, g) = cls_loss(&d, &pts).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|v| *v == 0.0));

        let mut half = [0.05; NUM_CLASSES];
        half[3] = 0.5;
        let single = TrainingPoints { positives: vec![pt(0, 0, 3)], negatives: vec![] };
        let (l, _) = cls_loss(&dense_with(half, 1, 1), &single).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);

        assert_eq!(cls_loss(&d, &TrainingPoints::default()), Err(Error::EmptySample));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        // C1 at the seam
        let eps = 1e-9;
        assert!((smooth_l1(1.0 - eps) - smooth_l1(1.0)).abs() < 2e-9);
        assert!((smooth_l1_grad(1.0 - eps) - smooth_l1_grad(1.0)).abs() < 2e-9);
        assert!((smooth_l1_grad(-1.0 + eps) - smooth_l1_grad(-1.0)).abs() < 2e-9);
    }

    fn kps(base: Point2) -> Keypoints2D {
        Keypoints2D::new(core::array::from_fn(|i| base + Point2::new(i as f64, -(i as f64))))
    }

    #[test]
    fn keypoint_loss_values() {
        let truth = kps(Point2::new(3.0, 4.0));
        let gt: Vec<LabeledPoint> = vec![LabeledPoint { label: 4, point: truth.points[3] }];
        let (l, _) = keypoint_loc_loss(&gt, &[truth]).unwrap();
        assert_eq!(l, 0.0);

        let off = truth.map(|p| p + Point2::new(0.5, 2.0));
        let (l, _) = keypoint_loc_loss(&gt, &[off]).unwrap();
        assert!((l - 1.625).abs() < 1e-12);

        assert_eq!(keypoint_loc_loss(&[], &[]), Err(Error::EmptySample));
        assert!(matches!(keypoint_loc_loss(&gt, &[truth, truth]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn box_coding_examples() {
        let p = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(bbox_encode(&p, &p).unwrap(), BoxDelta::default());
        let g = BoundingBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let d = bbox_encode(&p, &g).unwrap();
        let ln2 = core::f64::consts::LN_2;
        assert!((d.tx - 1.0).abs() < 1e-15 && (d.ty - 1.0).abs() < 1e-15);
        assert!((d.tw - ln2).abs() < 1e-15 && (d.th - ln2).abs() < 1e-15);

        assert_eq!(bbox_decode(&p, &BoxDelta::default()), p);
        let back = bbox_decode(&p, &BoxDelta { tx: 1.0, ty: 1.0, tw: ln2, th: ln2 });
        for (a, b) in [(back.x, 5.0), (back.y, 5.0), (back.w, 20.0), (back.h, 20.0)] {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 };
        assert_eq!(bbox_encode(&flat, &p), Err(Error::DegenerateBox));
    }

    #[test]
    fn box_loss_values() {
        let t = BoxDelta { tx: 0.1, ty: -0.2, tw: 0.3, th: 0.0 };
        assert_eq!(bbox_loss(&[t], &[t]).unwrap().0, 0.0);
        let p = BoxDelta { tx: 0.6, ty: 0.3, tw: 0.8, th: 0.5 };
        assert!((bbox_loss(&[p], &[t]).unwrap().0 - 0.5).abs() < 1e-12);
        assert_eq!(bbox_loss(&[], &[]), Err(Error::EmptySample));
        assert!(matches!(bbox_loss(&[p], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn total_is_unweighted_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0), 6.0);
        assert_eq!(LossTerms { cls: 1.0, loc_pt: 2.0, loc_box: 3.0 }.total(), 6.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.01..200.0f64, 0.01..200.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn box_coding_roundtrip(p in arb_box(), g in arb_box()) {
            let back = bbox_decode(&p, &bbox_encode(&p, &g).unwrap());
            let tol = 1e-9 * (1.0 + g.x.abs().max(g.y.abs()).max(g.w).max(g.h));
            prop_assert!((back.x - g.x).abs() < tol && (back.y - g.y).abs() < tol);
            prop_assert!((back.w - g.w).abs() < tol && (back.h - g.h).abs() < tol);
        }

        #[test]
        fn losses_are_non_negative(a in proptest::collection::vec(-5.0..5.0f64, 8)) {
            let p = BoxDelta::from_array([a[0], a[1], a[2], a[3]]);
            let t = BoxDelta::from_array([a[4], a[5], a[6], a[7]]);
            prop_assert!(bbox_loss(&[p], &[t]).unwrap().0 >= 0.0);
            prop_assert!(a.iter().all(|v| smooth_l1(*v) >= 0.0));
        }
    }
}
