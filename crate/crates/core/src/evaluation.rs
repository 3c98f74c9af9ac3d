//! Detection scoring: greedy score-ordered matching, ROC sweeps, proposal
//! recall and keypoint classification accuracy.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{ellipse_overlap, iou, BoundingBox, Ellipse};
use crate::losses::TrainingPoints;
use crate::proposals::{argmax, DenseOutputs};
use crate::{Error, Result, NUM_CLASSES};

/// Raster resolution used for ellipse overlaps in continuous mode.
pub const ELLIPSE_GRID: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Box IoU; a match earns credit 1.
    Discrete,
    /// Ellipse overlap; a match earns the overlap itself.
    Continuous,
}

/// A scored detection as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRegion {
    pub bbox: BoundingBox,
    pub ellipse: Option<Ellipse>,
    pub score: f64,
}

/// A ground-truth face as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRegion {
    pub bbox: BoundingBox,
    pub ellipse: Option<Ellipse>,
}

impl From<&crate::detector::Detection> for ScoredRegion {
    fn from(d: &crate::detector::Detection) -> Self {
        Self { bbox: d.bbox, ellipse: d.ellipse, score: d.score }
    }
}

impl From<&crate::training::GroundTruthFace> for TruthRegion {
    fn from(g: &crate::training::GroundTruthFace) -> Self {
        Self { bbox: g.bbox, ellipse: g.ellipse }
    }
}

/// The fate of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMatch {
    pub image: usize,
    pub detection: usize,
    pub score: f64,
    pub truth: Option<usize>,
    /// Overlap with the best unmatched ground truth at matching time.
    pub overlap: f64,
    /// 0 for a false positive.
    pub credit: f64,
}

impl DetectionMatch {
    pub fn is_false_positive(&self) -> bool {
        self.truth.is_none()
    }
}

/// Matches over a whole dataset, ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<DetectionMatch>,
    pub total_truths: usize,
    /// Running credit sum along `matches`.
    pub cumulative_tp: Vec<f64>,
    /// Running false-positive count along `matches`.
    pub cumulative_fp: Vec<usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> f64 {
        self.cumulative_tp.last().copied().unwrap_or(0.0)
    }

    pub fn false_positives(&self) -> usize {
        self.cumulative_fp.last().copied().unwrap_or(0)
    }
}

/// Descending score; equal scores keep their input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn overlap(d: &ScoredRegion, g: &TruthRegion, mode: MatchMode) -> Result<f64> {
    match mode {
        MatchMode::Discrete => Ok(iou(&d.bbox, &g.bbox)),
        MatchMode::Continuous => match (&d.ellipse, &g.ellipse) {
            (Some(a), Some(b)) => Ok(ellipse_overlap(a, b, ELLIPSE_GRID)),
            _ => Err(Error::MissingEllipse),
        },
    }
}

/// Greedy matching for one image. Detections are taken by descending score;
/// each claims the unmatched ground truth it overlaps most and is a true
/// positive when that overlap reaches `threshold`.
pub fn match_image(
    image: usize,
    dets: &[ScoredRegion],
    gts: &[TruthRegion],
    mode: MatchMode,
    threshold: f64,
) -> Result<Vec<DetectionMatch>> {
    if mode == MatchMode::Continuous && gts.iter().any(|g| g.ellipse.is_none()) {
        return Err(Error::MissingEllipse);
    }
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        if mode == MatchMode::Continuous && d.ellipse.is_none() {
            return Err(Error::MissingEllipse);
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = overlap(d, g, mode)?;
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let (truth, ov) = match best {
            Some((j, o)) if o >= threshold => {
                taken[j] = true;
                (Some(j), o)
            }
            Some((_, o)) => (None, o),
            None => (None, 0.0),
        };
        let credit = match (truth, mode) {
            (None, _) => 0.0,
            (Some(_), MatchMode::Discrete) => 1.0,
            (Some(_), MatchMode::Continuous) => ov,
        };
        out.push(DetectionMatch { image, detection: i, score: d.score, truth, overlap: ov, credit });
    }
    Ok(out)
}

/// Matches every image and merges the results by descending score (ties in
/// image order, then in per-image order).
pub fn match_detections(
    images: &[(Vec<ScoredRegion>, Vec<TruthRegion>)],
    mode: MatchMode,
    threshold: f64,
) -> Result<MatchResult> {
    let mut all = Vec::new();
    let mut total_truths = 0;
    for (i, (dets, gts)) in images.iter().enumerate() {
        all.extend(match_image(i, dets, gts, mode, threshold)?);
        total_truths += gts.len();
    }
    let order = score_order(all.iter().map(|m| m.score));
    let matches: Vec<DetectionMatch> = order.into_iter().map(|i| all[i]).collect();
    let mut cumulative_tp = Vec::with_capacity(matches.len());
    let mut cumulative_fp = Vec::with_capacity(matches.len());
    let (mut tp, mut fp) = (0.0, 0);
    for m in &matches {
        tp += m.credit;
        fp += usize::from(m.is_false_positive());
        cumulative_tp.push(tp);
        cumulative_fp.push(fp);
    }
    Ok(MatchResult { matches, total_truths, cumulative_tp, cumulative_fp })
}

/// One point of the detection ROC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub false_positives: usize,
    /// Detections scoring at least this are kept.
    pub score_threshold: f64,
    /// True-positive credit over the number of ground truths.
    pub recall: f64,
}

/// Sweeps the threshold over every distinct detection score, highest first.
/// Without detections the curve is the single point `(0, +inf, 0)`.
pub fn roc_points(result: &MatchResult) -> Vec<RocPoint> {
    let denom = if result.total_truths == 0 { 1.0 } else { result.total_truths as f64 };
    let mut out = Vec::new();
    if result.matches.is_empty() {
        out.push(RocPoint { false_positives: 0, score_threshold: f64::INFINITY, recall: 0.0 });
        return out;
    }
    let n = result.matches.len();
    for i in 0..n {
        let last_of_score = i + 1 == n || result.matches[i + 1].score != result.matches[i].score;
        if last_of_score {
            out.push(RocPoint {
                false_positives: result.cumulative_fp[i],
                score_threshold: result.matches[i].score,
                recall: result.cumulative_tp[i] / denom,
            });
        }
    }
    out
}

/// Best recall among ROC points with at most `max_false_positives`.
pub fn recall_at(points: &[RocPoint], max_false_positives: usize) -> f64 {
    points
        .iter()
        .filter(|p| p.false_positives <= max_false_positives)
        .map(|p| p.recall)
        .fold(0.0, f64::max)
}

/// Fraction of ground truths covered by a proposal with IoU at least
/// `threshold`, and the mean number of proposals per image. With no ground
/// truth at all the recall is 1.
pub fn proposal_recall(proposals: &[Vec<BoundingBox>], truths: &[Vec<BoundingBox>], threshold: f64) -> Result<(f64, f64)> {
    if proposals.len() != truths.len() {
        return Err(Error::LengthMismatch { expected: truths.len(), found: proposals.len() });
    }
    let (mut hit, mut total, mut count) = (0usize, 0usize, 0usize);
    for (props, gts) in proposals.iter().zip(truths) {
        count += props.len();
        total += gts.len();
        hit += gts.iter().filter(|g| props.iter().any(|p| iou(p, g) >= threshold)).count();
    }
    let recall = if total == 0 { 1.0 } else { hit as f64 / total as f64 };
    let mean = if proposals.is_empty() { 0.0 } else { count as f64 / proposals.len() as f64 };
    Ok((recall, mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointAccuracy {
    /// Accuracy per label (0 is background); `None` when a label was not sampled.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub counts: [usize; NUM_CLASSES],
    /// Accuracy over all sampled positions.
    pub average: f64,
}

/// Arg-max classification accuracy at the sampled positions.
pub fn keypoint_accuracy(d: &DenseOutputs, pts: &TrainingPoints) -> Result<KeypointAccuracy> {
    if pts.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut counts = [0usize; NUM_CLASSES];
    let mut correct = [0usize; NUM_CLASSES];
    for p in pts.iter() {
        if p.pos.x >= d.width || p.pos.y >= d.height || p.label >= NUM_CLASSES {
            return Err(Error::ShapeMismatch("sample point outside the dense grid".into()));
        }
        counts[p.label] += 1;
        correct[p.label] += usize::from(argmax(d.probs(p.pos)) == p.label);
    }
    let per_class = core::array::from_fn(|c| (counts[c] > 0).then(|| correct[c] as f64 / counts[c] as f64));
    let average = correct.iter().sum::<usize>() as f64 / pts.len() as f64;
    Ok(KeypointAccuracy { per_class, counts, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::SamplePoint;
    use crate::proposals::GridPos;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(bbox: BoundingBox, score: f64) -> ScoredRegion {
        ScoredRegion { bbox, ellipse: None, score }
    }

    fn truth(bbox: BoundingBox) -> TruthRegion {
        TruthRegion { bbox, ellipse: None }
    }

    #[test]
    fn single_overlapping_detection_is_a_hit() {
        // IoU 0.6: width 10 boxes offset by 2.5
        let g = b(0.0, 0.0, 10.0, 10.0);
        let d = b(2.5, 0.0, 10.0, 10.0);
        assert!((iou(&g, &d) - 0.6).abs() < 1e-12);
        let r = match_detections(&[(vec![det(d, 1.0)], vec![truth(g)])], MatchMode::Discrete, 0.5).unwrap();
        assert_eq!((r.true_positives(), r.false_positives()), (1.0, 0));
    }

    #[test]
    fn lone_detection_is_false_positive() {
        let r = match_detections(&[(vec![det(b(0.0, 0.0, 1.0, 1.0), 0.3)], vec![])], MatchMode::Discrete, 0.5).unwrap();
        assert_eq!((r.true_positives(), r.false_positives()), (0.0, 1));
    }

    #[test]
    fn one_truth_matches_once() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let r = match_detections(&[(vec![det(g, 1.0), det(g, 2.0)], vec![truth(g)])], MatchMode::Discrete, 0.5).unwrap();
        assert_eq!((r.true_positives(), r.false_positives()), (1.0, 1));
        assert_eq!(r.matches[0].detection, 1);
    }

    #[test]
    fn continuous_needs_ellipses() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let r = match_detections(&[(vec![det(g, 1.0)], vec![truth(g)])], MatchMode::Continuous, 0.5);
        assert_eq!(r, Err(Error::MissingEllipse));
    }

    #[test]
    fn continuous_credit_is_the_overlap() {
        let e1 = Ellipse::new(0.0, 0.0, 5.0, 3.0, 0.0).unwrap();
        let e2 = Ellipse::new(0.5, 0.0, 5.0, 3.0, 0.0).unwrap();
        let g = TruthRegion { bbox: b(-5.0, -3.0, 10.0, 6.0), ellipse: Some(e1) };
        let d = ScoredRegion { bbox: b(-4.5, -3.0, 10.0, 6.0), ellipse: Some(e2), score: 1.0 };
        let r = match_detections(&[(vec![d], vec![g])], MatchMode::Continuous, 0.5).unwrap();
        let expect = ellipse_overlap(&e2, &e1, ELLIPSE_GRID);
        assert!(expect < 1.0 && expect > 0.8);
        assert_eq!(r.true_positives(), expect);
    }

    #[test]
    fn perfect_detector_reaches_full_recall_without_false_positives() {
        let images: Vec<_> = (0..4)
            .map(|i| {
                let g = b(i as f64, 0.0, 5.0, 5.0);
                (vec![det(g, i as f64)], vec![truth(g)])
            })
            .collect();
        let roc = roc_points(&match_detections(&images, MatchMode::Discrete, 0.5).unwrap());
        let last = roc.last().unwrap();
        assert_eq!((last.false_positives, last.recall), (0, 1.0));
    }

    #[test]
    fn empty_detection_set_gives_origin() {
        let roc = roc_points(&match_detections(&[(vec![], vec![truth(b(0.0, 0.0, 1.0, 1.0))])], MatchMode::Discrete, 0.5).unwrap());
        assert_eq!(roc.len(), 1);
        assert_eq!((roc[0].false_positives, roc[0].recall), (0, 0.0));
    }

    #[test]
    fn equal_scores_share_a_roc_point() {
        let g = b(0.0, 0.0, 4.0, 4.0);
        let images = vec![(vec![det(g, 0.5), det(b(20.0, 0.0, 4.0, 4.0), 0.5), det(b(40.0, 0.0, 1.0, 1.0), 0.1)], vec![truth(g)])];
        let roc = roc_points(&match_detections(&images, MatchMode::Discrete, 0.5).unwrap());
        assert_eq!(roc.len(), 2);
        assert_eq!((roc[0].false_positives, roc[0].recall, roc[0].score_threshold), (1, 1.0, 0.5));
        assert_eq!(roc[1].false_positives, 2);
        assert_eq!(recall_at(&roc, 0), 0.0);
        assert_eq!(recall_at(&roc, 1), 1.0);
    }

    #[test]
    fn proposal_recall_extremes() {
        let gts = vec![vec![b(0.0, 0.0, 3.0, 3.0), b(9.0, 9.0, 3.0, 3.0)]];
        assert_eq!(proposal_recall(&gts, &gts, 0.5).unwrap(), (1.0, 2.0));
        assert_eq!(proposal_recall(&[vec![]], &gts, 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(proposal_recall(&[vec![b(0.0, 0.0, 3.0, 3.0)]], &gts, 0.5).unwrap(), (0.5, 1.0));
    }

    fn uniform(w: usize, h: usize) -> DenseOutputs {
        DenseOutputs::background(w, h)
    }

    fn point(x: usize, y: usize, label: usize) -> SamplePoint {
        SamplePoint { pos: GridPos::new(x, y), label, face: if label > 0 { Some(0) } else { None } }
    }

    #[test]
    fn uniform_probabilities_favour_background() {
        let d = uniform(4, 4);
        let pts = TrainingPoints { positives: vec![point(0, 0, 3), point(1, 0, 5)], negatives: vec![point(3, 3, 0)] };
        let acc = keypoint_accuracy(&d, &pts).unwrap();
        assert_eq!(acc.per_class[0], Some(1.0));
        assert_eq!(acc.per_class[3], Some(0.0));
        assert_eq!(acc.per_class[1], None);
        assert!((acc.average - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_by_hand_count() {
        let mut d = uniform(5, 2);
        // cells 0..5 predict labels 1..5, cells 5..10 predict background
        for (i, p) in d.class_probs.iter_mut().enumerate() {
            *p = [0.0; NUM_CLASSES];
            p[if i < 5 { i + 1 } else { 0 }] = 1.0;
        }
        let positives = vec![point(0, 0, 1), point(1, 0, 2), point(2, 0, 4), point(3, 0, 4), point(4, 0, 5), point(0, 1, 1)];
        let negatives = vec![point(1, 1, 0), point(2, 1, 0), point(3, 0, 0), point(4, 1, 0)];
        let acc = keypoint_accuracy(&d, &TrainingPoints { positives, negatives }).unwrap();
        // hits: (0,0) (1,0) (3,0 as 4) (4,0) and three background cells
        assert_eq!(acc.average, 7.0 / 10.0);
        assert_eq!(acc.per_class[4], Some(0.5));
        assert_eq!(acc.per_class[1], Some(0.5));
        assert_eq!(acc.per_class[0], Some(0.75));
        assert_eq!(keypoint_accuracy(&d, &TrainingPoints::default()), Err(Error::EmptySample));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..40.0f64, 0.0..40.0f64, 1.0..15.0f64, 1.0..15.0f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    fn arb_images() -> impl Strategy<Value = Vec<(Vec<ScoredRegion>, Vec<TruthRegion>)>> {
        let dets = prop::collection::vec((arb_box(), 0.0..1.0f64).prop_map(|(bx, s)| det(bx, s)), 0..8);
        let gts = prop::collection::vec(arb_box().prop_map(truth), 0..5);
        prop::collection::vec((dets, gts), 1..5)
    }

    proptest! {
        #[test]
        fn roc_recall_never_drops(images in arb_images()) {
            let roc = roc_points(&match_detections(&images, MatchMode::Discrete, 0.5).unwrap());
            for w in roc.windows(2) {
                prop_assert!(w[1].false_positives >= w[0].false_positives);
                prop_assert!(w[1].recall >= w[0].recall);
            }
        }

        #[test]
        fn rescaled_scores_match_alike(images in arb_images(), k in 0.01..100.0f64) {
            let scaled: Vec<_> = images
                .iter()
                .map(|(d, g)| (d.iter().map(|x| ScoredRegion { score: x.score * k, ..*x }).collect(), g.clone()))
                .collect();
            let a = match_detections(&images, MatchMode::Discrete, 0.5).unwrap();
            let b = match_detections(&scaled, MatchMode::Discrete, 0.5).unwrap();
            prop_assert_eq!(a.true_positives(), b.true_positives());
            prop_assert_eq!(a.false_positives(), b.false_positives());
        }

        #[test]
        fn identical_sets_have_no_false_positives(images in arb_images()) {
            let same: Vec<_> = images
                .iter()
                .map(|(_, g)| (g.iter().enumerate().map(|(i, t)| det(t.bbox, i as f64)).collect(), g.clone()))
                .collect();
            let r = match_detections(&same, MatchMode::Discrete, 0.5).unwrap();
            prop_assert_eq!(r.false_positives(), 0);
        }

        #[test]
        fn each_truth_matched_at_most_once(images in arb_images()) {
            let r = match_detections(&images, MatchMode::Discrete, 0.5).unwrap();
            let mut seen = alloc::collections::BTreeSet::new();
            for m in &r.matches {
                if let Some(t) = m.truth {
                    prop_assert!(seen.insert((m.image, t)));
                }
            }
        }
    }
}
