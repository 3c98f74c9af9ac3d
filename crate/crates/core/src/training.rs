//! Synthetic scenes with exact ground truth, labelled-cell sampling and the
//! image-centric SGD loop.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    face_bbox, face_ellipse, iou, project, project_backward, BoundingBox, Ellipse, Keypoints2D, MeanFace3D, Point2,
    TransformParams,
};
use crate::losses::{bbox_encode, bbox_loss, cls_loss, keypoint_loc_loss, BoxDelta, LabeledPoint, LossTerms, SamplePoint, TrainingPoints};
use crate::network::{configuration_pooling, configuration_pooling_backward, FeatureMap, Forward, HeadGradients, Model, ModelParams};
use crate::proposals::{anchored_keypoints, nms, proposals_from_dense, GridPos};
use crate::{Error, Result, GRID_SCALE, NUM_KEYPOINTS};

/// Scale range of synthetic faces (mean-face units to grid cells).
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.1);
/// Largest in-plane rotation of a synthetic face.
pub const MAX_ROTATION: f64 = PI / 6.0;
/// Synthetic faces overlap each other by less than this IoU.
pub const MAX_FACE_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Half side of a keypoint stamp, in mean-face units.
const STAMP_HALF: f64 = 0.9;
/// Background cells sampled from an image without faces.
const NEGATIVES_WITHOUT_FACES: usize = 32;

const RED: [f64; 3] = [1.0, 0.0, 0.0];
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 1.0];
const CYAN: [f64; 3] = [0.0, 1.0, 1.0];
const MAGENTA: [f64; 3] = [1.0, 0.0, 1.0];
const YELLOW: [f64; 3] = [1.0, 1.0, 0.0];
const BLACK: [f64; 3] = [0.0, 0.0, 0.0];
const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// (upper half, lower half) colours of each keypoint stamp, in the face frame.
const STAMPS: [([f64; 3], [f64; 3]); NUM_KEYPOINTS] = [
    (BLUE, WHITE),
    (WHITE, BLUE),
    (RED, BLACK),
    (GREEN, RED),
    (RED, GREEN),
    (BLACK, RED),
    (MAGENTA, YELLOW),
    (YELLOW, MAGENTA),
    (CYAN, BLACK),
    (BLACK, CYAN),
];

/// An annotated face in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFace {
    pub keypoints: Keypoints2D,
    pub visible: [bool; NUM_KEYPOINTS],
    pub bbox: BoundingBox,
    pub ellipse: Option<Ellipse>,
}

impl GroundTruthFace {
    /// All keypoints visible; box and ellipse derived from the keypoints.
    pub fn from_keypoints(keypoints: Keypoints2D) -> Result<Self> {
        Ok(Self {
            bbox: face_bbox(&keypoints, true)?,
            ellipse: face_ellipse(&keypoints).ok(),
            visible: [true; NUM_KEYPOINTS],
            keypoints,
        })
    }

    fn scaled(&self, sx: f64, sy: f64) -> Self {
        let f = |p: Point2| Point2::new(p.x * sx, p.y * sy);
        let keypoints = self.keypoints.map(f);
        let bbox = BoundingBox { x: self.bbox.x * sx, y: self.bbox.y * sy, w: self.bbox.w * sx, h: self.bbox.h * sy };
        Self { keypoints, bbox, visible: self.visible, ellipse: face_ellipse(&keypoints).ok().or(self.ellipse) }
    }
}

/// An RGB image (values roughly in `[0, 1]`) with its faces.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: FeatureMap,
    pub faces: Vec<GroundTruthFace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFace {
    /// Transform in grid units.
    pub transform: TransformParams,
    /// Ground-truth keypoints in image coordinates.
    pub keypoints: Keypoints2D,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: FeatureMap,
    pub faces: Vec<SceneFace>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn to_annotated(&self) -> Result<AnnotatedImage> {
        let faces = self
            .faces
            .iter()
            .map(|f| GroundTruthFace::from_keypoints(f.keypoints))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotatedImage { image: self.image.clone(), faces })
    }
}

/// Keypoints of a face with transform `t` (grid units) in image coordinates.
pub fn scene_keypoints(face: &MeanFace3D, t: &TransformParams) -> Keypoints2D {
    project(face, t).map(|p| p * GRID_SCALE)
}

/// A `canvas_size` square scene with `n_faces` randomly rotated, scaled and
/// placed faces, fully determined by `seed`.
pub fn synth_scene(seed: u64, canvas_size: usize, n_faces: usize) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = MeanFace3D::default();
    let size = canvas_size as f64;
    let mut placed: Vec<(TransformParams, BoundingBox)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_faces {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * n_faces.max(1) {
            return Err(Error::PlacementFailure { attempts: attempts - 1 });
        }
        let scale = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
        let angle = rng.gen_range(-MAX_ROTATION..MAX_ROTATION);
        let base = face_bbox(&scene_keypoints(&face, &TransformParams::similarity(scale, angle, 0.0, 0.0)), true)?;
        // keep a one-pixel margin inside the canvas
        let (lo_x, hi_x) = (1.0 - base.x, size - 2.0 - base.x - base.w);
        let (lo_y, hi_y) = (1.0 - base.y, size - 2.0 - base.y - base.h);
        if hi_x < lo_x || hi_y < lo_y {
            continue;
        }
        let dx = lo_x + rng.gen::<f64>() * (hi_x - lo_x);
        let dy = lo_y + rng.gen::<f64>() * (hi_y - lo_y);
        let t = TransformParams::similarity(scale, angle, dx / GRID_SCALE, dy / GRID_SCALE);
        let bbox = BoundingBox { x: base.x + dx, y: base.y + dy, ..base };
        if placed.iter().all(|(_, b)| iou(b, &bbox) < MAX_FACE_IOU) {
            placed.push((t, bbox));
        }
    }
    let transforms: Vec<TransformParams> = placed.iter().map(|(t, _)| *t).collect();
    render_scene(&mut rng, seed, canvas_size, &transforms)
}

/// Renders faces with the given transforms over textured noise.
pub fn render_scene(rng: &mut ChaCha8Rng, seed: u64, canvas_size: usize, transforms: &[TransformParams]) -> Result<SyntheticScene> {
    if canvas_size == 0 {
        return Err(Error::InvalidArgument("empty canvas".into()));
    }
    let face = MeanFace3D::default();
    let n = canvas_size;
    let mut image = background(rng, n);
    let mut faces = Vec::with_capacity(transforms.len());
    for t in transforms {
        let keypoints = scene_keypoints(&face, t);
        let bbox = face_bbox(&keypoints, true)?;
        let tone = [0.85 + rng.gen_range(-0.08..0.08), 0.65 + rng.gen_range(-0.08..0.08), 0.5 + rng.gen_range(-0.08..0.08)];
        if let Ok(e) = face_ellipse(&keypoints) {
            fill(&mut image, |p| e.contains(p), |_| tone);
        }
        // face-frame coordinates of a pixel relative to a keypoint
        let m = [[GRID_SCALE * t.a[0][0], GRID_SCALE * t.a[0][1]], [GRID_SCALE * t.a[1][0], GRID_SCALE * t.a[1][1]]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::InvalidArgument("face transform is singular in the image plane".into()));
        }
        let local = |d: Point2| {
            Point2::new((m[1][1] * d.x - m[0][1] * d.y) / det, (-m[1][0] * d.x + m[0][0] * d.y) / det)
        };
        for (k, kp) in keypoints.points.iter().enumerate() {
            let (upper, lower) = STAMPS[k];
            let inside = |p: Point2| {
                let q = local(p - *kp);
                q.x.abs() <= STAMP_HALF && q.y.abs() <= STAMP_HALF
            };
            fill(&mut image, inside, |p| if local(p - *kp).y >= 0.0 { upper } else { lower });
        }
        faces.push(SceneFace { transform: *t, keypoints, bbox });
    }
    Ok(SyntheticScene { image, faces, seed })
}

/// Smooth value noise plus per-pixel jitter.
fn background(rng: &mut ChaCha8Rng, n: usize) -> FeatureMap {
    const BLOCK: usize = 8;
    let nodes = n / BLOCK + 2;
    let mut img = FeatureMap::zeros(3, n, n);
    for c in 0..3 {
        let grid: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen_range(0.3..0.7)).collect();
        for y in 0..n {
            for x in 0..n {
                let (gx, gy) = (x as f64 / BLOCK as f64, y as f64 / BLOCK as f64);
                let (x0, y0) = (gx as usize, gy as usize);
                let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                let g = |i: usize, j: usize| grid[j * nodes + i];
                let v = (1.0 - fx) * (1.0 - fy) * g(x0, y0)
                    + fx * (1.0 - fy) * g(x0 + 1, y0)
                    + (1.0 - fx) * fy * g(x0, y0 + 1)
                    + fx * fy * g(x0 + 1, y0 + 1);
                *img.at_mut(c, y, x) = v + rng.gen_range(-0.05..0.05);
            }
        }
    }
    img
}

fn fill(img: &mut FeatureMap, inside: impl Fn(Point2) -> bool, color: impl Fn(Point2) -> [f64; 3]) {
    for y in 0..img.height {
        for x in 0..img.width {
            let p = Point2::new(x as f64, y as f64);
            if inside(p) {
                let c = color(p);
                for (ch, v) in c.iter().enumerate() {
                    *img.at_mut(ch, y, x) = *v;
                }
            }
        }
    }
}

/// Keypoint cells expanded to their `positive_grid` neighbourhood plus as
/// many background cells drawn from outside every face box.
///
/// A cell claimed by two keypoints goes to the nearer one.
pub fn sample_points<R: Rng>(
    sample: &AnnotatedImage,
    grid_width: usize,
    grid_height: usize,
    positive_grid: usize,
    rng: &mut R,
) -> Result<TrainingPoints> {
    if sample.faces.is_empty() {
        return Err(Error::EmptySample);
    }
    if grid_width == 0 || grid_height == 0 {
        return Err(Error::ShapeMismatch("empty grid".into()));
    }
    let radius = (positive_grid / 2) as isize;
    let (img_w, img_h) = (sample.image.width as f64, sample.image.height as f64);
    // cell -> (squared distance, label, face)
    let mut claimed: BTreeMap<GridPos, (f64, usize, usize)> = BTreeMap::new();
    for (f, face) in sample.faces.iter().enumerate() {
        for (k, p) in face.keypoints.points.iter().enumerate() {
            let on_image = p.x >= 0.0 && p.y >= 0.0 && p.x <= img_w - 1.0 && p.y <= img_h - 1.0;
            if !face.visible[k] || !on_image {
                continue;
            }
            let g = *p * (1.0 / GRID_SCALE);
            let (cx, cy) = (libm::round(g.x) as isize, libm::round(g.y) as isize);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= grid_width as isize || y >= grid_height as isize {
                        continue;
                    }
                    let pos = GridPos::new(x as usize, y as usize);
                    let d = (g - pos.to_point()).dot(g - pos.to_point());
                    let entry = (d, k + 1, f);
                    claimed
                        .entry(pos)
                        .and_modify(|e| {
                            if (entry.0, entry.1, entry.2) < (e.0, e.1, e.2) {
                                *e = entry;
                            }
                        })
                        .or_insert(entry);
                }
            }
        }
    }
    let positives: Vec<SamplePoint> = claimed
        .iter()
        .map(|(pos, (_, label, face))| SamplePoint { pos: *pos, label: *label, face: Some(*face) })
        .collect();
    let boxes: Vec<BoundingBox> = sample.faces.iter().map(|f| f.bbox.scaled(1.0 / GRID_SCALE)).collect();
    let count = positives.len();
    let negatives = sample_background(grid_width, grid_height, &boxes, &claimed, count, rng)?;
    Ok(TrainingPoints { positives, negatives })
}

fn sample_background<R: Rng>(
    grid_width: usize,
    grid_height: usize,
    boxes: &[BoundingBox],
    claimed: &BTreeMap<GridPos, (f64, usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SamplePoint>> {
    let mut eligible: Vec<GridPos> = Vec::new();
    for y in 0..grid_height {
        for x in 0..grid_width {
            let pos = GridPos::new(x, y);
            if !claimed.contains_key(&pos) && boxes.iter().all(|b| !b.contains(pos.to_point())) {
                eligible.push(pos);
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::InsufficientBackground);
    }
    let picks: Vec<GridPos> = if eligible.len() >= count {
        let (chosen, _) = eligible.partial_shuffle(rng, count);
        chosen.to_vec()
    } else {
        (0..count).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect()
    };
    Ok(picks.into_iter().map(|pos| SamplePoint { pos, label: 0, face: None }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Images are resized so that their short edge has this length.
    pub short_edge: usize,
    /// Probability of Gaussian-blurring an image at each step.
    pub blur_prob: f64,
    /// Side of the square neighbourhood of positives around each keypoint.
    pub positive_grid: usize,
    pub seed: u64,
    pub keypoint_threshold: f64,
    pub nms_threshold: f64,
    /// Minimum IoU between a proposal and a face for box regression.
    pub match_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 13,
            lr_start: 0.01,
            lr_end: 0.0001,
            short_edge: 64,
            blur_prob: 0.1,
            positive_grid: 3,
            seed: 0,
            keypoint_threshold: crate::proposals::DEFAULT_KEYPOINT_THRESHOLD,
            nms_threshold: crate::proposals::DEFAULT_NMS_THRESHOLD,
            match_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        // both rates zero freezes the model
        let frozen = self.lr_start == 0.0 && self.lr_end == 0.0;
        if !(self.lr_start >= self.lr_end && (self.lr_end > 0.0 || frozen)) || !self.lr_start.is_finite() {
            return bad("learning rates need lr_start >= lr_end > 0");
        }
        if self.positive_grid % 2 == 0 {
            return bad("positive_grid must be odd");
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return bad("blur_prob must be a probability");
        }
        if !(0.0..1.0).contains(&self.keypoint_threshold) {
            return bad("keypoint_threshold must lie in [0, 1)");
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return bad("nms_threshold must lie in (0, 1]");
        }
        if self.short_edge == 0 {
            return bad("short_edge must be positive");
        }
        Ok(())
    }

    /// Geometric interpolation from `lr_start` (first epoch) to `lr_end`
    /// (last epoch).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.lr_start == 0.0 {
            return self.lr_start;
        }
        if epoch + 1 >= self.epochs {
            return self.lr_end;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start * libm::pow(self.lr_end / self.lr_start, t)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms,
}

/// A matched proposal: where to pool (grid coordinates) and what to regress.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTarget {
    pub keypoints: Keypoints2D,
    pub target: BoxDelta,
}

/// The discrete choices of one step: sampled cells and matched proposals.
/// Fixing them makes the loss a differentiable function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub points: TrainingPoints,
    pub boxes: Vec<BoxTarget>,
}

pub fn plan_step<R: Rng>(fwd: &Forward, sample: &AnnotatedImage, config: &TrainConfig, rng: &mut R) -> Result<StepPlan> {
    let (gw, gh) = (fwd.dense.width, fwd.dense.height);
    let points = if sample.faces.is_empty() {
        let negatives = sample_background(gw, gh, &[], &BTreeMap::new(), NEGATIVES_WITHOUT_FACES, rng)?;
        TrainingPoints { positives: Vec::new(), negatives }
    } else {
        sample_points(sample, gw, gh, config.positive_grid, rng)?
    };

    let face = MeanFace3D::default();
    let proposals = nms(&proposals_from_dense(&fwd.dense, &face, config.keypoint_threshold), config.nms_threshold);
    let mut boxes = Vec::new();
    for p in &proposals {
        let best = sample
            .faces
            .iter()
            .map(|gt| (iou(&p.bbox, &gt.bbox), gt))
            .filter(|(o, _)| *o >= config.match_iou)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, gt)) = best {
            boxes.push(BoxTarget {
                keypoints: p.keypoints.map(|q| q * (1.0 / GRID_SCALE)),
                target: bbox_encode(&p.bbox, &gt.bbox)?,
            });
        }
    }
    Ok(StepPlan { points, boxes })
}

/// The three loss terms for a fixed plan; when `grads` is given, their
/// gradient is accumulated into it.
pub fn step_loss(
    model: &Model,
    fwd: &Forward,
    sample: &AnnotatedImage,
    plan: &StepPlan,
    grads: Option<&mut ModelParams>,
) -> Result<LossTerms> {
    let face = MeanFace3D::default();
    let want_grad = grads.is_some();
    let mut head = if want_grad { HeadGradients::zeros(fwd) } else { HeadGradients::default() };
    let mut terms = LossTerms::default();

    let (cls, d_scores) = cls_loss(&fwd.dense, &plan.points)?;
    terms.cls = cls;
    if want_grad {
        head.class_scores = d_scores;
    }

    for (f, gt_face) in sample.faces.iter().enumerate() {
        let mine: Vec<&SamplePoint> = plan.points.positives.iter().filter(|p| p.face == Some(f)).collect();
        if mine.is_empty() {
            continue;
        }
        let gt: Vec<LabeledPoint> = mine
            .iter()
            .map(|p| LabeledPoint { label: p.label, point: gt_face.keypoints.points[p.label - 1] * (1.0 / GRID_SCALE) })
            .collect();
        let predicted: Vec<Keypoints2D> = mine
            .iter()
            .map(|p| anchored_keypoints(&face, p.pos, &fwd.dense.transform[fwd.dense.index(p.pos)]))
            .collect();
        let (loss, kp_grads) = keypoint_loc_loss(&gt, &predicted)?;
        terms.loc_pt += loss;
        if want_grad {
            for (p, g) in mine.iter().zip(&kp_grads) {
                let dt = project_backward(&face, g).to_array();
                let cell = &mut head.transform[fwd.dense.index(p.pos)];
                for (a, b) in cell.iter_mut().zip(dt) {
                    *a += b;
                }
            }
        }
    }

    let mut caches = Vec::with_capacity(plan.boxes.len());
    let mut predicted = Vec::with_capacity(plan.boxes.len());
    for b in &plan.boxes {
        let pooled = configuration_pooling(&fwd.features, &b.keypoints);
        let (delta, cache) = model.bbox_head(&pooled)?;
        predicted.push(delta);
        caches.push(cache);
    }
    let mut box_grads = Vec::new();
    if !plan.boxes.is_empty() {
        let targets: Vec<BoxDelta> = plan.boxes.iter().map(|b| b.target).collect();
        let (loss, g) = bbox_loss(&predicted, &targets)?;
        terms.loc_box = loss;
        box_grads = g;
    }

    if let Some(grads) = grads {
        for ((b, cache), g) in plan.boxes.iter().zip(&caches).zip(&box_grads) {
            let d_pooled = model.bbox_head_backward(cache, g, grads)?;
            configuration_pooling_backward(&fwd.features, &b.keypoints, &d_pooled, &mut head.features);
        }
        model.backward(fwd, &head, grads)?;
    }
    Ok(terms)
}

/// Image-centric SGD: one image per step, learning rate decayed
/// geometrically across epochs. Returns one log record per step.
pub fn train(dataset: &[AnnotatedImage], model: &mut Model, config: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_with(dataset, model, config, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    dataset: &[AnnotatedImage],
    model: &mut Model,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySample);
    }
    let stride = model.config().stride();
    let prepared: Vec<AnnotatedImage> = dataset.iter().map(|s| prepare_sample(s, config.short_edge, stride)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(config.epochs * prepared.len());
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        order.shuffle(&mut rng);
        for &i in &order {
            let sample = &prepared[i];
            let blurred;
            let input = if config.blur_prob > 0.0 && rng.gen::<f64>() < config.blur_prob {
                blurred = gaussian_blur(&sample.image, rng.gen_range(0.5..1.5));
                &blurred
            } else {
                &sample.image
            };
            let fwd = model.forward(input)?;
            let plan = plan_step(&fwd, sample, config, &mut rng)?;
            let mut grads = ModelParams::zeros(model.config());
            let terms = step_loss(model, &fwd, sample, &plan, Some(&mut grads))?;
            if !terms.total().is_finite() || !grads.is_finite() {
                return Err(Error::DivergenceDetected { epoch, step });
            }
            model.sgd_step(&grads, lr);
            if !model.params().is_finite() {
                return Err(Error::DivergenceDetected { epoch, step });
            }
            let record = LossRecord { epoch, step, terms };
            on_step(&record);
            log.push(record);
            step += 1;
        }
    }
    Ok(log)
}

/// Resizes so the short edge equals `short_edge`, rounding the long edge to
/// a multiple of `stride`, then pads up to the stride.
pub fn prepare_sample(sample: &AnnotatedImage, short_edge: usize, stride: usize) -> Result<AnnotatedImage> {
    let (w, h) = (sample.image.width, sample.image.height);
    let short = w.min(h);
    let resized = if short == short_edge {
        sample.clone()
    } else {
        let s = short_edge as f64 / short as f64;
        let round = |v: usize| ((libm::round(v as f64 * s) as usize).max(1) + stride - 1) / stride * stride;
        let (nw, nh) = if w <= h { (short_edge, round(h)) } else { (round(w), short_edge) };
        let image = resize_bilinear(&sample.image, nw, nh);
        let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
        AnnotatedImage { image, faces: sample.faces.iter().map(|f| f.scaled(sx, sy)).collect() }
    };
    Ok(AnnotatedImage { image: pad_to_stride(&resized.image, stride), faces: resized.faces })
}

/// Zero-pads the top rows and right columns up to a multiple of `stride`;
/// coordinates are unchanged because the origin is bottom-left.
pub fn pad_to_stride(img: &FeatureMap, stride: usize) -> FeatureMap {
    let up = |v: usize| v.div_ceil(stride) * stride;
    let (nh, nw) = (up(img.height), up(img.width));
    if (nh, nw) == (img.height, img.width) {
        return img.clone();
    }
    let mut out = FeatureMap::zeros(img.channels, nh, nw);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, x);
            }
        }
    }
    out
}

/// Bilinear resampling with pixel centres at integer coordinates scaled by
/// the size ratio.
pub fn resize_bilinear(img: &FeatureMap, width: usize, height: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(img.channels, height, width);
    let (sx, sy) = (img.width as f64 / width as f64, img.height as f64 / height as f64);
    for y in 0..height {
        let fy = (y as f64 * sy).min((img.height - 1) as f64);
        let (y0, ty) = (fy as usize, fy - libm::floor(fy));
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..width {
            let fx = (x as f64 * sx).min((img.width - 1) as f64);
            let (x0, tx) = (fx as usize, fx - libm::floor(fx));
            let x1 = (x0 + 1).min(img.width - 1);
            for c in 0..img.channels {
                let v = (1.0 - tx) * (1.0 - ty) * img.at(c, y0, x0)
                    + tx * (1.0 - ty) * img.at(c, y0, x1)
                    + (1.0 - tx) * ty * img.at(c, y1, x0)
                    + tx * ty * img.at(c, y1, x1);
                *out.at_mut(c, y, x) = v;
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &FeatureMap, sigma: f64) -> FeatureMap {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = FeatureMap::zeros(img.channels, img.height, img.width);
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let v = kernel.iter().enumerate().map(|(i, k)| {
                    let sx = (x + i as isize - radius).clamp(0, w - 1);
                    k * img.at(c, y as usize, sx as usize)
                });
                *tmp.at_mut(c, y as usize, x as usize) = v.sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = kernel.iter().enumerate().map(|(i, k)| {
                    let sy = (y + i as isize - radius).clamp(0, h - 1);
                    k * tmp.at(c, sy as usize, x as usize)
                });
                *out.at_mut(c, y as usize, x as usize) = v.sum();
            }
        }
    }
    out
}

/// `count` synthetic scenes with seeds `seed, seed + 1, ...`; each holds a
/// random number of faces in `faces`.
pub fn synth_dataset(seed: u64, count: usize, canvas_size: usize, faces: (usize, usize)) -> Result<Vec<SyntheticScene>> {
    let mut counts = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    (0..count)
        .map(|i| {
            let n = counts.gen_range(faces.0..=faces.1);
            synth_scene(seed.wrapping_add(i as u64), canvas_size, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background_only() {
        let s = synth_scene(3, 64, 0).unwrap();
        assert!(s.faces.is_empty());
        assert_eq!((s.image.width, s.image.height, s.image.channels), (64, 64, 3));
    }

    #[test]
    fn scene_keypoints_follow_the_transform() {
        let s = synth_scene(9, 64, 2).unwrap();
        assert_eq!(s.faces.len(), 2);
        let face = MeanFace3D::default();
        for f in &s.faces {
            let expect = project(&face, &f.transform);
            for (a, b) in f.keypoints.points.iter().zip(expect.points.iter()) {
                assert!((a.x - 2.0 * b.x).abs() < 1e-12 && (a.y - 2.0 * b.y).abs() < 1e-12);
            }
            assert!(f.bbox.x >= 0.0 && f.bbox.y >= 0.0 && f.bbox.x + f.bbox.w <= 63.0 && f.bbox.y + f.bbox.h <= 63.0);
        }
        assert!(iou(&s.faces[0].bbox, &s.faces[1].bbox) < MAX_FACE_IOU);
    }

    #[test]
    fn identity_face_is_translated_mean_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = TransformParams { mu: [16.0, 16.0], ..TransformParams::IDENTITY };
        let s = render_scene(&mut rng, 0, 64, &[t]).unwrap();
        for (kp, m) in s.faces[0].keypoints.points.iter().zip(MeanFace3D::default().points()) {
            assert_eq!(*kp, Point2::new(2.0 * (m[0] + 16.0), 2.0 * (m[1] + 16.0)));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(synth_scene(42, 64, 2).unwrap(), synth_scene(42, 64, 2).unwrap());
        assert_ne!(synth_scene(42, 64, 2).unwrap().image, synth_scene(43, 64, 2).unwrap().image);
    }

    #[test]
    fn tiny_canvas_fails_placement() {
        assert!(matches!(synth_scene(1, 8, 1), Err(Error::PlacementFailure { .. })));
    }

    fn face_at(center: Point2) -> GroundTruthFace {
        let t = TransformParams::similarity(1.0, 0.0, center.x / 2.0, center.y / 2.0);
        GroundTruthFace::from_keypoints(scene_keypoints(&MeanFace3D::default(), &t)).unwrap()
    }

    #[test]
    fn positives_bounded_by_neighbourhoods() {
        let sample = AnnotatedImage { image: FeatureMap::zeros(3, 64, 64), faces: vec![face_at(Point2::new(32.0, 30.0))] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_points(&sample, 32, 32, 3, &mut rng).unwrap();
        assert!(pts.m() <= 90 && pts.m() > 10);
        assert_eq!(pts.negatives.len(), pts.m());
        let b = sample.faces[0].bbox.scaled(0.5);
        assert!(pts.negatives.iter().all(|n| !b.contains(n.pos.to_point()) && n.label == 0));
        assert!(pts.positives.iter().all(|p| p.label >= 1 && p.face == Some(0)));
        // every keypoint keeps its own cell
        for (k, p) in sample.faces[0].keypoints.points.iter().enumerate() {
            let cell = GridPos::new(libm::round(p.x / 2.0) as usize, libm::round(p.y / 2.0) as usize);
            let hit = pts.positives.iter().find(|s| s.pos == cell).unwrap();
            assert_eq!(hit.label, k + 1);
        }
    }

    #[test]
    fn corner_keypoint_gets_four_cells() {
        let mut face = face_at(Point2::new(32.0, 30.0));
        face.visible = [false; NUM_KEYPOINTS];
        face.visible[0] = true;
        face.keypoints.points[0] = Point2::new(0.0, 0.0);
        let sample = AnnotatedImage { image: FeatureMap::zeros(3, 64, 64), faces: vec![face] };
        let pts = sample_points(&sample, 32, 32, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(pts.m(), 4);
    }

    #[test]
    fn fully_covered_canvas_has_no_background() {
        let mut face = face_at(Point2::new(8.0, 8.0));
        face.bbox = BoundingBox::new(-1.0, -1.0, 40.0, 40.0).unwrap();
        let sample = AnnotatedImage { image: FeatureMap::zeros(3, 16, 16), faces: vec![face] };
        let r = sample_points(&sample, 8, 8, 3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(r, Err(Error::InsufficientBackground));
    }

    #[test]
    fn learning_rate_schedule_hits_endpoints() {
        let c = TrainConfig { epochs: 5, ..TrainConfig::default() };
        assert_eq!(c.learning_rate(0), 0.01);
        assert_eq!(c.learning_rate(4), 0.0001);
        assert!((c.learning_rate(2) - 0.001).abs() < 1e-15);
        for e in 0..4 {
            assert!(c.learning_rate(e + 1) <= c.learning_rate(e));
        }
        let bad = TrainConfig { lr_start: 0.001, lr_end: 0.01, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = FeatureMap::new(3, 8, 8, vec![0.25; 192]).unwrap();
        let b = gaussian_blur(&img, 1.0);
        assert!(b.values.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn resize_scales_annotations() {
        let s = synth_scene(5, 64, 1).unwrap().to_annotated().unwrap();
        let r = prepare_sample(&s, 32, 8).unwrap();
        assert_eq!((r.image.width, r.image.height), (32, 32));
        let (a, b) = (s.faces[0].keypoints.points[0], r.faces[0].keypoints.points[0]);
        assert!((a.x / 2.0 - b.x).abs() < 1e-12 && (a.y / 2.0 - b.y).abs() < 1e-12);
        let padded = pad_to_stride(&FeatureMap::zeros(3, 20, 27), 8);
        assert_eq!((padded.height, padded.width), (24, 32));
    }
}
