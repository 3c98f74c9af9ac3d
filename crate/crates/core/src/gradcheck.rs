//! Central finite-difference checks of every analytic gradient: each layer
//! type, each loss, the projection and the whole model on a small image.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{project, project_backward, Keypoints2D, MeanFace3D, Point2, TransformParams};
use crate::losses::{bbox_loss, cls_loss, keypoint_loc_loss, smooth_l1, smooth_l1_grad, BoxDelta, LabeledPoint, SamplePoint, TrainingPoints};
use crate::network::layers;
use crate::network::{configuration_pooling, configuration_pooling_backward, deconv_geometry, softmax, FeatureMap, Model, ModelConfig, ModelParams};
use crate::proposals::{DenseOutputs, GridPos};
use crate::training::{sample_points, step_loss, synth_scene, BoxTarget, StepPlan};
use crate::{Result, NUM_CLASSES, NUM_KEYPOINTS};

/// Central-difference step.
pub const STEP: f64 = 1e-3;
/// Tolerance for single layers and losses.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Smallest step tried when differences keep crossing kinks.
const MIN_STEP: f64 = 1e-7;
/// Denominator floor of [`relative_error`].
const REL_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Scalar derivatives compared.
    pub entries: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Entries whose difference at [`STEP`] crossed a kink and were
    /// re-evaluated with a smaller step.
    pub reduced_steps: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.entries > 0
    }
}

struct Tally {
    entries: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self { entries: 0, worst: 0.0 }
    }

    /// Compares `analytic` with central differences of `f` around `x`.
    fn compare(&mut self, x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) {
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(x);
            x[i] = orig - STEP;
            let down = f(x);
            x[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            self.worst = self.worst.max(relative_error(analytic[i], numeric));
            self.entries += 1;
        }
    }

    fn report(self, name: &str, instances: usize, tolerance: f64) -> CheckReport {
        CheckReport { name: name.into(), instances, entries: self.entries, max_rel_err: self.worst, tolerance, reduced_steps: 0 }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(gap..1.0);
            if rng.gen() { v } else { -v }
        })
        .collect()
}

/// A smooth-L1 argument at least `gap` away from its kinks at +-1.
fn away_from_kink(rng: &mut ChaCha8Rng, gap: f64) -> f64 {
    loop {
        let a = rng.gen_range(-3.0..3.0);
        if (libm::fabs(a) - 1.0).abs() > gap {
            return a;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_conv(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let mut x = uniform(rng, ci * h * w, 1.0);
        let mut wt = uniform(rng, co * ci * k * k, 1.0);
        let mut b = uniform(rng, co, 1.0);
        let r = uniform(rng, co * h * w, 1.0);
        let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; co]);
        let dx = layers::conv_backward(&x, ci, h, w, &wt, co, k, &r, &mut dw, &mut db);
        let (wc, bc) = (wt.clone(), b.clone());
        t.compare(&mut x, &dx, |x| dot(&layers::conv_forward(x, ci, h, w, &wc, &bc, co, k), &r));
        let xc = x.clone();
        t.compare(&mut wt, &dw, |wt| dot(&layers::conv_forward(&xc, ci, h, w, wt, &bc, co, k), &r));
        t.compare(&mut b, &db, |b| dot(&layers::conv_forward(&xc, ci, h, w, &wc, b, co, k), &r));
    }
    t.report("conv", instances, LAYER_TOLERANCE)
}

pub fn check_relu(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let n = rng.gen_range(1..=25);
        let mut x = away_from_zero(rng, n, 10.0 * STEP);
        let r = uniform(rng, n, 1.0);
        let mut y = x.clone();
        layers::relu_inplace(&mut y);
        let mut g = r.clone();
        layers::relu_backward_inplace(&y, &mut g);
        t.compare(&mut x, &g, |x| {
            let mut y = x.to_vec();
            layers::relu_inplace(&mut y);
            dot(&y, &r)
        });
    }
    t.report("relu", instances, LAYER_TOLERANCE)
}

pub fn check_maxpool(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let ch = rng.gen_range(1..=3);
        let (h, w) = (2 * rng.gen_range(1..=2), 2 * rng.gen_range(1..=2));
        let n = ch * h * w;
        // distinct values spaced well beyond the step so no maximum flips
        let mut x: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            x.swap(i, rng.gen_range(0..=i));
        }
        let r = uniform(rng, ch * (h / 2) * (w / 2), 1.0);
        let (_, arg) = layers::maxpool_forward(&x, ch, h, w);
        let g = layers::maxpool_backward(&arg, &r, n);
        t.compare(&mut x, &g, |x| dot(&layers::maxpool_forward(x, ch, h, w).0, &r));
    }
    t.report("maxpool", instances, LAYER_TOLERANCE)
}

pub fn check_deconv(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let f = rng.gen_range(1..=4);
        let (k, p) = deconv_geometry(f);
        let mut x = uniform(rng, ci * h * w, 1.0);
        let mut wt = uniform(rng, ci * co * k * k, 1.0);
        let mut b = uniform(rng, co, 1.0);
        let (_, oh, ow) = layers::deconv_forward(&x, ci, h, w, &wt, &b, co, k, f, p);
        let r = uniform(rng, co * oh * ow, 1.0);
        let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; co]);
        let dx = layers::deconv_backward(&x, ci, h, w, &wt, co, k, f, p, &r, &mut dw, &mut db);
        let (wc, bc) = (wt.clone(), b.clone());
        let fwd = |x: &[f64], wt: &[f64], b: &[f64]| dot(&layers::deconv_forward(x, ci, h, w, wt, b, co, k, f, p).0, &r);
        t.compare(&mut x, &dx, |x| fwd(x, &wc, &bc));
        let xc = x.clone();
        t.compare(&mut wt, &dw, |wt| fwd(&xc, wt, &bc));
        t.compare(&mut b, &db, |b| fwd(&xc, &wc, b));
    }
    t.report("deconv", instances, LAYER_TOLERANCE)
}

pub fn check_linear(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let (ni, no) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let mut x = uniform(rng, ni, 1.0);
        let mut wt = uniform(rng, ni * no, 1.0);
        let mut b = uniform(rng, no, 1.0);
        let r = uniform(rng, no, 1.0);
        let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; no]);
        let dx = layers::linear_backward(&x, &wt, &r, &mut dw, &mut db);
        let (wc, bc) = (wt.clone(), b.clone());
        t.compare(&mut x, &dx, |x| dot(&layers::linear_forward(x, &wc, &bc), &r));
        let xc = x.clone();
        t.compare(&mut wt, &dw, |wt| dot(&layers::linear_forward(&xc, wt, &bc), &r));
        t.compare(&mut b, &db, |b| dot(&layers::linear_forward(&xc, &wc, b), &r));
    }
    t.report("linear", instances, LAYER_TOLERANCE)
}

pub fn check_pooling(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let mut values = uniform(rng, c * h * w, 1.0);
        let kp = Keypoints2D::new(core::array::from_fn(|_| Point2::new(rng.gen_range(-1.0..w as f64), rng.gen_range(-1.0..h as f64))));
        let r = uniform(rng, NUM_KEYPOINTS * c, 1.0);
        let fmap = FeatureMap::new(c, h, w, values.clone()).expect("consistent shape");
        let mut g = vec![0.0; values.len()];
        configuration_pooling_backward(&fmap, &kp, &r, &mut g);
        t.compare(&mut values, &g, |v| {
            let m = FeatureMap { channels: c, height: h, width: w, values: v.to_vec() };
            dot(&configuration_pooling(&m, &kp), &r)
        });
    }
    t.report("configuration pooling", instances, LAYER_TOLERANCE)
}

/// Softmax followed by the classification loss, differentiated in the scores.
pub fn check_classification(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let (w, h) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let cells = w * h;
        let mut scores = uniform(rng, cells * NUM_CLASSES, 2.0);
        let n = rng.gen_range(1..=6);
        let mut pts = TrainingPoints::default();
        for _ in 0..n {
            let pos = GridPos::new(rng.gen_range(0..w), rng.gen_range(0..h));
            let label = rng.gen_range(0..NUM_CLASSES);
            let p = SamplePoint { pos, label, face: (label > 0).then_some(0) };
            if label > 0 { pts.positives.push(p) } else { pts.negatives.push(p) }
        }
        let loss = |s: &[f64]| -> (f64, Vec<[f64; NUM_CLASSES]>) {
            let probs = (0..cells)
                .map(|i| {
                    let mut p = [0.0; NUM_CLASSES];
                    softmax(&s[i * NUM_CLASSES..(i + 1) * NUM_CLASSES], &mut p);
                    p
                })
                .collect();
            let d = DenseOutputs::new(w, h, probs, vec![TransformParams::IDENTITY; cells]).expect("consistent shape");
            cls_loss(&d, &pts).expect("non-empty sample")
        };
        let g: Vec<f64> = loss(&scores).1.into_iter().flatten().collect();
        t.compare(&mut scores, &g, |s| loss(s).0);
    }
    t.report("classification loss", instances, LAYER_TOLERANCE)
}

pub fn check_smooth_l1(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let mut a = [away_from_kink(rng, 10.0 * STEP)];
        let g = [smooth_l1_grad(a[0])];
        t.compare(&mut a, &g, |a| smooth_l1(a[0]));
    }
    t.report("smooth l1", instances, LAYER_TOLERANCE)
}

pub fn check_keypoint_loss(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    let mut done = 0;
    while done < instances {
        let m = rng.gen_range(1..=4);
        let gt: Vec<LabeledPoint> = (0..m)
            .map(|_| LabeledPoint { label: rng.gen_range(1..=NUM_KEYPOINTS), point: Point2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)) })
            .collect();
        // predictions placed so every residual avoids the smooth-L1 kinks
        let mut flat = Vec::with_capacity(m * NUM_KEYPOINTS * 2);
        for _ in 0..m {
            for k in 0..NUM_KEYPOINTS {
                for axis in 0..2 {
                    let base = gt.iter().find(|g| g.label == k + 1).map(|g| if axis == 0 { g.point.x } else { g.point.y });
                    flat.push(base.unwrap_or(0.0) - away_from_kink(rng, 10.0 * STEP));
                }
            }
        }
        let unpack = |v: &[f64]| -> Vec<Keypoints2D> {
            v.chunks(2 * NUM_KEYPOINTS)
                .map(|c| Keypoints2D::new(core::array::from_fn(|k| Point2::new(c[2 * k], c[2 * k + 1]))))
                .collect()
        };
        let loss = |v: &[f64]| keypoint_loc_loss(&gt, &unpack(v)).expect("valid instance");
        // a label repeated among the ground truths makes some residuals
        // unconstrained; skip instances where any residual sits near a kink
        let near_kink = |v: &[f64]| {
            unpack(v).iter().any(|p| {
                gt.iter().any(|g| {
                    let q = p.points[g.label - 1];
                    [g.point.x - q.x, g.point.y - q.y].iter().any(|a| (libm::fabs(*a) - 1.0).abs() < 10.0 * STEP)
                })
            })
        };
        if near_kink(&flat) {
            continue;
        }
        let g: Vec<f64> = loss(&flat).1.iter().flat_map(|k| k.points.iter().flat_map(|p| [p.x, p.y])).collect();
        t.compare(&mut flat, &g, |v| loss(v).0);
        done += 1;
    }
    t.report("keypoint location loss", instances, LAYER_TOLERANCE)
}

pub fn check_bbox_loss(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    for _ in 0..instances {
        let k = rng.gen_range(1..=4);
        let target: Vec<BoxDelta> = (0..k).map(|_| BoxDelta::from_array(core::array::from_fn(|_| rng.gen_range(-2.0..2.0)))).collect();
        let mut flat: Vec<f64> = target.iter().flat_map(|d| d.to_array().map(|v| v - away_from_kink(rng, 10.0 * STEP))).collect();
        let unpack = |v: &[f64]| -> Vec<BoxDelta> { v.chunks(4).map(|c| BoxDelta::from_array([c[0], c[1], c[2], c[3]])).collect() };
        let g: Vec<f64> = bbox_loss(&unpack(&flat), &target).expect("aligned").1.iter().flat_map(|d| d.to_array()).collect();
        t.compare(&mut flat, &g, |v| bbox_loss(&unpack(v), &target).expect("aligned").0);
    }
    t.report("box regression loss", instances, LAYER_TOLERANCE)
}

pub fn check_projection(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    let face = MeanFace3D::default();
    for _ in 0..instances {
        let mut params = uniform(rng, 8, 2.0);
        let r: Vec<f64> = uniform(rng, 2 * NUM_KEYPOINTS, 1.0);
        let upstream = Keypoints2D::new(core::array::from_fn(|k| Point2::new(r[2 * k], r[2 * k + 1])));
        let g = project_backward(&face, &upstream).to_array();
        t.compare(&mut params, &g, |p| {
            let k = project(&face, &TransformParams::from_array(core::array::from_fn(|i| p[i])));
            k.points.iter().zip(upstream.points.iter()).map(|(a, b)| a.dot(*b)).sum()
        });
    }
    t.report("projection", instances, LAYER_TOLERANCE)
}

/// The two fully connected layers of the box head, in their parameters and
/// the pooled input.
pub fn check_bbox_head(rng: &mut ChaCha8Rng, instances: usize) -> CheckReport {
    let mut t = Tally::new();
    let mut done = 0;
    while done < instances {
        let config = ModelConfig {
            conv_groups: vec![(1, 2)],
            upsample_factor: 1,
            pooled_feature_dim: rng.gen_range(1..=3),
            fc_hidden_dim: rng.gen_range(1..=5),
            kernel_size: 3,
        };
        let mut model = Model::new(config, rng.gen()).expect("valid config");
        let mut pooled = uniform(rng, model.config().pooled_len(), 1.0);
        let r = BoxDelta::from_array(core::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let eval = |m: &Model, x: &[f64]| dot(&m.bbox_head(x).expect("matching length").0.to_array(), &r.to_array());
        let (_, cache) = model.bbox_head(&pooled).expect("matching length");
        let mut grads = ModelParams::zeros(model.config());
        let d_pooled = model.bbox_head_backward(&cache, &r, &mut grads).expect("fresh cache");
        // keep hidden units away from the ReLU kink
        let hidden = crate::network::layers::linear_forward(&pooled, &model.params().bbox_fc1.weight.data, &model.params().bbox_fc1.bias.data);
        if hidden.iter().any(|h| h.abs() < 0.05) {
            continue;
        }
        t.compare(&mut pooled, &d_pooled, |x| eval(&model, x));
        for name in ["bbox_fc1.weight", "bbox_fc1.bias", "bbox_fc2.weight", "bbox_fc2.bias"] {
            let analytic = grads.get(name).expect("named tensor").data.clone();
            let mut values = model.params().get(name).expect("named tensor").data.clone();
            t.compare(&mut values, &analytic, |v| {
                model.params_mut().get_mut(name).expect("named tensor").data.copy_from_slice(v);
                eval(&model, &pooled)
            });
            model.params_mut().get_mut(name).expect("named tensor").data.copy_from_slice(&values);
        }
        done += 1;
    }
    t.report("box head", instances, LAYER_TOLERANCE)
}

/// A compact configuration on which every parameter can be checked quickly.
pub fn small_config() -> ModelConfig {
    ModelConfig { conv_groups: vec![(1, 4), (1, 6)], upsample_factor: 2, pooled_feature_dim: 5, fc_hidden_dim: 6, kernel_size: 3 }
}

/// Total loss of the whole model on a synthetic 32x32 scene with a fixed
/// step plan. `max_entries` caps the parameters checked (spread evenly over
/// every tensor); `None` checks all of them.
pub fn check_model(config: &ModelConfig, seed: u64, max_entries: Option<usize>) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 32;
    let scene = synth_scene(seed, size, 1)?.to_annotated()?;
    let mut model = Model::new(config.clone(), seed)?;
    let fwd = model.forward(&scene.image)?;
    let points = sample_points(&scene, fwd.dense.width, fwd.dense.height, 3, &mut rng)?;
    // two pooling sites near the face, regressed to fixed targets
    let gt = scene.faces[0].keypoints.map(|p| p * 0.5);
    let boxes = (0..2)
        .map(|_| {
            let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            BoxTarget {
                keypoints: gt.map(|p| Point2::new(p.x + dx, p.y + dy)),
                target: BoxDelta::from_array(core::array::from_fn(|_| rng.gen_range(-0.5..0.5))),
            }
        })
        .collect();
    let plan = StepPlan { points, boxes };

    let mut grads = ModelParams::zeros(model.config());
    step_loss(&model, &fwd, &scene, &plan, Some(&mut grads))?;
    let eval = |m: &Model| -> (f64, Pieces) {
        let f = m.forward(&scene.image).expect("fixed input shape");
        let loss = step_loss(m, &f, &scene, &plan, None).expect("fixed plan").total();
        (loss, smooth_piece(m, &f, &scene, &plan))
    };

    let names: Vec<String> = model.params().tensors().into_iter().map(|(n, _)| n).collect();
    let total = model.params().num_params();
    let stride = max_entries.map_or(1, |n| total.div_ceil(n.max(1)));
    let (mut entries, mut worst, mut reduced) = (0, 0.0f64, 0);
    let mut offset = 0;
    for name in names {
        let analytic = grads.get(&name).expect("named tensor").data.clone();
        let len = analytic.len();
        let first = (stride - offset % stride) % stride;
        for i in (first..len).step_by(stride) {
            let orig = model.params().get(&name).expect("named tensor").data[i];
            let set = |m: &mut Model, v: f64| m.params_mut().get_mut(&name).expect("named tensor").data[i] = v;
            let (centre, base) = eval(&model);
            let mut step = STEP;
            let numeric = loop {
                set(&mut model, orig + step);
                let (up, p_up) = eval(&model);
                set(&mut model, orig - step);
                let (down, p_down) = eval(&model);
                set(&mut model, orig);
                // a difference across a kink is not a derivative; shrink the
                // step, and at the floor fall back to the side that stays on
                // the current smooth piece
                let (ok_up, ok_down) = (p_up == base, p_down == base);
                if ok_up && ok_down {
                    break (up - down) / (2.0 * step);
                }
                if step <= MIN_STEP * 1.5 {
                    break match (ok_up, ok_down) {
                        (true, _) => (up - centre) / step,
                        (_, true) => (centre - down) / step,
                        _ => (up - down) / (2.0 * step),
                    };
                }
                step *= 0.1;
            };
            if step < STEP {
                reduced += 1;
            }
            worst = worst.max(relative_error(analytic[i], numeric));
            entries += 1;
        }
        offset += len;
    }
    Ok(CheckReport { name: "full model".into(), instances: 1, entries, max_rel_err: worst, tolerance: MODEL_TOLERANCE, reduced_steps: reduced })
}

type Pieces = ((Vec<bool>, Vec<usize>), Vec<bool>);

/// Identifies the smooth piece of the loss the model sits on: network
/// activation pattern, box-head ReLUs and the branch of every smooth-L1 term.
fn smooth_piece(model: &Model, fwd: &crate::network::Forward, scene: &crate::training::AnnotatedImage, plan: &StepPlan) -> Pieces {
    let face = MeanFace3D::default();
    let mut branches = Vec::new();
    for p in &plan.points.positives {
        let Some(f) = p.face else { continue };
        let gt = scene.faces[f].keypoints.points[p.label - 1] * 0.5;
        for q in plan.points.positives.iter().filter(|q| q.face == Some(f)) {
            let k = crate::proposals::anchored_keypoints(&face, q.pos, &fwd.dense.transform[fwd.dense.index(q.pos)]);
            let d = gt - k.points[p.label - 1];
            branches.extend([d.x.abs() < 1.0, d.y.abs() < 1.0]);
        }
    }
    for b in &plan.boxes {
        let pooled = configuration_pooling(&fwd.features, &b.keypoints);
        let (delta, cache) = model.bbox_head(&pooled).expect("matching length");
        branches.extend(cache.hidden_active());
        branches.extend(delta.to_array().iter().zip(b.target.to_array()).map(|(a, t)| (a - t).abs() < 1.0));
    }
    (fwd.activation_pattern(), branches)
}

/// Every layer and loss suite with `instances` random cases each.
pub fn layer_suites(seed: u64, instances: usize) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites: [fn(&mut ChaCha8Rng, usize) -> CheckReport; 13] = [
        check_conv,
        check_relu,
        check_maxpool,
        check_deconv,
        check_linear,
        check_pooling,
        check_classification,
        check_smooth_l1,
        check_keypoint_loss,
        check_bbox_loss,
        check_projection,
        check_bbox_head,
        |rng, n| {
            // gradients of the unweighted total are the sum of gradients
            let mut t = Tally::new();
            for _ in 0..n {
                let mut x = uniform(rng, 3, 2.0);
                t.compare(&mut x, &[1.0, 1.0, 1.0], |x| crate::losses::total_loss(x[0], x[1], x[2]));
            }
            t.report("total loss", n, LAYER_TOLERANCE)
        },
    ];
    suites.iter().map(|s| s(&mut rng, instances)).collect()
}
