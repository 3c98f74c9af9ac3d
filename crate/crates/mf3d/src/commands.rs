//! The five commands as library functions. Each returns a summary; the
//! binary prints it and maps errors to exit codes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mf3d_core::detector::{detect, DetectConfig};
use mf3d_core::evaluation::{match_detections, recall_at, roc_points, MatchMode, RocPoint, ScoredRegion, TruthRegion};
use mf3d_core::gradcheck::{check_model, layer_suites, CheckReport};
use mf3d_core::training::{synth_dataset, train_with, LossRecord, TrainConfig};
use mf3d_core::{MeanFace3D, Model, ModelConfig};

use crate::checkpoint::Checkpoint;
use crate::dataset::{read_manifest, read_ppm, read_text, write_manifest, write_ppm, write_text, Dataset, ManifestEntry, ANNOTATIONS, MANIFEST};
use crate::error::{CliError, Result};
use crate::records::{parse_annotations, parse_detections, write_annotations, write_detections, AnnotationRecord, DetectionEntry, DetectionRecord, FaceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub canvas: usize,
    pub faces: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub images: usize,
    pub faces: usize,
}

/// Writes `count` scenes as `scene_NNNN.ppm` plus the annotation file and
/// manifest.
pub fn synth(opts: &SynthOptions) -> Result<SynthSummary> {
    let scenes = synth_dataset(opts.seed, opts.count, opts.canvas, opts.faces)?;
    std::fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    let (mut manifest, mut annotations) = (Vec::new(), Vec::new());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.ppm");
        write_ppm(&opts.out.join(&name), &scene.image)?;
        let (w, h) = (scene.image.width, scene.image.height);
        let faces = scene.to_annotated()?.faces.iter().map(|f| FaceRecord::from_truth(f, h)).collect();
        annotations.push(AnnotationRecord { image: name.clone(), faces });
        manifest.push(ManifestEntry { image: name, width: w, height: h });
    }
    write_text(&opts.out.join(ANNOTATIONS), &write_annotations(&annotations))?;
    write_text(&opts.out.join(MANIFEST), &write_manifest(&manifest))?;
    Ok(SynthSummary { images: scenes.len(), faces: scenes.iter().map(|s| s.faces.len()).sum() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds parameter initialisation; sampling uses `train.seed`.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub images: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,cls,loc_pt,loc_box,total";

pub fn loss_log(records: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for r in records {
        let t = &r.terms;
        let _ = writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, t.cls, t.loc_pt, t.loc_box, t.total());
    }
    out
}

/// Trains from scratch and writes the checkpoint. The loss log is written
/// even when training diverges, up to the last finite step.
pub fn train(opts: &TrainOptions) -> Result<TrainSummary> {
    let data = Dataset::open(&opts.dataset)?.load_images()?;
    let mut model = Model::new(opts.model.clone(), opts.init_seed)?;
    let mut records = Vec::new();
    let outcome = train_with(&data, &mut model, &opts.train, |r| records.push(*r));
    if let Some(log) = &opts.log {
        write_text(log, &loss_log(&records))?;
    }
    outcome?;
    Checkpoint::from_model(&model).save(&opts.checkpoint)?;
    let loss = |r: Option<&LossRecord>| r.map_or(f64::NAN, |r| r.terms.total());
    Ok(TrainSummary { images: data.len(), steps: records.len(), first_loss: loss(records.first()), last_loss: loss(records.last()) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub checkpoint: PathBuf,
    /// Image paths as they should appear in the output.
    pub images: Vec<String>,
    /// Directory the image paths are relative to.
    pub root: PathBuf,
    pub out: PathBuf,
    pub config: DetectConfig,
}

pub fn detect_images(opts: &DetectOptions) -> Result<Vec<DetectionRecord>> {
    let model = Checkpoint::load(&opts.checkpoint)?.to_model()?;
    let face = MeanFace3D::default();
    opts.images
        .iter()
        .map(|name| {
            let image = read_ppm(&opts.root.join(name))?;
            let found = detect(&model, &face, &image, &opts.config)?;
            let detections = found.iter().map(|d| DetectionEntry::from_detection(d, image.height)).collect();
            Ok(DetectionRecord { image: name.clone(), detections })
        })
        .collect()
}

/// Runs detection and writes the detection file; returns the records.
pub fn detect_command(opts: &DetectOptions) -> Result<Vec<DetectionRecord>> {
    let records = detect_images(opts)?;
    write_text(&opts.out, &write_detections(&records))?;
    Ok(records)
}

/// Image names listed in a dataset manifest.
pub fn manifest_images(dataset: &Path) -> Result<Vec<String>> {
    Ok(read_manifest(&dataset.join(MANIFEST))?.into_iter().map(|e| e.image).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub detections: PathBuf,
    pub annotations: PathBuf,
    pub manifest: PathBuf,
    pub mode: MatchMode,
    pub iou: f64,
    pub roc: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub images: usize,
    pub truths: usize,
    pub detections: usize,
    pub roc: Vec<RocPoint>,
}

impl EvalSummary {
    pub fn recall_at(&self, max_false_positives: usize) -> f64 {
        recall_at(&self.roc, max_false_positives)
    }
}

pub const ROC_HEADER: &str = "fp,score_threshold,recall";

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = format!("{ROC_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.false_positives, p.score_threshold, p.recall);
    }
    out
}

pub fn parse_mode(s: &str) -> Result<MatchMode> {
    match s {
        "discrete" => Ok(MatchMode::Discrete),
        "continuous" => Ok(MatchMode::Continuous),
        other => Err(CliError::Invalid(format!("unknown mode {other:?} (expected discrete or continuous)"))),
    }
}

/// Scores a detection file against annotations. Images without a detection
/// block count as having no detections; detections for unannotated images
/// are an error.
pub fn eval(opts: &EvalOptions) -> Result<EvalSummary> {
    if !(opts.iou > 0.0 && opts.iou <= 1.0) {
        return Err(CliError::Invalid(format!("iou threshold {} outside (0, 1]", opts.iou)));
    }
    let annotations = parse_annotations(&opts.annotations, &read_text(&opts.annotations)?)?;
    let detections = parse_detections(&opts.detections, &read_text(&opts.detections)?)?;
    let heights: HashMap<String, usize> = read_manifest(&opts.manifest)?.into_iter().map(|e| (e.image, e.height)).collect();
    let height = |image: &str| {
        heights.get(image).copied().ok_or_else(|| CliError::Invalid(format!("{image} is missing from the manifest")))
    };

    let mut by_image: HashMap<&str, &DetectionRecord> = HashMap::new();
    for d in &detections {
        if by_image.insert(d.image.as_str(), d).is_some() {
            return Err(CliError::Invalid(format!("{} has more than one detection block", d.image)));
        }
    }
    if let Some(d) = detections.iter().find(|d| !annotations.iter().any(|a| a.image == d.image)) {
        return Err(CliError::Invalid(format!("detections for unannotated image {}", d.image)));
    }

    let mut images = Vec::with_capacity(annotations.len());
    for a in &annotations {
        let h = height(&a.image)?;
        let truths = a.faces.iter().map(|f| f.to_region(h)).collect::<Result<Vec<TruthRegion>>>()?;
        let found = match by_image.get(a.image.as_str()) {
            Some(d) => d.detections.iter().map(|e| e.to_region(h)).collect::<Result<Vec<ScoredRegion>>>()?,
            None => Vec::new(),
        };
        images.push((found, truths));
    }
    let result = match_detections(&images, opts.mode, opts.iou)?;
    let roc = roc_points(&result);
    if let Some(path) = &opts.roc {
        write_text(path, &roc_csv(&roc))?;
    }
    Ok(EvalSummary { images: annotations.len(), truths: result.total_truths, detections: result.matches.len(), roc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub seed: u64,
    /// Random cases per layer and loss suite.
    pub instances: usize,
    /// Parameters compared in the full-model check; `None` checks all.
    pub model_entries: Option<usize>,
}

/// Every layer and loss suite followed by the full-model check.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    opts.model.validate()?;
    let mut reports = layer_suites(opts.seed, opts.instances);
    reports.push(check_model(&opts.model, opts.seed, opts.model_entries)?);
    Ok(reports)
}

pub fn format_report(r: &CheckReport) -> String {
    format!(
        "{} {:<22} cases {:>4}  entries {:>6}  max rel err {:.2e} (tol {:.0e}){}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.instances,
        r.entries,
        r.max_rel_err,
        r.tolerance,
        if r.reduced_steps > 0 { format!("  reduced steps {}", r.reduced_steps) } else { String::new() }
    )
}
