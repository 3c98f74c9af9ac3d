//! Line-oriented annotation and detection files.
//!
//! Both formats follow the FDDB layout: an image path, the number of entries,
//! then one entry per line. Coordinates are raster coordinates (origin at the
//! top-left pixel centre, y down). Annotation entries read
//!
//! ```text
//! x y w h kp <label x y visible>... [ellipse ra rb theta cx cy]
//! ```
//!
//! and detection entries
//!
//! ```text
//! x y w h score [ellipse ra rb theta cx cy] [kp x1 y1 ... x10 y10]
//! ```
//!
//! `(x, y)` is the top-left corner of the box and `theta`, in `[0, pi)`, is
//! measured clockwise on screen. [`FaceRecord::to_truth`] and friends
//! convert to the library's bottom-left convention given the image height.

use std::fmt::Write as _;
use std::path::Path;

use mf3d_core::detector::Detection;
use mf3d_core::evaluation::{ScoredRegion, TruthRegion};
use mf3d_core::geometry::normalize_angle;
use mf3d_core::training::GroundTruthFace;
use mf3d_core::{BoundingBox, Ellipse, Keypoints2D, Point2, NUM_KEYPOINTS};

use crate::error::{CliError, Result};

/// An ellipse as `(ra, rb, theta, cx, cy)`.
pub type EllipseRecord = [f64; 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRecord {
    /// 1-based keypoint label.
    pub label: usize,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub bbox: [f64; 4],
    pub keypoints: Vec<KeypointRecord>,
    pub ellipse: Option<EllipseRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image: String,
    pub faces: Vec<FaceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEntry {
    pub bbox: [f64; 4],
    pub score: f64,
    pub ellipse: Option<EllipseRecord>,
    pub keypoints: Option<[(f64, f64); NUM_KEYPOINTS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image: String,
    pub detections: Vec<DetectionEntry>,
}

// Raster <-> library coordinates. Pixel centres are integers in both, so the
// flip is a reflection about the middle row.

fn flip_y(y: f64, height: usize) -> f64 {
    (height as f64 - 1.0) - y
}

fn box_to_raster(b: &BoundingBox, height: usize) -> [f64; 4] {
    [b.x, flip_y(b.y + b.h, height), b.w, b.h]
}

fn box_from_raster(b: &[f64; 4], height: usize) -> Result<BoundingBox> {
    Ok(BoundingBox::new(b[0], flip_y(b[1] + b[3], height), b[2], b[3])?)
}

fn ellipse_to_raster(e: &Ellipse, height: usize) -> EllipseRecord {
    [e.ra, e.rb, normalize_angle(-e.theta), e.cx, flip_y(e.cy, height)]
}

fn ellipse_from_raster(e: &EllipseRecord, height: usize) -> Result<Ellipse> {
    Ok(Ellipse::new(e[3], flip_y(e[4], height), e[0], e[1], -e[2])?)
}

impl FaceRecord {
    pub fn from_truth(face: &GroundTruthFace, height: usize) -> Self {
        let keypoints = face
            .keypoints
            .points
            .iter()
            .zip(face.visible)
            .enumerate()
            .map(|(i, (p, visible))| KeypointRecord { label: i + 1, x: p.x, y: flip_y(p.y, height), visible })
            .collect();
        Self {
            bbox: box_to_raster(&face.bbox, height),
            keypoints,
            ellipse: face.ellipse.map(|e| ellipse_to_raster(&e, height)),
        }
    }

    /// Converts to library coordinates. Every one of the ten labels must be
    /// present exactly once and lie inside the `width x height` image.
    pub fn to_truth(&self, width: usize, height: usize) -> Result<GroundTruthFace> {
        let mut points = [None; NUM_KEYPOINTS];
        let mut visible = [false; NUM_KEYPOINTS];
        for k in &self.keypoints {
            if !(1..=NUM_KEYPOINTS).contains(&k.label) {
                return Err(CliError::Invalid(format!("keypoint label {} outside 1..={NUM_KEYPOINTS}", k.label)));
            }
            let inside = |v: f64, n: usize| (-0.5..=n as f64 - 0.5).contains(&v);
            if !inside(k.x, width) || !inside(k.y, height) {
                return Err(CliError::Invalid(format!("keypoint {} at ({}, {}) lies outside the image", k.label, k.x, k.y)));
            }
            if points[k.label - 1].replace(Point2::new(k.x, flip_y(k.y, height))).is_some() {
                return Err(CliError::Invalid(format!("keypoint label {} repeated", k.label)));
            }
            visible[k.label - 1] = k.visible;
        }
        let Some(points) = points.iter().copied().collect::<Option<Vec<_>>>() else {
            return Err(CliError::Invalid(format!("a face needs all {NUM_KEYPOINTS} keypoints")));
        };
        Ok(GroundTruthFace {
            keypoints: Keypoints2D::new(points.try_into().expect("ten points")),
            visible,
            bbox: box_from_raster(&self.bbox, height)?,
            ellipse: self.ellipse.map(|e| ellipse_from_raster(&e, height)).transpose()?,
        })
    }

    pub fn to_region(&self, height: usize) -> Result<TruthRegion> {
        Ok(TruthRegion {
            bbox: box_from_raster(&self.bbox, height)?,
            ellipse: self.ellipse.map(|e| ellipse_from_raster(&e, height)).transpose()?,
        })
    }
}

impl DetectionEntry {
    pub fn from_detection(d: &Detection, height: usize) -> Self {
        Self {
            bbox: box_to_raster(&d.bbox, height),
            score: d.score,
            ellipse: d.ellipse.map(|e| ellipse_to_raster(&e, height)),
            keypoints: Some(d.keypoints.points.map(|p| (p.x, flip_y(p.y, height)))),
        }
    }

    pub fn to_region(&self, height: usize) -> Result<ScoredRegion> {
        Ok(ScoredRegion {
            bbox: box_from_raster(&self.bbox, height)?,
            ellipse: self.ellipse.map(|e| ellipse_from_raster(&e, height)).transpose()?,
            score: self.score,
        })
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\n{}", r.image, r.faces.len());
        for f in &r.faces {
            out.push_str(&join(&f.bbox));
            out.push_str(" kp");
            for k in &f.keypoints {
                let _ = write!(out, " {} {} {} {}", k.label, k.x, k.y, u8::from(k.visible));
            }
            if let Some(e) = &f.ellipse {
                let _ = write!(out, " ellipse {}", join(e));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_detections(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\n{}", r.image, r.detections.len());
        for d in &r.detections {
            let _ = write!(out, "{} {}", join(&d.bbox), d.score);
            if let Some(e) = &d.ellipse {
                let _ = write!(out, " ellipse {}", join(e));
            }
            if let Some(k) = &d.keypoints {
                let flat: Vec<f64> = k.iter().flat_map(|&(x, y)| [x, y]).collect();
                let _ = write!(out, " kp {}", join(&flat));
            }
            out.push('\n');
        }
    }
    out
}

/// Walks non-blank lines, remembering line numbers for error messages.
struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self { path, inner: text.lines().enumerate().peekable(), line: 0 }
    }

    fn error(&self, message: impl Into<String>) -> CliError {
        CliError::Format { path: self.path.to_path_buf(), line: self.line, message: message.into() }
    }

    fn next(&mut self) -> Option<&'a str> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                self.line = i + 1;
                return Some(l.trim());
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<&'a str> {
        self.next().ok_or_else(|| {
            self.line += 1;
            self.error(format!("unexpected end of file, expected {what}"))
        })
    }

    /// Image path and entry count of the next block.
    fn header(&mut self) -> Result<Option<(String, usize)>> {
        let Some(image) = self.next() else { return Ok(None) };
        let count = self.expect("an entry count")?;
        let count = count.parse().map_err(|_| self.error(format!("bad entry count {count:?}")))?;
        Ok(Some((image.to_string(), count)))
    }
}

/// Token cursor over one entry line.
struct Tokens<'a, 'b> {
    lines: &'b Lines<'a>,
    tokens: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
}

impl<'a, 'b> Tokens<'a, 'b> {
    fn new(lines: &'b Lines<'a>, line: &'a str) -> Self {
        Self { lines, tokens: line.split_whitespace().peekable() }
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.tokens.next().ok_or_else(|| self.lines.error("missing number"))?;
        let v: f64 = t.parse().map_err(|_| self.lines.error(format!("bad number {t:?}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.lines.error(format!("non-finite number {t:?}")))
        }
    }

    fn numbers<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.number()?;
        }
        Ok(out)
    }

    fn keyword(&mut self) -> Option<&'a str> {
        self.tokens.next()
    }

    fn at_keyword(&mut self) -> bool {
        self.tokens.peek().is_none_or(|t| t.parse::<f64>().is_err())
    }
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut lines = Lines::new(path, text);
    let mut out = Vec::new();
    while let Some((image, count)) = lines.header()? {
        let mut faces = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.expect("a face line")?;
            faces.push(parse_face(&lines, line)?);
        }
        out.push(AnnotationRecord { image, faces });
    }
    Ok(out)
}

fn parse_face<'a>(lines: &Lines<'a>, line: &'a str) -> Result<FaceRecord> {
    let mut t = Tokens::new(lines, line);
    let bbox = t.numbers::<4>()?;
    let (mut keypoints, mut ellipse) = (Vec::new(), None);
    while let Some(key) = t.keyword() {
        match key {
            "kp" => {
                while !t.at_keyword() {
                    let [label, x, y, v] = t.numbers::<4>()?;
                    if label.fract() != 0.0 || label < 1.0 || (v != 0.0 && v != 1.0) {
                        return Err(lines.error(format!("bad keypoint entry {label} {x} {y} {v}")));
                    }
                    keypoints.push(KeypointRecord { label: label as usize, x, y, visible: v == 1.0 });
                }
            }
            "ellipse" => ellipse = Some(t.numbers::<5>()?),
            other => return Err(lines.error(format!("unexpected token {other:?}"))),
        }
    }
    Ok(FaceRecord { bbox, keypoints, ellipse })
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<DetectionRecord>> {
    let mut lines = Lines::new(path, text);
    let mut out = Vec::new();
    while let Some((image, count)) = lines.header()? {
        let mut detections = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.expect("a detection line")?;
            let mut t = Tokens::new(&lines, line);
            let bbox = t.numbers::<4>()?;
            let score = t.number()?;
            let (mut ellipse, mut keypoints) = (None, None);
            while let Some(key) = t.keyword() {
                match key {
                    "ellipse" => ellipse = Some(t.numbers::<5>()?),
                    "kp" => {
                        let flat = t.numbers::<{ 2 * NUM_KEYPOINTS }>()?;
                        keypoints = Some(core::array::from_fn(|i| (flat[2 * i], flat[2 * i + 1])));
                    }
                    other => return Err(lines.error(format!("unexpected token {other:?}"))),
                }
            }
            detections.push(DetectionEntry { bbox, score, ellipse, keypoints });
        }
        out.push(DetectionRecord { image, detections });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face() -> FaceRecord {
        FaceRecord {
            bbox: [1.5, 2.0, 10.25, 12.0],
            keypoints: (1..=10)
                .map(|l| KeypointRecord { label: l, x: l as f64 + 0.1, y: 0.3 * l as f64, visible: l % 3 != 0 })
                .collect(),
            ellipse: Some([6.0, 4.5, 0.25, 7.0, 8.0]),
        }
    }

    #[test]
    fn annotations_round_trip() {
        let recs = vec![
            AnnotationRecord { image: "a.ppm".into(), faces: vec![face(), FaceRecord { ellipse: None, ..face() }] },
            AnnotationRecord { image: "b.ppm".into(), faces: vec![] },
        ];
        let text = write_annotations(&recs);
        assert_eq!(parse_annotations(Path::new("x"), &text).unwrap(), recs);
    }

    #[test]
    fn detections_round_trip() {
        let d = DetectionEntry {
            bbox: [0.0, 1.0, 2.0, 3.0],
            score: -12.5,
            ellipse: Some([1.0, 2.0, 0.1, 3.0, 4.0]),
            keypoints: Some(core::array::from_fn(|i| (i as f64, 0.5 * i as f64))),
        };
        let recs = vec![DetectionRecord {
            image: "a.ppm".into(),
            detections: vec![d.clone(), DetectionEntry { ellipse: None, keypoints: None, ..d }],
        }];
        let text = write_detections(&recs);
        assert_eq!(parse_detections(Path::new("x"), &text).unwrap(), recs);
    }

    #[test]
    fn plain_fddb_rectangles_parse() {
        let recs = parse_detections(Path::new("x"), "img/1.ppm\n2\n1 2 3 4 0.9\n5 6 7 8 0.1\n").unwrap();
        assert_eq!(recs[0].detections.len(), 2);
        assert_eq!(recs[0].detections[1].score, 0.1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_detections(Path::new("d.txt"), "a.ppm\n2\n1 2 3 4 0.5\n1 2 three 4 0.5\n").unwrap_err();
        assert!(matches!(err, CliError::Format { line: 4, .. }), "{err}");
        let err = parse_annotations(Path::new("a.txt"), "a.ppm\n1\n").unwrap_err();
        assert!(matches!(err, CliError::Format { line: 3, .. }), "{err}");
        let err = parse_detections(Path::new("d.txt"), "a.ppm\nmany\n").unwrap_err();
        assert!(matches!(err, CliError::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn raster_conversion_round_trips() {
        let f = face().to_truth(20, 30).unwrap();
        assert!((f.keypoints.points[0].y - (29.0 - 0.3)).abs() < 1e-12);
        // top-left corner at raster y=2 is the bottom edge at 29 - 14 = 15
        assert!((f.bbox.y - 15.0).abs() < 1e-12);
        let back = FaceRecord::from_truth(&f, 30);
        for (a, b) in back.bbox.iter().zip(face().bbox) {
            assert!((a - b).abs() < 1e-12);
        }
        let (e, e0) = (back.ellipse.unwrap(), face().ellipse.unwrap());
        for (a, b) in e.iter().zip(e0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn incomplete_or_duplicate_keypoints_are_rejected() {
        let mut f = face();
        f.keypoints.pop();
        assert!(f.to_truth(20, 30).is_err());
        let mut f = face();
        f.keypoints[1].label = 1;
        assert!(f.to_truth(20, 30).is_err());
        let mut f = face();
        f.keypoints[0].x = 25.0;
        assert!(f.to_truth(20, 30).is_err());
    }
}
