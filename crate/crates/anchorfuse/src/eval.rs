//! Metrics for the four downstream tasks: counting, grid localization,
//! scene classification, and box detection.
//!
//! Records arrive as JSON lines tagged with their task; [`score_records`]
//! filters a mixed file down to one task and produces that task's report.
//! Detection predictions are free text — [`parse_boxes_from_text`] extracts
//! `label [x1, y1, x2, y2]` groups and flags malformed ones — and matching
//! is greedy one-to-one by descending overlap ([`match_by_iou`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from metric computation and record files.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: needs x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("grid cell {0} outside 0..=8")]
    InvalidCell(u32),
    #[error("record {index}: ground-truth cell set is empty")]
    EmptyGroundTruth { index: usize },
    #[error("ground-truth class {class:?} not in the class vocabulary")]
    UnknownClass { class: String },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("no records for task {task}")]
    NoRecordsForTask { task: TaskKind },
    #[error("unknown task {0:?} (expected counting, localization, classification, or detection)")]
    UnknownTask(String),
    #[error("iou threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Axis-aligned box with an optional class label; valid when both extents
/// are strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, EvalError> {
        let b = BoundingBox { x1, y1, x2, y2, class_label: None };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(EvalError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.class_label = Some(label.into());
        self
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection-over-union of two boxes. Errors if either box is invalid.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(EvalError::InvalidBox { x1: bx.x1, y1: bx.y1, x2: bx.x2, y2: bx.y2 });
        }
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// A subset of the 3x3 localization grid, cells numbered 0..=8 row-major
/// from the top-left.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct GridCellSet {
    cells: BTreeSet<u8>,
}

impl GridCellSet {
    pub fn new(cells: impl IntoIterator<Item = u32>) -> Result<Self, EvalError> {
        let mut set = BTreeSet::new();
        for c in cells {
            if c > 8 {
                return Err(EvalError::InvalidCell(c));
            }
            set.insert(c as u8);
        }
        Ok(GridCellSet { cells: set })
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn contains(&self, cell: u8) -> bool {
        self.cells.contains(&cell)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.cells.iter().copied()
    }

    fn intersection_len(&self, other: &GridCellSet) -> usize {
        self.cells.intersection(&other.cells).count()
    }

    fn union_len(&self, other: &GridCellSet) -> usize {
        self.cells.union(&other.cells).count()
    }

    /// Jaccard overlap; 0 when both sets are empty.
    pub fn jaccard(&self, other: &GridCellSet) -> f64 {
        let u = self.union_len(other);
        if u == 0 {
            0.0
        } else {
            self.intersection_len(other) as f64 / u as f64
        }
    }
}

impl TryFrom<Vec<u32>> for GridCellSet {
    type Error = EvalError;
    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        GridCellSet::new(v)
    }
}

impl From<GridCellSet> for Vec<u32> {
    fn from(s: GridCellSet) -> Vec<u32> {
        s.cells.iter().map(|&c| c as u32).collect()
    }
}

/// Cells of the 3x3 grid whose interior overlaps any of the boxes.
///
/// Overlap must have positive area: a box that only touches a cell's edge
/// does not claim it. Box parts outside the image claim nothing. Never
/// fails; no boxes means no cells.
pub fn cells_from_boxes(boxes: &[BoundingBox], image_w: f64, image_h: f64) -> GridCellSet {
    let mut cells = BTreeSet::new();
    for b in boxes {
        for row in 0..3u8 {
            for col in 0..3u8 {
                let cx1 = image_w * col as f64 / 3.0;
                let cx2 = image_w * (col + 1) as f64 / 3.0;
                let cy1 = image_h * row as f64 / 3.0;
                let cy2 = image_h * (row + 1) as f64 / 3.0;
                let ox = b.x2.min(cx2) - b.x1.max(cx1);
                let oy = b.y2.min(cy2) - b.y1.max(cy1);
                if ox > 0.0 && oy > 0.0 {
                    cells.insert(row * 3 + col);
                }
            }
        }
    }
    GridCellSet { cells }
}

/// Per-record localization outcomes at the three strictness levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizationHits {
    /// Predicted set equals the ground truth exactly.
    pub hit100: bool,
    /// Jaccard overlap at least 0.5.
    pub hit50: bool,
    /// At least one predicted cell is correct.
    pub top1: bool,
}

/// Judge one predicted cell set against a non-empty ground truth.
pub fn localization_hits(
    pred: &GridCellSet,
    gt: &GridCellSet,
    index: usize,
) -> Result<LocalizationHits, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGroundTruth { index });
    }
    Ok(LocalizationHits {
        hit100: pred == gt,
        hit50: pred.jaccard(gt) >= 0.5,
        top1: pred.intersection_len(gt) > 0,
    })
}

/// Aggregate localization accuracy over records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub n: usize,
    pub acc100: f64,
    pub acc50: f64,
    pub top1: f64,
}

/// Score `(predicted, expected)` cell-set pairs.
pub fn localization_metrics(
    pairs: &[(GridCellSet, GridCellSet)],
) -> Result<LocalizationReport, EvalError> {
    let mut c100 = 0usize;
    let mut c50 = 0usize;
    let mut ctop = 0usize;
    for (i, (pred, gt)) in pairs.iter().enumerate() {
        let h = localization_hits(pred, gt, i)?;
        c100 += h.hit100 as usize;
        c50 += h.hit50 as usize;
        ctop += h.top1 as usize;
    }
    let n = pairs.len();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(LocalizationReport { n, acc100: rate(c100), acc50: rate(c50), top1: rate(ctop) })
}

/// Exact-match counting accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountingReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Score `(predicted, expected)` count pairs; a hit is an exact match.
pub fn counting_accuracy(pairs: &[(i64, i64)]) -> CountingReport {
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    let n = pairs.len();
    CountingReport {
        n,
        correct,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
    }
}

/// Classification accuracy, overall and per ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub correct: usize,
    /// Fraction correct over all records.
    pub micro_accuracy: f64,
    /// Per ground-truth class: (correct, total).
    pub per_class: BTreeMap<String, (usize, usize)>,
}

/// Score `(predicted, expected)` label pairs against a class vocabulary.
///
/// Every expected label must come from `classes`; predictions are free text
/// and simply score as wrong when they match no class or the wrong one.
pub fn classification_accuracy(
    pairs: &[(String, String)],
    classes: &[String],
) -> Result<ClassificationReport, EvalError> {
    let vocab: BTreeSet<&str> = classes.iter().map(|s| s.as_str()).collect();
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (pred, gt) in pairs {
        if !vocab.contains(gt.as_str()) {
            return Err(EvalError::UnknownClass { class: gt.clone() });
        }
        let slot = per_class.entry(gt.clone()).or_insert((0, 0));
        slot.1 += 1;
        if pred == gt {
            slot.0 += 1;
            correct += 1;
        }
    }
    let n = pairs.len();
    Ok(ClassificationReport {
        n,
        correct,
        micro_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class,
    })
}

/// Greedy one-to-one assignment by descending overlap.
///
/// `iou[p][g]` holds the overlap of prediction `p` with ground truth `g`.
/// Pairs at or above `threshold` are visited from the highest overlap down
/// (ties break toward lower prediction, then lower ground-truth index), and
/// each prediction and ground truth is used at most once.
///
/// The result is always a maximal matching: no unused pair above threshold
/// remains. It is not always a *maximum* one — see the divergence tests for
/// an instance where a different assignment pairs more boxes.
pub fn match_by_iou(iou: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (p, row) in iou.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v >= threshold {
                pairs.push((p, g, v));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("IoU values are never NaN")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let n_pred = iou.len();
    let n_gt = iou.first().map_or(0, |r| r.len());
    let mut pred_used = vec![false; n_pred];
    let mut gt_used = vec![false; n_gt];
    let mut matched = Vec::new();
    for (p, g, _) in pairs {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            matched.push((p, g));
        }
    }
    matched
}

/// Detection precision/recall/F1 from one-to-one matching.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionReport {
    /// Derive rates from counts; empty denominators score 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = rate(tp, tp + fp);
        let recall = rate(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionReport { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Match predictions to ground truths greedily and report P/R/F1.
pub fn detection_prf(
    preds: &[BoundingBox],
    gts: &[BoundingBox],
    threshold: f64,
) -> Result<DetectionReport, EvalError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::BadThreshold(threshold));
    }
    let mut iou = vec![vec![0.0; gts.len()]; preds.len()];
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            iou[p][g] = box_iou(pb, gb)?;
        }
    }
    let tp = match_by_iou(&iou, threshold).len();
    Ok(DetectionReport::from_counts(tp, preds.len() - tp, gts.len() - tp))
}

/// Result of scanning free text for boxes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedBoxes {
    /// Valid boxes in text order, each carrying its optional label word.
    pub boxes: Vec<BoundingBox>,
    /// Bracket groups that did not yield a valid box.
    pub skipped: usize,
}

impl ParsedBoxes {
    pub fn any_failure(&self) -> bool {
        self.skipped > 0
    }
}

/// Extract `label [x1, y1, x2, y2]` groups from model output text.
///
/// The label word is optional and becomes the box's `class_label`. Bracket
/// groups that are not four numbers, or whose numbers do not form a valid
/// box, are skipped and counted in [`ParsedBoxes::skipped`].
pub fn parse_boxes_from_text(text: &str) -> ParsedBoxes {
    let box_re = Regex::new(
        r"(?x)
        (?: ([A-Za-z][A-Za-z0-9_-]*) \s* )?          # optional label word
        \[ \s*
            (-?\d+(?:\.\d+)?) \s* , \s*
            (-?\d+(?:\.\d+)?) \s* , \s*
            (-?\d+(?:\.\d+)?) \s* , \s*
            (-?\d+(?:\.\d+)?)
        \s* \]",
    )
    .expect("box pattern compiles");
    let group_re = Regex::new(r"\[[^\[\]]*\]").expect("group pattern compiles");

    let total_groups = group_re.find_iter(text).count();
    let mut boxes = Vec::new();
    let mut well_formed = 0usize;
    let mut invalid = 0usize;
    for cap in box_re.captures_iter(text) {
        well_formed += 1;
        let nums: Vec<f64> = (2..=5)
            .map(|i| cap[i].parse::<f64>().expect("regex guarantees a number"))
            .collect();
        match BoundingBox::new(nums[0], nums[1], nums[2], nums[3]) {
            Ok(mut bbox) => {
                bbox.class_label = cap.get(1).map(|m| m.as_str().to_string());
                boxes.push(bbox);
            }
            Err(_) => invalid += 1,
        }
    }
    ParsedBoxes {
        boxes,
        skipped: invalid + (total_groups - well_formed),
    }
}

/// Which task a record (or an eval run) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Counting,
    Localization,
    Classification,
    Detection,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Counting => "counting",
            TaskKind::Localization => "localization",
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "counting" => Ok(TaskKind::Counting),
            "localization" => Ok(TaskKind::Localization),
            "classification" => Ok(TaskKind::Classification),
            "detection" => Ok(TaskKind::Detection),
            other => Err(EvalError::UnknownTask(other.to_string())),
        }
    }
}

fn default_image_id() -> String {
    String::new()
}

/// One prediction/ground-truth pair, tagged by task, as stored in JSONL
/// record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvalRecord {
    Counting {
        #[serde(default = "default_image_id")]
        image_id: String,
        prediction: i64,
        ground_truth: i64,
    },
    Localization {
        #[serde(default = "default_image_id")]
        image_id: String,
        prediction: GridCellSet,
        ground_truth: GridCellSet,
    },
    Classification {
        #[serde(default = "default_image_id")]
        image_id: String,
        prediction: String,
        ground_truth: String,
    },
    Detection {
        #[serde(default = "default_image_id")]
        image_id: String,
        /// Raw model text; boxes are parsed out of it at scoring time.
        prediction_text: String,
        ground_truth: Vec<BoundingBox>,
    },
}

impl EvalRecord {
    pub fn task(&self) -> TaskKind {
        match self {
            EvalRecord::Counting { .. } => TaskKind::Counting,
            EvalRecord::Localization { .. } => TaskKind::Localization,
            EvalRecord::Classification { .. } => TaskKind::Classification,
            EvalRecord::Detection { .. } => TaskKind::Detection,
        }
    }
}

/// Read JSONL eval records; the first malformed line fails with its number.
pub fn load_eval_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(line).map_err(|e| EvalError::BadRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Write eval records as JSONL, one compact object per line.
pub fn save_eval_records(records: &[EvalRecord], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Scored report for one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskReport {
    Counting(CountingReport),
    Localization(LocalizationReport),
    Classification(ClassificationReport),
    Detection(DetectionReport),
}

impl fmt::Display for TaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskReport::Counting(r) => write!(
                f,
                "counting: n={} correct={} accuracy={:.4}",
                r.n, r.correct, r.accuracy
            ),
            TaskReport::Localization(r) => write!(
                f,
                "localization: n={} acc@100={:.4} acc@50={:.4} top1={:.4}",
                r.n, r.acc100, r.acc50, r.top1
            ),
            TaskReport::Classification(r) => {
                write!(
                    f,
                    "classification: n={} correct={} micro_accuracy={:.4}",
                    r.n, r.correct, r.micro_accuracy
                )?;
                for (class, (c, t)) in &r.per_class {
                    write!(f, "\n  {class}: {c}/{t}")?;
                }
                Ok(())
            }
            TaskReport::Detection(r) => write!(
                f,
                "detection: tp={} fp={} fn={} precision={:.4} recall={:.4} f1={:.4}",
                r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
            ),
        }
    }
}

/// Score the records of one task from a (possibly mixed) record list.
///
/// Detection aggregates true/false positives across records before deriving
/// precision, recall, and F1.
pub fn score_records(
    records: &[EvalRecord],
    task: TaskKind,
    iou_threshold: f64,
) -> Result<TaskReport, EvalError> {
    let selected: Vec<&EvalRecord> = records.iter().filter(|r| r.task() == task).collect();
    if selected.is_empty() {
        return Err(EvalError::NoRecordsForTask { task });
    }
    match task {
        TaskKind::Counting => {
            let pairs: Vec<(i64, i64)> = selected
                .iter()
                .map(|r| match r {
                    EvalRecord::Counting { prediction, ground_truth, .. } => {
                        (*prediction, *ground_truth)
                    }
                    _ => unreachable!("filtered by task"),
                })
                .collect();
            Ok(TaskReport::Counting(counting_accuracy(&pairs)))
        }
        TaskKind::Localization => {
            let pairs: Vec<(GridCellSet, GridCellSet)> = selected
                .iter()
                .map(|r| match r {
                    EvalRecord::Localization { prediction, ground_truth, .. } => {
                        (prediction.clone(), ground_truth.clone())
                    }
                    _ => unreachable!("filtered by task"),
                })
                .collect();
            Ok(TaskReport::Localization(localization_metrics(&pairs)?))
        }
        TaskKind::Classification => {
            let pairs: Vec<(String, String)> = selected
                .iter()
                .map(|r| match r {
                    EvalRecord::Classification { prediction, ground_truth, .. } => {
                        (prediction.clone(), ground_truth.clone())
                    }
                    _ => unreachable!("filtered by task"),
                })
                .collect();
            // The vocabulary is every class seen as ground truth.
            let classes: Vec<String> = pairs
                .iter()
                .map(|(_, gt)| gt.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            Ok(TaskReport::Classification(classification_accuracy(&pairs, &classes)?))
        }
        TaskKind::Detection => {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for r in &selected {
                let (text, gts) = match r {
                    EvalRecord::Detection { prediction_text, ground_truth, .. } => {
                        (prediction_text, ground_truth)
                    }
                    _ => unreachable!("filtered by task"),
                };
                let parsed = parse_boxes_from_text(text);
                let report = detection_prf(&parsed.boxes, gts, iou_threshold)?;
                tp += report.tp;
                fp += report.fp;
                fn_ += report.fn_;
            }
            Ok(TaskReport::Detection(DetectionReport::from_counts(tp, fp, fn_)))
        }
    }
}
