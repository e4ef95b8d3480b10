//! Dataset records, image IO, and the synthetic benchmark generator.
//!
//! A dataset is a JSONL file of [`TripletRecord`]s — image, geo box,
//! anchored prior features (inline or by path), token text, and optional
//! evaluation annotations. [`load_dataset`] validates every line and
//! reports **all** invalid lines at once.
//!
//! [`generate_synthetic`] builds a fully self-contained benchmark in which
//! the images are pure speckle and the scene class plus target count are
//! planted **only** in the embedding field raster: a model can solve the
//! caption and question tasks only by routing information from the anchored
//! priors. The raster is laid out so that re-extracting any sample's box
//! with [`crate::geo::build_feature_set`] reproduces the stored features
//! bit for bit, which is what lets the extraction, fusion, and training
//! command-line steps compose without any glue.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{cells_from_boxes, BoundingBox, EvalRecord, GridCellSet};
use crate::geo::{
    build_feature_set, AnchorFeatureSet, EmbeddingFieldStore, GeoError, SpatioTemporalBox,
    YearRaster, EMBED_DIM,
};
use crate::sft::{predict_answers, token_saliency, SftError, ToyVlm, TripletSample};
use crate::tensor::Matrix;

/// Token ids shared by every dataset this crate generates or consumes.
///
/// The vocabulary is 64 tokens: a handful of control tokens, a block of
/// scene-class answer tokens, and a block of count answer tokens.
pub mod vocab {
    pub const VOCAB_SIZE: usize = 64;
    /// Sequence start; every position conditions on it at offset 0.
    pub const BOS: u32 = 0;
    /// Marks a caption ("describe the scene") text.
    pub const DESC_MARKER: u32 = 1;
    /// Instruction: answer with the scene class token.
    pub const ASK_CLASS: u32 = 2;
    /// Instruction: answer with the target count token.
    pub const ASK_COUNT: u32 = 3;
    /// Scene class `k` answers with token `CLASS_BASE + k`.
    pub const CLASS_BASE: u32 = 8;
    /// Count `n` answers with token `COUNT_BASE + n`.
    pub const COUNT_BASE: u32 = 24;
    /// Class indices are limited by their one-hot embedding channels.
    pub const MAX_CLASSES: usize = 8;
    /// Counts are limited by their one-hot embedding channels.
    pub const MAX_COUNT: usize = 15;

    pub fn class_token(index: usize) -> Option<u32> {
        (index < MAX_CLASSES).then(|| CLASS_BASE + index as u32)
    }

    pub fn count_token(count: usize) -> Option<u32> {
        (count <= MAX_COUNT).then(|| COUNT_BASE + count as u32)
    }

    pub fn class_of_token(token: u32) -> Option<usize> {
        (CLASS_BASE..CLASS_BASE + MAX_CLASSES as u32)
            .contains(&token)
            .then(|| (token - CLASS_BASE) as usize)
    }

    pub fn count_of_token(token: u32) -> Option<i64> {
        (COUNT_BASE..=COUNT_BASE + MAX_COUNT as u32)
            .contains(&token)
            .then(|| (token - COUNT_BASE) as i64)
    }
}

/// Embedding-field channel layout used by the synthetic generator.
///
/// Channels `0..8` carry the scene-class one-hot at every anchor, channel
/// `8` a normalized count scalar at every anchor, channels `16..32` the
/// count one-hot at anchors inside object tiles only (so count information
/// is also spatial), and channels `32..64` are uniform noise.
pub mod channels {
    pub const CLASS_ONEHOT: usize = 0;
    pub const COUNT_SCALAR: usize = 8;
    pub const COUNT_ONEHOT: usize = 16;
    pub const NOISE: usize = 32;
}

/// One invalid dataset line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Errors from dataset parsing, validation, generation, and image IO.
#[derive(Debug, Error)]
pub enum DatasetError {
    /// Every invalid line of the file, not just the first.
    #[error("{} invalid record(s):\n{}", .0.len(), .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<LineIssue>),
    #[error("referenced file {path} is missing ({context})")]
    MissingFile { path: String, context: &'static str },
    #[error("image {path} is not a valid PGM: {reason}")]
    BadImage { path: String, reason: String },
    #[error("bad generator spec: {reason}")]
    BadSpec { reason: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Plain-text PGM images
// ---------------------------------------------------------------------------

/// Write a grayscale image as plain-text PGM (`P2`, maxval 255).
///
/// Values are clamped to `[0, 1]` and quantized to 8 bits; a value written
/// and read back is exact because both sides use `k / 255`.
pub fn write_pgm(image: &Matrix, path: &Path) -> Result<(), std::io::Error> {
    let mut s = format!("P2\n{} {}\n255\n", image.cols(), image.rows());
    for r in 0..image.rows() {
        let row: Vec<String> = image
            .row(r)
            .iter()
            .map(|&v| (((v.clamp(0.0, 1.0)) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s)
}

/// Read a plain-text PGM written by [`write_pgm`] (or any `P2` file with
/// maxval 255). Pixel values come back as `k / 255`.
pub fn read_pgm(path: &Path) -> Result<Matrix, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|_| DatasetError::MissingFile {
        path: path.display().to_string(),
        context: "image",
    })?;
    let bad = |reason: &str| DatasetError::BadImage {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    // Tokenize, dropping '#' comments to end of line.
    let mut tokens = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let mut it = tokens.into_iter();
    if it.next().as_deref() != Some("P2") {
        return Err(bad("missing P2 header"));
    }
    let mut dim = |what: &str| -> Result<usize, DatasetError> {
        it.next()
            .ok_or_else(|| bad(&format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| bad(&format!("{what} is not an integer")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if w == 0 || h == 0 {
        return Err(bad("zero width or height"));
    }
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let tok = it
            .next()
            .ok_or_else(|| bad(&format!("expected {} pixels, found {i}", w * h)))?;
        let v: u32 = tok
            .parse()
            .map_err(|_| bad(&format!("pixel {i} is not an integer")))?;
        if v > 255 {
            return Err(bad(&format!("pixel {i} value {v} exceeds maxval")));
        }
        data.push(v as f64 / 255.0);
    }
    if it.next().is_some() {
        return Err(bad("trailing data after pixels"));
    }
    Ok(Matrix::from_vec(h, w, data).expect("dims match data"))
}

// ---------------------------------------------------------------------------
// Triplet records
// ---------------------------------------------------------------------------

/// Ground-truth annotations carried alongside a sample for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Annotations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<GridCellSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoundingBox>>,
}

/// One dataset line: image, geo box, prior features, and token text.
///
/// Exactly one of `features` (inline) or `feature_set_path` (relative to
/// the dataset file) must be present, and exactly one text form: a
/// `description` (caption training) or an `instruction` + `answer` pair
/// (question training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub image_id: String,
    /// Path to a PGM image, relative to the dataset file.
    pub image_path: String,
    #[serde(rename = "box")]
    pub bbox: SpatioTemporalBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<AnchorFeatureSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_set_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Annotations>,
}

fn validate_feature_set(fs: &AnchorFeatureSet, issues: &mut Vec<String>) {
    if fs.bbox.lon_min >= fs.bbox.lon_max || fs.bbox.lat_min >= fs.bbox.lat_max {
        issues.push(format!(
            "feature box is degenerate (lon {}..{}, lat {}..{})",
            fs.bbox.lon_min, fs.bbox.lon_max, fs.bbox.lat_min, fs.bbox.lat_max
        ));
    }
    if fs.n_lon < 2 || fs.n_lat < 2 {
        issues.push(format!(
            "anchor grid {}x{} needs at least 2 nodes per axis",
            fs.n_lon, fs.n_lat
        ));
    }
    if fs.records.len() != fs.n_lon * fs.n_lat {
        issues.push(format!(
            "feature set has {} records for a {}x{} grid",
            fs.records.len(),
            fs.n_lon,
            fs.n_lat
        ));
    }
    let dim = fs.records.first().map(|r| r.embedding.len()).unwrap_or(0);
    for (j, r) in fs.records.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.px) {
            issues.push(format!("anchor {j}: px {} outside [0, 1]", r.px));
        }
        if !(0.0..=1.0).contains(&r.py) {
            issues.push(format!("anchor {j}: py {} outside [0, 1]", r.py));
        }
        if r.embedding.len() != dim {
            issues.push(format!(
                "anchor {j}: embedding dim {} differs from first anchor's {dim}",
                r.embedding.len()
            ));
        }
    }
}

impl TripletRecord {
    /// All invariant violations of this record (empty = valid).
    ///
    /// `base` anchors the relative `image_path` / `feature_set_path`;
    /// referenced files must exist and parse.
    pub fn validate(&self, base: &Path) -> Vec<String> {
        let mut issues = Vec::new();
        if self.image_id.is_empty() {
            issues.push("image_id is empty".to_string());
        }
        if self.bbox.lon_min >= self.bbox.lon_max || self.bbox.lat_min >= self.bbox.lat_max {
            issues.push(format!(
                "box is degenerate (lon {}..{}, lat {}..{})",
                self.bbox.lon_min, self.bbox.lon_max, self.bbox.lat_min, self.bbox.lat_max
            ));
        }

        match (&self.features, &self.feature_set_path) {
            (Some(fs), None) => validate_feature_set(fs, &mut issues),
            (None, Some(rel)) => match AnchorFeatureSet::load_json(&base.join(rel)) {
                Ok(fs) => validate_feature_set(&fs, &mut issues),
                Err(e) => issues.push(format!("feature file {rel}: {e}")),
            },
            (Some(_), Some(_)) => {
                issues.push("both inline features and feature_set_path present".to_string())
            }
            (None, None) => {
                issues.push("neither inline features nor feature_set_path present".to_string())
            }
        }

        let text_issue = match (&self.description, &self.instruction, &self.answer) {
            (Some(d), None, None) => {
                if d.is_empty() {
                    Some("description is empty".to_string())
                } else {
                    None
                }
            }
            (None, Some(i), Some(a)) => {
                if i.is_empty() || a.is_empty() {
                    Some("instruction and answer must both be non-empty".to_string())
                } else {
                    None
                }
            }
            (None, Some(_), None) => Some("instruction without answer".to_string()),
            (None, None, Some(_)) => Some("answer without instruction".to_string()),
            (None, None, None) => Some("no text: need description or instruction+answer".to_string()),
            _ => Some("both description and instruction/answer present".to_string()),
        };
        issues.extend(text_issue);
        for (what, tokens) in [
            ("description", &self.description),
            ("instruction", &self.instruction),
            ("answer", &self.answer),
        ] {
            if let Some(tokens) = tokens {
                for &t in tokens {
                    if t as usize >= vocab::VOCAB_SIZE {
                        issues.push(format!(
                            "{what} token {t} outside vocabulary (size {})",
                            vocab::VOCAB_SIZE
                        ));
                    }
                }
            }
        }

        let image = base.join(&self.image_path);
        if !image.is_file() {
            issues.push(format!("image file {} missing", self.image_path));
        } else if let Err(e) = read_pgm(&image) {
            issues.push(format!("image file {}: {e}", self.image_path));
        }
        issues
    }

    /// Materialize with an already-loaded image (used when images live in
    /// memory; `base` resolves a `feature_set_path` if one is used).
    pub fn to_sample_with_image(
        &self,
        image: Matrix,
        base: &Path,
    ) -> Result<TripletSample, DatasetError> {
        let features = match (&self.features, &self.feature_set_path) {
            (Some(fs), _) => fs.clone(),
            (None, Some(rel)) => AnchorFeatureSet::load_json(&base.join(rel)).map_err(|_| {
                DatasetError::MissingFile {
                    path: rel.clone(),
                    context: "feature set",
                }
            })?,
            (None, None) => {
                return Err(DatasetError::Invalid(vec![LineIssue {
                    line: 0,
                    message: format!("record {}: no features", self.image_id),
                }]))
            }
        };
        let sample = if let Some(d) = &self.description {
            TripletSample::caption(image, features, d.clone())?
        } else {
            TripletSample::instruction(
                image,
                features,
                self.instruction.clone().unwrap_or_default(),
                self.answer.clone().unwrap_or_default(),
            )?
        };
        Ok(sample)
    }

    /// Load the image from disk and materialize a training sample.
    pub fn to_sample(&self, base: &Path) -> Result<TripletSample, DatasetError> {
        let image = read_pgm(&base.join(&self.image_path))?;
        self.to_sample_with_image(image, base)
    }
}

/// Parse and validate a JSONL dataset file.
///
/// Validation is total: every malformed or invariant-violating line is
/// collected and the error lists them all with line numbers.
pub fn load_dataset(path: &Path) -> Result<Vec<TripletRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|_| DatasetError::MissingFile {
        path: path.display().to_string(),
        context: "dataset",
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TripletRecord>(line) {
            Ok(rec) => {
                for msg in rec.validate(base) {
                    issues.push(LineIssue { line: i + 1, message: msg });
                }
                records.push(rec);
            }
            Err(e) => issues.push(LineIssue { line: i + 1, message: e.to_string() }),
        }
    }
    if !issues.is_empty() {
        return Err(DatasetError::Invalid(issues));
    }
    Ok(records)
}

/// Write records as compact JSONL; `load_dataset` + `save_dataset` round
/// trips byte for byte.
pub fn save_dataset(records: &[TripletRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Materialize every record of a dataset file into a training sample.
pub fn load_samples(path: &Path) -> Result<Vec<TripletSample>, DatasetError> {
    let records = load_dataset(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    records.iter().map(|r| r.to_sample(base)).collect()
}

// ---------------------------------------------------------------------------
// Synthetic benchmark generator
// ---------------------------------------------------------------------------

fn default_classes() -> Vec<String> {
    ["harbor", "urban", "farmland", "forest", "water", "mountain"]
        .map(String::from)
        .to_vec()
}

fn default_n_samples() -> usize {
    48
}
fn default_max_count() -> usize {
    8
}
fn default_noise_level() -> f64 {
    0.5
}
fn default_grid_nodes() -> usize {
    4
}
fn default_year() -> i32 {
    2022
}
fn default_image_size() -> usize {
    16
}
fn default_signal() -> f64 {
    2.0
}
fn default_inline_features() -> bool {
    true
}

/// Settings for [`generate_synthetic`]. Every field has a default, so a
/// JSON spec may set only what it cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    /// Scene class names; at most [`vocab::MAX_CLASSES`].
    pub classes: Vec<String>,
    /// Largest target count; at least 1, at most [`vocab::MAX_COUNT`].
    pub max_count: usize,
    /// Amplitude of the uniform noise in the free embedding channels.
    pub noise_level: f64,
    /// Anchor lattice nodes per axis (also the raster cells per sample).
    pub n_lon: usize,
    pub n_lat: usize,
    pub year: i32,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Amplitude of the planted one-hot signals.
    pub signal: f64,
    /// Inline the features in each record (true) or write one feature file
    /// per sample and reference it by path (false).
    pub inline_features: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_samples: default_n_samples(),
            classes: default_classes(),
            max_count: default_max_count(),
            noise_level: default_noise_level(),
            n_lon: default_grid_nodes(),
            n_lat: default_grid_nodes(),
            year: default_year(),
            image_size: default_image_size(),
            signal: default_signal(),
            inline_features: default_inline_features(),
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| Err(DatasetError::BadSpec { reason });
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.classes.is_empty() || self.classes.len() > vocab::MAX_CLASSES {
            return bad(format!(
                "need 1..={} classes, got {}",
                vocab::MAX_CLASSES,
                self.classes.len()
            ));
        }
        if self.max_count == 0 || self.max_count > vocab::MAX_COUNT {
            return bad(format!(
                "max_count must be 1..={}, got {}",
                vocab::MAX_COUNT,
                self.max_count
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be finite and >= 0, got {}", self.noise_level));
        }
        if self.n_lon < 2 || self.n_lat < 2 {
            return bad(format!(
                "anchor grid {}x{} needs at least 2 nodes per axis",
                self.n_lon, self.n_lat
            ));
        }
        if self.image_size < 3 {
            return bad(format!("image_size must be at least 3, got {}", self.image_size));
        }
        if !(self.signal.is_finite() && self.signal > 0.0) {
            return bad(format!("signal must be finite and positive, got {}", self.signal));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, DatasetError> {
        let spec: SyntheticSpec =
            serde_json::from_str(s).map_err(|e| DatasetError::BadSpec { reason: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_json(path: &Path) -> Result<Self, DatasetError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Everything [`generate_synthetic`] produces, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub spec: SyntheticSpec,
    /// Embedding-field store covering all samples (one raster, one year).
    pub store: EmbeddingFieldStore,
    /// Caption records (one per sample).
    pub d1: Vec<TripletRecord>,
    /// Question records (two per sample: class, then count).
    pub d2: Vec<TripletRecord>,
    /// `image_id -> image`, shared by the records of each sample.
    pub images: BTreeMap<String, Matrix>,
    /// Per-sample feature sets, parallel to `d1` (also inlined in the
    /// records when `inline_features` is set).
    pub feature_sets: Vec<AnchorFeatureSet>,
}

impl SyntheticOutput {
    fn samples_of(&self, records: &[TripletRecord]) -> Result<Vec<TripletSample>, DatasetError> {
        records
            .iter()
            .map(|r| {
                let image = self.images.get(&r.image_id).cloned().ok_or_else(|| {
                    DatasetError::MissingFile {
                        path: r.image_id.clone(),
                        context: "in-memory image",
                    }
                })?;
                r.to_sample_with_image(image, Path::new("."))
            })
            .collect()
    }

    /// Caption samples without touching the filesystem.
    pub fn samples_d1(&self) -> Result<Vec<TripletSample>, DatasetError> {
        self.samples_of(&self.d1)
    }

    /// Question samples without touching the filesystem.
    pub fn samples_d2(&self) -> Result<Vec<TripletSample>, DatasetError> {
        self.samples_of(&self.d2)
    }
}

/// Build the synthetic benchmark for `spec`.
///
/// Layout: sample `i` owns the geographic block `lon [i, i+1] x lat [0, 1]`
/// of one shared raster, with `n_lon x n_lat` cells per block. The sample's
/// query box is inset by half a cell on each side so every anchor of an
/// `n_lon x n_lat` lattice over it lands exactly on a cell center —
/// extraction is therefore an exact inverse of planting. Targets occupy
/// distinct tiles of a `K x K` image partition (`K = ceil(sqrt(count))`),
/// and the count one-hot is planted only at anchors inside those tiles.
///
/// The run is fully determined by `spec` (one seeded generator, fixed draw
/// order: class, count, tiles, image, then per-anchor noise).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticOutput, DatasetError> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    spec.validate()?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(spec.seed);

    let n = spec.n_samples;
    let (n_lon, n_lat) = (spec.n_lon, spec.n_lat);
    let cells_x = (n * n_lon) as u32;
    let cells_y = n_lat as u32;
    let mut raster_data = vec![0.0f32; cells_x as usize * cells_y as usize * EMBED_DIM];

    struct Latent {
        class: usize,
        count: usize,
        tiles: Vec<(usize, usize)>,
        image: Matrix,
    }
    let mut latents = Vec::with_capacity(n);

    for i in 0..n {
        let class = rng.gen_range(0..spec.classes.len());
        let count = rng.gen_range(1..=spec.max_count);
        // Targets occupy distinct tiles of a K x K partition of the image.
        let k = (count as f64).sqrt().ceil() as usize;
        let mut tile_ids: Vec<usize> = (0..k * k).collect();
        tile_ids.shuffle(&mut rng);
        let tiles: Vec<(usize, usize)> =
            tile_ids[..count].iter().map(|&t| (t % k, t / k)).collect();

        // Pure speckle image: exponential intensity, 8-bit quantized. The
        // image carries no label information by construction.
        let image = Matrix::from_fn(spec.image_size, spec.image_size, |_, _| {
            let u: f64 = rng.gen();
            let v = (-(1.0 - u).ln()) * 0.25;
            (v.min(1.0) * 255.0).round() / 255.0
        });

        // Plant the embedding block: anchor (a south-row, b column) lives at
        // raster cell (row-from-north n_lat-1-a, column i*n_lon + b).
        for a in 0..n_lat {
            for b in 0..n_lon {
                let px = b as f64 / (n_lon - 1) as f64;
                let py = 1.0 - a as f64 / (n_lat - 1) as f64;
                let tx = ((px * k as f64).floor() as usize).min(k - 1);
                let ty = ((py * k as f64).floor() as usize).min(k - 1);
                let in_object = tiles.contains(&(tx, ty));

                let mut e = [0.0f32; EMBED_DIM];
                e[channels::CLASS_ONEHOT + class] = spec.signal as f32;
                e[channels::COUNT_SCALAR] =
                    (spec.signal * count as f64 / spec.max_count as f64) as f32;
                if in_object {
                    e[channels::COUNT_ONEHOT + count] = spec.signal as f32;
                }
                for v in &mut e[channels::NOISE..EMBED_DIM] {
                    *v = rng.gen_range(-spec.noise_level..=spec.noise_level) as f32;
                }

                let ry = n_lat - 1 - a;
                let cx = i * n_lon + b;
                let off = (ry * cells_x as usize + cx) * EMBED_DIM;
                raster_data[off..off + EMBED_DIM].copy_from_slice(&e);
            }
        }

        latents.push(Latent { class, count, tiles, image });
    }

    let raster = YearRaster::new(
        spec.year,
        0.0,
        0.0,
        n as f64,
        1.0,
        cells_x,
        cells_y,
        raster_data,
    )?;
    let mut store = EmbeddingFieldStore::new();
    store.insert(raster);

    // Half-cell inset puts every anchor of an n x n lattice on a cell center.
    let dx = 1.0 / (2.0 * n_lon as f64);
    let dy = 1.0 / (2.0 * n_lat as f64);

    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(2 * n);
    let mut images = BTreeMap::new();
    let mut feature_sets = Vec::with_capacity(n);

    for (i, latent) in latents.iter().enumerate() {
        let image_id = format!("sample_{i:04}");
        let image_path = format!("images/{image_id}.pgm");
        let bbox = SpatioTemporalBox::new(
            i as f64 + dx,
            dy,
            i as f64 + 1.0 - dx,
            1.0 - dy,
            spec.year,
        )?;
        let features = build_feature_set(&bbox, n_lon, n_lat, &store)?;

        // Tile boxes in pixel coordinates, inset 5% to keep them strictly
        // inside their tile.
        let k = (latent.count as f64).sqrt().ceil() as usize;
        let tile = spec.image_size as f64 / k as f64;
        let inset = 0.05 * tile;
        let boxes: Vec<BoundingBox> = latent
            .tiles
            .iter()
            .map(|&(tx, ty)| {
                BoundingBox::new(
                    tx as f64 * tile + inset,
                    ty as f64 * tile + inset,
                    (tx + 1) as f64 * tile - inset,
                    (ty + 1) as f64 * tile - inset,
                )
                .expect("tile boxes are valid")
                .with_label(spec.classes[latent.class].clone())
            })
            .collect();
        let cells = cells_from_boxes(&boxes, spec.image_size as f64, spec.image_size as f64);
        let annotations = Annotations {
            class_label: Some(spec.classes[latent.class].clone()),
            count: Some(latent.count as i64),
            cells: Some(cells),
            boxes: Some(boxes),
        };

        let class_tok = vocab::class_token(latent.class).expect("class count validated");
        let count_tok = vocab::count_token(latent.count).expect("max_count validated");
        let (inline, fs_path) = if spec.inline_features {
            (Some(features.clone()), None)
        } else {
            (None, Some(format!("features/{image_id}.json")))
        };

        let base = TripletRecord {
            image_id: image_id.clone(),
            image_path,
            bbox,
            features: inline,
            feature_set_path: fs_path,
            description: None,
            instruction: None,
            answer: None,
            annotations: Some(annotations),
        };

        d1.push(TripletRecord {
            description: Some(vec![vocab::DESC_MARKER, class_tok, count_tok]),
            ..base.clone()
        });
        d2.push(TripletRecord {
            instruction: Some(vec![vocab::ASK_CLASS]),
            answer: Some(vec![class_tok]),
            ..base.clone()
        });
        d2.push(TripletRecord {
            instruction: Some(vec![vocab::ASK_COUNT]),
            answer: Some(vec![count_tok]),
            ..base
        });

        images.insert(image_id, latent.image.clone());
        feature_sets.push(features);
    }

    Ok(SyntheticOutput {
        spec: spec.clone(),
        store,
        d1,
        d2,
        images,
        feature_sets,
    })
}

/// Persist a generated benchmark:
/// `store.aefs`, `images/*.pgm`, optional `features/*.json`, `d1.jsonl`,
/// and `d2.jsonl` under `dir`. Byte-stable for a fixed spec.
pub fn write_synthetic_dir(out: &SyntheticOutput, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let year = out.spec.year;
    out.store
        .raster(year)
        .expect("generated store has its year")
        .write_aefs_file(&dir.join("store.aefs"))?;
    for (image_id, image) in &out.images {
        write_pgm(image, &dir.join("images").join(format!("{image_id}.pgm")))?;
    }
    if !out.spec.inline_features {
        std::fs::create_dir_all(dir.join("features"))?;
        for (i, fs) in out.feature_sets.iter().enumerate() {
            fs.save_json(&dir.join("features").join(format!("sample_{i:04}.json")))?;
        }
    }
    save_dataset(&out.d1, &dir.join("d1.jsonl"))?;
    save_dataset(&out.d2, &dir.join("d2.jsonl"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model prediction records
// ---------------------------------------------------------------------------

fn wordlike(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Render boxes as parseable text: `label [x1, y1, x2, y2], ...`.
pub fn render_boxes_text(boxes: &[BoundingBox]) -> String {
    if boxes.is_empty() {
        return "no targets".to_string();
    }
    boxes
        .iter()
        .map(|b| {
            let coords = format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2);
            match &b.class_label {
                Some(l) if wordlike(l) => format!("{l} {coords}"),
                _ => coords,
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Run the model over instruction records and emit evaluation records for
/// all four tasks.
///
/// Class and count predictions come from the answered tokens. For records
/// that carry box annotations, the predicted count selects that many tokens
/// by modulation saliency ([`token_saliency`]); their patch rectangles act
/// as predicted boxes, which feed the localization (cell set) and detection
/// (rendered text) records. Caption records and records lacking the needed
/// annotation are skipped.
pub fn prediction_records(
    model: &ToyVlm,
    records: &[TripletRecord],
    base: &Path,
) -> Result<Vec<EvalRecord>, DatasetError> {
    // Recover the class index -> name map from the records themselves.
    let mut class_names: BTreeMap<usize, String> = BTreeMap::new();
    for rec in records {
        let Some(name) = rec.annotations.as_ref().and_then(|a| a.class_label.clone()) else {
            continue;
        };
        for tokens in [&rec.description, &rec.answer].into_iter().flatten() {
            for &t in tokens {
                if let Some(k) = vocab::class_of_token(t) {
                    class_names.entry(k).or_insert_with(|| name.clone());
                }
            }
        }
    }

    let config = model.config().clone();
    let mut out = Vec::new();
    for rec in records {
        let Some(instruction) = &rec.instruction else { continue };
        let sample = rec.to_sample(base)?;
        let answered = predict_answers(model, &sample)?;
        let Some(&token) = answered.first() else { continue };
        let ann = rec.annotations.as_ref();

        match instruction.first() {
            Some(&t) if t == vocab::ASK_CLASS => {
                let Some(gt) = ann.and_then(|a| a.class_label.clone()) else { continue };
                let prediction = vocab::class_of_token(token)
                    .and_then(|k| class_names.get(&k).cloned())
                    .unwrap_or_else(|| format!("token_{token}"));
                out.push(EvalRecord::Classification {
                    image_id: rec.image_id.clone(),
                    prediction,
                    ground_truth: gt,
                });
            }
            Some(&t) if t == vocab::ASK_COUNT => {
                let Some(gt_count) = ann.and_then(|a| a.count) else { continue };
                let predicted_count = vocab::count_of_token(token).unwrap_or(-1);
                out.push(EvalRecord::Counting {
                    image_id: rec.image_id.clone(),
                    prediction: predicted_count,
                    ground_truth: gt_count,
                });

                let (Some(gt_cells), Some(gt_boxes)) = (
                    ann.and_then(|a| a.cells.clone()),
                    ann.and_then(|a| a.boxes.clone()),
                ) else {
                    continue;
                };
                // Saliency-ranked token rectangles as predicted boxes.
                let saliency = token_saliency(model, &sample)?;
                let mut ranked: Vec<usize> = (0..saliency.len()).collect();
                ranked.sort_by(|&a, &b| {
                    saliency[b].partial_cmp(&saliency[a]).unwrap().then(a.cmp(&b))
                });
                let keep = predicted_count.clamp(0, saliency.len() as i64) as usize;
                let p = config.patch as f64;
                let boxes: Vec<BoundingBox> = ranked[..keep]
                    .iter()
                    .map(|&t| {
                        let gh = (t / config.grid_w) as f64;
                        let gw = (t % config.grid_w) as f64;
                        BoundingBox::new(gw * p, gh * p, (gw + 1.0) * p, (gh + 1.0) * p)
                            .expect("patch rectangles are valid")
                    })
                    .collect();
                let image_w = config.image_w() as f64;
                let image_h = config.image_h() as f64;
                out.push(EvalRecord::Localization {
                    image_id: rec.image_id.clone(),
                    prediction: cells_from_boxes(&boxes, image_w, image_h),
                    ground_truth: gt_cells,
                });
                out.push(EvalRecord::Detection {
                    image_id: rec.image_id.clone(),
                    prediction_text: render_boxes_text(&boxes),
                    ground_truth: gt_boxes,
                });
            }
            _ => {}
        }
    }
    Ok(out)
}
