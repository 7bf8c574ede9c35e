//! Experiment orchestration: the command-line front end, a procedural
//! scene dataset with paired degradations, annotation ingestion, checkpoint
//! and image persistence, and the flat key=value configuration format.
//!
//! Everything here is deterministic downstream of one master seed: the seed
//! is split into fixed per-stage sub-seeds, every report embeds the seed
//! and the configuration hash, and checkpoints are written atomically so a
//! rerun with the same configuration reproduces every artifact byte for
//! byte.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::captioner::encode_graph;
use crate::captioner::{
    caption_greedy, tokenize, train_captioner, CaptionSample, CaptionTrainConfig, CaptionerDims,
    CaptionerError, CaptionerModel, EncoderModel, Vocabulary,
};
use crate::captioner::{FEATURE_DIM, GRID};
use crate::decomp::{self, DecompError};
use crate::gradcore::check::{primitive_suite, rel_err, CheckReport, COMPOSITE_TOL, FD_STEP};
use crate::gradcore::{Binding, GradError, Graph, ParamId, ParamStore, Shape, TensorId};
use crate::irs::{
    derain, irs_loss_graph, irs_outputs_graph, train_irs, IrsError, IrsModel, IrsTrainConfig,
};
use crate::metrics::{evaluate_table, EvalCorpus, MetricsError, ModeCorpora};
use crate::rainmodel::{make_sample, DepthMap, HeavyRainSample, Image, RainError, StreakRanges};
use crate::svfms::{
    caption_with_mode, reconstruct_graph, train_nic_s, train_svfm, EvalMode, ModeModels,
    ProposedEncoder, SvfmError, SvfmTrainConfig, SOURCE_PREFIX,
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Filesystem failures, annotated with the path involved.
    #[error("{0}")]
    Io(String),
    /// Malformed annotation JSON; the message carries line and column.
    #[error("annotation parse: {0}")]
    Json(#[from] serde_json::Error),
    /// PNG/JPEG encode or decode failures.
    #[error("image io: {0}")]
    ImageIo(String),
    /// Structural problems in a checkpoint file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Problems in a configuration file.
    #[error("config: {0}")]
    Config(String),
    /// Bad dataset arguments or missing pipeline prerequisites.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Rain(#[from] RainError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Irs(#[from] IrsError),
    #[error(transparent)]
    Captioner(#[from] CaptionerError),
    #[error(transparent)]
    Svfm(#[from] SvfmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Shapes-world scenes
// ---------------------------------------------------------------------------

/// Side length of every generated scene.
pub const SCENE_SIDE: usize = 64;

/// The eight nameable shape colors, as (word, rgb).
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.20, 0.30, 0.85]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("purple", [0.60, 0.25, 0.75]),
    ("orange", [0.90, 0.55, 0.15]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.55, 0.55, 0.55]),
];

/// Dim background tints; kept dark so bright streaks stay visible.
const BACKGROUNDS: [[f32; 3]; 3] = [[0.12, 0.12, 0.15], [0.10, 0.13, 0.10], [0.14, 0.11, 0.13]];

/// Anchor centers of the four scene quadrants, as (x, y).
const QUADRANTS: [(i32, i32); 4] = [(16, 16), (48, 16), (16, 48), (48, 48)];
/// Maximum jitter applied to a quadrant anchor along each axis.
const JITTER: i32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Point test in shape-local coordinates, `half` being the half-extent.
    fn contains(self, dx: i32, dy: i32, half: i32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            // Apex up: the admissible width grows linearly toward the base.
            ShapeKind::Triangle => dy.abs() <= half && 2 * dx.abs() <= dy + half,
        }
    }
}

/// One placed shape: kind, color index into [`COLORS`], center, half-extent,
/// and its depth value (smaller is nearer).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: usize,
    pub cx: i32,
    pub cy: i32,
    pub half: i32,
    pub depth: f32,
}

/// A fully specified scene: background tint, shapes, and the caption set
/// derived deterministically from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesScene {
    pub background: [f32; 3],
    pub shapes: Vec<ShapeSpec>,
    pub captions: Vec<String>,
}

/// Relation of shape `a` to shape `b` as (word, inverse word). Vertical wins
/// ties so every pair has exactly one canonical phrasing.
fn relation(a: &ShapeSpec, b: &ShapeSpec) -> (&'static str, &'static str) {
    let dx = b.cx - a.cx;
    let dy = b.cy - a.cy;
    if dy.abs() >= dx.abs() {
        if dy > 0 {
            ("above", "below")
        } else {
            ("below", "above")
        }
    } else if dx > 0 {
        ("left of", "right of")
    } else {
        ("right of", "left of")
    }
}

fn color_phrase(s: &ShapeSpec) -> String {
    format!("{} {}", COLORS[s.color].0, s.kind.word())
}

/// Captions for a shape list: a single shape gets two determiner variants;
/// each adjacent pair contributes its canonical phrasing and the inverse.
fn scene_captions(shapes: &[ShapeSpec]) -> Vec<String> {
    if shapes.len() == 1 {
        let p = color_phrase(&shapes[0]);
        return vec![format!("a {p}"), format!("the {p}")];
    }
    let mut captions = Vec::new();
    for pair in shapes.windows(2) {
        let (rel, inv) = relation(&pair[0], &pair[1]);
        let (pa, pb) = (color_phrase(&pair[0]), color_phrase(&pair[1]));
        captions.push(format!("a {pa} {rel} a {pb}"));
        captions.push(format!("a {pb} {inv} a {pa}"));
    }
    captions
}

/// Draws one scene: 1–3 shapes on distinct jittered quadrant anchors, so no
/// two shapes can share a center and every shape stays fully on canvas.
fn sample_scene(rng: &mut ChaCha8Rng) -> ShapesScene {
    let n = rng.gen_range(1..=3usize);
    let background = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
    let mut slots = [0usize, 1, 2, 3];
    for i in 0..3 {
        let j = rng.gen_range(i..4);
        slots.swap(i, j);
    }
    let side = SCENE_SIDE as i32;
    let shapes = (0..n)
        .map(|k| {
            let (ax, ay) = QUADRANTS[slots[k]];
            let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            let color = rng.gen_range(0..COLORS.len());
            let cx = ax + rng.gen_range(-JITTER..=JITTER);
            let cy = ay + rng.gen_range(-JITTER..=JITTER);
            let raw = rng.gen_range(6..=12i32);
            let half = raw.min(cx).min(cy).min(side - 1 - cx).min(side - 1 - cy);
            let depth = rng.gen_range(0.1..=0.7f32);
            ShapeSpec {
                kind,
                color,
                cx,
                cy,
                half,
                depth,
            }
        })
        .collect::<Vec<_>>();
    let captions = scene_captions(&shapes);
    ShapesScene {
        background,
        shapes,
        captions,
    }
}

/// Rasterises a scene: background everywhere, then shapes far to near so
/// nearer shapes occlude. The depth map gets 1.0 background and each
/// shape's depth value under the same occlusion order.
fn render_scene(scene: &ShapesScene) -> (Image, DepthMap) {
    let side = SCENE_SIDE;
    let mut img = Image::zeros(side, side);
    for c in 0..3 {
        for i in 0..side * side {
            img.data_mut()[c * side * side + i] = scene.background[c];
        }
    }
    let mut depth = vec![1.0f32; side * side];
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.sort_by(|&a, &b| {
        scene.shapes[b]
            .depth
            .partial_cmp(&scene.shapes[a].depth)
            .unwrap()
    });
    for &si in &order {
        let s = &scene.shapes[si];
        let rgb = COLORS[s.color].1;
        for y in (s.cy - s.half).max(0)..=(s.cy + s.half).min(side as i32 - 1) {
            for x in (s.cx - s.half).max(0)..=(s.cx + s.half).min(side as i32 - 1) {
                if s.kind.contains(x - s.cx, y - s.cy, s.half) {
                    for c in 0..3 {
                        img.set(c, y as usize, x as usize, rgb[c]);
                    }
                    depth[y as usize * side + x as usize] = s.depth;
                }
            }
        }
    }
    (img, DepthMap::new(side, side, depth))
}

/// One generated scene with its rendering and vocabulary-framed captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub scene: ShapesScene,
    pub image: Image,
    pub depth: DepthMap,
    pub samples: Vec<CaptionSample>,
}

/// A scene corpus plus the vocabulary built over all its captions.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub records: Vec<SceneRecord>,
    pub vocab: Vocabulary,
}

impl ShapesDataset {
    /// All (clean image, caption) training pairs, one per caption.
    pub fn caption_pairs(&self) -> Vec<(Image, CaptionSample)> {
        self.records
            .iter()
            .flat_map(|r| r.samples.iter().map(|s| (r.image.clone(), s.clone())))
            .collect()
    }
}

/// Generates `count` scenes. Each scene draws its own sub-seed from the
/// master stream, so scene `i` is identical for every `count > i`; captions
/// are framed against the vocabulary of the whole corpus.
pub fn gen_shapes_dataset(count: usize, seed: u64, max_len: usize) -> Result<ShapesDataset> {
    if count == 0 {
        return Err(HarnessError::Data("scene count must be at least 1".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<ShapesScene> = (0..count)
        .map(|_| {
            let scene_seed = master.gen::<u64>();
            sample_scene(&mut ChaCha8Rng::seed_from_u64(scene_seed))
        })
        .collect();
    let vocab = Vocabulary::build(
        scenes
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str)),
        1,
    );
    let mut records = Vec::with_capacity(count);
    for (i, scene) in scenes.into_iter().enumerate() {
        let image_id = format!("scene_{i:04}");
        let (image, depth) = render_scene(&scene);
        let samples = scene
            .captions
            .iter()
            .map(|c| CaptionSample::new(&image_id, c, &vocab, max_len))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        records.push(SceneRecord {
            image_id,
            scene,
            image,
            depth,
            samples,
        });
    }
    Ok(ShapesDataset { records, vocab })
}

/// Degrades every scene with its own parameter draw from the master stream.
pub fn rain_pairs(
    records: &[SceneRecord],
    ranges: &StreakRanges,
    seed: u64,
) -> Result<Vec<HeavyRainSample>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let sample_seed = master.gen::<u64>();
            Ok(make_sample(&r.image, &r.depth, sample_seed, ranges)?)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Annotation ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CocoRoot {
    images: Vec<CocoImageEntry>,
    annotations: Vec<CocoAnnotationEntry>,
}

#[derive(Deserialize)]
struct CocoImageEntry {
    id: i64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotationEntry {
    image_id: i64,
    caption: String,
}

/// One ingested image with every caption that referenced it.
#[derive(Debug, Clone)]
pub struct CocoRecord {
    pub id: i64,
    pub file_name: String,
    pub image: Image,
    pub captions: Vec<String>,
}

/// The joined annotation corpus plus a vocabulary over its captions and the
/// number of entries that had to be skipped.
#[derive(Debug, Clone)]
pub struct CocoIngest {
    pub records: Vec<CocoRecord>,
    pub vocab: Vocabulary,
    pub warnings: usize,
}

impl CocoIngest {
    /// Framed (image, caption) pairs ready for captioner training.
    pub fn caption_samples(&self, max_len: usize) -> Result<Vec<(Image, CaptionSample)>> {
        let mut out = Vec::new();
        for r in &self.records {
            let id = r.id.to_string();
            for c in &r.captions {
                out.push((
                    r.image.clone(),
                    CaptionSample::new(&id, c, &self.vocab, max_len)?,
                ));
            }
        }
        Ok(out)
    }
}

/// Joins a caption-annotation file against an image directory. Annotations
/// whose image id is unknown, and images whose file is missing or
/// undecodable, are skipped and counted as warnings. Records come back
/// sorted by image id; caption order within a record follows the file.
pub fn ingest_coco_captions(annotations: &Path, image_dir: &Path) -> Result<CocoIngest> {
    let text = fs::read_to_string(annotations).map_err(|e| io_err(annotations, e))?;
    let root: CocoRoot = serde_json::from_str(&text)?;
    let mut by_id: BTreeMap<i64, (String, Vec<String>)> = BTreeMap::new();
    let mut warnings = 0usize;
    for img in &root.images {
        by_id.insert(img.id, (img.file_name.clone(), Vec::new()));
    }
    for ann in &root.annotations {
        match by_id.get_mut(&ann.image_id) {
            Some((_, captions)) => captions.push(ann.caption.clone()),
            None => warnings += 1,
        }
    }
    let mut records = Vec::new();
    for (id, (file_name, captions)) in by_id {
        if captions.is_empty() {
            continue;
        }
        match import_image(&image_dir.join(&file_name)) {
            Ok(image) => records.push(CocoRecord {
                id,
                file_name,
                image,
                captions,
            }),
            Err(_) => warnings += 1,
        }
    }
    let vocab = Vocabulary::build(
        records
            .iter()
            .flat_map(|r| r.captions.iter().map(String::as_str)),
        1,
    );
    Ok(CocoIngest {
        records,
        vocab,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// `(name, extents, row-major payload)` as persisted in checkpoints.
pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RCAP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Every store entry as a persistable tensor.
pub fn store_tensors(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.shape.dims().to_vec(), e.data.clone()))
        .collect()
}

/// Serialises `tensors` and atomically replaces `path` (write to a sibling
/// temporary file, then rename), so a crash never leaves a partial file.
pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, dims, data) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(HarnessError::Checkpoint(format!(
                "duplicate tensor name {name:?}"
            )));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(HarnessError::Checkpoint(format!(
                "tensor {name:?} exceeds the name or rank limits"
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(HarnessError::Checkpoint(format!(
                "tensor {name:?} has an extent beyond 32 bits"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(HarnessError::Checkpoint(format!(
                "tensor {name:?}: payload {} does not match extents {dims:?}",
                data.len()
            )));
        }
    }
    if tensors.len() > u32::MAX as usize {
        return Err(HarnessError::Checkpoint("too many tensors".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| HarnessError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, &buf).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a checkpoint back, rejecting bad magic, unknown versions,
/// truncation, trailing bytes, and duplicate names, all with the offset.
pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(HarnessError::Checkpoint(format!(
                "{}: truncated at byte {} (needed {n} more)",
                path.display(),
                *pos
            )));
        }
        let slice = &buf[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    let magic = take(&mut pos, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(HarnessError::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| {
            HarnessError::Checkpoint(format!("{}: tensor name is not UTF-8", path.display()))
        })?;
        if !seen.insert(name.clone()) {
            return Err(HarnessError::Checkpoint(format!(
                "{}: duplicate tensor name {name:?}",
                path.display()
            )));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let len = dims.iter().product::<usize>();
        let payload = take(&mut pos, len * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, dims, data));
    }
    if pos != buf.len() {
        return Err(HarnessError::Checkpoint(format!(
            "{}: {} trailing bytes after the last tensor",
            path.display(),
            buf.len() - pos
        )));
    }
    Ok(tensors)
}

// ---------------------------------------------------------------------------
// Image files
// ---------------------------------------------------------------------------

/// Writes `image` as 8-bit RGB PNG, clamping to [0,1] then rounding.
pub fn export_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let q = |c: usize| (image.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([q(0), q(1), q(2)]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    out.save(path)
        .map_err(|e| HarnessError::ImageIo(format!("{}: {e}", path.display())))
}

/// Reads a PNG or JPEG back into a float image in [0,1].
pub fn import_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| HarnessError::ImageIo(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = decoded.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(Image::new(h, w, data))
}

/// Grayscale view of a depth map for export.
fn depth_to_image(depth: &DepthMap) -> Image {
    let (h, w) = (depth.height(), depth.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(depth.data());
    }
    Image::new(h, w, data)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything one experiment run needs, settable from a flat key=value
/// file. Unknown keys are rejected so typos cannot silently fall back to
/// defaults; [`ExperimentConfig::dump`] emits the full sorted key set and
/// its SHA-256 is the hash embedded in every report.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Scenes in the degraded training set.
    pub train_count: usize,
    /// Scenes in the held-out evaluation set.
    pub eval_count: usize,
    /// Scenes in the clean captioner training set.
    pub caption_count: usize,
    pub ranges: StreakRanges,
    pub irs: IrsTrainConfig,
    pub dims: CaptionerDims,
    pub cap: CaptionTrainConfig,
    pub svfm: SvfmTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("out"),
            train_count: 50,
            eval_count: 30,
            caption_count: 20,
            ranges: StreakRanges::default(),
            irs: IrsTrainConfig::desk(),
            dims: CaptionerDims::desk(),
            cap: CaptionTrainConfig::desk(),
            svfm: SvfmTrainConfig::desk(),
        }
    }
}

impl ExperimentConfig {
    /// Parses key=value lines; `#` starts a comment, blank lines are
    /// skipped, and unknown keys or unparsable values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| {
                HarnessError::Config(format!("line {line}: key {key}: cannot parse {v:?}"))
            })
        }
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {line}: expected key=value, got {raw:?}"))
            })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = num(key, line, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "data.train_count" => cfg.train_count = num(key, line, v)?,
                "data.eval_count" => cfg.eval_count = num(key, line, v)?,
                "data.caption_count" => cfg.caption_count = num(key, line, v)?,
                "rain.layers_min" => cfg.ranges.layers.0 = num(key, line, v)?,
                "rain.layers_max" => cfg.ranges.layers.1 = num(key, line, v)?,
                "rain.density_min" => cfg.ranges.density.0 = num(key, line, v)?,
                "rain.density_max" => cfg.ranges.density.1 = num(key, line, v)?,
                "rain.sigma_min" => cfg.ranges.sigma.0 = num(key, line, v)?,
                "rain.sigma_max" => cfg.ranges.sigma.1 = num(key, line, v)?,
                "rain.length_min" => cfg.ranges.length.0 = num(key, line, v)?,
                "rain.length_max" => cfg.ranges.length.1 = num(key, line, v)?,
                "rain.angle_min" => cfg.ranges.angle_deg.0 = num(key, line, v)?,
                "rain.angle_max" => cfg.ranges.angle_deg.1 = num(key, line, v)?,
                "rain.brightness_min" => cfg.ranges.brightness.0 = num(key, line, v)?,
                "rain.brightness_max" => cfg.ranges.brightness.1 = num(key, line, v)?,
                "rain.beta_min" => cfg.ranges.beta.0 = num(key, line, v)?,
                "rain.beta_max" => cfg.ranges.beta.1 = num(key, line, v)?,
                "irs.patch" => cfg.irs.patch = num(key, line, v)?,
                "irs.batch" => cfg.irs.batch = num(key, line, v)?,
                "irs.epochs" => cfg.irs.epochs = num(key, line, v)?,
                "irs.lr" => cfg.irs.learning_rate = num(key, line, v)?,
                "irs.dataset_size" => cfg.irs.dataset_size = num(key, line, v)?,
                "cap.attention_dim" => cfg.dims.attention_dim = num(key, line, v)?,
                "cap.hidden_dim" => cfg.dims.hidden_dim = num(key, line, v)?,
                "cap.embed_dim" => cfg.dims.embed_dim = num(key, line, v)?,
                "cap.max_len" => cfg.dims.max_len = num(key, line, v)?,
                "cap.batch" => cfg.cap.batch = num(key, line, v)?,
                "cap.epochs" => cfg.cap.epochs = num(key, line, v)?,
                "cap.lr" => cfg.cap.learning_rate = num(key, line, v)?,
                "svfm.pairs" => cfg.svfm.pairs = num(key, line, v)?,
                "svfm.batch" => cfg.svfm.batch = num(key, line, v)?,
                "svfm.epochs" => cfg.svfm.epochs = num(key, line, v)?,
                "svfm.lr" => cfg.svfm.learning_rate = num(key, line, v)?,
                _ => {
                    return Err(HarnessError::Config(format!(
                        "line {line}: unknown key {key:?}"
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    /// Canonical dump: every key, sorted, one per line. `parse(dump())`
    /// reproduces the configuration exactly.
    pub fn dump(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data.train_count", self.train_count.to_string()),
            ("data.eval_count", self.eval_count.to_string()),
            ("data.caption_count", self.caption_count.to_string()),
            ("rain.layers_min", self.ranges.layers.0.to_string()),
            ("rain.layers_max", self.ranges.layers.1.to_string()),
            ("rain.density_min", self.ranges.density.0.to_string()),
            ("rain.density_max", self.ranges.density.1.to_string()),
            ("rain.sigma_min", self.ranges.sigma.0.to_string()),
            ("rain.sigma_max", self.ranges.sigma.1.to_string()),
            ("rain.length_min", self.ranges.length.0.to_string()),
            ("rain.length_max", self.ranges.length.1.to_string()),
            ("rain.angle_min", self.ranges.angle_deg.0.to_string()),
            ("rain.angle_max", self.ranges.angle_deg.1.to_string()),
            ("rain.brightness_min", self.ranges.brightness.0.to_string()),
            ("rain.brightness_max", self.ranges.brightness.1.to_string()),
            ("rain.beta_min", self.ranges.beta.0.to_string()),
            ("rain.beta_max", self.ranges.beta.1.to_string()),
            ("irs.patch", self.irs.patch.to_string()),
            ("irs.batch", self.irs.batch.to_string()),
            ("irs.epochs", self.irs.epochs.to_string()),
            ("irs.lr", self.irs.learning_rate.to_string()),
            ("irs.dataset_size", self.irs.dataset_size.to_string()),
            ("cap.attention_dim", self.dims.attention_dim.to_string()),
            ("cap.hidden_dim", self.dims.hidden_dim.to_string()),
            ("cap.embed_dim", self.dims.embed_dim.to_string()),
            ("cap.max_len", self.dims.max_len.to_string()),
            ("cap.batch", self.cap.batch.to_string()),
            ("cap.epochs", self.cap.epochs.to_string()),
            ("cap.lr", self.cap.learning_rate.to_string()),
            ("svfm.pairs", self.svfm.pairs.to_string()),
            ("svfm.batch", self.svfm.batch.to_string()),
            ("svfm.epochs", self.svfm.epochs.to_string()),
            ("svfm.lr", self.svfm.learning_rate.to_string()),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical dump, excluding the output location; the
    /// hash names the experiment, and the same experiment written to two
    /// different directories must produce identical artifact bytes.
    pub fn hash(&self) -> String {
        let keyed: String = self
            .dump()
            .lines()
            .filter(|line| !line.starts_with("out="))
            .map(|line| format!("{line}\n"))
            .collect();
        sha256_hex(keyed.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Per-stage sub-seeds
// ---------------------------------------------------------------------------

const SALT_TRAIN_SCENES: u64 = 0xDA7A;
const SALT_TRAIN_RAIN: u64 = 0x4A17;
const SALT_EVAL_SCENES: u64 = 0xE7A1;
const SALT_EVAL_RAIN: u64 = 0xE4A1;
const SALT_CAPTION_SCENES: u64 = 0xCA90;
const SALT_IRS: u64 = 0x1450;
const SALT_CAPTIONER: u64 = 0xCA97;
const SALT_SVFM: u64 = 0x5F30;
const SALT_NICS: u64 = 0x71C5;

/// Degraded-training scene set.
pub fn training_scenes(cfg: &ExperimentConfig) -> Result<ShapesDataset> {
    gen_shapes_dataset(
        cfg.train_count,
        cfg.seed ^ SALT_TRAIN_SCENES,
        cfg.dims.max_len,
    )
}

/// Degradations of the training scenes.
pub fn training_rain(cfg: &ExperimentConfig, ds: &ShapesDataset) -> Result<Vec<HeavyRainSample>> {
    rain_pairs(&ds.records, &cfg.ranges, cfg.seed ^ SALT_TRAIN_RAIN)
}

/// Held-out evaluation scene set.
pub fn evaluation_scenes(cfg: &ExperimentConfig) -> Result<ShapesDataset> {
    gen_shapes_dataset(
        cfg.eval_count,
        cfg.seed ^ SALT_EVAL_SCENES,
        cfg.dims.max_len,
    )
}

/// Degradations of the evaluation scenes.
pub fn evaluation_rain(cfg: &ExperimentConfig, ds: &ShapesDataset) -> Result<Vec<HeavyRainSample>> {
    rain_pairs(&ds.records, &cfg.ranges, cfg.seed ^ SALT_EVAL_RAIN)
}

/// Clean scene set for captioner training.
pub fn caption_scenes(cfg: &ExperimentConfig) -> Result<ShapesDataset> {
    gen_shapes_dataset(
        cfg.caption_count,
        cfg.seed ^ SALT_CAPTION_SCENES,
        cfg.dims.max_len,
    )
}

// ---------------------------------------------------------------------------
// Composite gradient checks
// ---------------------------------------------------------------------------

/// Worst relative error between analytic gradients and central differences
/// for a scalar built over several bound stores; `strides[i]` thins the
/// probed tensors of store `i`, `probes` coordinates each.
fn fd_max_rel_err(
    stores: &[&ParamStore],
    strides: &[usize],
    probes: usize,
    pick_seed: u64,
    build: &dyn Fn(&mut Graph<f64>, &[Binding]) -> TensorId,
) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let bindings: Vec<Binding> = stores.iter().map(|s| s.bind(&mut g, false)).collect();
    let loss = build(&mut g, &bindings);
    g.backward(loss).expect("backward over the checked scalar");
    let analytic: Vec<Vec<Vec<f64>>> = stores
        .iter()
        .zip(&bindings)
        .map(|(s, b)| {
            (0..s.len())
                .map(|i| g.grad_or_zeros(b.id(ParamId(i))).to_vec())
                .collect()
        })
        .collect();
    let mut values: Vec<Vec<Vec<f64>>> = stores
        .iter()
        .map(|s| {
            s.entries()
                .iter()
                .map(|e| e.data.iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect();
    let eval = |values: &[Vec<Vec<f64>>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let bindings: Vec<Binding> = stores
            .iter()
            .zip(values)
            .map(|(s, v)| s.bind_values(&mut g, v))
            .collect();
        let loss = build(&mut g, &bindings);
        g.value(loss)
    };
    let mut pick = ChaCha8Rng::seed_from_u64(pick_seed);
    let mut worst = 0.0f64;
    for (si, &stride) in strides.iter().enumerate() {
        for ti in (0..values[si].len()).step_by(stride.max(1)) {
            for _ in 0..probes {
                let j = pick.gen_range(0..values[si][ti].len());
                let orig = values[si][ti][j];
                values[si][ti][j] = orig + FD_STEP;
                let up = eval(&values);
                values[si][ti][j] = orig - FD_STEP;
                let down = eval(&values);
                values[si][ti][j] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[si][ti][j], numeric));
            }
        }
    }
    worst
}

/// A small synthetic degraded sample for the composite probes.
fn probe_sample(h: usize, w: usize, seed: u64) -> HeavyRainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = Image::new(
        h,
        w,
        (0..3 * h * w).map(|_| rng.gen_range(0.05..0.95)).collect(),
    );
    let depth = DepthMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.2..1.0)).collect());
    let seed = rng.gen();
    make_sample(&clean, &depth, seed, &StreakRanges::default()).expect("valid default ranges")
}

fn to_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

/// Gradient check of the three-term estimator training loss.
pub fn reconstruction_loss_check(seed: u64) -> CheckReport {
    let (h, w) = (16, 16);
    let sample = probe_sample(h, w, seed);
    // The small probe extent needs a window below the default split radius.
    let pair = decomp::decompose(&sample.rained, 4, decomp::DEFAULT_EPS).expect("probe split");
    let irs = IrsModel::init(seed ^ 0xAB);
    let base = to_f64(pair.base.data());
    let detail = to_f64(pair.detail.data());
    let light = to_f64(sample.atmosphere.to_image(h, w).data());
    let transmission = to_f64(sample.transmission.data());
    let streaks = to_f64(sample.streaks.data());
    let model = irs.clone();
    let build = move |g: &mut Graph<f64>, bindings: &[Binding]| -> TensorId {
        let rgb = Shape::new(&[1, 3, h, w]);
        let plane = Shape::new(&[1, 1, h, w]);
        let b = g.leaf(rgb.clone(), base.clone(), false).unwrap();
        let d = g.leaf(rgb.clone(), detail.clone(), false).unwrap();
        let estimates = irs_outputs_graph(g, &model, &bindings[0], b, d).unwrap();
        let a_t = g.leaf(rgb, light.clone(), false).unwrap();
        let t_t = g.leaf(plane.clone(), transmission.clone(), false).unwrap();
        let s_t = g.leaf(plane, streaks.clone(), false).unwrap();
        irs_loss_graph(g, estimates, (a_t, t_t, s_t)).unwrap()
    };
    let worst = fd_max_rel_err(&[irs.store()], &[5], 2, seed ^ 0xF0, &build);
    CheckReport {
        name: "reconstruction_loss".into(),
        max_rel_err: worst,
        tol: COMPOSITE_TOL,
    }
}

/// Gradient check of the feature-matching loss through restoration and the
/// source trunk. The target grid is the initial source output offset by
/// ±0.5 per element, keeping every difference away from the absolute-value
/// kink that would corrupt the finite differences.
pub fn feature_matching_loss_check(seed: u64) -> CheckReport {
    let (h, w) = (32, 32);
    let sample = probe_sample(h, w, seed);
    let pair = decomp::decompose(&sample.rained, decomp::DEFAULT_RADIUS, decomp::DEFAULT_EPS)
        .expect("probe split");
    let irs = IrsModel::init(seed ^ 0xAC);
    let source = EncoderModel::init(SOURCE_PREFIX, seed ^ 0xAD);
    let rained = to_f64(sample.rained.data());
    let base = to_f64(pair.base.data());
    let detail = to_f64(pair.detail.data());
    let features = {
        let (rained, base, detail) = (rained.clone(), base.clone(), detail.clone());
        let irs = irs.clone();
        let source = source.clone();
        move |g: &mut Graph<f64>, irs_b: &Binding, src_b: &Binding| -> TensorId {
            let rgb = Shape::new(&[1, 3, h, w]);
            let r = g.leaf(rgb.clone(), rained.clone(), false).unwrap();
            let b = g.leaf(rgb.clone(), base.clone(), false).unwrap();
            let d = g.leaf(rgb, detail.clone(), false).unwrap();
            let restored = reconstruct_graph(g, &irs, irs_b, r, b, d).unwrap();
            encode_graph(g, &source, src_b, restored).unwrap()
        }
    };
    let target: Vec<f64> = {
        let mut g: Graph<f64> = Graph::new();
        let irs_b = irs.store().bind(&mut g, true);
        let src_b = source.store().bind(&mut g, true);
        let f_s = features(&mut g, &irs_b, &src_b);
        g.data(f_s)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + if i % 2 == 0 { 0.5 } else { -0.5 })
            .collect()
    };
    let build = move |g: &mut Graph<f64>, bindings: &[Binding]| -> TensorId {
        let f_s = features(g, &bindings[0], &bindings[1]);
        let f_t = g
            .leaf(
                Shape::new(&[GRID * GRID, FEATURE_DIM]),
                target.clone(),
                false,
            )
            .unwrap();
        g.l1_loss(f_s, f_t).unwrap()
    };
    let worst = fd_max_rel_err(
        &[irs.store(), source.store()],
        &[8, 4],
        2,
        seed ^ 0xF1,
        &build,
    );
    CheckReport {
        name: "feature_matching_loss".into(),
        max_rel_err: worst,
        tol: COMPOSITE_TOL,
    }
}

/// The two multi-stage gradient checks.
pub fn composite_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        reconstruction_loss_check(seed),
        feature_matching_loss_check(seed ^ 0x1),
    ]
}

// ---------------------------------------------------------------------------
// Checkpoint-backed model loading
// ---------------------------------------------------------------------------

const IRS_CKPT: &str = "irs.rcap";
const CAP_CKPT: &str = "cap.rcap";
const VOCAB_FILE: &str = "vocab.txt";
const SVFM_CKPT: &str = "svfm.rcap";
const NICS_CKPT: &str = "nic_s.rcap";

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::Data(format!(
            "{} not found; run `{produced_by}` first",
            path.display()
        )))
    }
}

fn load_irs_model(path: &Path) -> Result<IrsModel> {
    let tensors = load_checkpoint(path)?;
    let mut model = IrsModel::init(0);
    model.store_mut().load_named(&tensors)?;
    Ok(model)
}

fn load_encoder(path: &Path, prefix: &str) -> Result<EncoderModel> {
    let tensors = load_checkpoint(path)?;
    let mut model = EncoderModel::init(prefix, 0);
    model.store_mut().load_named(&tensors)?;
    Ok(model)
}

fn load_proposed(path: &Path) -> Result<ProposedEncoder> {
    let tensors = load_checkpoint(path)?;
    let mut irs = IrsModel::init(0);
    irs.store_mut().load_named(&tensors)?;
    let mut source = EncoderModel::init(SOURCE_PREFIX, 0);
    source.store_mut().load_named(&tensors)?;
    Ok(ProposedEncoder { irs, source })
}

fn load_captioner_model(out: &Path, dims: &CaptionerDims) -> Result<CaptionerModel> {
    let vocab_path = out.join(VOCAB_FILE);
    require(&vocab_path, "train-captioner")?;
    let vocab = Vocabulary::from_lines(
        &fs::read_to_string(&vocab_path).map_err(|e| io_err(&vocab_path, e))?,
    )?;
    let ckpt = out.join(CAP_CKPT);
    require(&ckpt, "train-captioner")?;
    let tensors = load_checkpoint(&ckpt)?;
    let mut model = CaptionerModel::init(vocab, dims.clone(), 0)?;
    model.enc.store_mut().load_named(&tensors)?;
    model.att.store_mut().load_named(&tensors)?;
    model.dec.store_mut().load_named(&tensors)?;
    Ok(model)
}

fn save_stores(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    let tensors: Vec<NamedTensor> = stores.iter().flat_map(|s| store_tensors(s)).collect();
    save_checkpoint(path, &tensors)
}

// ---------------------------------------------------------------------------
// Report and artifact writers
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn loss_tsv(history: &[f32], cfg: &ExperimentConfig) -> String {
    let mut out = format!("# seed={} config={}\nepoch\tloss\n", cfg.seed, cfg.hash());
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i}\t{l:.6}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn run_gen_data(cfg: &ExperimentConfig, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.train_count);
    let ds = gen_shapes_dataset(count, cfg.seed ^ SALT_TRAIN_SCENES, cfg.dims.max_len)?;
    let rains = rain_pairs(&ds.records, &cfg.ranges, cfg.seed ^ SALT_TRAIN_RAIN)?;
    let data_dir = cfg.out.join("data");
    for (rec, rain) in ds.records.iter().zip(&rains) {
        let dir = data_dir.join(&rec.image_id);
        export_image(&rec.image, &dir.join("clean.png"))?;
        export_image(&rain.rained, &dir.join("rained.png"))?;
        export_image(&depth_to_image(&rec.depth), &dir.join("depth.png"))?;
        let mut captions = rec.scene.captions.join("\n");
        captions.push('\n');
        write_text(&dir.join("captions.txt"), &captions)?;
    }
    write_text(&data_dir.join("vocab.txt"), &ds.vocab.to_lines())?;
    println!(
        "wrote {count} scenes ({} captions, {}-word vocabulary) under {}",
        ds.records.iter().map(|r| r.samples.len()).sum::<usize>(),
        ds.vocab.len(),
        data_dir.display()
    );
    Ok(())
}

fn run_decompose(cfg: &ExperimentConfig, input: &Path) -> Result<()> {
    let image = import_image(input)?;
    let pair = decomp::decompose(&image, decomp::DEFAULT_RADIUS, decomp::DEFAULT_EPS)?;
    export_image(&pair.base, &cfg.out.join("base.png"))?;
    // The residual is signed; shift it into view.
    export_image(&pair.detail.map(|v| v + 0.5), &cfg.out.join("detail.png"))?;
    println!(
        "wrote {}/base.png and {}/detail.png (residual shown +0.5)",
        cfg.out.display(),
        cfg.out.display()
    );
    Ok(())
}

fn run_train_irs(cfg: &ExperimentConfig) -> Result<()> {
    let ds = training_scenes(cfg)?;
    let rains = training_rain(cfg, &ds)?;
    let outcome = train_irs(&rains, &cfg.irs, cfg.seed ^ SALT_IRS)?;
    save_stores(&cfg.out.join(IRS_CKPT), &[outcome.model.store()])?;
    write_text(
        &cfg.out.join("irs_loss.tsv"),
        &loss_tsv(&outcome.loss_history, cfg),
    )?;
    println!(
        "estimator loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
        outcome.loss_history.first().copied().unwrap_or(f32::NAN),
        outcome.loss_history.last().copied().unwrap_or(f32::NAN),
        outcome.loss_history.len(),
        cfg.out.join(IRS_CKPT).display()
    );
    Ok(())
}

fn run_derain(cfg: &ExperimentConfig, input: &Path) -> Result<()> {
    let ckpt = cfg.out.join(IRS_CKPT);
    require(&ckpt, "train-irs")?;
    let model = load_irs_model(&ckpt)?;
    let image = import_image(input)?;
    let restored = derain(&image, &model)?;
    export_image(&restored, &cfg.out.join("derained.png"))?;
    println!("wrote {}/derained.png", cfg.out.display());
    Ok(())
}

fn run_train_captioner(cfg: &ExperimentConfig) -> Result<()> {
    let ds = caption_scenes(cfg)?;
    let pairs = ds.caption_pairs();
    let model = CaptionerModel::init(
        ds.vocab.clone(),
        cfg.dims.clone(),
        cfg.seed ^ SALT_CAPTIONER,
    )?;
    let outcome = train_captioner(&pairs, model, &cfg.cap, cfg.seed ^ SALT_CAPTIONER)?;
    save_stores(
        &cfg.out.join(CAP_CKPT),
        &[
            outcome.model.enc.store(),
            outcome.model.att.store(),
            outcome.model.dec.store(),
        ],
    )?;
    write_text(&cfg.out.join(VOCAB_FILE), &outcome.model.vocab.to_lines())?;
    write_text(
        &cfg.out.join("cap_loss.tsv"),
        &loss_tsv(&outcome.loss_history, cfg),
    )?;
    println!(
        "captioner loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
        outcome.loss_history.first().copied().unwrap_or(f32::NAN),
        outcome.loss_history.last().copied().unwrap_or(f32::NAN),
        outcome.loss_history.len(),
        cfg.out.join(CAP_CKPT).display()
    );
    Ok(())
}

/// The degraded/clean image pairs shared by both adaptation stages.
fn adaptation_pairs(cfg: &ExperimentConfig) -> Result<Vec<(Image, Image)>> {
    let ds = training_scenes(cfg)?;
    let rains = training_rain(cfg, &ds)?;
    Ok(rains
        .iter()
        .map(|s| (s.rained.clone(), s.clean.clone()))
        .collect())
}

fn run_train_svfm(cfg: &ExperimentConfig) -> Result<()> {
    let cap_ckpt = cfg.out.join(CAP_CKPT);
    require(&cap_ckpt, "train-captioner")?;
    let target = load_encoder(&cap_ckpt, "cap.enc")?;
    let irs_ckpt = cfg.out.join(IRS_CKPT);
    require(&irs_ckpt, "train-irs")?;
    let init_irs = load_irs_model(&irs_ckpt)?;
    let pairs = adaptation_pairs(cfg)?;
    let outcome = train_svfm(&pairs, &target, &init_irs, &cfg.svfm, cfg.seed ^ SALT_SVFM)?;
    save_stores(
        &cfg.out.join(SVFM_CKPT),
        &[outcome.model.irs.store(), outcome.model.source.store()],
    )?;
    write_text(
        &cfg.out.join("svfm_loss.tsv"),
        &loss_tsv(&outcome.loss_history, cfg),
    )?;
    println!(
        "matching loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
        outcome.loss_history.first().copied().unwrap_or(f32::NAN),
        outcome.loss_history.last().copied().unwrap_or(f32::NAN),
        outcome.loss_history.len(),
        cfg.out.join(SVFM_CKPT).display()
    );
    Ok(())
}

fn run_train_nic_s(cfg: &ExperimentConfig) -> Result<()> {
    let cap_ckpt = cfg.out.join(CAP_CKPT);
    require(&cap_ckpt, "train-captioner")?;
    let target = load_encoder(&cap_ckpt, "cap.enc")?;
    let pairs = adaptation_pairs(cfg)?;
    let outcome = train_nic_s(&pairs, &target, &cfg.svfm, cfg.seed ^ SALT_NICS)?;
    save_stores(&cfg.out.join(NICS_CKPT), &[outcome.encoder.store()])?;
    write_text(
        &cfg.out.join("nic_s_loss.tsv"),
        &loss_tsv(&outcome.loss_history, cfg),
    )?;
    println!(
        "direct matching loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
        outcome.loss_history.first().copied().unwrap_or(f32::NAN),
        outcome.loss_history.last().copied().unwrap_or(f32::NAN),
        outcome.loss_history.len(),
        cfg.out.join(NICS_CKPT).display()
    );
    Ok(())
}

fn run_caption(cfg: &ExperimentConfig, input: &Path, mode: EvalMode) -> Result<()> {
    let captioner = load_captioner_model(&cfg.out, &cfg.dims)?;
    let mut models = ModeModels {
        captioner,
        irs: None,
        nic_s: None,
        proposed: None,
    };
    match mode {
        EvalMode::NicT => {}
        EvalMode::NicS => {
            let ckpt = cfg.out.join(NICS_CKPT);
            require(&ckpt, "train-nic-s")?;
            models.nic_s = Some(load_encoder(&ckpt, SOURCE_PREFIX)?);
        }
        EvalMode::NicTD => {
            let ckpt = cfg.out.join(IRS_CKPT);
            require(&ckpt, "train-irs")?;
            models.irs = Some(load_irs_model(&ckpt)?);
        }
        EvalMode::Proposed => {
            let ckpt = cfg.out.join(SVFM_CKPT);
            require(&ckpt, "train-svfm")?;
            models.proposed = Some(load_proposed(&ckpt)?);
        }
    }
    let image = import_image(input)?;
    let words = caption_with_mode(&image, mode, &models)?;
    let line = words.join(" ");
    println!("{mode}: {line}");
    write_text(&cfg.out.join("caption.txt"), &format!("{line}\n"))?;
    Ok(())
}

fn run_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.eval_count < 2 {
        return Err(HarnessError::Data(
            "evaluation needs at least 2 scenes (set data.eval_count)".into(),
        ));
    }
    let captioner = load_captioner_model(&cfg.out, &cfg.dims)?;
    let irs_ckpt = cfg.out.join(IRS_CKPT);
    require(&irs_ckpt, "train-irs")?;
    let nics_ckpt = cfg.out.join(NICS_CKPT);
    require(&nics_ckpt, "train-nic-s")?;
    let svfm_ckpt = cfg.out.join(SVFM_CKPT);
    require(&svfm_ckpt, "train-svfm")?;
    let models = ModeModels {
        captioner,
        irs: Some(load_irs_model(&irs_ckpt)?),
        nic_s: Some(load_encoder(&nics_ckpt, SOURCE_PREFIX)?),
        proposed: Some(load_proposed(&svfm_ckpt)?),
    };
    let ds = evaluation_scenes(cfg)?;
    let rains = evaluation_rain(cfg, &ds)?;
    let mut corpora = ModeCorpora {
        nic_t: EvalCorpus::new(),
        nic_s: EvalCorpus::new(),
        nic_t_d: EvalCorpus::new(),
        proposed: EvalCorpus::new(),
        clean_nic_t: EvalCorpus::new(),
    };
    for (rec, rain) in ds.records.iter().zip(&rains) {
        let refs: Vec<Vec<String>> = rec.scene.captions.iter().map(|c| tokenize(c)).collect();
        for mode in EvalMode::ALL {
            let hyp = caption_with_mode(&rain.rained, mode, &models)?;
            let corpus = match mode {
                EvalMode::NicT => &mut corpora.nic_t,
                EvalMode::NicS => &mut corpora.nic_s,
                EvalMode::NicTD => &mut corpora.nic_t_d,
                EvalMode::Proposed => &mut corpora.proposed,
            };
            corpus.insert(&rec.image_id, hyp, refs.clone())?;
        }
        let clean_hyp = caption_greedy(&rec.image, &models.captioner)?;
        corpora.clean_nic_t.insert(&rec.image_id, clean_hyp, refs)?;
    }
    let report = evaluate_table(&corpora, cfg.seed, &cfg.hash())?;
    write_text(&cfg.out.join("report.tsv"), &report.to_tsv())?;
    write_text(&cfg.out.join("report.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    let mut reports = primitive_suite(&[cfg.seed, cfg.seed ^ 0x9E37]);
    reports.extend(composite_suite(cfg.seed));
    let mut text = format!("# seed={} config={}\n", cfg.seed, cfg.hash());
    let mut failed = 0usize;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        let line = format!(
            "{:<28} max rel err {:>10.3e}  tol {:.0e}  {verdict}",
            r.name, r.max_rel_err, r.tol
        );
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    write_text(&cfg.out.join("gradcheck.txt"), &text)?;
    if failed > 0 {
        return Err(HarnessError::Data(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse()
}

#[derive(Debug, Parser)]
#[command(
    name = "raincap",
    version,
    about = "Rain-degraded image captioning: restoration, feature matching, and evaluation"
)]
struct Cli {
    /// Key=value experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render procedural scenes with depths, captions, and degraded pairs.
    GenData {
        /// How many scenes (defaults to data.train_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Split an image into its smooth layer and residual.
    Decompose { input: PathBuf },
    /// Train the light/transmission/streak estimators.
    TrainIrs,
    /// Restore one degraded image with the trained estimators.
    Derain { input: PathBuf },
    /// Train the attention captioner on clean scenes.
    TrainCaptioner,
    /// Adapt a source encoder through restoration toward frozen features.
    TrainSvfm,
    /// Adapt a source encoder directly on degraded inputs.
    TrainNicS,
    /// Caption one image along a chosen encoder routing.
    Caption {
        input: PathBuf,
        /// One of nic_t, nic_s, nic_t_d, proposed.
        #[arg(long, default_value = "nic_t", value_parser = parse_mode)]
        mode: EvalMode,
    },
    /// Score every routing on held-out degraded scenes.
    Evaluate,
    /// Run the finite-difference gradient suites.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    match cli.command {
        Command::GenData { count } => run_gen_data(&cfg, count),
        Command::Decompose { input } => run_decompose(&cfg, &input),
        Command::TrainIrs => run_train_irs(&cfg),
        Command::Derain { input } => run_derain(&cfg, &input),
        Command::TrainCaptioner => run_train_captioner(&cfg),
        Command::TrainSvfm => run_train_svfm(&cfg),
        Command::TrainNicS => run_train_nic_s(&cfg),
        Command::Caption { input, mode } => run_caption(&cfg, &input, mode),
        Command::Evaluate => run_evaluate(&cfg),
        Command::Gradcheck => run_gradcheck(&cfg),
    }
}

/// Full command-line entry point. Returns the process exit code: 0 on
/// success (including help/version), 1 on usage errors, 2 on data errors.
pub fn cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage_ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if usage_ok { 0 } else { 1 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{END, START, UNK};
    use tempfile::tempdir;

    #[test]
    fn scene_generation_is_deterministic_and_prefix_stable() {
        let a = gen_shapes_dataset(5, 9, 20).unwrap();
        let b = gen_shapes_dataset(5, 9, 20).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra, rb);
        }
        assert_eq!(a.vocab.to_lines(), b.vocab.to_lines());
        // Scene i only consumes the i-th sub-seed, so prefixes agree across
        // different counts (the vocabulary may differ, the scenes do not).
        let c = gen_shapes_dataset(3, 9, 20).unwrap();
        for (ra, rc) in a.records.iter().zip(&c.records) {
            assert_eq!(ra.scene, rc.scene);
            assert_eq!(ra.image, rc.image);
        }
    }

    /// Independent parser: walks a caption and checks every mention and the
    /// relation against the scene geometry itself.
    fn check_caption_against_scene(caption: &str, scene: &ShapesScene) {
        let toks = tokenize(caption);
        let color_words: Vec<&str> = COLORS.iter().map(|(w, _)| *w).collect();
        let mut mentions: Vec<(String, String)> = Vec::new();
        let mut rel: Option<String> = None;
        let mut i = 0;
        while i < toks.len() {
            match toks[i].as_str() {
                "a" | "the" => i += 1,
                "above" | "below" => {
                    rel = Some(toks[i].clone());
                    i += 1;
                }
                "left" | "right" => {
                    assert_eq!(toks[i + 1], "of", "in {caption:?}");
                    rel = Some(format!("{} of", toks[i]));
                    i += 2;
                }
                w if color_words.contains(&w) => {
                    mentions.push((w.to_string(), toks[i + 1].clone()));
                    i += 2;
                }
                other => panic!("unparsable token {other:?} in {caption:?}"),
            }
        }
        let matches =
            |m: &(String, String), s: &ShapeSpec| COLORS[s.color].0 == m.0 && s.kind.word() == m.1;
        match mentions.len() {
            1 => {
                assert!(rel.is_none());
                assert!(scene.shapes.iter().any(|s| matches(&mentions[0], s)));
            }
            2 => {
                let rel = rel.expect("two mentions need a relation");
                // Some adjacent pair must carry this phrasing in either
                // direction, judged from raw coordinates.
                let ok = scene.shapes.windows(2).any(|p| {
                    let geom = |a: &ShapeSpec, b: &ShapeSpec| {
                        let (dx, dy) = (b.cx - a.cx, b.cy - a.cy);
                        if dy.abs() >= dx.abs() {
                            if dy > 0 {
                                "above"
                            } else {
                                "below"
                            }
                        } else if dx > 0 {
                            "left of"
                        } else {
                            "right of"
                        }
                        .to_string()
                    };
                    (matches(&mentions[0], &p[0])
                        && matches(&mentions[1], &p[1])
                        && geom(&p[0], &p[1]) == rel)
                        || (matches(&mentions[0], &p[1])
                            && matches(&mentions[1], &p[0])
                            && geom(&p[1], &p[0]) == rel)
                });
                assert!(ok, "{caption:?} does not match the scene layout");
            }
            n => panic!("{n} mentions in {caption:?}"),
        }
    }

    #[test]
    fn captions_parse_back_to_scene_attributes() {
        let ds = gen_shapes_dataset(50, 21, 20).unwrap();
        for rec in &ds.records {
            assert!(!rec.scene.captions.is_empty() && rec.scene.captions.len() <= 5);
            for caption in &rec.scene.captions {
                check_caption_against_scene(caption, &rec.scene);
            }
        }
    }

    #[test]
    fn scenes_place_shapes_apart_and_in_bounds() {
        let ds = gen_shapes_dataset(80, 3, 20).unwrap();
        for rec in &ds.records {
            let shapes = &rec.scene.shapes;
            assert!((1..=3).contains(&shapes.len()));
            for s in shapes {
                assert!(s.half >= 6);
                assert!(s.cx - s.half >= 0 && s.cy - s.half >= 0);
                assert!(s.cx + s.half <= 63 && s.cy + s.half <= 63);
                assert!((0.1..=0.7).contains(&s.depth));
            }
            for i in 0..shapes.len() {
                for j in i + 1..shapes.len() {
                    let (dx, dy) = (shapes[i].cx - shapes[j].cx, shapes[i].cy - shapes[j].cy);
                    assert!(dx != 0 || dy != 0, "centers coincide");
                    assert!(dx * dx + dy * dy >= 20 * 20, "centers too close");
                }
            }
            // Depth map values are exactly background or one of the shapes.
            for &d in rec.depth.data() {
                assert!(d == 1.0 || shapes.iter().any(|s| s.depth == d));
            }
        }
    }

    #[test]
    fn vocabulary_covers_every_attribute_word() {
        let ds = gen_shapes_dataset(200, 17, 20).unwrap();
        let mut words: Vec<&str> = COLORS.iter().map(|(w, _)| *w).collect();
        words.extend(["circle", "square", "triangle"]);
        words.extend(["above", "below", "left", "right", "of", "a", "the"]);
        for w in words {
            assert_ne!(ds.vocab.id(w), UNK, "vocabulary is missing {w:?}");
        }
        assert!(ds.vocab.len() <= 40, "vocabulary grew past 40 entries");
        for rec in &ds.records {
            for s in &rec.samples {
                assert_eq!(s.ids.first(), Some(&START));
                assert_eq!(s.ids.last(), Some(&END));
                assert!(!s.ids.contains(&UNK));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rcap");
        let tensors: Vec<NamedTensor> = vec![
            (
                "enc.w".into(),
                vec![2, 3],
                vec![0.5, -1.25, 3.5e-8, 0.0, -0.0, f32::MIN_POSITIVE],
            ),
            ("enc.b".into(), vec![3], vec![1.0, 2.0, 3.0]),
            ("scalar".into(), vec![], vec![42.0]),
        ];
        save_checkpoint(&path, &tensors).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(tensors, loaded);
        // Saving over an existing file replaces it atomically and leaves no
        // temporary sibling behind.
        save_checkpoint(&path, &tensors[..2].to_vec()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().len(), 2);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers, vec![std::ffi::OsString::from("model.rcap")]);
    }

    #[test]
    fn checkpoint_rejects_structural_damage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rcap");
        let tensors: Vec<NamedTensor> = vec![("w".into(), vec![2], vec![1.0, 2.0])];
        save_checkpoint(&path, &tensors).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let bad_version = {
            let mut b = good.clone();
            b[4] = 9;
            b
        };
        let truncated = good[..good.len() - 3].to_vec();
        let trailing = {
            let mut b = good.clone();
            b.push(0);
            b
        };
        for (bytes, needle) in [
            (bad_magic, "bad magic"),
            (bad_version, "unsupported version"),
            (truncated, "truncated"),
            (trailing, "trailing"),
        ] {
            fs::write(&path, &bytes).unwrap();
            let err = load_checkpoint(&path).unwrap_err().to_string();
            assert!(err.contains(needle), "{err:?} missing {needle:?}");
        }

        let dup: Vec<NamedTensor> = vec![
            ("w".into(), vec![1], vec![1.0]),
            ("w".into(), vec![1], vec![2.0]),
        ];
        let err = save_checkpoint(&path, &dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"));
        let mismatched: Vec<NamedTensor> = vec![("w".into(), vec![3], vec![1.0])];
        let err = save_checkpoint(&path, &mismatched).unwrap_err().to_string();
        assert!(err.contains("does not match"));
    }

    #[test]
    fn thousand_tensor_checkpoint_survives_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.rcap");
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let tensors: Vec<NamedTensor> = (0..1000)
            .map(|i| {
                let rank = rng.gen_range(0..=3usize);
                let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
                let len = dims.iter().product::<usize>();
                let data = (0..len).map(|_| rng.gen_range(-10.0..10.0f32)).collect();
                (format!("tensor_{i:04}"), dims, data)
            })
            .collect();
        save_checkpoint(&path, &tensors).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(tensors, loaded);
        // Re-saving what was loaded reproduces the file hash exactly.
        save_checkpoint(&path, &loaded).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(sha256_hex(&first), sha256_hex(&second));
    }

    #[test]
    fn png_round_trips_within_quantisation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Exhaustive 8-bit ramp: every representable level must survive.
        let levels = 256;
        let ramp = Image::new(
            1,
            levels,
            (0..3 * levels)
                .map(|i| (i % levels) as f32 / 255.0)
                .collect(),
        );
        export_image(&ramp, &path).unwrap();
        let back = import_image(&path).unwrap();
        assert_eq!(ramp.data(), back.data());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = Image::new(7, 9, (0..3 * 63).map(|_| rng.gen_range(0.0..1.0)).collect());
        export_image(&noisy, &path).unwrap();
        let back = import_image(&path).unwrap();
        let worst = noisy
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 255.0 + 1e-6, "round trip error {worst}");

        // Out-of-range values clamp to the endpoints, never wrap.
        let wild = Image::new(1, 2, vec![-0.5, 1.5, -3.0, 2.0, -0.1, 1.1]);
        export_image(&wild, &path).unwrap();
        let back = import_image(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn annotation_ingestion_joins_and_warns() {
        let dir = tempdir().unwrap();
        let img_path = dir.path().join("im0.png");
        export_image(&Image::splat(8, 8, 0.5), &img_path).unwrap();

        // Minimal one-image, one-caption file.
        let ann = dir.path().join("minimal.json");
        fs::write(
            &ann,
            r#"{"images":[{"id":3,"file_name":"im0.png","height":8,"width":8}],
               "annotations":[{"image_id":3,"caption":"a red circle","id":900}]}"#,
        )
        .unwrap();
        let got = ingest_coco_captions(&ann, dir.path()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.warnings, 0);
        assert_eq!(got.records[0].captions, vec!["a red circle"]);

        // Unknown image id and missing file each count one warning.
        let ann = dir.path().join("warny.json");
        fs::write(
            &ann,
            r#"{"images":[{"id":9,"file_name":"gone.png"}],
               "annotations":[{"image_id":9,"caption":"lost"},{"image_id":77,"caption":"ghost"}]}"#,
        )
        .unwrap();
        let got = ingest_coco_captions(&ann, dir.path()).unwrap();
        assert_eq!((got.records.len(), got.warnings), (0, 2));

        // Five captions against one image become one record with five
        // framed samples.
        let ann = dir.path().join("five.json");
        let captions: Vec<String> = (0..5)
            .map(|i| format!(r#"{{"image_id":3,"caption":"caption number {i}"}}"#))
            .collect();
        fs::write(
            &ann,
            format!(
                r#"{{"images":[{{"id":3,"file_name":"im0.png"}}],"annotations":[{}]}}"#,
                captions.join(",")
            ),
        )
        .unwrap();
        let got = ingest_coco_captions(&ann, dir.path()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records[0].captions.len(), 5);
        let samples = got.caption_samples(16).unwrap();
        assert_eq!(samples.len(), 5);
        assert!(samples.iter().all(|(_, s)| s.ids.first() == Some(&START)));

        // Malformed JSON is rejected with a position.
        let ann = dir.path().join("broken.json");
        fs::write(&ann, "{\"images\": [,]}").unwrap();
        let err = ingest_coco_captions(&ann, dir.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line"), "{err:?} carries no position");
    }

    #[test]
    fn config_round_trips_and_rejects_typos() {
        let cfg = ExperimentConfig::default();
        let dumped = cfg.dump();
        assert_eq!(ExperimentConfig::parse(&dumped).unwrap(), cfg);
        // Sorted: every line's key is >= its predecessor's.
        let keys: Vec<&str> = dumped
            .lines()
            .map(|l| l.split('=').next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert_eq!(cfg.hash(), cfg.hash());

        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(cfg.hash(), other.hash());
        // Where results land is not part of the experiment's identity.
        let mut moved = cfg.clone();
        moved.out = PathBuf::from("elsewhere");
        assert_eq!(cfg.hash(), moved.hash());

        let parsed =
            ExperimentConfig::parse("# comment\n\nseed = 11\nirs.lr = 0.01 # inline\n").unwrap();
        assert_eq!(parsed.seed, 11);
        assert_eq!(parsed.irs.learning_rate, 0.01);

        let err = ExperimentConfig::parse("seeed=1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown key") && err.contains("line 1"));
        let err = ExperimentConfig::parse("seed=\n\nseed=x\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("cannot parse"));
        let err = ExperimentConfig::parse("just words\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected key=value"));
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for report in composite_suite(3) {
            assert!(
                report.passed(),
                "{}: max rel err {} over tol {}",
                report.name,
                report.max_rel_err,
                report.tol
            );
        }
    }

    #[test]
    fn cli_maps_failures_to_exit_codes() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("out");
        let out_s = out.to_str().unwrap();
        assert_eq!(cli(["raincap", "definitely-not-a-command"]), 1);
        assert_eq!(cli(["raincap", "--help"]), 0);
        assert_eq!(cli(["raincap", "--version"]), 0);
        // A routed caption without its checkpoints is a data error.
        let png = dir.path().join("input.png");
        export_image(&Image::splat(32, 32, 0.3), &png).unwrap();
        assert_eq!(
            cli([
                "raincap",
                "--out",
                out_s,
                "caption",
                png.to_str().unwrap(),
                "--mode",
                "proposed"
            ]),
            2
        );
        // An unknown mode is a usage error.
        assert_eq!(
            cli([
                "raincap",
                "--out",
                out_s,
                "caption",
                png.to_str().unwrap(),
                "--mode",
                "bogus"
            ]),
            1
        );
        // A config with a typo is a data error at run time.
        let cfg_path = dir.path().join("bad.cfg");
        fs::write(&cfg_path, "sede=1\n").unwrap();
        assert_eq!(
            cli([
                "raincap",
                "--config",
                cfg_path.to_str().unwrap(),
                "gen-data"
            ]),
            2
        );
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            for entry in fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(&path, root, out);
                } else {
                    let rel = path
                        .strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned();
                    out.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        let mut out = Vec::new();
        walk(root, root, &mut out);
        out.sort();
        out
    }

    #[test]
    fn cli_gen_data_reruns_byte_identically() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&a, &b] {
            let code = cli([
                "raincap",
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "5",
                "gen-data",
                "--count",
                "3",
            ]);
            assert_eq!(code, 0);
        }
        let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
        assert_eq!(ta.len(), 3 * 4 + 1, "unexpected artifact count");
        assert_eq!(ta, tb);
    }
}
