//! Captioned synthetic videos: one colored shape translating across a black
//! frame. Provides the scene grid, the renderer, the dataset writer/reader
//! and the attribute probe that scores generated videos against captions.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Row-major `side x side` occupancy mask.
    pub fn mask(self, side: usize) -> Vec<bool> {
        let r = side as f64 / 2.0;
        let mut m = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                m.push(match self {
                    Shape::Square => true,
                    Shape::Circle => {
                        let (dx, dy) = (x as f64 + 0.5 - r, y as f64 + 0.5 - r);
                        dx * dx + dy * dy <= r * r
                    }
                    Shape::Triangle => x <= y,
                });
            }
        }
        m
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn from_channel(c: usize) -> Option<Color> {
        Color::ALL.get(c).copied()
    }
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }

    /// Unit displacement `(dx, dy)` in pixel coordinates (y grows downward).
    pub fn delta(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }
}

pub const SPEEDS: [u32; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    /// Pixels per frame.
    pub speed: u32,
    /// Top-left `(x, y)` of the object's bounding box in the first frame.
    pub start: (i64, i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoDims {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl VideoDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        VideoDims { c: 3, t, h, w }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.t, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for VideoDims {
    fn default() -> Self {
        VideoDims::new(8, 16, 16)
    }
}

impl fmt::Display for VideoDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.t, self.h, self.w)
    }
}

/// Side of the object's bounding box: a quarter of the frame height,
/// rounded up.
pub fn object_side(dims: &VideoDims) -> usize {
    dims.h.div_ceil(4)
}

pub fn caption_of(spec: &SceneSpec) -> String {
    format!(
        "a {} {} moves {}",
        spec.color.name(),
        spec.shape.name(),
        spec.motion.name()
    )
}

fn top_left_at(spec: &SceneSpec, frame: usize) -> (i64, i64) {
    let (dx, dy) = spec.motion.delta();
    let step = spec.speed as i64 * frame as i64;
    (spec.start.0 + dx * step, spec.start.1 + dy * step)
}

pub fn trajectory_fits(spec: &SceneSpec, dims: &VideoDims) -> bool {
    let s = object_side(dims) as i64;
    [0, dims.t.saturating_sub(1)].iter().all(|&f| {
        let (x, y) = top_left_at(spec, f);
        x >= 0 && y >= 0 && x + s <= dims.w as i64 && y + s <= dims.h as i64
    })
}

pub fn render(spec: &SceneSpec, dims: &VideoDims) -> Result<Tensor> {
    if dims.c != 3 || dims.t == 0 || dims.h == 0 || dims.w == 0 {
        return Err(Error::invalid(format!("cannot render into {dims}")));
    }
    if !trajectory_fits(spec, dims) {
        return Err(Error::invalid(format!(
            "trajectory of {spec:?} leaves the {}x{} frame",
            dims.w, dims.h
        )));
    }
    let s = object_side(dims);
    let mask = spec.shape.mask(s);
    let mut video = Tensor::zeros(&dims.shape())?;
    let ch = spec.color.channel();
    let data = video.data_mut();
    for f in 0..dims.t {
        let (x0, y0) = top_left_at(spec, f);
        let base = (ch * dims.t + f) * dims.h * dims.w;
        for my in 0..s {
            for mx in 0..s {
                if mask[my * s + mx] {
                    let (x, y) = (x0 as usize + mx, y0 as usize + my);
                    data[base + y * dims.w + x] = 1.0;
                }
            }
        }
    }
    Ok(video)
}

/// Every scene whose trajectory stays inside the frame, in a fixed order.
pub fn valid_specs(dims: &VideoDims) -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for color in Color::ALL {
            for motion in Motion::ALL {
                for speed in SPEEDS {
                    for y in 0..dims.h as i64 {
                        for x in 0..dims.w as i64 {
                            let spec = SceneSpec {
                                shape,
                                color,
                                motion,
                                speed,
                                start: (x, y),
                            };
                            if trajectory_fits(&spec, dims) {
                                out.push(spec);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub spec: SceneSpec,
    pub video: Tensor,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub spec: SceneSpec,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: VideoDims,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: VideoDims,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<&VideoSample> {
        self.split(Split::Train).collect()
    }

    pub fn eval(&self) -> Vec<&VideoSample> {
        self.split(Split::Eval).collect()
    }

    pub fn get(&self, id: &str) -> Option<&VideoSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: DATASET_FORMAT_VERSION,
            dims: self.dims,
            entries: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    split: s.split,
                    caption: s.caption.clone(),
                    spec: s.spec,
                    file: video_file_name(&s.id),
                })
                .collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            write_video(&dir.join(video_file_name(&s.id)), &s.video)?;
        }
        crate::io::write_json(&dir.join("manifest.json"), &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = crate::io::read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "dataset manifest",
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let dims = manifest.dims;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            if e.caption != caption_of(&e.spec) {
                return Err(Error::format(
                    "dataset manifest",
                    format!("caption {:?} does not describe the scene of {}", e.caption, e.id),
                ));
            }
            let video = read_video(&dir.join(&e.file), &dims)?;
            samples.push(VideoSample {
                id: e.id,
                split: e.split,
                caption: e.caption,
                spec: e.spec,
                video,
            });
        }
        Ok(Dataset { dims, samples })
    }
}

pub fn video_file_name(id: &str) -> String {
    format!("videos/{id}.f32")
}

/// Samples distinct scenes from a seeded shuffle of the scene grid. Scenes
/// with a caption not yet used are taken first, so captions only repeat once
/// every caption has been used. The first `n_train` become the training
/// stream, the rest the evaluation split.
pub fn gen_dataset(n_train: usize, n_eval: usize, seed: u64, dims: VideoDims) -> Result<Dataset> {
    if n_train == 0 {
        return Err(Error::invalid("a dataset needs at least one training pair"));
    }
    let mut grid = valid_specs(&dims);
    let requested = n_train + n_eval;
    if requested > grid.len() {
        return Err(Error::InsufficientCombinations {
            requested,
            available: grid.len(),
        });
    }
    Rng::seed_from(seed).shuffle(&mut grid);

    let mut chosen = Vec::with_capacity(requested);
    let mut taken = vec![false; grid.len()];
    let mut used_captions = HashSet::new();
    for (i, spec) in grid.iter().enumerate() {
        if chosen.len() == requested {
            break;
        }
        if used_captions.insert(caption_of(spec)) {
            taken[i] = true;
            chosen.push(*spec);
        }
    }
    for (i, spec) in grid.iter().enumerate() {
        if chosen.len() == requested {
            break;
        }
        if !taken[i] {
            chosen.push(*spec);
        }
    }

    let mut samples = Vec::with_capacity(requested);
    for (i, spec) in chosen.into_iter().enumerate() {
        let (split, id) = if i < n_train {
            (Split::Train, format!("train_{i:03}"))
        } else {
            (Split::Eval, format!("eval_{:03}", i - n_train))
        };
        samples.push(VideoSample {
            id,
            split,
            caption: caption_of(&spec),
            spec,
            video: render(&spec, &dims)?,
        });
    }
    Ok(Dataset { dims, samples })
}

/// Little-endian f32 values in `[C][T][H][W]` order, no header.
pub fn video_to_bytes(video: &Tensor) -> Vec<u8> {
    video
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn video_from_bytes(bytes: &[u8], dims: &VideoDims) -> Result<Tensor> {
    if bytes.len() != 4 * dims.len() {
        return Err(Error::format(
            "video file",
            format!("{} bytes for dims {dims} (expected {})", bytes.len(), 4 * dims.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims.shape().to_vec(), data)
}

pub fn write_video(path: &Path, video: &Tensor) -> Result<()> {
    video.dims4()?;
    crate::io::write_atomic(path, &video_to_bytes(video))
}

pub fn read_video(path: &Path, dims: &VideoDims) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    video_from_bytes(&bytes, dims)
}

pub fn dataset_dir_exists(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

// ---------------------------------------------------------------------------
// Probe

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
}

impl From<&SceneSpec> for Attributes {
    fn from(s: &SceneSpec) -> Self {
        Attributes {
            shape: s.shape,
            color: s.color,
            motion: s.motion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeResult {
    Recognized(Attributes),
    Unrecognized,
}

const MIN_MASS: f64 = 1e-6;

/// Estimates shape, color and motion of the dominant object in a video.
///
/// Color is the channel with the largest positive mass. Motion is the sign
/// of the dominant axis of the mean displacement of the per-frame centroid,
/// computed on that channel from pixels above half of its peak. Shape is the
/// template with the highest normalized cross-correlation around each
/// centroid, averaged over frames.
pub fn probe(video: &Tensor) -> Result<ProbeResult> {
    let [c, t, h, w] = video.dims4()?;
    if c != 3 || t < 2 {
        return Err(Error::Shape(format!(
            "probe needs a 3-channel video with at least 2 frames, got {:?}",
            video.shape()
        )));
    }
    let frame = h * w;
    let data = video.data();
    let mass: Vec<f64> = (0..c)
        .map(|ch| data[ch * t * frame..(ch + 1) * t * frame].iter().map(|v| v.max(0.0)).sum())
        .collect();
    let (best_ch, best_mass) = mass
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
    if !(best_mass > MIN_MASS) {
        return Ok(ProbeResult::Unrecognized);
    }
    let color = Color::from_channel(best_ch).expect("three channels");
    let plane = |f: usize| &data[(best_ch * t + f) * frame..(best_ch * t + f + 1) * frame];
    let peak = data[best_ch * t * frame..(best_ch + 1) * t * frame]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.5 * peak;

    let mut centroids: Vec<(usize, f64, f64)> = Vec::with_capacity(t);
    for f in 0..t {
        let p = plane(f);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x] - threshold;
                if v > 0.0 {
                    sw += v;
                    sx += v * x as f64;
                    sy += v * y as f64;
                }
            }
        }
        if sw > MIN_MASS {
            centroids.push((f, sx / sw, sy / sw));
        }
    }
    if centroids.len() < 2 {
        return Ok(ProbeResult::Unrecognized);
    }
    let (f0, x0, y0) = centroids[0];
    let (f1, x1, y1) = *centroids.last().expect("len >= 2");
    let span = (f1 - f0) as f64;
    let (dx, dy) = ((x1 - x0) / span, (y1 - y0) / span);
    let motion = if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            Motion::Right
        } else {
            Motion::Left
        }
    } else if dy > 0.0 {
        Motion::Down
    } else {
        Motion::Up
    };

    let side = object_side(&VideoDims { c, t, h, w });
    let mut best_shape = Shape::Square;
    let mut best_score = f64::NEG_INFINITY;
    for shape in Shape::ALL {
        let tpl = PaddedTemplate::new(shape, side);
        let score = centroids
            .iter()
            .map(|&(f, cx, cy)| tpl.best_ncc(plane(f), w, h, cx, cy))
            .sum::<f64>()
            / centroids.len() as f64;
        if score > best_score {
            best_score = score;
            best_shape = shape;
        }
    }
    Ok(ProbeResult::Recognized(Attributes {
        shape: best_shape,
        color,
        motion,
    }))
}

/// Shape mask with a one-pixel zero border, so that every template has
/// nonzero variance.
struct PaddedTemplate {
    size: usize,
    values: Vec<f64>,
    cx: f64,
    cy: f64,
}

impl PaddedTemplate {
    fn new(shape: Shape, side: usize) -> Self {
        let size = side + 2;
        let mask = shape.mask(side);
        let mut values = vec![0.0; size * size];
        let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..side {
            for x in 0..side {
                if mask[y * side + x] {
                    values[(y + 1) * size + x + 1] = 1.0;
                    n += 1.0;
                    sx += (x + 1) as f64;
                    sy += (y + 1) as f64;
                }
            }
        }
        PaddedTemplate {
            size,
            values,
            cx: sx / n,
            cy: sy / n,
        }
    }

    fn best_ncc(&self, plane: &[f64], w: usize, h: usize, cx: f64, cy: f64) -> f64 {
        let bx = (cx - self.cx).round() as i64;
        let by = (cy - self.cy).round() as i64;
        let mut best = f64::NEG_INFINITY;
        for oy in -1..=1 {
            for ox in -1..=1 {
                best = best.max(self.ncc_at(plane, w, h, bx + ox, by + oy));
            }
        }
        best
    }

    fn ncc_at(&self, plane: &[f64], w: usize, h: usize, left: i64, top: i64) -> f64 {
        let n = (self.size * self.size) as f64;
        let mut window = Vec::with_capacity(self.size * self.size);
        for y in 0..self.size as i64 {
            for x in 0..self.size as i64 {
                let (px, py) = (left + x, top + y);
                let inside = px >= 0 && py >= 0 && px < w as i64 && py < h as i64;
                window.push(if inside { plane[py as usize * w + px as usize] } else { 0.0 });
            }
        }
        let ma = window.iter().sum::<f64>() / n;
        let mb = self.values.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (a, b) in window.iter().zip(&self.values) {
            let (da, db) = (a - ma, b - mb);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        if saa <= 0.0 || sbb <= 0.0 {
            return -1.0;
        }
        sab / (saa * sbb).sqrt()
    }
}

/// Fraction of the three caption attributes recovered by the probe.
pub fn alignment_score(est: &ProbeResult, truth: &SceneSpec) -> f64 {
    match est {
        ProbeResult::Unrecognized => 0.0,
        ProbeResult::Recognized(a) => {
            let hits = (a.shape == truth.shape) as u32
                + (a.color == truth.color) as u32
                + (a.motion == truth.motion) as u32;
            hits as f64 / 3.0
        }
    }
}
