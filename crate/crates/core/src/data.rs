//! Dataset manifests, frame I/O, temporal standardization, degradation and
//! a procedural toy dataset.
//!
//! A clip on disk is a directory of numbered PNG frames (`000.png`, …).
//! A manifest is a JSON-lines file, one record per clip, with paths relative
//! to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ImageTensor, VideoClip, CHANNELS};
use crate::training::TrainingSample;

pub const EXPRESSIONS: [&str; 6] = ["happiness", "sadness", "surprise", "anger", "disgust", "fear"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub expression_label: String,
    pub identity_image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_res_dir: Option<PathBuf>,
    pub high_res_dir: PathBuf,
    pub split: Split,
}

impl ManifestRecord {
    fn label(&self) -> String {
        format!("{}/{}", self.subject_id, self.expression_label)
    }
}

/// Clip records plus the directory their paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl SampleManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.check_split()?;
        Ok(m)
    }

    /// No subject may appear in both splits.
    pub fn check_split(&self) -> Result<()> {
        let subjects = |split| -> BTreeSet<&str> {
            self.records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.subject_id.as_str())
                .collect()
        };
        let train = subjects(Split::Train);
        let shared: Vec<&str> = subjects(Split::Test).intersection(&train).copied().collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "subjects in both train and test splits: {}",
                shared.join(", ")
            )))
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Reads a JSON-lines manifest and validates split hygiene and paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if !EXPRESSIONS.contains(&record.expression_label.as_str()) {
                return Err(Error::Input(format!(
                    "{} line {}: unknown expression `{}`",
                    path.display(),
                    i + 1,
                    record.expression_label
                )));
            }
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(root, records)?;
        for r in &m.records {
            let mut paths = vec![&r.identity_image_path, &r.high_res_dir];
            paths.extend(r.low_res_dir.as_ref());
            for p in paths {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by {}", r.label())),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// 8-bit pixel to [−1, 1].
pub fn normalize(pixel: u8) -> f64 {
    pixel as f64 / 127.5 - 1.0
}

/// [−1, 1] to 8-bit, rounding half away from zero.
pub fn denormalize(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Loads an RGB PNG into [−1, 1].
pub fn load_frame(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageTensor::from_fn(h as usize, w as usize, |y, x, c| {
        normalize(img.get_pixel(x as u32, y as u32)[c])
    }))
}

pub fn save_frame(path: &Path, frame: &ImageTensor) -> Result<()> {
    let (h, w, _) = frame.shape();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| denormalize(frame.get(y as usize, x as usize, c))))
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn frame_name(index: usize) -> String {
    format!("{index:03}.png")
}

/// Loads `000.png`, `001.png`, … in order until the sequence ends.
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "frame directory not found"),
        ));
    }
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_frame(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Input(format!("{} holds no frames (expected 000.png …)", dir.display())));
    }
    VideoClip::new(frames)
}

pub fn save_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Source frame indices for resampling `n` frames to `target`.
///
/// Shrinking picks `round(k·(n−1)/(target−1))`; stretching picks
/// `floor(k·n/target)`, which repeats each source frame ⌊target/n⌋ or
/// ⌈target/n⌉ times. Both keep the first and last frames.
pub fn standardize_indices(n: usize, target: usize) -> Vec<usize> {
    if target == 1 {
        return vec![0];
    }
    if n >= target {
        (0..target)
            .map(|k| ((k * (n - 1)) as f64 / (target - 1) as f64).round() as usize)
            .collect()
    } else {
        (0..target).map(|k| k * n / target).collect()
    }
}

/// Resamples a clip to exactly `target_n` frames by nearest-index selection.
pub fn standardize_clip(frames: &VideoClip, target_n: usize) -> Result<VideoClip> {
    if target_n == 0 {
        return Err(Error::config("target_n", "must be at least 1"));
    }
    let src = frames.frames();
    if src.is_empty() {
        return Err(Error::Input("cannot standardize an empty clip".into()));
    }
    let mut out = VideoClip::new(
        standardize_indices(src.len(), target_n)
            .into_iter()
            .map(|i| src[i].clone())
            .collect(),
    )?;
    out.fps = frames.fps;
    Ok(out)
}

/// Per-pixel face mask; `true` keeps the pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceMask {
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
}

impl FaceMask {
    pub fn filled(height: usize, width: usize, keep: bool) -> Self {
        Self {
            height,
            width,
            keep: vec![keep; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, keep }
    }

    fn apply(&self, frame: &ImageTensor) -> Result<ImageTensor> {
        if frame.height() != self.height || frame.width() != self.width {
            return Err(Error::Shape(format!(
                "mask is {}x{}, frame is {}x{}",
                self.height,
                self.width,
                frame.height(),
                frame.width()
            )));
        }
        Ok(ImageTensor::from_fn(self.height, self.width, |y, x, c| {
            if self.keep[y * self.width + x] {
                frame.get(y, x, c)
            } else {
                -1.0
            }
        }))
    }
}

/// Area-weighted overlap of source cells with each of `dst` output cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Box-filter resize: every output pixel averages the source area it covers.
pub fn area_resize(frame: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let wy = area_weights(frame.height(), height);
    let wx = area_weights(frame.width(), width);
    ImageTensor::from_fn(height, width, |y, x, c| {
        let mut acc = 0.0;
        for &(sy, ay) in &wy[y] {
            for &(sx, ax) in &wx[x] {
                acc += ay * ax * frame.get(sy, sx, c);
            }
        }
        acc
    })
}

/// Bilinear resize with pixel-centre alignment and edge clamping. Used as the
/// naive upsampling baseline.
pub fn bilinear_resize(frame: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ty = taps(frame.height(), height);
    let tx = taps(frame.width(), width);
    ImageTensor::from_fn(height, width, |y, x, c| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = frame.get(y0, x0, c) * (1.0 - fx) + frame.get(y0, x1, c) * fx;
        let bottom = frame.get(y1, x0, c) * (1.0 - fx) + frame.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn upsample_clip(clip: &VideoClip, size: usize) -> Result<VideoClip> {
    if size == 0 {
        return Err(Error::config("high_res", "must be positive"));
    }
    let mut out = VideoClip::new(clip.frames().iter().map(|f| bilinear_resize(f, size, size)).collect())?;
    out.fps = clip.fps;
    Ok(out)
}

/// Black-background low-resolution view of a clip: masks each frame (mask
/// `false` becomes black), then area-averages down to `size`×`size`.
pub fn degrade(v_high: &VideoClip, masks: Option<&[FaceMask]>, size: usize) -> Result<VideoClip> {
    if size == 0 {
        return Err(Error::config("low_res", "must be positive"));
    }
    if let Some(m) = masks {
        if m.len() != v_high.frame_count() {
            return Err(Error::Shape(format!(
                "{} masks for {} frames",
                m.len(),
                v_high.frame_count()
            )));
        }
    }
    let frames = v_high
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let f = match masks {
                Some(m) => m[i].apply(f)?,
                None => f.clone(),
            };
            Ok(area_resize(&f, size, size))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = VideoClip::new(frames)?;
    out.fps = v_high.fps;
    Ok(out)
}

/// Low- and high-resolution views of one clip with its identity image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub low: VideoClip,
    pub high: VideoClip,
    pub identity: ImageTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Side of the derived low-resolution frames when a record has none.
    pub low_res: usize,
    /// Standardize every clip to this many frames.
    pub frames: Option<usize>,
}

pub fn load_clip_pair(manifest: &SampleManifest, record: &ManifestRecord, opts: LoadOptions) -> Result<ClipPair> {
    let context = |e: Error| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", record.label())),
        other => other,
    };
    let identity = load_frame(&manifest.resolve(&record.identity_image_path)).map_err(context)?;
    let mut high = load_clip(&manifest.resolve(&record.high_res_dir)).map_err(context)?;
    let mut low = match &record.low_res_dir {
        Some(dir) => load_clip(&manifest.resolve(dir)).map_err(context)?,
        None => degrade(&high, None, opts.low_res)?,
    };
    if let Some(n) = opts.frames {
        high = standardize_clip(&high, n)?;
        low = standardize_clip(&low, n)?;
    }
    if low.frame_count() != high.frame_count() {
        return Err(Error::Input(format!(
            "{}: {} low-resolution frames vs {} high-resolution",
            record.label(),
            low.frame_count(),
            high.frame_count()
        )));
    }
    if identity.shape() != high.frames()[0].shape() {
        return Err(Error::Shape(format!(
            "{}: identity image does not match the clip resolution",
            record.label()
        )));
    }
    Ok(ClipPair { low, high, identity })
}

/// Per-frame training tuples of a clip. The first frame's previous frame is
/// the identity image.
pub fn clip_samples(pair: &ClipPair, subject_id: &str, expression: &str) -> Vec<TrainingSample> {
    let high = pair.high.frames();
    pair.low
        .frames()
        .iter()
        .zip(high)
        .enumerate()
        .map(|(i, (low, target))| TrainingSample {
            low_res: low.clone(),
            identity: pair.identity.clone(),
            target: target.clone(),
            previous: if i == 0 { pair.identity.clone() } else { high[i - 1].clone() },
            subject_id: subject_id.to_string(),
            expression: expression.to_string(),
            frame_index: i + 1,
        })
        .collect()
}

/// Training tuples for every clip of `split`.
pub fn load_pairs(manifest: &SampleManifest, split: Split, opts: LoadOptions) -> Result<Vec<TrainingSample>> {
    manifest.check_split()?;
    let mut out = Vec::new();
    for r in manifest.split(split) {
        let pair = load_clip_pair(manifest, r, opts)?;
        out.extend(clip_samples(&pair, &r.subject_id, &r.expression_label));
    }
    Ok(out)
}

/// A subject's procedural appearance.
#[derive(Clone, Debug)]
struct Face {
    skin: [f64; 3],
    feature: [f64; 3],
    background: [f64; 3],
    stripe: (f64, f64, f64),
    radius: (f64, f64),
    eye_gap: f64,
}

impl Face {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut color = |lo: f64, hi: f64| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
        let skin = color(0.55, 0.95);
        let feature = color(0.05, 0.3);
        let background = color(0.2, 0.6);
        Self {
            skin,
            feature,
            background,
            stripe: (
                rng.random_range(1.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
            radius: (rng.random_range(0.3..0.36), rng.random_range(0.36..0.42)),
            eye_gap: rng.random_range(0.11..0.15),
        }
    }
}

/// Expression geometry at intensity `a` ∈ [0, 1]; 0 is neutral.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    mouth_curve: f64,
    mouth_open: f64,
    mouth_width: f64,
    eye_scale: f64,
    brow_tilt: f64,
    brow_lift: f64,
    skew: f64,
}

fn pose(expression: &str, a: f64) -> Pose {
    let neutral = Pose {
        mouth_width: 1.0,
        eye_scale: 1.0,
        ..Pose::default()
    };
    match expression {
        "happiness" => Pose { mouth_curve: 0.07 * a, mouth_width: 1.0 + 0.3 * a, ..neutral },
        "sadness" => Pose { mouth_curve: -0.06 * a, brow_tilt: 0.5 * a, ..neutral },
        "surprise" => Pose { mouth_open: 0.06 * a, eye_scale: 1.0 + 0.5 * a, brow_lift: 0.05 * a, ..neutral },
        "anger" => Pose { mouth_curve: -0.03 * a, brow_tilt: -0.6 * a, brow_lift: -0.03 * a, ..neutral },
        "disgust" => Pose { skew: 0.05 * a, mouth_curve: -0.02 * a, eye_scale: 1.0 - 0.3 * a, ..neutral },
        "fear" => Pose { mouth_width: 1.0 + 0.4 * a, mouth_open: 0.025 * a, eye_scale: 1.0 + 0.35 * a, brow_lift: 0.04 * a, ..neutral },
        _ => neutral,
    }
}

fn smooth_inside(distance: f64, softness: f64) -> f64 {
    (0.5 - distance / softness).clamp(0.0, 1.0)
}

/// Renders one frame in [0, 1]. Coordinates are in units of the image side.
fn render(face: &Face, p: Pose, size: usize, with_background: bool) -> ImageTensor {
    let px = 1.0 / size as f64;
    let soft = 1.5 * px;
    let mut img = ImageTensor::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) * px - 0.5;
            let v = (y as f64 + 0.5) * px - 0.5;
            let mut rgb = if with_background {
                let (f, d, ph) = face.stripe;
                let s = 0.5 + 0.5 * (std::f64::consts::TAU * f * (u + d * v) * 2.0 + ph).sin();
                face.background.map(|b| b * (0.75 + 0.25 * s))
            } else {
                [0.0; 3]
            };
            let mut blend = |color: [f64; 3], w: f64| {
                for c in 0..CHANNELS {
                    rgb[c] = rgb[c] * (1.0 - w) + color[c] * w;
                }
            };
            let (rx, ry) = face.radius;
            let head = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            blend(face.skin, smooth_inside((head - 1.0) * rx, soft));

            for side in [-1.0, 1.0] {
                let ex = side * face.eye_gap + p.skew * side.max(0.0);
                let ey = -0.07;
                let er = 0.035 * p.eye_scale;
                let d = ((u - ex).powi(2) + ((v - ey) / p.eye_scale.max(0.3)).powi(2)).sqrt() - er;
                blend(face.feature, smooth_inside(d, soft));
                let by = ey - 0.07 - p.brow_lift + side * p.brow_tilt * (u - ex);
                let brow = (v - by).abs() - 0.012;
                let along = (u - ex).abs() - 0.05;
                blend(face.feature, smooth_inside(brow.max(along), soft));
            }

            let mw = 0.11 * p.mouth_width;
            let mu = u - p.skew;
            if mu.abs() <= mw + soft {
                let t = (mu / mw).clamp(-1.0, 1.0);
                let centre = 0.16 - p.mouth_curve * t * t;
                let half = 0.012 + p.mouth_open * (1.0 - t * t);
                let d = ((v - centre).abs() - half).max(mu.abs() - mw);
                blend(face.feature, smooth_inside(d, soft));
            }
            for c in 0..CHANNELS {
                img.set(y, x, c, rgb[c].clamp(0.0, 1.0) * 2.0 - 1.0);
            }
        }
    }
    img
}

fn quantize(img: &ImageTensor) -> ImageTensor {
    img.map(|v| normalize(denormalize(v)))
}

/// Procedural clip: `n_frames` frames ramping from neutral to the apex of
/// `expression`. Returns the high-resolution frames and the black-background
/// low-resolution view. Frame 0 is the subject's identity image.
pub fn render_clip(subject_seed: u64, expression: &str, n_frames: usize, high_res: usize, low_res: usize) -> (VideoClip, VideoClip) {
    let face = Face::sample(&mut ChaCha8Rng::seed_from_u64(subject_seed));
    let mut high = Vec::with_capacity(n_frames);
    let mut low = Vec::with_capacity(n_frames);
    for n in 0..n_frames {
        let a = if n_frames > 1 { n as f64 / (n_frames - 1) as f64 } else { 0.0 };
        let p = pose(expression, a);
        high.push(quantize(&render(&face, p, high_res, true)));
        let bare = render(&face, p, high_res, false);
        low.push(quantize(&area_resize(&bare, low_res, low_res)));
    }
    (
        VideoClip::new(high).expect("non-empty clip"),
        VideoClip::new(low).expect("non-empty clip"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_frames: usize,
    pub high_res: usize,
    pub low_res: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_frames: 8,
            high_res: 32,
            low_res: 8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_subjects", self.n_subjects),
            ("n_frames", self.n_frames),
            ("high_res", self.high_res),
            ("low_res", self.low_res),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Subjects assigned to the training split: about 75%, keeping at least
    /// one test subject when there are two or more.
    pub fn train_subjects(&self) -> usize {
        if self.n_subjects < 2 {
            return self.n_subjects;
        }
        ((self.n_subjects as f64 * 0.75).round() as usize).clamp(1, self.n_subjects - 1)
    }
}

pub fn subject_id(i: usize) -> String {
    format!("s{i:03}")
}

/// Writes a procedural dataset under `out_dir` and returns its manifest
/// (also saved as `manifest.jsonl`). Identical inputs give identical files.
pub fn synthesize_toy_dataset(config: &SynthConfig, out_dir: &Path) -> Result<SampleManifest> {
    config.validate()?;
    let mut records = Vec::new();
    for s in 0..config.n_subjects {
        let id = subject_id(s);
        let subject_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64);
        let split = if s < config.train_subjects() { Split::Train } else { Split::Test };
        let base = PathBuf::from("subjects").join(&id);
        let identity_rel = base.join("identity.png");
        for expression in EXPRESSIONS {
            let (high, low) = render_clip(subject_seed, expression, config.n_frames, config.high_res, config.low_res);
            let high_rel = base.join(expression).join("high");
            let low_rel = base.join(expression).join("low");
            save_clip(&out_dir.join(&high_rel), &high)?;
            save_clip(&out_dir.join(&low_rel), &low)?;
            if expression == EXPRESSIONS[0] {
                save_frame(&out_dir.join(&identity_rel), &high.frames()[0])?;
            }
            records.push(ManifestRecord {
                subject_id: id.clone(),
                expression_label: expression.to_string(),
                identity_image_path: identity_rel.clone(),
                low_res_dir: Some(low_rel),
                high_res_dir: high_rel,
                split,
            });
        }
    }
    let manifest = SampleManifest::new(out_dir, records)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
