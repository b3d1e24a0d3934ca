//! Evaluation metrics: PSNR, SSIM, ACD, ACD-I and FVD.
//!
//! Pixel metrics read frames in [0, 1], i.e. after mapping v ↦ (v + 1)/2.
//! Feature metrics go through an [`Embedder`].

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::area_resize;
use crate::error::{Error, Result};
use crate::frame::{ImageTensor, VideoClip};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Diagonal loading for covariances estimated from fewer samples than dimensions.
pub const FVD_LOADING: f64 = 1e-6;

fn unit(v: f64) -> f64 {
    (v + 1.0) * 0.5
}

/// Clip PSNR in dB with MSE pooled over every pixel of every frame.
/// Identical clips give `f64::INFINITY`.
pub fn psnr(generated: &VideoClip, reference: &VideoClip) -> Result<f64> {
    generated.check_same_shape(reference)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, r) in generated.frames().iter().zip(reference.frames()) {
        for (a, b) in g.data().iter().zip(r.data()) {
            let d = unit(*a) - unit(*b);
            sum += d * d;
        }
        count += g.len();
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 windows of two grayscale planes.
pub fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "{height}x{width} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gy) in g.iter().enumerate() {
                for (j, gx) in g.iter().enumerate() {
                    let w = gy * gx;
                    let idx = (y + i) * width + x + j;
                    let (p, q) = (a[idx], b[idx]);
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

fn gray_unit(img: &ImageTensor) -> Vec<f64> {
    img.grayscale().into_iter().map(unit).collect()
}

/// Gaussian-window SSIM on channel-mean grayscale, averaged over frames.
pub fn ssim(generated: &VideoClip, reference: &VideoClip) -> Result<f64> {
    generated.check_same_shape(reference)?;
    let (h, w) = reference.resolution();
    let mut total = 0.0;
    for (g, r) in generated.frames().iter().zip(reference.frames()) {
        total += ssim_plane(&gray_unit(g), &gray_unit(r), h, w)?;
    }
    Ok(total / reference.frame_count() as f64)
}

/// Feature extractor for the learned-feature metrics.
pub trait Embedder: Send + Sync {
    /// Name and version, carried into every report.
    fn id(&self) -> String;
    fn embed_image(&self, image: &ImageTensor) -> Vec<f64>;
    fn embed_video(&self, clip: &VideoClip) -> Vec<f64>;
}

/// Flattened pixel values. Video embedding concatenates all frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn id(&self) -> String {
        "pixel-v1".into()
    }

    fn embed_image(&self, image: &ImageTensor) -> Vec<f64> {
        image.data().to_vec()
    }

    fn embed_video(&self, clip: &VideoClip) -> Vec<f64> {
        clip.frames().iter().flat_map(|f| f.data().iter().copied()).collect()
    }
}

/// Fixed Gaussian projection of an area-resized frame.
///
/// Frames are resized to `grid`×`grid` so any resolution maps to the same
/// space. Videos embed as the mean frame projection followed by the mean
/// projection of consecutive-frame differences.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    seed: u64,
    grid: usize,
    dim: usize,
    /// Row-major `(dim, 3·grid²)`.
    weights: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(seed: u64, grid: usize, dim: usize) -> Result<Self> {
        if grid == 0 || dim == 0 {
            return Err(Error::config("embedder", "grid and dim must be positive"));
        }
        let inputs = 3 * grid * grid;
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * inputs)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self { seed, grid, dim, weights })
    }

    pub fn video_dim(&self) -> usize {
        2 * self.dim
    }

    fn project(&self, image: &ImageTensor) -> Vec<f64> {
        let small = area_resize(image, self.grid, self.grid);
        let x = small.data();
        self.weights
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(0, 16, 8).expect("valid defaults")
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn id(&self) -> String {
        format!("random-projection-v1(seed={},grid={},dim={})", self.seed, self.grid, self.dim)
    }

    fn embed_image(&self, image: &ImageTensor) -> Vec<f64> {
        self.project(image)
    }

    fn embed_video(&self, clip: &VideoClip) -> Vec<f64> {
        let proj: Vec<Vec<f64>> = clip.frames().iter().map(|f| self.project(f)).collect();
        let n = proj.len() as f64;
        let mut out = vec![0.0; 2 * self.dim];
        for p in &proj {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v / n;
            }
        }
        if proj.len() > 1 {
            let pairs = (proj.len() - 1) as f64;
            for w in proj.windows(2) {
                for k in 0..self.dim {
                    out[self.dim + k] += (w[1][k] - w[0][k]) / pairs;
                }
            }
        }
        out
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean embedding distance between consecutive frames.
pub fn acd(generated: &VideoClip, embedder: &dyn Embedder) -> Result<f64> {
    let frames = generated.frames();
    if frames.len() < 2 {
        return Err(Error::Input("ACD needs at least two frames".into()));
    }
    let e: Vec<Vec<f64>> = frames.iter().map(|f| embedder.embed_image(f)).collect();
    Ok(e.windows(2).map(|w| l2(&w[0], &w[1])).sum::<f64>() / (e.len() - 1) as f64)
}

/// Mean embedding distance from each frame to the identity image.
pub fn acd_i(generated: &VideoClip, identity: &ImageTensor, embedder: &dyn Embedder) -> Result<f64> {
    let (h, w) = generated.resolution();
    if identity.height() != h || identity.width() != w {
        return Err(Error::Shape(format!(
            "identity is {}x{}, clip is {h}x{w}",
            identity.height(),
            identity.width()
        )));
    }
    let id = embedder.embed_image(identity);
    let frames = generated.frames();
    Ok(frames.iter().map(|f| l2(&embedder.embed_image(f), &id)).sum::<f64>() / frames.len() as f64)
}

/// Mean and (1/n) covariance of row vectors.
pub fn moments(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    Ok((mean, cov))
}

fn eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym.clone(), 1e-14, 10_000).ok_or_else(|| {
        let diag = sym.diagonal();
        let hi = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let lo = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        Error::Numerical(format!(
            "eigendecomposition of {what} did not converge (diagonal range {lo:e}..{hi:e}, ratio {:e})",
            hi / lo
        ))
    })
}

/// PSD square root with negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m, "covariance")?;
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// Fréchet distance between N(μ1, Σ1) and N(μ2, Σ2).
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let root2 = psd_sqrt(s2)?;
    let inner = &root2 * s1 * &root2;
    let cross: f64 = eigen(&inner, "cross-covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let mean_term = (mu1 - mu2).norm_squared();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding sets. Covariances
/// get [`FVD_LOADING`] on the diagonal when a set has no more samples than
/// dimensions.
pub fn frechet_from_embeddings(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let (mg, mut sg) = moments(generated)?;
    let (mr, mut sr) = moments(reference)?;
    let d = mg.len();
    for (n, s) in [(generated.len(), &mut sg), (reference.len(), &mut sr)] {
        if n <= d {
            for i in 0..d {
                s[(i, i)] += FVD_LOADING;
            }
        }
    }
    frechet_distance(&mg, &sg, &mr, &sr)
}

/// Fréchet distance between video-embedding distributions of two corpora.
pub fn fvd(generated: &[VideoClip], reference: &[VideoClip], embedder: &dyn Embedder) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Input("FVD needs non-empty corpora".into()));
    }
    let embed = |c: &[VideoClip]| c.iter().map(|v| embedder.embed_video(v)).collect::<Vec<_>>();
    frechet_from_embeddings(&embed(generated), &embed(reference))
}

/// Per-clip scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMetrics {
    pub name: String,
    /// `inf` when the clips are identical.
    pub psnr_db: f64,
    pub ssim: f64,
    /// `None` for single-frame clips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acd: Option<f64>,
    pub acd_i: f64,
}

/// Scores for a corpus of clips, serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub label: String,
    pub image_embedder: String,
    pub video_embedder: String,
    pub clip_count: usize,
    pub fvd: f64,
    pub clips: Vec<ClipMetrics>,
}

impl MetricsReport {
    pub fn mean(&self, f: impl Fn(&ClipMetrics) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.clips.iter().filter_map(f).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Input(format!("cannot serialize report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("malformed report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

/// One generated/reference clip pair with the identity image it was made from.
pub struct EvalItem<'a> {
    pub name: String,
    pub generated: &'a VideoClip,
    pub reference: &'a VideoClip,
    pub identity: &'a ImageTensor,
}

pub fn evaluate(
    label: &str,
    items: &[EvalItem<'_>],
    image_embedder: &dyn Embedder,
    video_embedder: &dyn Embedder,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut clips = Vec::with_capacity(items.len());
    for item in items {
        clips.push(ClipMetrics {
            name: item.name.clone(),
            psnr_db: psnr(item.generated, item.reference)?,
            ssim: ssim(item.generated, item.reference)?,
            acd: if item.generated.frame_count() > 1 {
                Some(acd(item.generated, image_embedder)?)
            } else {
                None
            },
            acd_i: acd_i(item.generated, item.identity, image_embedder)?,
        });
    }
    let generated: Vec<VideoClip> = items.iter().map(|i| i.generated.clone()).collect();
    let reference: Vec<VideoClip> = items.iter().map(|i| i.reference.clone()).collect();
    Ok(MetricsReport {
        label: label.to_string(),
        image_embedder: image_embedder.id(),
        video_embedder: video_embedder.id(),
        clip_count: items.len(),
        fvd: fvd(&generated, &reference, video_embedder)?,
        clips,
    })
}
