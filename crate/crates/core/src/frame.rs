//! RGB frames and frame sequences.
//!
//! Pixel values live in `[-1, 1]` for clean data. Noisy intermediates use the
//! same container and may leave that range.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A 3-channel image stored channel-planar (all red, then green, then blue).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        let expected = CHANNELS * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{CHANNELS} image needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    /// Builds an image from `f(y, x, channel)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Standard normal sample with the given spatial size.
    pub fn gaussian<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..CHANNELS * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, CHANNELS)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.offset(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(self, other)`; shapes must match.
    pub fn zip_with(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * self + b * other`.
    pub fn affine(&self, a: f64, other: &ImageTensor, b: f64) -> Result<Self> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn squared_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other, "distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn l2_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.squared_distance(other).map(f64::sqrt)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other, "difference")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Per-pixel channel mean, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| (self.data[i] + self.data[plane + i] + self.data[2 * plane + i]) / 3.0)
            .collect()
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, CHANNELS, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    /// Stacks same-shaped images into an `(N, 3, H, W)` tensor.
    pub fn stack(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            first.check_same_shape(img, "stack")?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), CHANNELS, first.height, first.width),
            device,
        )?
        .to_dtype(dtype)?)
    }

    /// Splits an `(N, 3, H, W)` tensor back into images.
    pub fn unstack(tensor: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = tensor.dims4()?;
        if c != CHANNELS {
            return Err(Error::Shape(format!("expected {CHANNELS} channels, got {c}")));
        }
        let flat: Vec<f64> = tensor.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(flat
            .chunks_exact(c * h * w)
            .take(n)
            .map(|chunk| ImageTensor {
                height: h,
                width: w,
                data: chunk.to_vec(),
            })
            .collect())
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<ImageTensor> {
        let mut images = Self::unstack(tensor)?;
        if images.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a single image, got batch of {}",
                images.len()
            )));
        }
        Ok(images.remove(0))
    }
}

/// An ordered sequence of equally sized frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    frames: Vec<ImageTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Vec<ImageTensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("a clip needs at least one frame".into()))?;
        for (i, f) in frames.iter().enumerate().skip(1) {
            if !first.same_shape(f) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, clip is {}x{}",
                    f.height(),
                    f.width(),
                    first.height(),
                    first.width()
                )));
            }
        }
        Ok(Self { frames, fps: None })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ImageTensor> {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// `(height, width)` shared by every frame.
    pub fn resolution(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }

    pub fn check_same_shape(&self, other: &VideoClip) -> Result<()> {
        if self.frame_count() != other.frame_count() || self.resolution() != other.resolution() {
            return Err(Error::Shape(format!(
                "clip {}x{:?} vs {}x{:?}",
                self.frame_count(),
                self.resolution(),
                other.frame_count(),
                other.resolution()
            )));
        }
        Ok(())
    }
}
