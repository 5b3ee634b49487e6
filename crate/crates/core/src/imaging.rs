//! Raster and kernel-field types shared by every stage of the pipeline.
//!
//! An [`Image`] is a channels-last `H×W×C` array of `f64`. Values are expected
//! to lie in `[0, 1]` when an image is read from or written to disk, but any
//! finite value is allowed in between: the translation network is free to
//! produce out-of-range values before the final [`clamp_to_unit`].

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};

/// Optional provenance carried alongside the pixels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageMeta {
    pub path: Option<std::path::PathBuf>,
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("image must be at least 1x1, got {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("image contains non-finite value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            meta: ImageMeta::default(),
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Builds an image without validating finiteness. Callers guarantee the
    /// shape; used on hot paths where values come from finite arithmetic.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
            meta: ImageMeta::default(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.meta.id = Some(id.into());
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        let mut out = Image::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        );
        out.meta = self.meta.clone();
        out
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "{what}: {:?} vs {:?} (height, width, channels)",
                self.dims(),
                other.dims()
            ))
        }
    }

    /// Converts to a planar `C×H×W` buffer.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = v;
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Boundary handling for windows that reach outside the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingPolicy {
    /// Repeat the nearest edge pixel.
    #[default]
    Replicate,
    /// Treat everything outside the image as zero.
    Zero,
}

/// Per-pixel filter kernels, laid out as `(groups·k·k)×H×W`.
///
/// With `groups == 1` one kernel is shared by every channel of the filtered
/// image. With `groups == C` each channel gets its own kernel; plane
/// `g·k·k + u·k + v` holds tap `(u, v)` of group `g`.
///
/// No normalization is imposed: taps may be negative and a kernel may sum to
/// more than one, which is how the filter brightens dark inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    k: usize,
    groups: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl KernelField {
    pub fn new(k: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::grouped(k, 1, height, width, data)
    }

    pub fn grouped(
        k: usize,
        groups: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(arg_err!("kernel side must be odd and positive, got {k}"));
        }
        if groups == 0 {
            return Err(arg_err!("kernel field needs at least one group"));
        }
        if height == 0 || width == 0 {
            return Err(shape_err!("kernel field must be at least 1x1"));
        }
        let expected = groups * k * k * height * width;
        if data.len() != expected {
            return Err(shape_err!(
                "kernel field {groups}x{k}x{k}x{height}x{width} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            k,
            groups,
            height,
            width,
            data,
        })
    }

    pub fn zeros(k: usize, groups: usize, height: usize, width: usize) -> Result<Self> {
        Self::grouped(k, groups, height, width, vec![0.0; groups * k * k * height * width])
    }

    /// Every pixel gets the same `k×k` kernel (row-major taps).
    pub fn uniform(kernel: &[f64], k: usize, height: usize, width: usize) -> Result<Self> {
        if kernel.len() != k * k {
            return Err(shape_err!("expected {} taps, got {}", k * k, kernel.len()));
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(k * k * plane);
        for &tap in kernel {
            data.extend(std::iter::repeat_n(tap, plane));
        }
        Self::new(k, height, width, data)
    }

    /// Unit impulse at the kernel centre for every pixel.
    pub fn identity(k: usize, height: usize, width: usize) -> Result<Self> {
        let mut kernel = vec![0.0; k * k];
        if k % 2 == 1 {
            kernel[(k / 2) * k + k / 2] = 1.0;
        }
        Self::uniform(&kernel, k, height, width)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, group: usize, u: usize, v: usize, y: usize, x: usize) -> usize {
        (((group * self.k + u) * self.k + v) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn tap(&self, group: usize, u: usize, v: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(group, u, v, y, x)]
    }

    /// The `k×k` kernel of pixel `(y, x)` for `group`, row-major.
    pub fn kernel_at(&self, group: usize, y: usize, x: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * self.k);
        for u in 0..self.k {
            for v in 0..self.k {
                out.push(self.tap(group, u, v, y, x));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Peak signal-to-noise ratio in dB for unit-range signals.
///
/// Returns `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Clamps every value into `[0, 1]`.
pub fn clamp_to_unit(image: &Image) -> Result<Image> {
    if let Some(v) = image.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("cannot clamp non-finite value {v}")));
    }
    Ok(image.map(|v| v.clamp(0.0, 1.0)))
}
