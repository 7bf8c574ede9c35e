//! Physical formation model for images degraded by heavy rain.
//!
//! A degraded frame is modelled as a depth-attenuated blend of the clean
//! scene, additive rain streaks, and a global atmospheric veil:
//!
//! ```text
//! rained = T ⊙ (clean + Σ streaks) + (1 − T) ⊙ A
//! ```
//!
//! where `T = exp(−β·depth)` is the per-pixel transmission and `A` is a
//! bright per-channel constant. The model is exactly invertible given its
//! own parameters, which is what makes synthetic supervision possible: we
//! can render a degraded image, keep the ground-truth `T`, `A`, and streak
//! layer, and later reconstruct the clean scene algebraically from any
//! estimate of those three quantities (see [`invert_heavy_rain`]).
//!
//! Streak layers are synthesised procedurally: a sparse set of Gaussian
//! seeds is kept above a density quantile and smeared along a line kernel,
//! which yields elongated streaks in a controllable direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Lower clamp applied to transmission before division in the inverse model.
/// Prevents unbounded amplification where the atmospheric veil dominates.
pub const T_MIN: f32 = 0.05;

/// Errors for model composition and synthesis.
#[derive(Debug, Error)]
pub enum RainError {
    /// Two inputs that must share spatial or channel extents do not.
    #[error("dimension mismatch in {context}: {detail}")]
    DimensionMismatch {
        context: &'static str,
        detail: String,
    },
    /// A parameter violates its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Convenience alias for this module's fallible operations.
pub type Result<T> = std::result::Result<T, RainError>;

/// An RGB image in planar layout: all red values, then green, then blue,
/// each plane row-major. Values are nominally in `[0,1]` but composition
/// results are deliberately left unclamped so the model stays invertible;
/// clamping happens only at export time via [`Image::clamped01`].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Channel count; this type is strictly RGB.
    pub const CHANNELS: usize = 3;

    /// Wraps planar RGB data. Panics if `data` is not `3·height·width` long.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            Self::CHANNELS * height * width,
            "image data must hold exactly 3 planes of {height}x{width}"
        );
        Self {
            height,
            width,
            data,
        }
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; Self::CHANNELS * height * width])
    }

    /// Image with every sample set to `value`.
    pub fn splat(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar RGB samples.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the image, returning its planar samples.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// One colour plane, row-major.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// Applies `f` to every sample.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy with every sample clamped to `[0,1]`, for export.
    pub fn clamped01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// True when every sample is a finite number.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over all samples.
    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Population standard deviation over all samples; a plain global
    /// contrast measure.
    pub fn std_dev(&self) -> f32 {
        let m = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v - m;
                d * d
            })
            .sum::<f32>()
            / self.data.len() as f32;
        var.sqrt()
    }
}

/// Scene depth per pixel, normalised so 0 is nearest and 1 farthest.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    /// Wraps row-major depth values. Panics on a length mismatch; depth
    /// outside `[0,1]` is a caller bug and is checked in debug builds.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        debug_assert!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "depth values must lie in [0,1]"
        );
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-pixel fraction of scene radiance that survives atmospheric
/// attenuation; always in `(0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl TransmissionMap {
    /// Wraps row-major transmission values in `(0,1]` (debug-checked).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        debug_assert!(
            data.iter().all(|v| *v > 0.0 && *v <= 1.0),
            "transmission must lie in (0,1]"
        );
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// A single grayscale layer of rain streaks; nonnegative intensities that
/// are added equally to all three colour channels (rain is achromatic).
#[derive(Debug, Clone, PartialEq)]
pub struct RainLayer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RainLayer {
    /// Wraps row-major streak intensities (must be nonnegative).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| *v >= 0.0));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Fraction of exactly-zero entries.
    pub fn zero_fraction(&self) -> f32 {
        let zeros = self.data.iter().filter(|v| **v == 0.0).count();
        zeros as f32 / self.data.len() as f32
    }
}

/// Global atmospheric light: one bright value per channel, conceptually
/// broadcast over the whole frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericMap {
    /// Per-channel light values in `(0,1]`.
    pub rgb: [f32; 3],
}

impl AtmosphericMap {
    /// Same light value on all three channels, the common case for an
    /// overcast sky.
    pub fn uniform(value: f32) -> Self {
        Self {
            rgb: [value, value, value],
        }
    }

    /// Materialises the broadcast as a full image.
    pub fn to_image(&self, height: usize, width: usize) -> Image {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            data.extend(std::iter::repeat(self.rgb[c]).take(plane));
        }
        Image::new(height, width, data)
    }
}

/// Parameters of one synthetic degradation: streak statistics, motion
/// blur geometry, atmospheric light, and depth attenuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreakParams {
    /// Number of independent streak layers to composite (≥ 1).
    pub layers: usize,
    /// Fraction of pixels seeded with a streak origin, in (0,1).
    pub density: f32,
    /// Standard deviation of the Gaussian seed noise; sets streak intensity.
    pub sigma: f32,
    /// Length of the motion kernel in pixels (≥ 1).
    pub length: f32,
    /// Streak direction in degrees; 90 is vertical fall.
    pub angle_deg: f32,
    /// Atmospheric light value in (0,1].
    pub brightness: f32,
    /// Exponential depth-attenuation coefficient (> 0).
    pub beta: f32,
}

impl StreakParams {
    /// Checks every field against its documented domain.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(RainError::InvalidParam(msg));
        if self.layers < 1 {
            return fail(format!("layer count must be >= 1, got {}", self.layers));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return fail(format!("density must lie in (0,1), got {}", self.density));
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.length >= 1.0) {
            return fail(format!("length must be >= 1 px, got {}", self.length));
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return fail(format!(
                "brightness must lie in (0,1], got {}",
                self.brightness
            ));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

/// Inclusive sampling ranges for [`StreakParams`]; every degradation draws
/// its concrete parameters uniformly from these.
#[derive(Debug, Clone, PartialEq)]
pub struct StreakRanges {
    pub layers: (usize, usize),
    pub density: (f32, f32),
    pub sigma: (f32, f32),
    pub length: (f32, f32),
    pub angle_deg: (f32, f32),
    pub brightness: (f32, f32),
    pub beta: (f32, f32),
}

impl Default for StreakRanges {
    fn default() -> Self {
        Self {
            layers: (1, 3),
            density: (0.02, 0.08),
            sigma: (0.8, 1.5),
            length: (15.0, 40.0),
            angle_deg: (60.0, 120.0),
            brightness: (0.7, 1.0),
            beta: (0.5, 2.0),
        }
    }
}

impl StreakRanges {
    /// Draws one concrete parameter set. The draw order is fixed (layers,
    /// density, sigma, length, angle, brightness, beta) so a given seed
    /// always yields the same parameters.
    pub fn sample(&self, rng: &mut impl Rng) -> StreakParams {
        StreakParams {
            layers: rng.gen_range(self.layers.0..=self.layers.1),
            density: rng.gen_range(self.density.0..=self.density.1),
            sigma: rng.gen_range(self.sigma.0..=self.sigma.1),
            length: rng.gen_range(self.length.0..=self.length.1),
            angle_deg: rng.gen_range(self.angle_deg.0..=self.angle_deg.1),
            brightness: rng.gen_range(self.brightness.0..=self.brightness.1),
            beta: rng.gen_range(self.beta.0..=self.beta.1),
        }
    }
}

/// One fully specified synthetic training example. `rained` is stored
/// unclamped so that composing `(clean, streaks, transmission, atmosphere)`
/// reproduces it bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyRainSample {
    pub clean: Image,
    pub rained: Image,
    pub transmission: TransmissionMap,
    pub streaks: RainLayer,
    pub atmosphere: AtmosphericMap,
    pub depth: DepthMap,
    pub seed: u64,
    pub params: StreakParams,
}

/// Builds the motion kernel: a line of `length` pixels through the kernel
/// centre at `angle_deg`, rasterised with bilinear weights and normalised
/// to sum 1. Direction components below 1e-9 in magnitude are snapped to
/// zero so axis-aligned angles produce exactly straight lines.
fn line_kernel(length: f32, angle_deg: f32) -> (Vec<f64>, usize) {
    let size = (length.ceil() as usize).max(1) | 1; // odd, >= length
    let centre = (size / 2) as f64;
    let theta = (angle_deg as f64).to_radians();
    let mut dx = theta.cos();
    let mut dy = theta.sin();
    if dx.abs() < 1e-9 {
        dx = 0.0;
    }
    if dy.abs() < 1e-9 {
        dy = 0.0;
    }
    let steps = (length.round() as usize).max(1);
    let mut kernel = vec![0.0f64; size * size];
    for i in 0..steps {
        let t = i as f64 - (steps as f64 - 1.0) / 2.0;
        let x = centre + t * dx;
        let y = centre + t * dy;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, w) in [
            (0usize, 0usize, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w == 0.0 {
                continue;
            }
            let (kx, ky) = (x0 as usize + ox, y0 as usize + oy);
            if kx < size && ky < size {
                kernel[ky * size + kx] += w;
            }
        }
    }
    let total: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= total;
    }
    (kernel, size)
}

/// Synthesises one rain streak layer: Gaussian noise is thresholded at the
/// `(1 − density)` quantile (strictly above keeps its value, the rest is
/// zeroed), then smeared along a normalised line kernel and clamped to be
/// nonnegative. Deterministic for a fixed `(seed, params)` pair.
pub fn synth_streak_layer(seed: u64, params: &StreakParams, h: usize, w: usize) -> RainLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, params.sigma as f64).expect("sigma validated positive");
    let n = h * w;
    let noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let mut sorted = noise.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("noise values are finite"));
    let idx = (((1.0 - params.density as f64) * n as f64) as usize).min(n - 1);
    let threshold = sorted[idx];

    let (kernel, size) = line_kernel(params.length, params.angle_deg);
    let centre = size / 2;
    let mut out = vec![0.0f64; n];
    // Scatter each surviving seed through the kernel; equivalent to a full
    // convolution because the kernel is symmetric about its centre, but
    // only touches the sparse seed set.
    for sy in 0..h {
        for sx in 0..w {
            let value = noise[sy * w + sx];
            if value <= threshold {
                continue;
            }
            for ky in 0..size {
                let y = sy as isize + ky as isize - centre as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..size {
                    let weight = kernel[ky * size + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    let x = sx as isize + kx as isize - centre as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    out[y as usize * w + x as usize] += value * weight;
                }
            }
        }
    }
    let data = out.iter().map(|&v| (v as f32).max(0.0)).collect();
    RainLayer::new(h, w, data)
}

/// Converts depth to transmission via exponential attenuation,
/// `T = exp(−β·depth)`. Output lies in `(0,1]` for β > 0.
pub fn depth_to_transmission(depth: &DepthMap, beta: f32) -> TransmissionMap {
    let data = depth.data().iter().map(|&d| (-beta * d).exp()).collect();
    TransmissionMap::new(depth.height(), depth.width(), data)
}

fn check_dims(
    context: &'static str,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Result<()> {
    if (h, w) != (oh, ow) {
        return Err(RainError::DimensionMismatch {
            context,
            detail: format!("expected {h}x{w}, got {oh}x{ow}"),
        });
    }
    Ok(())
}

/// Sums streak layers into one. All layers must share the given extents.
pub fn sum_streaks(h: usize, w: usize, layers: &[RainLayer]) -> Result<RainLayer> {
    let mut total = vec![0.0f32; h * w];
    for layer in layers {
        check_dims("sum_streaks", (h, w), (layer.height(), layer.width()))?;
        for (acc, &v) in total.iter_mut().zip(layer.data()) {
            *acc += v;
        }
    }
    Ok(RainLayer::new(h, w, total))
}

/// Adds the summed streak layers onto every channel of the clean image:
/// the rain-streaked (but not yet veiled) scene.
pub fn compose_streaks(clean: &Image, layers: &[RainLayer]) -> Result<Image> {
    let (h, w) = (clean.height(), clean.width());
    let total = sum_streaks(h, w, layers)?;
    let mut out = clean.clone();
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, out.at(c, y, x) + total.data()[y * w + x]);
            }
        }
    }
    Ok(out)
}

/// Full forward model: streaked scene attenuated by transmission plus the
/// complementary atmospheric veil,
/// `rained = T ⊙ (clean + Σ streaks) + (1 − T) ⊙ A`.
/// The result is left unclamped.
pub fn compose_heavy_rain(
    clean: &Image,
    layers: &[RainLayer],
    transmission: &TransmissionMap,
    atmosphere: &AtmosphericMap,
) -> Result<Image> {
    let (h, w) = (clean.height(), clean.width());
    check_dims(
        "compose_heavy_rain",
        (h, w),
        (transmission.height(), transmission.width()),
    )?;
    let streaked = compose_streaks(clean, layers)?;
    let mut out = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        let a = atmosphere.rgb[c];
        for y in 0..h {
            for x in 0..w {
                let t = transmission.data()[y * w + x];
                out.set(c, y, x, t * streaked.at(c, y, x) + (1.0 - t) * a);
            }
        }
    }
    Ok(out)
}

/// Algebraic inverse with a full per-pixel atmospheric estimate:
/// `clean ≈ (rained − (1 − t) ⊙ A) / t − streaks`, where
/// `t = max(transmission, T_MIN)`. The clamped `t` is used in both the
/// veil term and the division so the expression stays a consistent
/// function of one transmission estimate.
pub fn invert_heavy_rain_map(
    rained: &Image,
    transmission: &TransmissionMap,
    atmosphere: &Image,
    streaks: &RainLayer,
) -> Result<Image> {
    let (h, w) = (rained.height(), rained.width());
    check_dims(
        "invert_heavy_rain",
        (h, w),
        (transmission.height(), transmission.width()),
    )?;
    check_dims(
        "invert_heavy_rain",
        (h, w),
        (atmosphere.height(), atmosphere.width()),
    )?;
    check_dims(
        "invert_heavy_rain",
        (h, w),
        (streaks.height(), streaks.width()),
    )?;
    let mut out = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let t = transmission.data()[y * w + x].max(T_MIN);
                let veil = (1.0 - t) * atmosphere.at(c, y, x);
                let radiance = (rained.at(c, y, x) - veil) / t;
                out.set(c, y, x, radiance - streaks.data()[y * w + x]);
            }
        }
    }
    Ok(out)
}

/// [`invert_heavy_rain_map`] for the common case of a global per-channel
/// atmospheric light.
pub fn invert_heavy_rain(
    rained: &Image,
    transmission: &TransmissionMap,
    atmosphere: &AtmosphericMap,
    streaks: &RainLayer,
) -> Result<Image> {
    let a = atmosphere.to_image(rained.height(), rained.width());
    invert_heavy_rain_map(rained, transmission, &a, streaks)
}

/// Renders one fully reproducible degraded sample from a clean image and
/// its depth: draws parameters from `ranges`, synthesises the streak
/// layers, derives transmission and atmospheric light, and composes the
/// degraded frame. The same `(clean, depth, seed)` triple always yields a
/// bitwise-identical sample.
pub fn make_sample(
    clean: &Image,
    depth: &DepthMap,
    seed: u64,
    ranges: &StreakRanges,
) -> Result<HeavyRainSample> {
    let (h, w) = (clean.height(), clean.width());
    check_dims("make_sample", (h, w), (depth.height(), depth.width()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ranges.sample(&mut rng);
    params.validate()?;

    let layers: Vec<RainLayer> = (0..params.layers)
        .map(|_| synth_streak_layer(rng.gen::<u64>(), &params, h, w))
        .collect();
    let streaks = sum_streaks(h, w, &layers)?;
    let transmission = depth_to_transmission(depth, params.beta);
    let atmosphere = AtmosphericMap::uniform(params.brightness);
    let rained = compose_heavy_rain(
        clean,
        std::slice::from_ref(&streaks),
        &transmission,
        &atmosphere,
    )?;
    Ok(HeavyRainSample {
        clean: clean.clone(),
        rained,
        transmission,
        streaks,
        atmosphere,
        depth: depth.clone(),
        seed,
        params,
    })
}
