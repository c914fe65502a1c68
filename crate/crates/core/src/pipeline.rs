//! Preprocessing, the coarse and fine stages, and coordinate bookkeeping.
//!
//! Coordinates are continuous voxel positions tagged with the space they live
//! in. Voxel `i` covers `[i - 0.5, i + 0.5)`; all spatial tensors are laid out
//! `(channels, x, y, z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageContext};
use crate::locnet::{argmax, CoordinateDistribution, InputConvConfig, Model, Stage};
use crate::tensor::{Float, Tensor};

/// Guard on the standard deviation when normalising.
pub const NORM_EPS: Float = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Intensities with shape `(x, y, z)`.
    pub data: Tensor,
    /// Millimetres per voxel along x, y, z.
    pub spacing: [Float; 3],
}

impl Volume {
    pub fn new(data: Tensor, spacing: [Float; 3]) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::shape(format!("a volume needs three axes, got {:?}", data.shape())));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { data, spacing })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.data.shape()[0], self.data.shape()[1], self.data.shape()[2]]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> Float {
        self.data.get(&[x, y, z])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Original,
    Padded,
    CoarseGrid,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub coords: [Float; 3],
    pub space: Space,
}

impl Landmark {
    pub fn new(coords: [Float; 3], space: Space) -> Self {
        Landmark { coords, space }
    }

    pub fn original(coords: [Float; 3]) -> Self {
        Self::new(coords, Space::Original)
    }

    pub fn expect_space(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(Error::Contract(format!(
                "expected a {space:?} coordinate, got {:?}",
                self.space
            )));
        }
        Ok(())
    }

    /// Position in millimetres given the voxel spacing.
    pub fn to_mm(&self, spacing: [Float; 3]) -> [Float; 3] {
        [
            self.coords[0] * spacing[0],
            self.coords[1] * spacing[1],
            self.coords[2] * spacing[2],
        ]
    }
}

/// Rounds half-up.
pub fn round_half_up(x: Float) -> Float {
    (x + 0.5).floor()
}

/// Class index of a continuous coordinate at `superres` classes per voxel.
pub fn coordinate_class(coord: Float, superres: usize, classes: usize) -> usize {
    let c = round_half_up(coord * superres as Float);
    c.clamp(0.0, (classes - 1) as Float) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Extents of the fine-stage window and of the coarse network input.
    pub window: [usize; 3],
    /// Subsampling of the coarse stage; also the input-convolution stride.
    pub coarse_factor: usize,
    /// Extents every volume is padded (or cropped) to for the coarse stage.
    pub padded: [usize; 3],
    pub input_conv_channels: usize,
    /// Width of the Gaussian removed by the high-pass channel, in voxels.
    pub highpass_sigma: Float,
    /// Fine-stage classes per voxel.
    pub superres: usize,
    pub parabola: bool,
    pub coarse_parabola: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_factor == 0 || self.superres == 0 || self.input_conv_channels == 0 {
            return Err(Error::config("coarse factor, superresolution and input channels must be positive"));
        }
        for a in 0..3 {
            if self.padded[a] != self.window[a] * self.coarse_factor {
                return Err(Error::config(format!(
                    "padded extent {} on axis {a} must equal window {} times coarse factor {}",
                    self.padded[a], self.window[a], self.coarse_factor
                )));
            }
        }
        if !(self.highpass_sigma > 0.0) {
            return Err(Error::config("high-pass sigma must be positive"));
        }
        Ok(())
    }

    /// Input convolution of the coarse model: stride `S`, kernel `2S + 1`.
    pub fn input_conv(&self) -> InputConvConfig {
        InputConvConfig::for_stride(2, self.input_conv_channels, self.coarse_factor)
    }
}

/// Separable Gaussian blur with clamped borders, truncated at 3σ.
pub fn gaussian_blur(data: &Tensor, sigma: Float) -> Tensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<Float> = (-radius..=radius)
        .map(|i| (-((i * i) as Float) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: Float = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let shape = data.shape().to_vec();
    let mut cur = data.clone();
    for axis in 0..shape.len() {
        let (outer, n, inner) = crate::tensor::split_at_axis(&shape, axis);
        let src = cur.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for t in 0..n {
                let dst = &mut out[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (ki, &k) in kernel.iter().enumerate() {
                    let s = (t as isize + ki as isize - radius).clamp(0, n as isize - 1) as usize;
                    let row = &src[(o * n + s) * inner..(o * n + s + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d += k * v;
                    }
                }
            }
        }
        cur = Tensor::from_parts(shape.clone(), out);
    }
    cur
}

/// Population variance.
pub fn variance(values: &[Float]) -> Float {
    let mean = accurate_mean(values);
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / values.len() as Float
}

/// Mean with one correction pass, so constant inputs come back exactly.
pub fn accurate_mean(values: &[Float]) -> Float {
    let n = values.len() as Float;
    let mean = values.iter().sum::<Float>() / n;
    mean + values.iter().map(|v| v - mean).sum::<Float>() / n
}

fn normalize(values: &[Float]) -> Vec<Float> {
    let mean = accurate_mean(values);
    let std = variance(values).sqrt();
    values.iter().map(|v| (v - mean) / (std + NORM_EPS)).collect()
}

/// Two-channel network input: normalised intensities and normalised high-pass.
pub fn preprocess(v: &Volume, highpass_sigma: Float) -> Result<Tensor> {
    if !v.data.all_finite() {
        return Err(Error::NonFinite("volume intensities".into()));
    }
    // Centring first keeps blur rounding from surviving in flat regions.
    let mean = accurate_mean(v.data.data());
    let centred = v.data.map(|x| x - mean);
    let blurred = gaussian_blur(&centred, highpass_sigma);
    let highpass: Vec<Float> = centred
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut data = normalize(v.data.data());
    data.extend(normalize(&highpass));
    let mut shape = vec![2];
    shape.extend_from_slice(v.data.shape());
    Tensor::new(shape, data)
}

/// Result of fitting a tensor into fixed extents.
#[derive(Clone, Debug)]
pub struct Padded {
    pub tensor: Tensor,
    /// Position of the original origin in the padded frame (negative when cropped).
    pub offset: [i64; 3],
    pub warnings: Vec<String>,
}

/// Copies `src` (`(channels, x, y, z)`) into a zero tensor of `extents` with
/// `src` voxel `p` landing at `p + offset`. Out-of-range voxels are dropped.
pub fn place(src: &Tensor, extents: [usize; 3], offset: [i64; 3]) -> Tensor {
    let c = src.shape()[0];
    let se = [src.shape()[1], src.shape()[2], src.shape()[3]];
    let mut out = Tensor::zeros(&[c, extents[0], extents[1], extents[2]]);
    let range = |a: usize| {
        let lo = (-offset[a]).max(0) as usize;
        let hi = ((extents[a] as i64 - offset[a]).min(se[a] as i64)).max(lo as i64) as usize;
        lo..hi
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    if rz.is_empty() {
        return out;
    }
    let n = rz.len();
    let s = src.data();
    let d = out.data_mut();
    for ch in 0..c {
        for x in rx.clone() {
            for y in ry.clone() {
                let dx = (x as i64 + offset[0]) as usize;
                let dy = (y as i64 + offset[1]) as usize;
                let dz = (rz.start as i64 + offset[2]) as usize;
                let si = ((ch * se[0] + x) * se[1] + y) * se[2] + rz.start;
                let di = ((ch * extents[0] + dx) * extents[1] + dy) * extents[2] + dz;
                d[di..di + n].copy_from_slice(&s[si..si + n]);
            }
        }
    }
    out
}

/// Centres `src` in `extents`, zero-padding (extra voxel on the high side) or
/// centre-cropping with a warning where it does not fit.
pub fn pad_center(src: &Tensor, extents: [usize; 3]) -> Result<Padded> {
    if src.ndim() != 4 {
        return Err(Error::shape(format!("expected (channels, x, y, z), got {:?}", src.shape())));
    }
    let mut offset = [0i64; 3];
    let mut warnings = Vec::new();
    for a in 0..3 {
        let n = src.shape()[a + 1] as i64;
        let p = extents[a] as i64;
        if n <= p {
            offset[a] = (p - n) / 2;
        } else {
            offset[a] = -((n - p) / 2);
            warnings.push(format!(
                "axis {a}: extent {n} exceeds padded extent {p}; centre-cropped {} voxels",
                n - p
            ));
        }
    }
    Ok(Padded {
        tensor: place(src, extents, offset),
        offset,
        warnings,
    })
}

/// Pads a bare volume; see [`pad_center`].
pub fn pad_volume(v: &Volume, extents: [usize; 3]) -> Result<(Volume, [i64; 3], Vec<String>)> {
    let mut shape = vec![1];
    shape.extend_from_slice(v.data.shape());
    let p = pad_center(&v.data.clone().reshape(&shape)?, extents)?;
    let data = p.tensor.reshape(&extents)?;
    Ok((Volume::new(data, v.spacing)?, p.offset, p.warnings))
}

pub fn original_to_padded(l: Landmark, offset: [i64; 3]) -> Result<Landmark> {
    l.expect_space(Space::Original)?;
    Ok(Landmark::new(
        [0, 1, 2].map(|a| l.coords[a] + offset[a] as Float),
        Space::Padded,
    ))
}

/// Continuous coarse-grid position of a padded-space coordinate (cell centres at `c·f + (f-1)/2`).
pub fn padded_to_coarse(l: Landmark, factor: usize) -> Result<Landmark> {
    l.expect_space(Space::Padded)?;
    let f = factor as Float;
    Ok(Landmark::new(
        l.coords.map(|p| (p - (f - 1.0) / 2.0) / f),
        Space::CoarseGrid,
    ))
}

pub fn coarse_to_original(c: Landmark, offset: [i64; 3], factor: usize) -> Result<Landmark> {
    c.expect_space(Space::CoarseGrid)?;
    let f = factor as Float;
    Ok(Landmark::original(
        [0, 1, 2].map(|a| c.coords[a] * f + (f - 1.0) / 2.0 - offset[a] as Float),
    ))
}

/// Coarse target classes of an original-space landmark.
pub fn coarse_target(truth: Landmark, offset: [i64; 3], factor: usize, classes: [usize; 3]) -> Result<[usize; 3]> {
    let c = padded_to_coarse(original_to_padded(truth, offset)?, factor)?;
    Ok([0, 1, 2].map(|a| coordinate_class(c.coords[a], 1, classes[a])))
}

/// Window origin `round(center) - extents/2`, clamped so the window fits inside `volume`.
pub fn window_origin(center: Landmark, volume: [usize; 3], window: [usize; 3]) -> Result<[usize; 3]> {
    center.expect_space(Space::Original)?;
    let mut origin = [0; 3];
    for a in 0..3 {
        if window[a] > volume[a] {
            return Err(Error::shape(format!(
                "window extent {} exceeds volume extent {} on axis {a}",
                window[a], volume[a]
            )));
        }
        let o = round_half_up(center.coords[a]) as i64 - (window[a] / 2) as i64;
        origin[a] = o.clamp(0, (volume[a] - window[a]) as i64) as usize;
    }
    Ok(origin)
}

/// Copies the `(channels, window...)` block starting at `origin`.
pub fn crop(src: &Tensor, origin: [usize; 3], window: [usize; 3]) -> Result<Tensor> {
    for a in 0..3 {
        if origin[a] + window[a] > src.shape()[a + 1] {
            return Err(Error::shape(format!(
                "window {window:?} at {origin:?} exceeds {:?}",
                src.shape()
            )));
        }
    }
    Ok(place(src, window, origin.map(|o| -(o as i64))))
}

/// Interpolation-free window around `center`; returns the window and its origin.
pub fn extract_window(pre: &Tensor, center: Landmark, window: [usize; 3]) -> Result<(Tensor, [usize; 3])> {
    let extents = [pre.shape()[1], pre.shape()[2], pre.shape()[3]];
    let origin = window_origin(center, extents, window)?;
    Ok((crop(pre, origin, window)?, origin))
}

/// Vertex of the parabola through the peak and its two neighbours, as a
/// continuous class position. The offset is clamped to ±0.5; boundary peaks
/// and flat curvature return the peak unchanged.
pub fn parabola_refine(probs: &[Float], peak: usize) -> Float {
    if peak == 0 || peak + 1 >= probs.len() {
        return peak as Float;
    }
    let (l, c, r) = (probs[peak - 1], probs[peak], probs[peak + 1]);
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-12 {
        return peak as Float;
    }
    let offset = ((l - r) / (2.0 * denom)).clamp(-0.5, 0.5);
    peak as Float + offset
}

/// Continuous class position per axis: argmax, optionally parabola-refined.
pub fn decode(dist: &CoordinateDistribution, use_parabola: bool) -> [Float; 3] {
    [0, 1, 2].map(|a| {
        let p = &dist.axes[a];
        let peak = argmax(p);
        if use_parabola {
            parabola_refine(p, peak)
        } else {
            peak as Float
        }
    })
}

fn expect_stage(model: &Model, stage: Stage) -> Result<()> {
    if model.stage() != stage {
        return Err(Error::config(format!(
            "expected a {stage} model, got a {} model",
            model.stage()
        )));
    }
    Ok(())
}

/// Coarse-grid estimate on a padded two-channel volume.
pub fn coarse_stage(padded: &Tensor, model: &Model, use_parabola: bool) -> Result<(Landmark, CoordinateDistribution)> {
    expect_stage(model, Stage::Coarse)?;
    let dist = model.predict(padded)?;
    let pos = decode(&dist, use_parabola);
    let n = model.superres() as Float;
    Ok((Landmark::new(pos.map(|p| p / n), Space::CoarseGrid), dist))
}

/// Window-space estimate: class positions divided by the superresolution factor.
pub fn fine_stage(window: &Tensor, model: &Model, use_parabola: bool) -> Result<(Landmark, CoordinateDistribution)> {
    expect_stage(model, Stage::Fine)?;
    let dist = model.predict(window)?;
    let n = model.superres() as Float;
    let pos = decode(&dist, use_parabola);
    Ok((Landmark::new(pos.map(|p| p / n), Space::Window), dist))
}

pub fn window_to_original(l: Landmark, origin: [usize; 3]) -> Result<Landmark> {
    l.expect_space(Space::Window)?;
    Ok(Landmark::original([0, 1, 2].map(|a| l.coords[a] + origin[a] as Float)))
}

pub fn original_to_window(l: Landmark, origin: [usize; 3]) -> Result<Landmark> {
    l.expect_space(Space::Original)?;
    Ok(Landmark::new(
        [0, 1, 2].map(|a| l.coords[a] - origin[a] as Float),
        Space::Window,
    ))
}

/// Everything [`localize`] determines for one volume.
#[derive(Clone, Debug)]
pub struct Localization {
    pub landmark: Landmark,
    pub mm: [Float; 3],
    pub coarse: Landmark,
    pub coarse_distribution: CoordinateDistribution,
    pub fine_distribution: CoordinateDistribution,
    pub window_origin: [usize; 3],
    pub warnings: Vec<String>,
}

/// Coarse stage on the padded volume followed by the fine stage on a window
/// around the coarse estimate.
pub fn localize(v: &Volume, coarse: &Model, fine: &Model, cfg: &PipelineConfig) -> Result<Localization> {
    let pre = preprocess(v, cfg.highpass_sigma).stage("preprocess")?;
    let (coarse_est, coarse_distribution, _, warnings) = locate_coarse(&pre, coarse, cfg)?;
    let (landmark, fine_distribution, window_origin) =
        refine(&pre, coarse_est, fine, cfg.window, cfg.parabola)?;
    Ok(Localization {
        mm: landmark.to_mm(v.spacing),
        landmark,
        coarse: coarse_est,
        coarse_distribution,
        fine_distribution,
        window_origin,
        warnings,
    })
}

/// Coarse estimate in original space for a preprocessed volume.
pub fn locate_coarse(
    pre: &Tensor,
    coarse: &Model,
    cfg: &PipelineConfig,
) -> Result<(Landmark, CoordinateDistribution, [i64; 3], Vec<String>)> {
    let padded = pad_center(pre, cfg.padded).stage("pad")?;
    let (c, dist) = coarse_stage(&padded.tensor, coarse, cfg.coarse_parabola).stage("coarse stage")?;
    let est = coarse_to_original(c, padded.offset, cfg.coarse_factor).stage("coarse mapping")?;
    Ok((est, dist, padded.offset, padded.warnings))
}

/// Fine estimate in original space around `center`.
pub fn refine(
    pre: &Tensor,
    center: Landmark,
    fine: &Model,
    window: [usize; 3],
    use_parabola: bool,
) -> Result<(Landmark, CoordinateDistribution, [usize; 3])> {
    let (win, origin) = extract_window(pre, center, window).stage("window extraction")?;
    let (w, dist) = fine_stage(&win, fine, use_parabola).stage("fine stage")?;
    let l = window_to_original(w, origin).stage("window mapping")?;
    Ok((l, dist, origin))
}
