//! Laplacian-of-Gaussian residual block and per-branch pre-processing
//! pipelines.
//!
//! A branch pipeline runs: resize to 224x224, colorspace transform, optional
//! per-channel rescale to 0..255, optional LoG residual. The residual block
//! adds the filter response back onto the image and clamps to 0..255. With
//! [`LogPlacement::BeforeRescale`] the response is added to the native
//! transform instead, and the rescale that follows bounds the result.

use serde::{Deserialize, Serialize};

use crate::colorspace::{rescale_0_255, transform, ColorspaceId, ImageTensor, RangeTag};
use crate::error::{Error, Result};
use crate::imageio::{resize, RawImage};

/// Spatial size every branch feeds into the backbone.
pub const INPUT_SIDE: usize = 224;

/// Where the LoG residual sits relative to the 0..255 rescale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogPlacement {
    #[default]
    AfterRescale,
    BeforeRescale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoGConfig {
    pub sigma: f64,
    pub kernel_size: usize,
    #[serde(default)]
    pub placement: LogPlacement,
}

impl Default for LoGConfig {
    fn default() -> Self {
        LoGConfig {
            sigma: 1.0,
            kernel_size: 5,
            placement: LogPlacement::AfterRescale,
        }
    }
}

impl LoGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "LoG kernel_size must be odd and >= 3, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("LoG sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// The discrete kernel, row-major, mean-centred so it sums to zero.
    ///
    /// Entries sample `-(1 / (pi s^4)) (1 - r^2 / 2s^2) exp(-r^2 / 2s^2)`,
    /// which is negative at the centre.
    pub fn kernel(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let radius = (self.kernel_size / 2) as i64;
        let s2 = self.sigma * self.sigma;
        let norm = -1.0 / (std::f64::consts::PI * s2 * s2);
        let mut k = Vec::with_capacity(self.kernel_size * self.kernel_size);
        for y in -radius..=radius {
            for x in -radius..=radius {
                let q = (x * x + y * y) as f64 / (2.0 * s2);
                k.push(norm * (1.0 - q) * (-q).exp());
            }
        }
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        k.iter_mut().for_each(|v| *v -= mean);
        Ok(k)
    }
}

/// Mirror index without repeating the edge sample (`d c b | a b c d`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// LoG filter response of every channel, reflect-padded. The kernel sums
/// to zero, so the response is taken relative to each centre pixel.
pub fn log_response(img: &ImageTensor, cfg: &LoGConfig) -> Result<Vec<f64>> {
    let kernel = cfg.kernel()?;
    let size = cfg.kernel_size;
    let radius = (size / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let data = img.data();
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            // Differences from the centre make flat regions exactly zero
            // despite rounding in the kernel sum.
            let centre = &data[(y * w + x) * 3..][..3];
            let mut acc = [0.0; 3];
            for ky in 0..size {
                let sy = reflect(y as i64 + ky as i64 - radius, h);
                for kx in 0..size {
                    let sx = reflect(x as i64 + kx as i64 - radius, w);
                    let weight = kernel[ky * size + kx];
                    let base = (sy * w + sx) * 3;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += weight * (data[base + c] - centre[c]);
                    }
                }
            }
            out[(y * w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Adds the LoG response onto a rescaled image and clamps to 0..255.
pub fn log_residual(img: &ImageTensor, cfg: &LoGConfig) -> Result<ImageTensor> {
    if img.range() != RangeTag::Rescaled0To255 && img.space() != ColorspaceId::Rgb {
        return Err(Error::Precondition(
            "LoG residual expects a tensor rescaled to 0..255".into(),
        ));
    }
    let response = log_response(img, cfg)?;
    let data = img
        .data()
        .iter()
        .zip(&response)
        .map(|(v, r)| (v + r).clamp(0.0, 255.0))
        .collect();
    Ok(img.with_data(data, img.range()))
}

/// One branch of the fused model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub branch: String,
    pub colorspace: ColorspaceId,
    pub apply_rescale: bool,
    pub apply_log_residual: bool,
    #[serde(default)]
    pub log: LoGConfig,
}

impl PipelineConfig {
    /// A branch with no rescaling or residual, as the RGB branch is fed.
    pub fn raw(space: ColorspaceId) -> Self {
        PipelineConfig {
            branch: space.name().to_ascii_lowercase(),
            colorspace: space,
            apply_rescale: false,
            apply_log_residual: false,
            log: LoGConfig::default(),
        }
    }

    /// Single-colorspace branch: RGB raw, every other space rescaled.
    pub fn single(space: ColorspaceId) -> Self {
        PipelineConfig {
            apply_rescale: space != ColorspaceId::Rgb,
            ..PipelineConfig::raw(space)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.log.validate()?;
        if self.colorspace == ColorspaceId::Rgb && (self.apply_rescale || self.apply_log_residual) {
            return Err(Error::Config(format!(
                "branch {}: the RGB branch is fed raw (no rescale, no residual)",
                self.branch
            )));
        }
        if self.apply_log_residual && !self.apply_rescale {
            return Err(Error::Config(format!(
                "branch {}: the LoG residual needs apply_rescale to bound its output",
                self.branch
            )));
        }
        if self.branch.is_empty() {
            return Err(Error::Config("branch id must be non-empty".into()));
        }
        Ok(())
    }

    /// True when the pipeline's output is guaranteed to lie in 0..255.
    pub fn bounded_output(&self) -> bool {
        self.colorspace == ColorspaceId::Rgb || self.apply_rescale
    }
}

/// Named branch sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// RGB, LCH, HSV; LCH and HSV rescaled.
    McEffnet1,
    /// As `McEffnet1` with the LoG residual on LCH and HSV.
    McEffnet2,
}

impl ModelPreset {
    pub fn branches(self, log: LoGConfig) -> Vec<PipelineConfig> {
        let residual = self == ModelPreset::McEffnet2;
        let mut rgb = PipelineConfig::single(ColorspaceId::Rgb);
        rgb.log = log;
        let chroma = |space| PipelineConfig {
            apply_log_residual: residual,
            log,
            ..PipelineConfig::single(space)
        };
        vec![rgb, chroma(ColorspaceId::Lch), chroma(ColorspaceId::Hsv)]
    }
}

/// Runs one branch pipeline on a decoded image. Output is 224x224x3.
pub fn run_pipeline(img: &RawImage, cfg: &PipelineConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let resized = resize(img, INPUT_SIDE, INPUT_SIDE)?;
    let rgb = ImageTensor::from_raw(&resized);
    let mut t = transform(&rgb, cfg.colorspace)?;
    let placement = cfg.apply_log_residual.then_some(cfg.log.placement);
    if placement == Some(LogPlacement::BeforeRescale) {
        let response = log_response(&t, &cfg.log)?;
        let data = t.data().iter().zip(&response).map(|(v, r)| v + r).collect();
        t = t.with_data(data, t.range());
    }
    if cfg.apply_rescale {
        t = rescale_0_255(&t);
    }
    if placement == Some(LogPlacement::AfterRescale) {
        t = log_residual(&t, &cfg.log)?;
    }
    Ok(t)
}
