//! Colorspace transforms and per-channel min-max rescaling.
//!
//! All eleven spaces are computed from 8-bit sRGB. Native units:
//!
//! | space | channels | units |
//! |-------|----------|-------|
//! | RGB   | R, G, B  | 0..255 |
//! | HSV   | H, S, V  | degrees, 0..1, 0..1 (hexcone) |
//! | HLS   | H, L, S  | degrees, 0..1, 0..1 (double hexcone) |
//! | XYZ   | X, Y, Z  | linear, Y = 1 at white |
//! | LAB   | L, a, b  | CIE 1976 L\*a\*b\* |
//! | LCH   | L, C, H  | cylindrical L\*a\*b\*, hue in degrees |
//! | YCbCr | Y, Cb, Cr| BT.601 full range on 0..255, chroma offset 128 |
//! | YUV, YIQ, YDbDr, YPbPr | | analog-TV matrices on gamma-encoded RGB in 0..1 |
//!
//! XYZ uses the IEC 61966-2-1 transfer curve; the reference white for L\*a\*b\*
//! is the XYZ image of RGB white, so achromatic pixels get exactly zero
//! chroma.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::RawImage;

/// The eleven colorspaces of the single-colorspace study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ColorspaceId {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "HLS")]
    Hls,
    #[serde(rename = "HSV")]
    Hsv,
    #[serde(rename = "LAB")]
    Lab,
    #[serde(rename = "LCH")]
    Lch,
    #[serde(rename = "XYZ")]
    Xyz,
    #[serde(rename = "YCbCr")]
    YCbCr,
    #[serde(rename = "YDbDr")]
    YDbDr,
    #[serde(rename = "YIQ")]
    Yiq,
    #[serde(rename = "YPbPr")]
    YPbPr,
    #[serde(rename = "YUV")]
    Yuv,
}

impl ColorspaceId {
    pub const ALL: [ColorspaceId; 11] = [
        ColorspaceId::Rgb,
        ColorspaceId::Hls,
        ColorspaceId::Hsv,
        ColorspaceId::Lab,
        ColorspaceId::Lch,
        ColorspaceId::Xyz,
        ColorspaceId::YCbCr,
        ColorspaceId::YDbDr,
        ColorspaceId::Yiq,
        ColorspaceId::YPbPr,
        ColorspaceId::Yuv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorspaceId::Rgb => "RGB",
            ColorspaceId::Hls => "HLS",
            ColorspaceId::Hsv => "HSV",
            ColorspaceId::Lab => "LAB",
            ColorspaceId::Lch => "LCH",
            ColorspaceId::Xyz => "XYZ",
            ColorspaceId::YCbCr => "YCbCr",
            ColorspaceId::YDbDr => "YDbDr",
            ColorspaceId::Yiq => "YIQ",
            ColorspaceId::YPbPr => "YPbPr",
            ColorspaceId::Yuv => "YUV",
        }
    }
}

impl fmt::Display for ColorspaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ColorspaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ColorspaceId::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown colorspace {s:?}")))
    }
}

/// Value-range state of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    Native,
    Rescaled0To255,
}

/// A three-channel floating image, interleaved row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f64>,
    space: ColorspaceId,
    range: RangeTag,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<f64>, space: ColorspaceId, range: RangeTag) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "tensor {width}x{height}x3 cannot hold {} values",
                data.len()
            )));
        }
        Ok(ImageTensor {
            width,
            height,
            data,
            space,
            range,
        })
    }

    /// Lifts 8-bit pixels into an RGB tensor on 0..255 (no 0..1 scaling).
    pub fn from_raw(img: &RawImage) -> Self {
        ImageTensor {
            width: img.width(),
            height: img.height(),
            data: img.as_bytes().iter().map(|&v| v as f64).collect(),
            space: ColorspaceId::Rgb,
            range: RangeTag::Native,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorspaceId {
        self.space
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel `c` as a strided iterator.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(3).copied()
    }

    pub(crate) fn with_data(&self, data: Vec<f64>, range: RangeTag) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        ImageTensor {
            width: self.width,
            height: self.height,
            data,
            space: self.space,
            range,
        }
    }

    /// Values as f32 HWC, the backbone input layout.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Converts an RGB tensor to `target` in native units.
pub fn transform(img: &ImageTensor, target: ColorspaceId) -> Result<ImageTensor> {
    if img.space != ColorspaceId::Rgb {
        return Err(Error::Precondition(format!(
            "transform expects an RGB tensor, got {}",
            img.space
        )));
    }
    if target == ColorspaceId::Rgb {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        data.extend_from_slice(&rgb_to(target, [px[0], px[1], px[2]]));
    }
    Ok(ImageTensor {
        width: img.width,
        height: img.height,
        data,
        space: target,
        range: RangeTag::Native,
    })
}

/// Converts a native-range tensor back to RGB, clamping to 0..255.
pub fn inverse_transform(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range != RangeTag::Native {
        return Err(Error::Precondition(
            "inverse_transform needs native-range values; rescaled tensors are not invertible".into(),
        ));
    }
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let rgb = to_rgb(img.space, [px[0], px[1], px[2]]);
        data.extend(rgb.iter().map(|v| v.clamp(0.0, 255.0)));
    }
    Ok(ImageTensor {
        width: img.width,
        height: img.height,
        data,
        space: ColorspaceId::Rgb,
        range: RangeTag::Native,
    })
}

/// Per-image, per-channel min-max rescaling to integers in 0..255:
/// `round((v - min) / (max - min) * 255)`, rounding half up. A constant
/// channel maps to all zeros. Hue channels are rescaled like any other
/// scalar.
pub fn rescale_0_255(img: &ImageTensor) -> ImageTensor {
    let mut out = img.data.clone();
    for c in 0..3 {
        let (lo, hi) = img
            .channel(c)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in out.iter_mut().skip(c).step_by(3) {
            *v = if span > 0.0 {
                ((*v - lo) / span * 255.0 + 0.5).floor()
            } else {
                0.0
            };
        }
    }
    img.with_data(out, RangeTag::Rescaled0To255)
}

// ---------------------------------------------------------------------------
// per-pixel formulas

type Mat3 = [[f64; 3]; 3];

const SRGB_TO_XYZ: Mat3 = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const YUV: Mat3 = [LUMA, [-0.14713, -0.28886, 0.436], [0.615, -0.51499, -0.10001]];
const YIQ: Mat3 = [LUMA, [0.5959, -0.2746, -0.3213], [0.2115, -0.5227, 0.3112]];
const YDBDR: Mat3 = [LUMA, [-0.450, -0.883, 1.333], [-1.333, 1.116, 0.217]];
const YPBPR: Mat3 = [LUMA, [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]];

const LAB_EPSILON: f64 = 0.008856;
const LAB_SLOPE: f64 = 7.787;
const LAB_OFFSET: f64 = 16.0 / 116.0;

fn mul(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn invert(m: &Mat3) -> Mat3 {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let c00 = cof(1, 2, 1, 2);
    let c01 = -cof(1, 2, 0, 2);
    let c02 = cof(1, 2, 0, 1);
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let adj = [
        [c00, -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [c01, cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [c02, -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    adj.map(|row| row.map(|v| v / det))
}

fn white_xyz() -> [f64; 3] {
    SRGB_TO_XYZ.map(|row| row.iter().sum())
}

fn srgb_to_linear(c: f64) -> f64 {
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c > 0.0031308 {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    } else {
        c * 12.92
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        LAB_SLOPE * t + LAB_OFFSET
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > LAB_EPSILON.cbrt() {
        f * f * f
    } else {
        (f - LAB_OFFSET) / LAB_SLOPE
    }
}

fn rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    mul(&SRGB_TO_XYZ, rgb.map(|c| srgb_to_linear(c / 255.0)))
}

fn xyz_to_rgb(xyz: [f64; 3]) -> [f64; 3] {
    mul(&invert(&SRGB_TO_XYZ), xyz).map(|c| linear_to_srgb(c) * 255.0)
}

fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let white = white_xyz();
    let xyz = rgb_to_xyz(rgb);
    let f = [0, 1, 2].map(|i| lab_f(xyz[i] / white[i]));
    let l = 116.0 * f[1] - 16.0;
    if rgb[0] == rgb[1] && rgb[1] == rgb[2] {
        return [l, 0.0, 0.0];
    }
    [l, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let white = white_xyz();
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    xyz_to_rgb([0, 1, 2].map(|i| lab_f_inv(f[i]) * white[i]))
}

fn hue_degrees(y: f64, x: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let h = y.atan2(x).to_degrees();
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

/// Hexcone hue in degrees plus max, min of the normalized triple.
fn hexcone(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return (0.0, max, min);
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (sector * 60.0, max, min)
}

fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let (h, max, min) = hexcone(rgb);
    let s = if max > 0.0 { (max - min) / max } else { 0.0 };
    [h, s, max]
}

fn rgb_to_hls(rgb: [f64; 3]) -> [f64; 3] {
    let (h, max, min) = hexcone(rgb);
    let l = (max + min) / 2.0;
    let delta = max - min;
    let s = if delta == 0.0 {
        0.0
    } else if l <= 0.5 {
        delta / (max + min)
    } else {
        delta / (2.0 - max - min)
    };
    [h, l, s]
}

/// Rebuilds RGB (0..1) from hue and the max/min channel values.
fn from_hexcone(h: f64, max: f64, min: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = h.floor();
    let frac = h - sector;
    let rising = min + (max - min) * frac;
    let falling = max - (max - min) * frac;
    match sector as i32 {
        0 => [max, rising, min],
        1 => [falling, max, min],
        2 => [min, max, rising],
        3 => [min, falling, max],
        4 => [rising, min, max],
        _ => [max, min, falling],
    }
}

fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    from_hexcone(h, v, v * (1.0 - s)).map(|c| c * 255.0)
}

fn hls_to_rgb(hls: [f64; 3]) -> [f64; 3] {
    let [h, l, s] = hls;
    let max = if l <= 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let min = 2.0 * l - max;
    from_hexcone(h, max, min).map(|c| c * 255.0)
}

fn rgb_to(space: ColorspaceId, rgb: [f64; 3]) -> [f64; 3] {
    let unit = rgb.map(|c| c / 255.0);
    match space {
        ColorspaceId::Rgb => rgb,
        ColorspaceId::Hsv => rgb_to_hsv(rgb),
        ColorspaceId::Hls => rgb_to_hls(rgb),
        ColorspaceId::Xyz => rgb_to_xyz(rgb),
        ColorspaceId::Lab => rgb_to_lab(rgb),
        ColorspaceId::Lch => {
            let [l, a, b] = rgb_to_lab(rgb);
            [l, a.hypot(b), hue_degrees(b, a)]
        }
        ColorspaceId::YCbCr => {
            let v = mul(&YPBPR, rgb);
            [v[0], v[1] + 128.0, v[2] + 128.0]
        }
        ColorspaceId::Yuv => mul(&YUV, unit),
        ColorspaceId::Yiq => mul(&YIQ, unit),
        ColorspaceId::YDbDr => mul(&YDBDR, unit),
        ColorspaceId::YPbPr => mul(&YPBPR, unit),
    }
}

fn to_rgb(space: ColorspaceId, v: [f64; 3]) -> [f64; 3] {
    let from_unit = |m: &Mat3| mul(&invert(m), v).map(|c| c * 255.0);
    match space {
        ColorspaceId::Rgb => v,
        ColorspaceId::Hsv => hsv_to_rgb(v),
        ColorspaceId::Hls => hls_to_rgb(v),
        ColorspaceId::Xyz => xyz_to_rgb(v),
        ColorspaceId::Lab => lab_to_rgb(v),
        ColorspaceId::Lch => {
            let (sin, cos) = v[2].to_radians().sin_cos();
            lab_to_rgb([v[0], v[1] * cos, v[1] * sin])
        }
        ColorspaceId::YCbCr => mul(&invert(&YPBPR), [v[0], v[1] - 128.0, v[2] - 128.0]),
        ColorspaceId::Yuv => from_unit(&YUV),
        ColorspaceId::Yiq => from_unit(&YIQ),
        ColorspaceId::YDbDr => from_unit(&YDBDR),
        ColorspaceId::YPbPr => from_unit(&YPBPR),
    }
}

/// Single-pixel conversion from 8-bit-scale RGB, in native units.
pub fn convert_pixel(rgb: [f64; 3], target: ColorspaceId) -> [f64; 3] {
    rgb_to(target, rgb)
}

/// Single-pixel inverse to 8-bit-scale RGB, unclamped.
pub fn invert_pixel(value: [f64; 3], space: ColorspaceId) -> [f64; 3] {
    to_rgb(space, value)
}
