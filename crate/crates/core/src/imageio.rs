//! Image decoding, bilinear resizing and JPEG recompression.
//!
//! Every dataset image enters the toolkit through [`load_image`] as an 8-bit
//! sRGB [`RawImage`]. Grayscale sources are replicated to three channels and
//! alpha is dropped.

use std::path::Path;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use crate::error::{Error, Result};

/// An 8-bit, three-channel, row-major sRGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "buffer holds {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(RawImage { width, height, data })
    }

    /// A constant-colour image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RawImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// JPEG encoder quality, 1..=100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QualityFactor(u8);

impl QualityFactor {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=100).contains(&value) {
            Ok(QualityFactor(value))
        } else {
            Err(Error::Precondition(format!(
                "quality factor must be in 1..=100, got {value}"
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// The robustness sweep grid: 100, 90, ..., 10.
pub fn sweep_qualities() -> Vec<QualityFactor> {
    (1..=10).rev().map(|k| QualityFactor(k * 10)).collect()
}

/// Decodes a PNG or JPEG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Decodes in-memory PNG or JPEG bytes.
pub fn decode_image_bytes(bytes: &[u8]) -> Result<RawImage> {
    decode_image(bytes).map_err(|reason| Error::Decode {
        path: "<memory>".into(),
        reason,
    })
}

fn decode_image(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(format!("unsupported format {format:?}"));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    // to_rgb8 replicates luma and drops alpha.
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(w as usize, h as usize, rgb.into_raw()).map_err(|e| e.to_string())
}

/// Bilinear resampling with half-pixel centres (no antialiasing), rounding
/// half up. Equal target size returns the input unchanged.
pub fn resize(img: &RawImage, width: usize, height: usize) -> Result<RawImage> {
    if width == 0 || height == 0 {
        return Err(Error::Precondition(format!(
            "resize target must be positive, got {width}x{height}"
        )));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let xs = axis_taps(img.width, width);
    let ys = axis_taps(img.height, height);
    let mut out = Vec::with_capacity(width * height * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.data[(y * img.width + x) * 3 + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(width, height, out)
}

/// Source index pair and interpolation weight for every output coordinate.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Encodes to baseline JPEG with the pinned codec settings: 4:2:0 chroma
/// subsampling below quality 95, 4:4:4 at 95 and above.
pub fn encode_jpeg(img: &RawImage, qf: QualityFactor) -> Result<Vec<u8>> {
    let w =
        u16::try_from(img.width).map_err(|_| Error::Recompress(format!("width {} exceeds JPEG limit", img.width)))?;
    let h = u16::try_from(img.height)
        .map_err(|_| Error::Recompress(format!("height {} exceeds JPEG limit", img.height)))?;
    let mut buf = Vec::new();
    let mut encoder = Encoder::new(&mut buf, qf.value());
    encoder.set_sampling_factor(if qf.value() >= 95 {
        SamplingFactor::F_1_1
    } else {
        SamplingFactor::F_2_2
    });
    encoder
        .encode(&img.data, w, h, ColorType::Rgb)
        .map_err(|e| Error::Recompress(e.to_string()))?;
    Ok(buf)
}

/// JPEG round trip from decoded pixels at the given quality.
pub fn jpeg_recompress(img: &RawImage, qf: QualityFactor) -> Result<RawImage> {
    let bytes = encode_jpeg(img, qf)?;
    let out = decode_image(&bytes).map_err(Error::Recompress)?;
    debug_assert_eq!((out.width, out.height), (img.width, img.height));
    Ok(out)
}
