//! Class activation maps for the fused head.
//!
//! The head is linear over globally averaged final feature maps, so the
//! logit of class `c` is
//!
//! ```text
//! z_c = b_c + sum_b sum_k w[c,b,k] * mean_xy A[b,k](x, y)
//!     = b_c + mean_xy sum_b sum_k w[c,b,k] * A[b,k](x, y)
//! ```
//!
//! The Grad-CAM channel weights `d z_c / d A[b,k](x,y)` are `w[c,b,k] / 49`
//! at every cell, so Grad-CAM and CAM coincide up to that constant and are
//! computed here from the head weights directly. The raw combined map is
//! the sum of the per-branch maps before rectification; its mean plus the
//! bias reproduces the logit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMapStack;
use crate::error::{Error, Result};
use crate::fusionhead::HeadModel;
use crate::imageio::{resize, RawImage};
use crate::preprocess::INPUT_SIDE;
use crate::Class;

/// Raw (unrectified, un-normalized) map on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCam {
    pub side: usize,
    pub values: Vec<f64>,
}

impl RawCam {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub class: Class,
    pub side: usize,
    /// `side * side` values in [0, 1], row-major.
    pub values: Vec<f64>,
    /// Per-branch grid maps before combination.
    pub branches: Vec<RawCam>,
    /// Sum of the branch maps, before rectification.
    pub combined: RawCam,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Grayscale PNG, 0..255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let px: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(self.side as u32, self.side as u32, px)
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

fn branch_map(weights: &[f64], maps: &FeatureMapStack) -> RawCam {
    let side = maps.side();
    let values = (0..side * side)
        .map(|i| {
            maps.cell(i % side, i / side)
                .iter()
                .zip(weights)
                .map(|(&a, &w)| a as f64 * w)
                .sum()
        })
        .collect();
    RawCam { side, values }
}

/// Bilinear upsampling of a square grid with half-pixel centres.
fn upsample(grid: &[f64], side: usize, out: usize) -> Vec<f64> {
    let taps = crate::imageio::axis_taps(side, out);
    let mut v = vec![0.0; out * out];
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            let top = grid[y0 * side + x0] * (1.0 - fx) + grid[y0 * side + x1] * fx;
            let bottom = grid[y1 * side + x0] * (1.0 - fx) + grid[y1 * side + x1] * fx;
            v[oy * out + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    v
}

/// Heatmap for `class` from one map stack per head branch, in head order.
pub fn cam(model: &HeadModel, maps: &[FeatureMapStack], class: Class) -> Result<Heatmap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("no feature maps given".into()))?;
    let (side, depth) = (first.side(), first.depth());
    if maps.iter().any(|m| m.side() != side || m.depth() != depth) {
        return Err(Error::Contract("branch feature maps differ in shape".into()));
    }
    if model.dim() != maps.len() * depth {
        return Err(Error::Contract(format!(
            "head of width {} cannot explain {} branches of depth {depth}",
            model.dim(),
            maps.len()
        )));
    }
    let row = model.row(class);
    let branches: Vec<RawCam> = maps
        .iter()
        .zip(row.chunks_exact(depth))
        .map(|(m, w)| branch_map(w, m))
        .collect();
    let mut combined = vec![0.0; side * side];
    for b in &branches {
        combined.iter_mut().zip(&b.values).for_each(|(c, v)| *c += v);
    }
    let rectified: Vec<f64> = combined.iter().map(|v| v.max(0.0)).collect();
    let mut values = upsample(&rectified, side, INPUT_SIDE);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        class,
        side: INPUT_SIDE,
        values,
        branches,
        combined: RawCam { side, values: combined },
    })
}

/// Jet colormap on [0, 1].
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

pub const OVERLAY_ALPHA: f64 = 0.4;

/// Blends the jet-coloured heatmap onto `img` at [`OVERLAY_ALPHA`]. The
/// heatmap is resized to the image frame.
pub fn overlay(h: &Heatmap, img: &RawImage) -> Result<RawImage> {
    let (w, ht) = (img.width(), img.height());
    let gray: Vec<u8> = h.values.iter().map(|v| (v * 255.0).round() as u8).collect();
    let as_rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    let scaled = resize(&RawImage::new(h.side, h.side, as_rgb)?, w, ht)?;
    let data = img
        .as_bytes()
        .chunks_exact(3)
        .zip(scaled.as_bytes().chunks_exact(3))
        .flat_map(|(px, hv)| {
            let color = jet(hv[0] as f64 / 255.0);
            (0..3).map(move |c| {
                let v = (1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * 255.0 * color[c];
                v.round().clamp(0.0, 255.0) as u8
            })
        })
        .collect();
    RawImage::new(w, ht, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl MarkBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// Maps the box from a `from` frame into a `to` frame, rounding outward.
    pub fn rescale(&self, from: (u32, u32), to: (u32, u32)) -> MarkBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let x0 = (self.x as f64 * sx).floor() as u32;
        let y0 = (self.y as f64 * sy).floor() as u32;
        let x1 = (((self.x + self.w) as f64 * sx).ceil() as u32).min(to.0);
        let y1 = (((self.y + self.h) as f64 * sy).ceil() as u32).min(to.1);
        MarkBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(1),
            h: (y1 - y0).max(1),
        }
    }
}

/// Boxes drawn by one annotator on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMarking {
    pub annotation_id: String,
    pub boxes: Vec<MarkBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub energy_fraction: f64,
    pub pointing_hit: bool,
    /// The heatmap was identically zero; the scores carry no information.
    pub zero_heatmap: bool,
}

/// Overlap between a heatmap and human-marked regions, with boxes given in
/// the heatmap's frame.
pub fn marking_agreement(h: &Heatmap, r: &RegionMarking) -> Result<Agreement> {
    let side = h.side as u32;
    if let Some(b) = r.boxes.iter().find(|b| !b.within(side, side)) {
        return Err(Error::Precondition(format!(
            "box {b:?} is outside the {side}x{side} heatmap"
        )));
    }
    let inside = |x: u32, y: u32| r.boxes.iter().any(|b| b.contains(x, y));
    let mut total = 0.0;
    let mut marked = 0.0;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for y in 0..side {
        for x in 0..side {
            let v = h.at(x as usize, y as usize);
            total += v;
            if inside(x, y) {
                marked += v;
            }
            if v > best.0 {
                best = (v, x, y);
            }
        }
    }
    if total == 0.0 {
        return Ok(Agreement {
            energy_fraction: 0.0,
            pointing_hit: false,
            zero_heatmap: true,
        });
    }
    Ok(Agreement {
        energy_fraction: (marked / total).clamp(0.0, 1.0),
        pointing_hit: inside(best.1, best.2),
        zero_heatmap: false,
    })
}

/// Rows `image_id,class,energy_fraction,pointing_hit`.
pub fn write_agreement_csv(rows: &[(u64, Class, Agreement)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "image_id,class,energy_fraction,pointing_hit")?;
    for (id, class, a) in rows {
        writeln!(w, "{id},{class},{:.6},{}", a.energy_fraction, a.pointing_hit as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::ColorspaceId;

    fn stack(side: usize, depth: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMapStack {
        let mut data = Vec::new();
        for y in 0..side {
            for x in 0..side {
                for k in 0..depth {
                    data.push(f(x, y, k));
                }
            }
        }
        FeatureMapStack::new(ColorspaceId::Rgb, side, depth, data).unwrap()
    }

    fn uniform(v: f64) -> Heatmap {
        Heatmap {
            class: Class::Gan,
            side: 8,
            values: vec![v; 64],
            branches: vec![],
            combined: RawCam {
                side: 1,
                values: vec![v],
            },
        }
    }

    #[test]
    fn zero_weights_give_zero_heatmap() {
        let maps = vec![stack(7, 4, |x, y, k| (x + y + k) as f32); 2];
        let h = cam(&HeadModel::zeros(8), &maps, Class::Real).unwrap();
        assert!(h.is_zero());
        assert_eq!(h.values.len(), INPUT_SIDE * INPUT_SIDE);
    }

    #[test]
    fn single_weight_follows_its_map() {
        let maps = vec![stack(7, 3, |x, y, k| if k == 1 { (x * 7 + y) as f32 } else { 100.0 })];
        let mut w = vec![0.0; 9];
        w[3 + 1] = 1.0;
        let model = HeadModel::from_parts(3, w, [0.0; 3]).unwrap();
        let h = cam(&model, &maps, Class::Graphics).unwrap();
        for (i, v) in h.combined.values.iter().enumerate() {
            assert_eq!(*v, maps[0].at(i % 7, i / 7, 1) as f64);
        }
        assert!((h.values.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_identity_and_scaling() {
        let maps: Vec<_> = (0..3)
            .map(|b| stack(7, 5, move |x, y, k| ((x * 3 + y * 5 + k * 7 + b) % 11) as f32 * 0.3))
            .collect();
        let weights: Vec<f64> = (0..45).map(|i| ((i * 37) % 19) as f64 / 9.0 - 1.0).collect();
        let model = HeadModel::from_parts(15, weights.clone(), [0.5, -0.25, 0.1]).unwrap();
        let pooled: Vec<f32> = maps
            .iter()
            .flat_map(|m| m.spatial_mean().into_iter().map(|v| v as f32))
            .collect();
        let x = crate::fusionhead::FusedFeature {
            image_id: 0,
            label: None,
            values: pooled,
        };
        let logits = model.logits(&x).unwrap();
        for c in Class::ALL {
            let h = cam(&model, &maps, c).unwrap();
            let z = h.combined.mean() + model.bias()[c.index()];
            assert!((z - logits[c.index()]).abs() <= 1e-3 * logits[c.index()].abs().max(1e-9));
            let scaled = HeadModel::from_parts(15, weights.iter().map(|w| w * 2.5).collect(), [0.0; 3]).unwrap();
            let h2 = cam(&scaled, &maps, c).unwrap();
            for (a, b) in h.combined.values.iter().zip(&h2.combined.values) {
                assert!((b - 2.5 * a).abs() < 1e-9);
            }
            for (a, b) in h.values.iter().zip(&h2.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let maps = vec![stack(7, 4, |_, _, _| 1.0)];
        assert!(cam(&HeadModel::zeros(8), &maps, Class::Gan).is_err());
    }

    #[test]
    fn constant_grid_upsamples_flat() {
        let v = upsample(&[2.0; 49], 7, 224);
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn overlay_of_zero_heatmap() {
        let img = crate::testutil::noise_image(30, 20, 1);
        let out = overlay(&uniform(0.0), &img).unwrap();
        assert_eq!((out.width(), out.height()), (30, 20));
        let zero = jet(0.0);
        for (o, i) in out.as_bytes().chunks(3).zip(img.as_bytes().chunks(3)) {
            for c in 0..3 {
                let want = (0.6 * i[c] as f64 + 0.4 * 255.0 * zero[c]).round() as u8;
                assert_eq!(o[c], want);
            }
        }
        assert_eq!(out, overlay(&uniform(0.0), &img).unwrap());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn agreement_cases() {
        let whole = RegionMarking {
            annotation_id: "a".into(),
            boxes: vec![MarkBox { x: 0, y: 0, w: 8, h: 8 }],
        };
        let a = marking_agreement(&uniform(0.5), &whole).unwrap();
        assert_eq!((a.energy_fraction, a.pointing_hit), (1.0, true));

        let quarter = RegionMarking {
            annotation_id: "b".into(),
            boxes: vec![MarkBox { x: 4, y: 4, w: 4, h: 4 }],
        };
        let a = marking_agreement(&uniform(1.0), &quarter).unwrap();
        assert!((a.energy_fraction - 0.25).abs() < 1e-6);

        let mut corner = uniform(0.0);
        corner.values[0] = 1.0;
        let a = marking_agreement(&corner, &quarter).unwrap();
        assert_eq!((a.energy_fraction, a.pointing_hit), (0.0, false));

        let a = marking_agreement(&uniform(0.0), &quarter).unwrap();
        assert!(a.zero_heatmap);
        assert_eq!(a.energy_fraction, 0.0);

        let outside = RegionMarking {
            annotation_id: "c".into(),
            boxes: vec![MarkBox { x: 6, y: 0, w: 4, h: 1 }],
        };
        assert!(marking_agreement(&uniform(1.0), &outside).is_err());
    }

    #[test]
    fn box_rescaling() {
        let b = MarkBox {
            x: 10,
            y: 20,
            w: 30,
            h: 40,
        };
        assert_eq!(
            b.rescale((100, 100), (224, 224)),
            MarkBox {
                x: 22,
                y: 44,
                w: 68,
                h: 91
            }
        );
        assert_eq!(b.rescale((100, 100), (100, 100)), b);
    }
}
