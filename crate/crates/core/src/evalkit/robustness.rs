//! JPEG recompression sweep over a trained model.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalkit::manifest::{DatasetManifest, Split};
use crate::evalkit::metrics::{evaluate, AccuracyReport};
use crate::extractor::FusionExtractor;
use crate::fusionhead::HeadModel;
use crate::imageio::{jpeg_recompress, load_image, QualityFactor, RawImage};
use crate::Class;

/// A decoded image with its identity and truth.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image_id: u64,
    pub label: Class,
    pub image: RawImage,
}

/// Decodes every image of `split` (or the whole manifest when it carries
/// no split assignment), in parallel.
pub fn load_split(m: &DatasetManifest, split: Split) -> Result<Vec<LabeledImage>> {
    m.eval_records(split)
        .into_par_iter()
        .map(|r| {
            Ok(LabeledImage {
                image_id: r.image_id,
                label: r.label,
                image: load_image(m.resolve(r))?,
            })
        })
        .collect()
}

/// Predictions of `model` on `images`, as (truth, predicted) pairs.
pub fn predict_images(
    model: &HeadModel,
    extractor: &FusionExtractor,
    images: &[LabeledImage],
) -> Result<Vec<(u64, Class, Class)>> {
    let batch: Vec<_> = images
        .iter()
        .map(|i| (i.image_id, i.image.clone(), Some(i.label)))
        .collect();
    let features = extractor.fused_many(&batch)?;
    features
        .iter()
        .zip(images)
        .map(|(f, img)| Ok((img.image_id, img.label, model.predict(f)?.class)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessPoint {
    pub quality: u8,
    pub report: AccuracyReport,
}

/// Recompresses every image at each quality factor (including 100), then
/// extracts and classifies. The model is never retrained.
pub fn robustness_sweep(
    model: &HeadModel,
    extractor: &FusionExtractor,
    images: &[LabeledImage],
    qualities: &[QualityFactor],
) -> Result<Vec<RobustnessPoint>> {
    if images.is_empty() {
        return Err(Error::Empty("robustness sweep over an empty test set".into()));
    }
    if qualities.is_empty() {
        return Err(Error::Empty("no quality factors given".into()));
    }
    qualities
        .iter()
        .map(|&qf| {
            let degraded = images
                .par_iter()
                .map(|i| {
                    Ok(LabeledImage {
                        image: jpeg_recompress(&i.image, qf)?,
                        ..i.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let preds = predict_images(model, extractor, &degraded)?;
            let report = evaluate(preds.into_iter().map(|(_, t, p)| (t, p)))?;
            log::info!("qf {:>3}: accuracy {:.4}", qf.value(), report.total);
            Ok(RobustnessPoint {
                quality: qf.value(),
                report,
            })
        })
        .collect()
}

/// Rows `qf,accuracy,acc_gan,acc_graphics,acc_real`.
pub fn write_sweep_csv(points: &[RobustnessPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "qf,accuracy,acc_gan,acc_graphics,acc_real")?;
    for p in points {
        let per = p
            .report
            .per_class
            .map(|a| a.map(|v| format!("{v:.6}")).unwrap_or_default());
        writeln!(
            w,
            "{},{:.6},{},{},{}",
            p.quality, p.report.total, per[0], per[1], per[2]
        )?;
    }
    Ok(())
}

/// Encoded sizes should fall as quality drops; returns the number of
/// adjacent pairs in `qualities` order where the size grew instead.
pub fn size_inversions(img: &RawImage, qualities: &[QualityFactor]) -> Result<usize> {
    let sizes = qualities
        .iter()
        .map(|&q| crate::imageio::encode_jpeg(img, q).map(|b| b.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(sizes.windows(2).filter(|w| w[1] > w[0]).count())
}
