//! Branch pipelines plus the frozen backbone: image in, head input out.

use rayon::prelude::*;

use crate::backbone::{Backbone, FeatureMapStack, FeatureVector};
use crate::colorspace::ColorspaceId;
use crate::error::{Error, Result};
use crate::fusionhead::{fuse, FusedFeature};
use crate::imageio::RawImage;
use crate::preprocess::{run_pipeline, PipelineConfig};
use crate::Class;

/// Images per backbone call inside one worker.
const CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct FusionExtractor {
    backbone: Backbone,
    pipelines: Vec<PipelineConfig>,
}

/// Features of one image across all branches, with the final maps kept.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub image_id: u64,
    pub maps: Vec<FeatureMapStack>,
    pub features: Vec<FeatureVector>,
}

impl FusionExtractor {
    pub fn new(backbone: Backbone, pipelines: Vec<PipelineConfig>) -> Result<Self> {
        if pipelines.is_empty() {
            return Err(Error::Config("at least one branch is required".into()));
        }
        for (i, p) in pipelines.iter().enumerate() {
            p.validate()?;
            if pipelines[..i].iter().any(|q| q.colorspace == p.colorspace) {
                return Err(Error::Config(format!(
                    "colorspace {} appears in two branches",
                    p.colorspace
                )));
            }
        }
        Ok(FusionExtractor { backbone, pipelines })
    }

    pub fn pipelines(&self) -> &[PipelineConfig] {
        &self.pipelines
    }

    pub fn branches(&self) -> Vec<ColorspaceId> {
        self.pipelines.iter().map(|p| p.colorspace).collect()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Width of the fused feature.
    pub fn dim(&self) -> usize {
        self.pipelines.len() * crate::backbone::FEATURE_DIM
    }

    /// Pooled feature of one branch for a batch of images.
    pub fn branch_batch(&self, branch: usize, images: &[(u64, &RawImage)]) -> Result<Vec<FeatureVector>> {
        let cfg = &self.pipelines[branch];
        let tensors = images
            .iter()
            .map(|(_, img)| run_pipeline(img, cfg))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = tensors.iter().collect();
        let pooled = self.backbone.extract_batch(&refs)?;
        Ok(images
            .iter()
            .zip(pooled)
            .map(|(&(image_id, _), values)| FeatureVector {
                image_id,
                branch: cfg.colorspace,
                values,
            })
            .collect())
    }

    /// Maps and pooled features of every branch for one image.
    pub fn outputs(&self, image_id: u64, img: &RawImage) -> Result<BranchOutputs> {
        let mut maps = Vec::with_capacity(self.pipelines.len());
        let mut features = Vec::with_capacity(self.pipelines.len());
        for cfg in &self.pipelines {
            let t = run_pipeline(img, cfg)?;
            let (m, f) = self.backbone.extract_maps(&t, image_id)?;
            maps.push(m);
            features.push(f);
        }
        Ok(BranchOutputs {
            image_id,
            maps,
            features,
        })
    }

    pub fn fused(&self, image_id: u64, img: &RawImage, label: Option<Class>) -> Result<FusedFeature> {
        let parts = (0..self.pipelines.len())
            .map(|b| Ok(self.branch_batch(b, &[(image_id, img)])?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        self.fuse_parts(&parts, label)
    }

    pub fn fuse_parts(&self, parts: &[FeatureVector], label: Option<Class>) -> Result<FusedFeature> {
        let refs: Vec<&FeatureVector> = parts.iter().collect();
        fuse(&refs, &self.branches(), label)
    }

    /// Fused features for many images, parallel across the current rayon
    /// pool. Output order follows input order.
    pub fn fused_many(&self, images: &[(u64, RawImage, Option<Class>)]) -> Result<Vec<FusedFeature>> {
        let chunks: Vec<Vec<FusedFeature>> = images
            .par_chunks(CHUNK)
            .map(|chunk| {
                let batch: Vec<(u64, &RawImage)> = chunk.iter().map(|(id, img, _)| (*id, img)).collect();
                let per_branch = (0..self.pipelines.len())
                    .map(|b| self.branch_batch(b, &batch))
                    .collect::<Result<Vec<_>>>()?;
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, (_, _, label))| {
                        let parts: Vec<FeatureVector> = per_branch.iter().map(|features| features[i].clone()).collect();
                        self.fuse_parts(&parts, *label)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}
