//! Assembling head inputs from per-branch feature caches.

use std::collections::HashMap;

use mcfuse::backbone::cache::FeatureCache;
use mcfuse::backbone::FeatureVector;
use mcfuse::config::ExperimentConfig;
use mcfuse::evalkit::ManifestRecord;
use mcfuse::fusionhead::{fuse, FusedFeature};

use crate::failure::{CmdResult, Failure};

pub struct CachedFeatures {
    branches: Vec<mcfuse::colorspace::ColorspaceId>,
    by_branch: Vec<HashMap<u64, FeatureVector>>,
}

impl CachedFeatures {
    pub fn load(cfg: &ExperimentConfig) -> CmdResult<Self> {
        let mut by_branch = Vec::new();
        let mut branches = Vec::new();
        for p in cfg.pipelines() {
            let path = cfg.cache_path(&p);
            if !path.exists() {
                return Err(Failure::Data(format!(
                    "no feature cache for branch {} at {}; run `mcfuse extract` first",
                    p.branch,
                    path.display()
                )));
            }
            let cache = FeatureCache::load(&path)?;
            branches.push(p.colorspace);
            by_branch.push(
                cache
                    .records()
                    .iter()
                    .map(|r| (r.feature.image_id, r.feature.clone()))
                    .collect(),
            );
        }
        Ok(CachedFeatures { branches, by_branch })
    }

    pub fn covers(&self, image_id: u64) -> bool {
        self.by_branch.iter().all(|m| m.contains_key(&image_id))
    }

    /// Fused features for `records`, or the list of ids missing from any
    /// cache.
    pub fn fused(&self, records: &[&ManifestRecord]) -> CmdResult<Vec<FusedFeature>> {
        let missing: Vec<u64> = records
            .iter()
            .map(|r| r.image_id)
            .filter(|&id| !self.covers(id))
            .collect();
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(20).map(u64::to_string).collect();
            return Err(Failure::Data(format!(
                "{} image(s) have no cached features: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > 20 { ", ..." } else { "" }
            )));
        }
        records
            .iter()
            .map(|r| {
                let parts: Vec<&FeatureVector> = self.by_branch.iter().map(|m| &m[&r.image_id]).collect();
                Ok(fuse(&parts, &self.branches, Some(r.label))?)
            })
            .collect()
    }
}
