//! Frozen feature extractor backed by an ONNX inference graph.
//!
//! The graph contract:
//!
//! * one input, `f32[N, 224, 224, 3]`, values on 0..255 (any normalization is
//!   part of the graph);
//! * two outputs, the final post-activation feature maps `f32[N, 7, 7, 1280]`
//!   and their global average `f32[N, 1280]`.
//!
//! [`Backbone::load`] checks all of this with a probe batch before handing
//! out an extractor, so a graph exported with the wrong tap point or with
//! 0..1 preprocessing baked in fails at load time instead of producing
//! silently wrong features.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use tract_onnx::prelude::tract_data::internal::DimLike;
use tract_onnx::prelude::*;

use crate::colorspace::{ColorspaceId, ImageTensor, RangeTag};
use crate::error::{Error, Result};
use crate::preprocess::INPUT_SIDE;

pub mod cache;
pub mod reference;

/// Width of a branch feature.
pub const FEATURE_DIM: usize = 1280;
/// Side of the final convolutional grid for a 224x224 input.
pub const MAP_SIDE: usize = 7;

/// Pooled feature of one image through one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub image_id: u64,
    pub branch: ColorspaceId,
    pub values: Vec<f32>,
}

/// Final convolutional activations, HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub branch: ColorspaceId,
    side: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureMapStack {
    pub fn new(branch: ColorspaceId, side: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * depth {
            return Err(Error::Contract(format!(
                "feature maps {side}x{side}x{depth} cannot hold {} values",
                data.len()
            )));
        }
        Ok(FeatureMapStack {
            branch,
            side,
            depth,
            data,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Activation of channel `k` at grid cell (`x`, `y`).
    pub fn at(&self, x: usize, y: usize, k: usize) -> f32 {
        self.data[(y * self.side + x) * self.depth + k]
    }

    /// All channels of one grid cell.
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.side + x) * self.depth;
        &self.data[start..start + self.depth]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Per-channel mean over the grid, accumulated in f64.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.depth];
        for cell in self.data.chunks_exact(self.depth) {
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a += v as f64;
            }
        }
        let n = (self.side * self.side) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// A loaded, immutable extractor. Cheap to clone and safe to share across
/// threads.
#[derive(Clone)]
pub struct Backbone {
    plan: Arc<TypedRunnableModel>,
    maps_output: usize,
    pooled_output: usize,
    source: PathBuf,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

fn load_err(e: impl std::fmt::Display) -> Error {
    Error::BackboneLoad(e.to_string())
}

fn fixed_dims(fact: &TypedFact) -> Vec<Option<usize>> {
    fact.shape.iter().map(|d| d.to_usize().ok()).collect()
}

impl Backbone {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(load_err(format!("model file {} not found", path.display())));
        }
        let model = tract_onnx::onnx()
            .model_for_path(path)
            .map_err(|e| load_err(format!("{}: not a readable ONNX graph: {e:#}", path.display())))?;
        if model.inputs.len() != 1 {
            return Err(load_err(format!(
                "graph must have exactly one input, found {}",
                model.inputs.len()
            )));
        }
        if model.outputs.len() != 2 {
            return Err(load_err(format!(
                "graph must expose two outputs (feature maps, pooled feature), found {}",
                model.outputs.len()
            )));
        }
        let batch = model.sym("N");
        let input = f32::fact([batch.to_dim(), INPUT_SIDE.to_dim(), INPUT_SIDE.to_dim(), 3.to_dim()]);
        let typed = model
            .with_input_fact(0, input.into())
            .and_then(|m| m.into_optimized())
            .map_err(|e| load_err(format!("graph rejects input f32[N,224,224,3]: {e:#}")))?;

        let mut maps_output = None;
        let mut pooled_output = None;
        for (i, outlet) in typed.outputs.iter().enumerate() {
            let fact = typed.outlet_fact(*outlet).map_err(load_err)?;
            let dims = fixed_dims(fact);
            match dims.len() {
                4 => maps_output = Some((i, dims)),
                2 => pooled_output = Some((i, dims)),
                _ => {}
            }
        }
        let (maps_output, map_dims) =
            maps_output.ok_or_else(|| load_err("no rank-4 feature-map output [N,7,7,1280]"))?;
        let (pooled_output, pooled_dims) = pooled_output.ok_or_else(|| load_err("no rank-2 pooled output [N,1280]"))?;
        if pooled_dims[1] != Some(FEATURE_DIM) {
            return Err(load_err(format!(
                "pooled output width must be {FEATURE_DIM}, graph declares {:?}",
                pooled_dims[1]
            )));
        }
        let expect = [Some(MAP_SIDE), Some(MAP_SIDE), Some(FEATURE_DIM)];
        if map_dims[1..] != expect {
            return Err(load_err(format!(
                "feature maps must be [N,{MAP_SIDE},{MAP_SIDE},{FEATURE_DIM}] (NHWC), graph declares {:?}",
                &map_dims[1..]
            )));
        }

        let plan = typed.into_runnable().map_err(load_err)?;
        let backbone = Backbone {
            plan,
            maps_output,
            pooled_output,
            source: path.to_path_buf(),
        };
        backbone.probe()?;
        Ok(backbone)
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    /// Load-time checks of the numeric contract on a fixed probe image.
    fn probe(&self) -> Result<()> {
        let n = INPUT_SIDE * INPUT_SIDE * 3;
        let wide: Vec<f32> = (0..n).map(|i| ((i * 7919) % 256) as f32).collect();
        let narrow: Vec<f32> = wide.iter().map(|v| v / 255.0).collect();
        let out = self.run_raw(&[wide, narrow]).map_err(load_err)?;
        let (maps_a, pooled_a) = &out[0];
        let (_, pooled_b) = &out[1];
        if maps_a.iter().chain(pooled_a).any(|v| !v.is_finite()) {
            return Err(load_err("probe produced non-finite activations"));
        }
        if maps_a.iter().any(|&v| v < 0.0) {
            return Err(load_err(
                "feature maps contain negative values; the map output must be taken after the final activation",
            ));
        }
        let stack = FeatureMapStack::new(ColorspaceId::Rgb, MAP_SIDE, FEATURE_DIM, maps_a.clone())?;
        let worst = stack
            .spatial_mean()
            .iter()
            .zip(pooled_a)
            .map(|(m, &p)| (m - p as f64).abs())
            .fold(0.0, f64::max);
        if worst > 1e-4 {
            return Err(load_err(format!(
                "pooled output is not the spatial mean of the feature maps (max deviation {worst:e})"
            )));
        }
        let moved = pooled_a
            .iter()
            .zip(pooled_b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if moved <= 1e-6 {
            return Err(load_err(
                "outputs do not depend on input scale; the graph must take 0..255 inputs with normalization inside",
            ));
        }
        Ok(())
    }

    /// Runs raw HWC f32 images; returns (maps, pooled) per image.
    fn run_raw(&self, images: &[Vec<f32>]) -> TractResult<Vec<(Vec<f32>, Vec<f32>)>> {
        let per = INPUT_SIDE * INPUT_SIDE * 3;
        let mut flat = Vec::with_capacity(images.len() * per);
        for img in images {
            flat.extend_from_slice(img);
        }
        let input = tract_ndarray::Array4::from_shape_vec((images.len(), INPUT_SIDE, INPUT_SIDE, 3), flat)?;
        let outputs = self.plan.run(tvec!(Tensor::from(input).into()))?;
        let maps = outputs[self.maps_output].to_plain_array_view::<f32>()?;
        let pooled = outputs[self.pooled_output].to_plain_array_view::<f32>()?;
        let map_len = MAP_SIDE * MAP_SIDE * FEATURE_DIM;
        let maps = maps
            .as_slice()
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| maps.iter().copied().collect());
        let pooled = pooled
            .as_slice()
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| pooled.iter().copied().collect());
        Ok(maps
            .chunks_exact(map_len)
            .zip(pooled.chunks_exact(FEATURE_DIM))
            .map(|(m, p)| (m.to_vec(), p.to_vec()))
            .collect())
    }

    fn check_input(img: &ImageTensor) -> Result<()> {
        if img.width() != INPUT_SIDE || img.height() != INPUT_SIDE {
            return Err(Error::Contract(format!(
                "backbone input must be {INPUT_SIDE}x{INPUT_SIDE}x3, got {}x{}x3",
                img.width(),
                img.height()
            )));
        }
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("backbone input contains non-finite values".into()));
        }
        let bounded = img.space() == ColorspaceId::Rgb || img.range() == RangeTag::Rescaled0To255;
        if bounded && img.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Contract("backbone input must lie in 0..255".into()));
        }
        Ok(())
    }

    /// Final maps and pooled features for a batch of pre-processed tensors.
    pub fn extract_maps_batch(&self, images: &[&ImageTensor]) -> Result<Vec<(FeatureMapStack, Vec<f32>)>> {
        for img in images {
            Self::check_input(img)?;
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let raw: Vec<Vec<f32>> = images.iter().map(|t| t.to_f32()).collect();
        let out = self
            .run_raw(&raw)
            .map_err(|e| Error::Numeric(format!("backbone inference failed: {e:#}")))?;
        out.into_iter()
            .zip(images)
            .map(|((maps, pooled), img)| Ok((FeatureMapStack::new(img.space(), MAP_SIDE, FEATURE_DIM, maps)?, pooled)))
            .collect()
    }

    /// Pooled features for a batch.
    pub fn extract_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .extract_maps_batch(images)?
            .into_iter()
            .map(|(_, pooled)| pooled)
            .collect())
    }

    /// The 1280-wide pooled feature of one image.
    pub fn extract(&self, img: &ImageTensor, image_id: u64) -> Result<FeatureVector> {
        let values = self.extract_batch(&[img])?.pop().expect("one image in, one out");
        Ok(FeatureVector {
            image_id,
            branch: img.space(),
            values,
        })
    }

    /// Final feature maps plus the pooled feature computed by the graph.
    pub fn extract_maps(&self, img: &ImageTensor, image_id: u64) -> Result<(FeatureMapStack, FeatureVector)> {
        let (maps, values) = self.extract_maps_batch(&[img])?.pop().expect("one image in, one out");
        Ok((
            maps,
            FeatureVector {
                image_id,
                branch: img.space(),
                values,
            },
        ))
    }
}
