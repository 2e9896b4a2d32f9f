//! Feature fusion and the trainable softmax head.
//!
//! The head is a single affine layer `softmax(W x + b)` with `W` of shape
//! 3 x D, so it has `3 D + 3` parameters: 3843 over a single 1280-wide branch,
//! 11523 over the 3840-wide concatenation of RGB, LCH and HSV features.
//!
//! Training minimises mean categorical cross-entropy with Adam, starting from
//! zero weights. Softmax regression is convex, so zero initialisation is
//! fine and removes initialisation variance.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureVector, FEATURE_DIM};
use crate::colorspace::ColorspaceId;
use crate::error::{Error, Result};
use crate::Class;

/// Branch order of the fused representation.
pub const FUSED_BRANCHES: [ColorspaceId; 3] = [ColorspaceId::Rgb, ColorspaceId::Lch, ColorspaceId::Hsv];

/// Input of the head: one branch feature or the concatenation of several.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub image_id: u64,
    pub label: Option<Class>,
    pub values: Vec<f32>,
}

impl FusedFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// A single-branch feature used as head input.
    pub fn single(feature: FeatureVector, label: Option<Class>) -> Self {
        FusedFeature {
            image_id: feature.image_id,
            label,
            values: feature.values,
        }
    }
}

/// Concatenates branch features in the order given by `branches`.
pub fn fuse(parts: &[&FeatureVector], branches: &[ColorspaceId], label: Option<Class>) -> Result<FusedFeature> {
    if parts.len() != branches.len() {
        return Err(Error::Contract(format!(
            "expected {} branch features, got {}",
            branches.len(),
            parts.len()
        )));
    }
    let image_id = parts
        .first()
        .ok_or_else(|| Error::Contract("no branch features to fuse".into()))?
        .image_id;
    let mut values = Vec::with_capacity(parts.len() * FEATURE_DIM);
    for (part, &branch) in parts.iter().zip(branches) {
        if part.branch != branch {
            return Err(Error::Contract(format!(
                "branch order mismatch: expected {branch}, got {}",
                part.branch
            )));
        }
        if part.image_id != image_id {
            return Err(Error::Contract(format!(
                "features of images {image_id} and {} cannot be fused",
                part.image_id
            )));
        }
        if part.values.len() != FEATURE_DIM {
            return Err(Error::Contract(format!(
                "{branch} feature has width {}, expected {FEATURE_DIM}",
                part.values.len()
            )));
        }
        values.extend_from_slice(&part.values);
    }
    Ok(FusedFeature {
        image_id,
        label,
        values,
    })
}

/// `[RGB | LCH | HSV]`, 3840 wide.
pub fn concat_features(
    rgb: &FeatureVector,
    lch: &FeatureVector,
    hsv: &FeatureVector,
    label: Option<Class>,
) -> Result<FusedFeature> {
    fuse(&[rgb, lch, hsv], &FUSED_BRANCHES, label)
}

/// Class probabilities and their argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probabilities: [f64; 3],
    pub class: Class,
}

pub fn softmax(logits: [f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|z| (z - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

fn argmax(v: &[f64; 3]) -> Class {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    Class::from_index(best).expect("three classes")
}

/// `log(sum(exp(z))) - z[target]`, computed stably.
fn cross_entropy(logits: &[f64; 3], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub const HEAD_MAGIC: &[u8; 4] = b"MCHD";
pub const HEAD_VERSION: u32 = 1;

/// The 3-class affine + softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    dim: usize,
    /// Row-major 3 x dim.
    weights: Vec<f64>,
    bias: [f64; 3],
}

impl HeadModel {
    pub fn zeros(dim: usize) -> Self {
        HeadModel {
            dim,
            weights: vec![0.0; Class::COUNT * dim],
            bias: [0.0; 3],
        }
    }

    pub fn from_parts(dim: usize, weights: Vec<f64>, bias: [f64; 3]) -> Result<Self> {
        if weights.len() != Class::COUNT * dim {
            return Err(Error::Contract(format!(
                "head weights hold {} values, expected 3 x {dim}",
                weights.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("head parameters must be finite".into()));
        }
        Ok(HeadModel { dim, weights, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight row of class `c`.
    pub fn row(&self, c: Class) -> &[f64] {
        &self.weights[c.index() * self.dim..][..self.dim]
    }

    pub fn bias(&self) -> [f64; 3] {
        self.bias
    }

    /// `3 D + 3`.
    pub fn param_count(&self) -> usize {
        param_count(self.dim)
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Contract(format!(
                "feature width {} does not match head width {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn logits_unchecked(&self, x: &[f32]) -> [f64; 3] {
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..][..self.dim];
            *zc += row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>();
        }
        z
    }

    pub fn logits(&self, x: &FusedFeature) -> Result<[f64; 3]> {
        self.check_dim(&x.values)?;
        Ok(self.logits_unchecked(&x.values))
    }

    pub fn predict(&self, x: &FusedFeature) -> Result<Prediction> {
        let probabilities = softmax(self.logits(x)?);
        Ok(Prediction {
            probabilities,
            class: argmax(&probabilities),
        })
    }

    /// Mean cross-entropy and its gradient over labelled samples.
    ///
    /// The gradient is laid out like the parameters: `3 x D` weights then
    /// the 3 biases.
    pub fn loss_and_gradient(&self, data: &[FusedFeature]) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<&FusedFeature> = data.iter().collect();
        validate(&batch, self.dim)?;
        let acc = accumulate(self, &batch);
        let n = batch.len() as f64;
        Ok((acc.loss / n, acc.grad.iter().map(|g| g / n).collect()))
    }

    /// Mean loss and accuracy on labelled samples.
    pub fn score(&self, data: &[FusedFeature]) -> Result<(f64, f64)> {
        let batch: Vec<&FusedFeature> = data.iter().collect();
        validate(&batch, self.dim)?;
        let acc = accumulate(self, &batch);
        let n = batch.len() as f64;
        Ok((acc.loss / n, acc.correct as f64 / n))
    }

    /// Flattened parameters: weights then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..n + 3]);
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(HEAD_MAGIC)?;
        w.write_all(&HEAD_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(Class::COUNT as u32).to_le_bytes())?;
        for v in self.weights.iter().chain(&self.bias) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: String| Error::format("head model", reason);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        if &header[..4] != HEAD_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != HEAD_VERSION as usize {
            return Err(bad(format!("unsupported version {}", word(4))));
        }
        let (dim, classes) = (word(8), word(12));
        if classes != Class::COUNT {
            return Err(bad(format!("expected 3 classes, file declares {classes}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| bad(e.to_string()))?;
        if body.len() != 4 * (classes * dim + classes) {
            return Err(bad(format!(
                "body holds {} bytes, expected {}",
                body.len(),
                4 * (classes * dim + classes)
            )));
        }
        let mut values: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let bias = values.split_off(classes * dim);
        HeadModel::from_parts(dim, values, [bias[0], bias[1], bias[2]])
    }

    /// f32 on disk; the loaded model is the f32-rounded one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        HeadModel::read_from(BufReader::new(file))
    }

    /// The model as it reads back from disk.
    pub fn rounded_to_f32(&self) -> Self {
        HeadModel {
            dim: self.dim,
            weights: self.weights.iter().map(|&v| v as f32 as f64).collect(),
            bias: self.bias.map(|v| v as f32 as f64),
        }
    }
}

/// `3 D + 3`.
pub fn param_count(dim: usize) -> usize {
    Class::COUNT * dim + Class::COUNT
}

struct Accumulated {
    loss: f64,
    correct: usize,
    grad: Vec<f64>,
}

fn validate(batch: &[&FusedFeature], dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Training("empty sample set".into()));
    }
    for x in batch {
        if x.values.len() != dim {
            return Err(Error::Training(format!(
                "image {}: feature width {} differs from {dim}",
                x.image_id,
                x.values.len()
            )));
        }
        if x.label.is_none() {
            return Err(Error::Training(format!("image {} has no label", x.image_id)));
        }
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "image {} has a non-finite feature",
                x.image_id
            )));
        }
    }
    Ok(())
}

/// Summed (not averaged) loss and gradient.
fn accumulate(model: &HeadModel, batch: &[&FusedFeature]) -> Accumulated {
    let dim = model.dim;
    let mut grad = vec![0.0; Class::COUNT * dim + Class::COUNT];
    let mut loss = 0.0;
    let mut correct = 0;
    for x in batch {
        let target = x.label.expect("validated").index();
        let z = model.logits_unchecked(&x.values);
        loss += cross_entropy(&z, target);
        let p = softmax(z);
        if argmax(&p).index() == target {
            correct += 1;
        }
        for c in 0..Class::COUNT {
            let delta = p[c] - if c == target { 1.0 } else { 0.0 };
            let row = &mut grad[c * dim..(c + 1) * dim];
            for (g, &v) in row.iter_mut().zip(&x.values) {
                *g += delta * v as f64;
            }
            grad[Class::COUNT * dim + c] += delta;
        }
    }
    Accumulated { loss, correct, grad }
}

/// Chunk size of the data-parallel gradient mode.
const PARALLEL_CHUNK: usize = 32;

fn accumulate_parallel(model: &HeadModel, batch: &[&FusedFeature]) -> Accumulated {
    let parts: Vec<Accumulated> = batch
        .par_chunks(PARALLEL_CHUNK)
        .map(|chunk| accumulate(model, chunk))
        .collect();
    let mut total = Accumulated {
        loss: 0.0,
        correct: 0,
        grad: vec![0.0; model.weights.len() + Class::COUNT],
    };
    // fixed chunk order keeps the reduction deterministic
    for part in parts {
        total.loss += part.loss;
        total.correct += part.correct;
        for (t, g) in total.grad.iter_mut().zip(&part.grad) {
            *t += g;
        }
    }
    total
}

/// Which epoch's parameters [`train_head`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checkpoint {
    BestValidation,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    /// Data-parallel gradient accumulation.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            seed: 0,
            checkpoint: Checkpoint::BestValidation,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl TrainingLog {
    /// `epoch,train_loss,train_acc,val_loss,val_acc`; empty cells when there
    /// is no validation set.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::format("training log", e);
        out.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:.8}", e.train_loss),
                format!("{:.8}", e.train_acc),
                opt(e.val_loss),
                opt(e.val_acc),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::format("training log", e))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Bias correction folded into the step size, epsilon added to
    /// `sqrt(v)`.
    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step;
        let alpha = cfg.learning_rate * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= alpha * self.m[i] / (self.v[i].sqrt() + cfg.epsilon);
        }
    }
}

/// Trains a head from zero initialisation with mini-batch Adam.
///
/// Batches are reshuffled every epoch from a stream derived from the seed;
/// the last partial batch is kept. Train loss and accuracy are running
/// averages over the epoch's batches.
pub fn train_head(train: &[FusedFeature], cfg: &TrainConfig, val: &[FusedFeature]) -> Result<(HeadModel, TrainingLog)> {
    cfg.validate()?;
    let dim = train
        .first()
        .ok_or_else(|| Error::Training("training set is empty".into()))?
        .dim();
    validate(&train.iter().collect::<Vec<_>>(), dim)?;
    if !val.is_empty() {
        validate(&val.iter().collect::<Vec<_>>(), dim)?;
    }

    let mut model = HeadModel::zeros(dim);
    let mut params = model.parameters();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&FusedFeature> = idx.iter().map(|&i| &train[i]).collect();
            let acc = if cfg.parallel {
                accumulate_parallel(&model, &batch)
            } else {
                accumulate(&model, &batch)
            };
            loss_sum += acc.loss;
            correct += acc.correct;
            let n = batch.len() as f64;
            let grad: Vec<f64> = acc.grad.iter().map(|g| g / n).collect();
            adam.update(&mut params, &grad, cfg);
            model.set_parameters(&params);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }

        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = model.score(val)?;
            (Some(l), Some(a))
        };
        let n = train.len() as f64;
        log.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        });
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            }
        }
    }

    let selected_epoch = match (cfg.checkpoint, best) {
        (Checkpoint::BestValidation, Some((_, epoch, p))) => {
            model.set_parameters(&p);
            epoch
        }
        _ => cfg.epochs,
    };
    Ok((
        model,
        TrainingLog {
            epochs: log,
            selected_epoch,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fv(id: u64, branch: ColorspaceId, fill: f32) -> FeatureVector {
        FeatureVector {
            image_id: id,
            branch,
            values: vec![fill; FEATURE_DIM],
        }
    }

    #[test]
    fn concat_layout() {
        let rgb = FeatureVector {
            image_id: 4,
            branch: ColorspaceId::Rgb,
            values: (0..FEATURE_DIM).map(|i| i as f32).collect(),
        };
        let lch = fv(4, ColorspaceId::Lch, -1.0);
        let hsv = fv(4, ColorspaceId::Hsv, 2.0);
        let f = concat_features(&rgb, &lch, &hsv, Some(Class::Real)).unwrap();
        assert_eq!(f.dim(), 3840);
        assert_eq!(&f.values[..1280], &rgb.values[..]);
        assert!(f.values[1280..2560].iter().all(|&v| v == -1.0));
        assert!(f.values[2560..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_contract_errors() {
        let rgb = fv(1, ColorspaceId::Rgb, 0.0);
        let lch = fv(1, ColorspaceId::Lch, 0.0);
        let hsv = fv(1, ColorspaceId::Hsv, 0.0);
        assert!(concat_features(&lch, &rgb, &hsv, None).is_err());
        assert!(concat_features(&rgb, &hsv, &lch, None).is_err());
        let other = fv(2, ColorspaceId::Hsv, 0.0);
        assert!(concat_features(&rgb, &lch, &other, None).is_err());
        let short = FeatureVector {
            values: vec![0.0; 10],
            ..hsv.clone()
        };
        assert!(concat_features(&rgb, &lch, &short, None).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(3840), 11523);
        assert_eq!(param_count(1280), 3843);
        assert_eq!(param_count(1), 6);
        assert_eq!(HeadModel::zeros(3840).param_count(), 11523);
    }

    #[test]
    fn uniform_prediction_from_zero_model() {
        let m = HeadModel::zeros(4);
        let x = FusedFeature {
            image_id: 0,
            label: None,
            values: vec![1.0, -2.0, 3.0, 0.5],
        };
        let p = m.predict(&x).unwrap();
        for v in p.probabilities {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let wrong = FusedFeature { values: vec![1.0], ..x };
        assert!(m.predict(&wrong).is_err());
    }

    #[test]
    fn confident_logits() {
        // e^10 / (e^10 + 2)
        let expected = 10f64.exp() / (10f64.exp() + 2.0);
        let m = HeadModel::from_parts(1, vec![0.0; 3], [10.0, 0.0, 0.0]).unwrap();
        let p = m
            .predict(&FusedFeature {
                image_id: 0,
                label: None,
                values: vec![0.0],
            })
            .unwrap();
        assert_eq!(p.class, Class::Gan);
        assert!(p.probabilities[0] > 0.9999);
        assert!((p.probabilities[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let p = softmax([1000.0, 999.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax([0.0, -1.0, -2000.0]);
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    fn random_problem(n: usize, dim: usize, seed: u64) -> (HeadModel, Vec<FusedFeature>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|i| FusedFeature {
                image_id: i as u64,
                label: Class::from_index(rng.gen_range(0..3)),
                values: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            })
            .collect();
        let weights = (0..3 * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.1];
        (HeadModel::from_parts(dim, weights, bias).unwrap(), data)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let (mut model, data) = random_problem(16, 8, seed);
            let (_, grad) = model.loss_and_gradient(&data).unwrap();
            let base = model.parameters();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] = base[i] + h;
                model.set_parameters(&p);
                let up = model.score(&data).unwrap().0;
                p[i] = base[i] - h;
                model.set_parameters(&p);
                let down = model.score(&data).unwrap().0;
                let numeric = (up - down) / (2.0 * h);
                let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-5, "param {i}: {} vs {numeric} ({rel:e})", grad[i]);
            }
            model.set_parameters(&base);
        }
    }

    #[test]
    fn training_errors() {
        let cfg = TrainConfig::default();
        assert!(matches!(train_head(&[], &cfg, &[]), Err(Error::Training(_))));
        let (_, mut data) = random_problem(4, 3, 1);
        data[2].values.push(0.0);
        assert!(train_head(&data, &cfg, &[]).is_err());
        let (_, mut data) = random_problem(4, 3, 1);
        data[1].values[0] = f32::NAN;
        assert!(train_head(&data, &cfg, &[]).is_err());
        let (_, mut data) = random_problem(4, 3, 1);
        data[0].label = None;
        assert!(train_head(&data, &cfg, &[]).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        let (_, data) = random_problem(4, 3, 1);
        assert!(train_head(&data, &bad, &[]).is_err());
    }

    #[test]
    fn memorizes_one_point() {
        let x = FusedFeature {
            image_id: 9,
            label: Some(Class::Gan),
            values: vec![0.3, -1.2, 4.0, 0.0, 2.2],
        };
        let (m, log) = train_head(std::slice::from_ref(&x), &TrainConfig::default(), &[]).unwrap();
        assert_eq!(m.predict(&x).unwrap().class, Class::Gan);
        assert_eq!(log.epochs.len(), 100);
        assert_eq!(log.selected_epoch, 100);
    }

    #[test]
    fn full_batch_loss_never_increases() {
        let (_, data) = random_problem(64, 6, 3);
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 200,
            checkpoint: Checkpoint::FinalEpoch,
            ..TrainConfig::default()
        };
        // With one batch per epoch the logged train loss is the loss at the
        // parameters entering that epoch.
        let (m, log) = train_head(&data, &cfg, &[]).unwrap();
        let mut losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
        losses.push(m.score(&data).unwrap().0);
        assert!((losses[0] - 3f64.ln()).abs() < 1e-12);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let (_, data) = random_problem(300, 20, 5);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 128,
            seed: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_head(&data, &cfg, &[]).unwrap();
        let (b, _) = train_head(&data, &TrainConfig { parallel: true, ..cfg }, &[]).unwrap();
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn best_validation_checkpoint() {
        let (_, data) = random_problem(60, 4, 8);
        let (train, val) = data.split_at(40);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (m, log) = train_head(train, &cfg, val).unwrap();
        let best = log
            .epochs
            .iter()
            .map(|e| e.val_acc.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let first_best = log.epochs.iter().find(|e| e.val_acc.unwrap() == best).unwrap().epoch;
        assert_eq!(log.selected_epoch, first_best);
        assert!((m.score(val).unwrap().1 - best).abs() < 1e-12);
    }

    #[test]
    fn head_file_layout() {
        let m = HeadModel::from_parts(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [0.5, -0.5, 0.25]).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MCHD");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 4 * 9);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 4..], &0.25f32.to_le_bytes());
        assert_eq!(HeadModel::read_from(&bytes[..]).unwrap(), m);
        assert!(HeadModel::read_from(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn log_csv() {
        let log = TrainingLog {
            epochs: vec![EpochStats {
                epoch: 1,
                train_loss: 1.0,
                train_acc: 0.5,
                val_loss: None,
                val_acc: None,
            }],
            selected_epoch: 1,
        };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,1.00000000,0.50000000,,\n"
        );
    }
}
