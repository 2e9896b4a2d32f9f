//! Exact t-SNE (O(N^2) per iteration) and silhouette scoring.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Class;

/// Floor applied to joint probabilities in both spaces.
const PROB_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;
const SEARCH_STEPS: usize = 100;
const SEARCH_TOL: f64 = 1e-5;
pub const MAX_POINTS: usize = 5000;
pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Class>,
}

fn squared_distances(x: &[Vec<f32>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i]
                .iter()
                .zip(&x[j])
                .map(|(a, b)| {
                    let t = *a as f64 - *b as f64;
                    t * t
                })
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional rows p(j|i) calibrated to the target perplexity.
fn conditional_probabilities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let d_min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let out = &mut p[i * n..(i + 1) * n];
        for _ in 0..SEARCH_STEPS {
            // Shifting by the nearest distance keeps exp() from underflowing.
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                out[j] = if j == i {
                    0.0
                } else {
                    let shifted = row[j] - d_min;
                    let e = (-beta * shifted).exp();
                    weighted += shifted * e;
                    e
                };
                sum += out[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            out.iter_mut().for_each(|v| *v /= sum);
            let diff = entropy - target;
            if diff.abs() < SEARCH_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
    }
    p
}

pub fn tsne(features: &[Vec<f32>], labels: &[Class], cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::Precondition(format!("{n} features but {} labels", labels.len())));
    }
    if !(MIN_POINTS..=MAX_POINTS).contains(&n) {
        return Err(Error::Precondition(format!(
            "exact t-SNE needs {MIN_POINTS}..={MAX_POINTS} points, got {n}"
        )));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64 / 3.0) {
        return Err(Error::Precondition(format!(
            "perplexity {} must be positive and below n/3 = {:.3}",
            cfg.perplexity,
            n as f64 / 3.0
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Precondition("features differ in width".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("features contain non-finite values".into()));
    }

    let d = squared_distances(features);
    let cond = conditional_probabilities(&d, n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(PROB_FLOOR);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.exaggeration_iterations { 0.5 } else { 0.8 };

        let mut sum_num = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                sum_num += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / sum_num).max(PROB_FLOOR);
                let w = (exaggeration * p[i * n + j] - q) * num[i * n + j];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    (gains[i][k] * 0.8).max(MIN_GAIN)
                } else {
                    gains[i][k] + 0.2
                };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let mean = y
            .iter()
            .fold([0.0, 0.0], |m, p| [m[0] + p[0], m[1] + p[1]])
            .map(|s| s / n as f64);
        y.iter_mut().for_each(|p| {
            p[0] -= mean[0];
            p[1] -= mean[1];
        });
    }

    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE diverged to non-finite coordinates".into()));
    }
    Ok(Embedding2D {
        points: y,
        labels: labels.to_vec(),
    })
}

/// Mean silhouette coefficient of 2D points under the given cluster labels.
/// Points in singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n < 2 {
        return Err(Error::Precondition(
            "silhouette needs at least two labelled points".into(),
        ));
    }
    let clusters = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut sizes = vec![0usize; clusters];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Precondition("silhouette needs at least two clusters".into()));
    }
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; clusters];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(points[i], points[j]);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

impl Embedding2D {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "x,y,label")?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(w, "{},{},{}", p[0], p[1], l)?;
        }
        Ok(())
    }

    /// Scatter plot: circles for GAN, squares for Graphics, triangles for Real.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 640.0;
        const MARGIN: f64 = 40.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &self.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let span = (0..2).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-12);
        let scale = (SIZE - 2.0 * MARGIN) / span;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (p, l) in self.points.iter().zip(&self.labels) {
            let x = MARGIN + (p[0] - lo[0]) * scale;
            let y = SIZE - MARGIN - (p[1] - lo[1]) * scale;
            let _ = match l {
                Class::Gan => writeln!(
                    s,
                    r##"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="none" stroke="#d62728"/>"##
                ),
                Class::Graphics => writeln!(
                    s,
                    r##"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="none" stroke="#1f77b4"/>"##,
                    x - 3.5,
                    y - 3.5
                ),
                Class::Real => writeln!(
                    s,
                    r##"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="#2ca02c"/>"##,
                    x,
                    y - 4.0,
                    x - 3.5,
                    y + 3.0,
                    x + 3.5,
                    y + 3.0
                ),
            };
        }
        let legend = [("GAN", "#d62728"), ("Graphics", "#1f77b4"), ("Real", "#2ca02c")];
        for (k, (name, color)) in legend.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" fill="{color}">{name}</text>"#,
                MARGIN + 90.0 * k as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
