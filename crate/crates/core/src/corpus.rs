//! Seeded synthetic mini-corpus.
//!
//! Three procedural image families with class-typical statistics, used for
//! smoke runs and tests where real photographs, renders and GAN samples are
//! not available:
//!
//! * `Real`: smooth multi-scale structure with amplitude falling with
//!   frequency, correlated colour, additive sensor noise;
//! * `Graphics`: flat-shaded shapes with hard edges over a linear gradient,
//!   noise free;
//! * `GAN`: smooth texture overlaid with a periodic checkerboard pattern of
//!   the kind left by strided upsampling, plus saturated hue drift.
//!
//! The families are separable by construction; accuracy on them says the
//! pipeline works end to end, nothing about forensic performance.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::evalkit::{DatasetManifest, ManifestRecord, Split};
use crate::imageio::RawImage;
use crate::Class;

pub const CATEGORIES: [&str; 3] = ["indoor", "outdoor", "object"];
pub const DEFAULT_SIDE: usize = 96;

fn rng_for(seed: u64, class: Class, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class.index() as u64) << 32) | index as u64);
    rng
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

fn smooth_waves(rng: &mut ChaCha8Rng, count: usize, max_freq: f64, amp: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let f = rng.gen_range(0.5..max_freq);
            let theta = rng.gen_range(0.0..PI);
            let a = amp / f;
            let tint: f64 = rng.gen_range(0.6..1.0);
            Wave {
                fx: f * theta.cos(),
                fy: f * theta.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: [a, a * tint, a * tint * tint],
            }
        })
        .collect()
}

fn eval_waves(waves: &[Wave], u: f64, v: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for w in waves {
        let s = (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).sin();
        for (o, a) in out.iter_mut().zip(w.amp) {
            *o += a * s;
        }
    }
    out
}

fn finish(side: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> RawImage {
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            data.extend(f(x, y).map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    RawImage::new(side, side, data).expect("side > 0")
}

fn real(rng: &mut ChaCha8Rng, side: usize) -> RawImage {
    let waves = smooth_waves(rng, 12, 8.0, 60.0);
    let base: [f64; 3] = [
        rng.gen_range(80.0..170.0),
        rng.gen_range(80.0..160.0),
        rng.gen_range(60.0..150.0),
    ];
    let noise = Normal::new(0.0, rng.gen_range(3.0..6.0)).expect("positive sigma");
    let samples: Vec<f64> = (0..side * side * 3).map(|_| noise.sample(rng)).collect();
    let n = side as f64;
    finish(side, |x, y| {
        let w = eval_waves(&waves, x as f64 / n, y as f64 / n);
        let i = (y * side + x) * 3;
        [0, 1, 2].map(|c| base[c] + w[c] + samples[i + c])
    })
}

fn graphics(rng: &mut ChaCha8Rng, side: usize) -> RawImage {
    let bg0: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.0..255.0));
    let bg1: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.0..255.0));
    let shapes: Vec<(f64, f64, f64, bool, [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            let cx = rng.gen_range(0.1..0.9);
            let cy = rng.gen_range(0.1..0.9);
            let r = rng.gen_range(0.08..0.3);
            let round = rng.gen_bool(0.5);
            let col = [0; 3].map(|_| rng.gen_range(0.0..255.0));
            (cx, cy, r, round, col)
        })
        .collect();
    let n = side as f64;
    finish(side, |x, y| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        let t = 0.5 * (u + v);
        let mut px = [0, 1, 2].map(|c| bg0[c] * (1.0 - t) + bg1[c] * t);
        for &(cx, cy, r, round, col) in &shapes {
            let hit = if round {
                (u - cx).hypot(v - cy) < r
            } else {
                (u - cx).abs() < r && (v - cy).abs() < r * 0.7
            };
            if hit {
                let shade = 1.0 - 0.3 * ((u - cx) + (v - cy)) / r.max(1e-9);
                px = col.map(|c| c * shade.clamp(0.6, 1.2));
            }
        }
        px
    })
}

fn gan(rng: &mut ChaCha8Rng, side: usize) -> RawImage {
    let waves = smooth_waves(rng, 8, 5.0, 45.0);
    let base: [f64; 3] = [0; 3].map(|_| rng.gen_range(70.0..190.0));
    let period = if rng.gen_bool(0.5) { 2 } else { 4 };
    let amp = rng.gen_range(10.0..18.0);
    let drift = rng.gen_range(0.0..2.0 * PI);
    let n = side as f64;
    finish(side, |x, y| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        let w = eval_waves(&waves, u, v);
        let checker = if (x / (period / 2) + y / (period / 2)) % 2 == 0 {
            amp
        } else {
            -amp
        };
        [0, 1, 2].map(|c| {
            let hue = 40.0 * (drift + 2.0 * PI * (u + c as f64 / 3.0)).sin();
            base[c] + w[c] + checker + hue
        })
    })
}

/// One image of `class`, fully determined by (`seed`, `class`, `index`).
pub fn synth_image(class: Class, index: usize, seed: u64, side: usize) -> RawImage {
    let mut rng = rng_for(seed, class, index);
    match class {
        Class::Real => real(&mut rng, side),
        Class::Graphics => graphics(&mut rng, side),
        Class::Gan => gan(&mut rng, side),
    }
}

/// Writes `per_class` PNGs per class under `dir` plus `manifest.csv`
/// (all records unassigned); returns the manifest.
pub fn write_corpus(dir: impl AsRef<Path>, per_class: usize, seed: u64, side: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if per_class == 0 || side == 0 {
        return Err(Error::Precondition(
            "corpus needs at least one image of positive size".into(),
        ));
    }
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::new();
    for class in Class::ALL {
        for i in 0..per_class {
            let image_id = (class.index() * per_class + i) as u64;
            let rel = format!("images/{}_{i:04}.png", class.name().to_ascii_lowercase());
            synth_image(class, i, seed, side).save_png(dir.join(&rel))?;
            records.push(ManifestRecord {
                image_id,
                path: rel.into(),
                label: class,
                category: CATEGORIES[i % CATEGORIES.len()].to_string(),
                split: Split::Unassigned,
            });
        }
    }
    let manifest = DatasetManifest::new(records, dir)?;
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}
