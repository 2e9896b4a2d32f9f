//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are pinned as constants below.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Instant;

use mcfuse::backbone::{Backbone, FEATURE_DIM};
use mcfuse::colorspace::{inverse_transform, rescale_0_255, transform, ColorspaceId, ImageTensor, RangeTag};
use mcfuse::config::ExperimentConfig;
use mcfuse::evalkit::{chi_square_sf, silhouette, stuart_maxwell_table, tsne, DatasetManifest, TsneConfig};
use mcfuse::explain::cam;
use mcfuse::extractor::FusionExtractor;
use mcfuse::fusionhead::{param_count, train_head, Checkpoint, FusedFeature, HeadModel, TrainConfig};
use mcfuse::imageio::{load_image, RawImage};
use mcfuse::preprocess::{log_residual, log_response, run_pipeline, LoGConfig, ModelPreset};
use mcfuse::Class;
use mcfuse_psycho::AnnotationRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const BIN: &str = env!("CARGO_BIN_EXE_mcfuse");
const GOLDEN: &str = include_str!("../../core/tests/data/colorspace_golden.csv");
const LOG_IMPULSE: &str = include_str!("../../core/tests/data/log_impulse.csv");

const GOLDEN_TOL: f64 = 1e-4;
const ROUND_TRIP_TOL: f64 = 1.0; // one 8-bit level
const KERNEL_SUM_TOL: f64 = 1e-9;
const IMPULSE_TOL: f64 = 1e-9;
const POOLED_MEAN_TOL: f64 = 1e-4;
const BATCH_TOL: f32 = 1e-5;
const GRADIENT_REL_TOL: f64 = 1e-5;
const BLOB_ACCURACY: f64 = 0.99;
const CAM_REL_TOL: f64 = 1e-3;
const SM_STAT_TOL: f64 = 1e-9;
const SM_P_TOL: f64 = 1e-6;
const SF_REL_TOL: f64 = 1e-10;
const SMOKE_ACCURACY: f64 = 0.5;
const SMOKE_QF100_GAP: f64 = 0.10;
const TSNE_SILHOUETTE: f64 = 0.8;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

/// Synthetic corpus and reference backbone written through the binary.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        run_ok(
            &root,
            &["synth-corpus", "--out", "corpus", "--per-class", "30", "--seed", "1"],
        );
        run_ok(&root, &["synth-backbone", "--out", "backbone.onnx"]);
        Fixture { _dir: dir, root }
    }

    fn manifest(&self) -> DatasetManifest {
        DatasetManifest::load(self.root.join("corpus/manifest.csv")).unwrap()
    }

    fn backbone(&self) -> Backbone {
        Backbone::load(self.root.join("backbone.onnx")).unwrap()
    }
}

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "mcfuse {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p1() -> Check {
    let mc = param_count(3 * FEATURE_DIM);
    let sc = param_count(FEATURE_DIM);
    ensure!(mc == 11523 && sc == 3843, "MC {mc}, SC {sc}");
    let base = "[experiment]\nmanifest = \"m.csv\"\nbackbone = \"b.onnx\"\noutput_dir = \"o\"\n";
    let fused = ExperimentConfig::parse(base, Path::new("/")).unwrap();
    let single = ExperimentConfig::parse(&format!("{base}colorspace = \"HSV\"\n"), Path::new("/")).unwrap();
    let from_config = |c: &ExperimentConfig| param_count(c.pipelines().len() * FEATURE_DIM);
    ensure!(
        from_config(&fused) == 11523 && from_config(&single) == 3843,
        "configured heads give {} and {}",
        from_config(&fused),
        from_config(&single)
    );
    Ok(format!("MC head {mc}, SC head {sc} parameters (exact)"))
}

fn random_raw(rng: &mut ChaCha8Rng) -> RawImage {
    let (w, h) = (rng.gen_range(2..16), rng.gen_range(2..16));
    RawImage::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn p2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for n in 0..1000 {
        let raw = random_raw(&mut rng);
        let rgb = ImageTensor::from_raw(&raw);
        for space in ColorspaceId::ALL {
            let native = transform(&rgb, space).unwrap();
            let out = rescale_0_255(&native);
            for c in 0..3 {
                let before: Vec<f64> = native.channel(c).collect();
                let after: Vec<f64> = out.channel(c).collect();
                ensure!(
                    after.iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)),
                    "image {n} {space}: non-integer or out-of-range output"
                );
                let lo = before.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    for (b, a) in before.iter().zip(&after) {
                        ensure!(*b != lo || *a == 0.0, "image {n} {space}: min maps to {a}");
                        ensure!(*b != hi || *a == 255.0, "image {n} {space}: max maps to {a}");
                    }
                }
                let mut order: Vec<usize> = (0..before.len()).collect();
                order.sort_by(|&i, &j| before[i].total_cmp(&before[j]));
                ensure!(
                    order.windows(2).all(|w| after[w[0]] <= after[w[1]]),
                    "image {n} {space} channel {c}: order not preserved"
                );
            }
            checked += 1;
        }
        let (scale, shift) = (rng.gen_range(0.5..4.0), rng.gen_range(-100.0..100.0));
        let moved = ImageTensor::new(
            rgb.width(),
            rgb.height(),
            rgb.data().iter().map(|v| v * scale + shift).collect(),
            ColorspaceId::Rgb,
            RangeTag::Native,
        )
        .unwrap();
        let (a, b) = (rescale_0_255(&rgb), rescale_0_255(&moved));
        for c in 0..3 {
            let raw_c: Vec<f64> = rgb.channel(c).collect();
            let lo = raw_c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for ((v, x), y) in raw_c.iter().zip(a.channel(c)).zip(b.channel(c)) {
                let ideal = if hi > lo { (v - lo) / (hi - lo) * 255.0 } else { 0.0 };
                let half_level = (ideal.fract() - 0.5).abs() < 1e-9;
                ensure!(
                    x == y || (half_level && (x - y).abs() <= 1.0),
                    "image {n}: affine change moved {x} to {y}"
                );
            }
        }
    }
    Ok(format!(
        "{checked} image/space pairs: integral, 0..255, extremes, order, affine invariance"
    ))
}

fn p3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..10_000 * 3).map(|_| rng.gen_range(0.0..=255.0)).collect();
    let img = ImageTensor::new(100, 100, data, ColorspaceId::Rgb, RangeTag::Native).unwrap();
    let mut worst_rt = 0.0f64;
    for space in ColorspaceId::ALL {
        let back = inverse_transform(&transform(&img, space).unwrap()).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(worst <= ROUND_TRIP_TOL, "{space}: round-trip error {worst}");
        worst_rt = worst_rt.max(worst);
    }
    let mut reader = csv::Reader::from_reader(GOLDEN.as_bytes());
    let mut worst_golden = 0.0f64;
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let rgb: [f64; 3] = std::array::from_fn(|i| row[i].parse().unwrap());
        let space: ColorspaceId = row[3].parse().unwrap();
        let got = mcfuse::colorspace::convert_pixel(rgb, space);
        for c in 0..3 {
            let want: f64 = row[4 + c].parse().unwrap();
            worst_golden = worst_golden.max((got[c] - want).abs());
        }
        rows += 1;
    }
    ensure!(worst_golden < GOLDEN_TOL, "golden deviation {worst_golden:e}");
    Ok(format!(
        "10^4 pixels x 11 spaces round-trip max {worst_rt:.2e} (tol {ROUND_TRIP_TOL}/255 FS); {rows} golden vectors max {worst_golden:.2e} (tol {GOLDEN_TOL:e})"
    ))
}

fn p4() -> Check {
    let cfg = LoGConfig::default();
    let sum: f64 = cfg.kernel().unwrap().iter().sum();
    ensure!(sum.abs() < KERNEL_SUM_TOL, "kernel sum {sum:e}");
    for v in [0.0, 17.0, 128.0, 255.0] {
        let img = ImageTensor::new(9, 7, vec![v; 189], ColorspaceId::Hsv, RangeTag::Rescaled0To255).unwrap();
        ensure!(
            log_residual(&img, &cfg).unwrap() == img,
            "uniform {v} is not a fixed point"
        );
    }
    let mut reader = csv::Reader::from_reader(LOG_IMPULSE.as_bytes());
    let rows: Vec<[f64; 5]> = reader
        .records()
        .map(|r| std::array::from_fn(|i| r.as_ref().unwrap()[i].parse().unwrap()))
        .collect();
    let mut worst = 0.0f64;
    for (ix, iy) in [(4, 3), (0, 0), (8, 1)] {
        let mut data = vec![0.0; 189];
        data[(iy * 9 + ix) * 3] = 1.0;
        let img = ImageTensor::new(9, 7, data, ColorspaceId::Lch, RangeTag::Rescaled0To255).unwrap();
        let got = log_response(&img, &cfg).unwrap();
        for r in rows.iter().filter(|r| (r[0], r[1]) == (ix as f64, iy as f64)) {
            let (x, y) = (r[2] as usize, r[3] as usize);
            worst = worst.max((got[(y * 9 + x) * 3] - r[4]).abs());
        }
    }
    ensure!(worst < IMPULSE_TOL, "impulse deviation {worst:e}");
    Ok(format!(
        "kernel sum {sum:.1e}; uniform fixed point exact; impulse response max dev {worst:.1e} (tol {IMPULSE_TOL:e})"
    ))
}

fn p5(fx: &Fixture) -> Check {
    let b = fx.backbone();
    let m = fx.manifest();
    let branches = ModelPreset::McEffnet2.branches(LoGConfig::default());
    let inputs: Vec<ImageTensor> = m
        .records()
        .iter()
        .step_by(4)
        .take(20)
        .enumerate()
        .map(|(i, r)| run_pipeline(&load_image(m.resolve(r)).unwrap(), &branches[i % 3]).unwrap())
        .collect();
    ensure!(inputs.len() == 20, "only {} images", inputs.len());
    let refs: Vec<&ImageTensor> = inputs.iter().collect();
    let batched = b.extract_maps_batch(&refs).unwrap();
    let mut worst_mean = 0.0f64;
    for (maps, pooled) in &batched {
        let dev = maps
            .spatial_mean()
            .iter()
            .zip(pooled)
            .map(|(m, &p)| (m - p as f64).abs())
            .fold(0.0, f64::max);
        worst_mean = worst_mean.max(dev);
    }
    ensure!(worst_mean < POOLED_MEAN_TOL, "pooled vs mean {worst_mean:e}");
    let again = b.extract_maps_batch(&refs).unwrap();
    ensure!(again == batched, "repeated extraction differs");
    let mut worst_batch = 0.0f32;
    for (t, (_, pooled)) in inputs.iter().zip(&batched) {
        let single = b.extract(t, 0).unwrap().values;
        worst_batch = worst_batch.max(
            single
                .iter()
                .zip(pooled)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        );
    }
    ensure!(worst_batch < BATCH_TOL, "batch vs single {worst_batch:e}");
    Ok(format!(
        "20 images: pooled-mean max {worst_mean:.1e} (tol {POOLED_MEAN_TOL:e}); bitwise repeatable; batch max {worst_batch:.1e} (tol {BATCH_TOL:e})"
    ))
}

fn blobs(per_class: usize, dim: usize, seed: u64) -> Vec<FusedFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0f32, 0.3).unwrap();
    let mut out = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for i in 0..per_class {
            out.push(FusedFeature {
                image_id: (c * per_class + i) as u64,
                label: Class::from_index(c),
                values: centre.iter().map(|m| (m + noise.sample(&mut rng)).max(0.0)).collect(),
            });
        }
    }
    out
}

fn p6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 8;
    let data: Vec<FusedFeature> = (0..16)
        .map(|i| FusedFeature {
            image_id: i,
            label: Class::from_index(i as usize % 3),
            values: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let weights = (0..3 * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut model = HeadModel::from_parts(dim, weights, [0.1, -0.2, 0.05]).unwrap();
    let (_, grad) = model.loss_and_gradient(&data).unwrap();
    let base = model.parameters();
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.set_parameters(&p);
        let up = model.score(&data).unwrap().0;
        p[i] = base[i] - h;
        model.set_parameters(&p);
        let down = model.score(&data).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        worst_rel = worst_rel.max((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8));
    }
    ensure!(worst_rel < GRADIENT_REL_TOL, "gradient relative error {worst_rel:e}");

    let train = blobs(100, 3 * FEATURE_DIM, 5);
    let cfg = TrainConfig {
        checkpoint: Checkpoint::FinalEpoch,
        ..Default::default()
    };
    ensure!(
        (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (0.001, 256, 100),
        "defaults drifted"
    );
    let (a, _) = train_head(&train, &cfg, &[]).unwrap();
    let acc = a.score(&train).unwrap().1;
    ensure!(acc >= BLOB_ACCURACY, "blob train accuracy {acc}");
    let (b, _) = train_head(&train, &cfg, &[]).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.write_to(&mut ba).unwrap();
    b.write_to(&mut bb).unwrap();
    ensure!(ba == bb && a == b, "fixed-seed retraining differs");
    Ok(format!(
        "gradient rel err {worst_rel:.1e} (tol {GRADIENT_REL_TOL:e}); blobs {:.1}% after 100 epochs; bitwise reproducible",
        acc * 100.0
    ))
}

fn p7(fx: &Fixture) -> Check {
    let ex = FusionExtractor::new(fx.backbone(), ModelPreset::McEffnet2.branches(LoGConfig::default())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = ex.dim();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let weights: Vec<f64> = (0..3 * dim).map(|_| noise.sample(&mut rng)).collect();
    let head = HeadModel::from_parts(dim, weights, [0.3, -0.2, 0.1]).unwrap();
    let m = fx.manifest();
    let mut worst = 0.0f64;
    let mut count = 0;
    for r in m.records() {
        let out = ex.outputs(r.image_id, &load_image(m.resolve(r)).unwrap()).unwrap();
        let logits = head.logits(&ex.fuse_parts(&out.features, None).unwrap()).unwrap();
        for class in Class::ALL {
            let h = cam(&head, &out.maps, class).unwrap();
            let z = logits[class.index()];
            worst = worst.max((h.combined.mean() + head.bias()[class.index()] - z).abs() / z.abs());
            count += 1;
        }
    }
    ensure!(worst < CAM_REL_TOL, "logit identity relative error {worst:e}");
    Ok(format!(
        "{count} image/class pairs: max relative error {worst:.1e} (tol {CAM_REL_TOL:e})"
    ))
}

fn p8() -> Check {
    let sym = stuart_maxwell_table(&[[10, 4, 2], [4, 7, 3], [2, 3, 9]]).unwrap();
    ensure!(
        sym.statistic == 0.0 && sym.p_value == 1.0,
        "symmetric table gave {sym:?}"
    );
    let ex = stuart_maxwell_table(&[[20, 5, 0], [2, 30, 4], [1, 3, 35]]).unwrap();
    let (ds, dp) = (
        (ex.statistic - 0.5079365079365079).abs(),
        (ex.p_value - 0.7757164275739282).abs(),
    );
    ensure!(ds < SM_STAT_TOL && dp < SM_P_TOL, "example gave {ex:?}");
    let mut worst = 0.0f64;
    for i in 0..=400 {
        let x = i as f64 * 0.25;
        let exact = (-x / 2.0).exp();
        worst = worst.max((chi_square_sf(x, 2).unwrap() - exact).abs() / exact);
    }
    ensure!(worst <= SF_REL_TOL, "df=2 survival relative error {worst:e}");
    Ok(format!(
        "symmetric 0 / p 1; example dev {ds:.1e} / {dp:.1e}; df=2 survival rel err {worst:.1e} (tol {SF_REL_TOL:e})"
    ))
}

fn p9(fx: &Fixture) -> Check {
    let root = &fx.root;
    run_ok(
        root,
        &[
            "split",
            "--input",
            "corpus/manifest.csv",
            "--output",
            "corpus/split.csv",
            "--seed",
            "1",
        ],
    );
    std::fs::write(
        root.join("exp.toml"),
        "[experiment]\nmanifest = \"corpus/split.csv\"\nbackbone = \"backbone.onnx\"\noutput_dir = \"out\"\nseed = 1\n",
    )
    .unwrap();
    for cmd in ["extract", "train", "eval", "robustness"] {
        run_ok(root, &[cmd, "--config", "exp.toml"]);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("out/eval/report.json")).unwrap()).unwrap();
    let acc = report["result"]["total"].as_f64().unwrap();
    let test_n = report["result"]["support"]
        .as_array()
        .map_or(0, |s| s.iter().filter_map(|v| v.as_u64()).sum());
    ensure!(acc > SMOKE_ACCURACY, "test accuracy {acc}");
    let mut reader = csv::Reader::from_path(root.join("out/robustness.csv")).unwrap();
    let points: Vec<(u8, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    ensure!(points.len() == 10, "{} sweep points", points.len());
    let qf100 = points
        .iter()
        .find(|p| p.0 == 100)
        .map(|p| p.1)
        .ok_or("no qf=100 point")?;
    let gap = (qf100 - acc).abs();
    ensure!(gap <= SMOKE_QF100_GAP, "qf=100 accuracy {qf100} vs uncompressed {acc}");
    Ok(format!(
        "90 images, {test_n} test: accuracy {:.1}% (> {:.0}%); 10 sweep points; qf=100 gap {:.1} pp (tol {:.0} pp)",
        acc * 100.0,
        SMOKE_ACCURACY * 100.0,
        gap * 100.0,
        SMOKE_QF100_GAP * 100.0
    ))
}

fn p10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (c, class) in [Class::Gan, Class::Real].into_iter().enumerate() {
        for _ in 0..100 {
            let mut v: Vec<f32> = (0..3 * FEATURE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            v[0] += 100.0 * c as f32;
            x.push(v);
            labels.push(class);
        }
    }
    let cfg = TsneConfig::default();
    let e = tsne(&x, &labels, &cfg).unwrap();
    let ids: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let s = silhouette(&e.points, &ids).unwrap();
    ensure!(s > TSNE_SILHOUETTE, "silhouette {s}");
    ensure!(tsne(&x, &labels, &cfg).unwrap() == e, "seeded rerun differs");
    Ok(format!(
        "silhouette {s:.3} (> {TSNE_SILHOUETTE}); seeded rerun identical"
    ))
}

/// A running `psycho-serve`; killed with SIGKILL on drop.
struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(root: &Path) -> Server {
        let mut child = Command::new(BIN)
            .args([
                "psycho-serve",
                "--manifest",
                "pool/manifest.csv",
                "--store",
                "store",
                "--study-id",
                "fig7",
                "--addr",
                "127.0.0.1:0",
                "--seed",
                "5",
            ])
            .current_dir(root)
            .env("PSYCHO_ADMIN_TOKEN", "tok")
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .expect("listening line")
            .to_string();
        Server { child, base }
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }

    fn call(&self, method: &str, path: &str, body: Option<&str>, token: Option<&str>) -> (u16, String) {
        let mut req = ureq::request(method, &format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.set("x-admin-token", t);
        }
        let res = match body {
            Some(b) => req.set("content-type", "application/x-ndjson").send_string(b),
            None => req.call(),
        };
        match res {
            Ok(r) => (r.status(), r.into_string().unwrap()),
            Err(ureq::Error::Status(code, r)) => (code, r.into_string().unwrap()),
            Err(e) => panic!("{method} {path}: {e}"),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s.trim()).unwrap()
}

fn p11() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    mcfuse::corpus::write_corpus(root.join("pool"), 110, 11, 16).unwrap();

    let server = Server::start(root);
    let mut sessions: Vec<(String, Vec<u64>)> = Vec::new();
    for p in 0..11 {
        let (status, body) = server.call(
            "POST",
            "/studies/fig7/sessions",
            Some(&format!("{{\"participant\":\"p{p}\"}}\n")),
            None,
        );
        ensure!(status == 201, "session {p}: status {status}");
        let v = json(&body);
        let images: Vec<u64> = v["images"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i.as_u64().unwrap())
            .collect();
        sessions.push((v["session_id"].as_str().unwrap().to_string(), images));
    }
    let all: HashSet<u64> = sessions.iter().flat_map(|s| s.1.iter().copied()).collect();
    ensure!(sessions.iter().all(|s| s.1.len() == 30), "session sizes differ from 30");
    ensure!(
        all.len() == 330,
        "assignments overlap or miss images: {} distinct",
        all.len()
    );
    let (status, body) = server.call(
        "POST",
        "/studies/fig7/sessions",
        Some("{\"participant\":\"extra\"}\n"),
        None,
    );
    ensure!(
        status == 409 && json(&body)["error"] == "study_full",
        "12th session: {status} {body}"
    );

    let answered = [30usize, 5, 0, 12, 0, 0, 1, 0, 0, 0, 29];
    for ((sid, _), &n) in sessions.iter().zip(&answered) {
        for i in 0..n {
            let (_, body) = server.call("GET", &format!("/sessions/{sid}/next"), None, None);
            let next = json(&body);
            let id = next["image_id"].as_u64().unwrap();
            let sub = format!(
                "{{\"image_id\":{id},\"label\":\"Real\",\"boxes\":[{{\"x\":1,\"y\":2,\"w\":4,\"h\":4}}],\"elapsed_ms\":{}}}\n",
                100 + i
            );
            let (status, _) = server.call("POST", &format!("/sessions/{sid}/annotations"), Some(&sub), None);
            ensure!(status == 201, "submit to {sid}: {status}");
            if i == 0 {
                let (status, body) = server.call("POST", &format!("/sessions/{sid}/annotations"), Some(&sub), None);
                ensure!(
                    status == 409 && json(&body)["error"] == "duplicate",
                    "duplicate accepted: {status}"
                );
            }
        }
    }
    let (_, live_export) = server.call("GET", "/studies/fig7/export", None, Some("tok"));
    server.kill();

    let server = Server::start(root);
    for ((sid, images), &n) in sessions.iter().zip(&answered) {
        let (_, body) = server.call("GET", &format!("/sessions/{sid}/next"), None, None);
        let next = json(&body);
        ensure!(
            next["index"].as_u64() == Some(n as u64),
            "{sid}: cursor {} after restart, want {n}",
            next["index"]
        );
        ensure!(
            next["done"].as_bool() == Some(n == 30),
            "{sid}: done flag {} after restart",
            next["done"]
        );
        if n < 30 {
            ensure!(next["image_id"].as_u64() == Some(images[n]), "{sid}: wrong next image");
        }
    }
    let (status, _) = server.call(
        "POST",
        "/studies/fig7/sessions",
        Some("{\"participant\":\"late\"}\n"),
        None,
    );
    ensure!(status == 409, "pool refilled after restart");
    let (status, _) = server.call("GET", "/studies/fig7/export", None, None);
    ensure!(status == 401, "export without token: {status}");
    let (status, export) = server.call("GET", "/studies/fig7/export", None, Some("tok"));
    ensure!(status == 200 && export == live_export, "export changed across restart");
    server.kill();

    let parse = |text: &str| -> Vec<AnnotationRecord> {
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let over_http = parse(&export);
    let total: usize = answered.iter().sum();
    ensure!(
        over_http.len() == total,
        "{} exported records, want {total}",
        over_http.len()
    );
    run_ok(
        root,
        &[
            "psycho-export",
            "--manifest",
            "pool/manifest.csv",
            "--store",
            "store",
            "--study-id",
            "fig7",
            "--seed",
            "5",
            "--out",
            "export",
        ],
    );
    let offline = parse(&std::fs::read_to_string(root.join("export/annotations.ndjson")).unwrap());
    ensure!(offline == over_http, "offline export differs from the HTTP export");
    let mut buf = Vec::new();
    mcfuse_psycho::export::write_records(&offline, &mut buf).unwrap();
    let reread = mcfuse_psycho::export::read_records(buf.as_slice()).unwrap();
    ensure!(reread == offline, "export does not round-trip");
    Ok(format!(
        "11x30 disjoint sessions exhaust 330 images; duplicate rejected; SIGKILL restart recovered 11 cursors; {total} records round-trip"
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let fixture = Fixture::new();
    let criteria: Vec<Criterion> = vec![
        ("P1", Box::new(p1)),
        ("P2", Box::new(p2)),
        ("P3", Box::new(p3)),
        ("P4", Box::new(p4)),
        ("P5", Box::new(|| p5(&fixture))),
        ("P6", Box::new(p6)),
        ("P7", Box::new(|| p7(&fixture))),
        ("P8", Box::new(p8)),
        ("P9", Box::new(|| p9(&fixture))),
        ("P10", Box::new(p10)),
        ("P11", Box::new(p11)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{name:<4} PASS  {detail}  [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("{name:<4} FAIL  {why}  [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
