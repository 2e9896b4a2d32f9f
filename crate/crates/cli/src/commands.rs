use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use mcfuse::backbone::cache::{CacheRecord, FeatureCache};
use mcfuse::backbone::{Backbone, FEATURE_DIM};
use mcfuse::config::{ExperimentConfig, Provenance};
use mcfuse::evalkit::{
    self, evaluate, load_split, robustness_sweep, split_dataset, stuart_maxwell, tsne, DatasetManifest, ManifestRecord,
    PairedPredictions, Split, SplitRatios,
};
use mcfuse::explain::{self, marking_agreement, overlay, RegionMarking};
use mcfuse::extractor::FusionExtractor;
use mcfuse::fusionhead::{train_head, FusedFeature, HeadModel};
use mcfuse::imageio::{load_image, sweep_qualities, QualityFactor};
use mcfuse::preprocess::INPUT_SIDE;
use mcfuse::Class;
use rayon::prelude::*;
use serde::Serialize;

use crate::failure::{io_failure, CmdResult, Failure};
use crate::features::CachedFeatures;

/// Images decoded and extracted between cache checkpoints.
const EXTRACT_CHUNK: usize = 64;
pub const MODEL_FILE: &str = "model.mchd";

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    provenance: &'a Provenance,
    result: T,
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn create_file(path: &Path) -> CmdResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CmdResult {
    let mut w = create_file(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}

fn write_report(path: &Path, command: &str, prov: &Provenance, result: impl Serialize) -> CmdResult {
    let report = Report {
        command,
        provenance: prov,
        result,
    };
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn load_config(path: &Path) -> CmdResult<(ExperimentConfig, Provenance)> {
    let (cfg, prov) = ExperimentConfig::load(path)?;
    cfg.check_inputs()?;
    create_dir(&cfg.experiment.output_dir)?;
    Ok((cfg, prov))
}

fn extractor(cfg: &ExperimentConfig) -> CmdResult<FusionExtractor> {
    let backbone = Backbone::load(&cfg.experiment.backbone)?;
    Ok(FusionExtractor::new(backbone, cfg.pipelines())?)
}

fn model_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.experiment.output_dir.join(MODEL_FILE))
}

fn load_model(path: &Path, extractor_dim: usize) -> CmdResult<HeadModel> {
    let model = HeadModel::load(path)?;
    if model.dim() != extractor_dim {
        return Err(Failure::Usage(format!(
            "model {} expects {}-wide features but the configured branches give {extractor_dim}",
            path.display(),
            model.dim()
        )));
    }
    Ok(model)
}

pub fn split(input: &Path, output: &Path, seed: u64, ratios: SplitRatios) -> CmdResult {
    let manifest = DatasetManifest::load(input)?;
    let outcome = split_dataset(&manifest, ratios, seed)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    // Paths stay valid when the output lands in another directory.
    let out_dir = output.parent().unwrap_or(Path::new("."));
    let same_dir = std::fs::canonicalize(out_dir).ok() == std::fs::canonicalize(manifest.base_dir()).ok();
    let records = outcome
        .manifest
        .records()
        .iter()
        .map(|r| ManifestRecord {
            path: if same_dir {
                r.path.clone()
            } else {
                std::path::absolute(manifest.resolve(r)).unwrap_or_else(|_| manifest.resolve(r))
            },
            ..r.clone()
        })
        .collect();
    let written = DatasetManifest::new(records, out_dir)?;
    written.save(output)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}: {}", written.in_split(split).count());
    }
    Ok(())
}

#[derive(Serialize)]
struct ExtractSummary {
    branches: Vec<String>,
    images: usize,
    extracted: usize,
    already_cached: usize,
    failed: Vec<(u64, String)>,
}

pub fn extract(config: &Path) -> CmdResult {
    let (cfg, prov) = load_config(config)?;
    let manifest = DatasetManifest::load(&cfg.experiment.manifest)?;
    let extractor = extractor(&cfg)?;
    let pipelines = cfg.pipelines();
    create_dir(&cfg.experiment.output_dir.join("features"))?;

    let mut caches = Vec::with_capacity(pipelines.len());
    for p in &pipelines {
        let path = cfg.cache_path(p);
        let cache = if path.exists() {
            let c = FeatureCache::load(&path)?;
            if c.dim() != FEATURE_DIM || c.records().iter().any(|r| r.feature.branch != p.colorspace) {
                return Err(Failure::Data(format!(
                    "{} belongs to a different branch or backbone; remove it or change output_dir",
                    path.display()
                )));
            }
            c
        } else {
            FeatureCache::new(FEATURE_DIM)
        };
        caches.push(cache);
    }
    let mut have: Vec<HashSet<u64>> = caches.iter().map(FeatureCache::ids).collect();
    let todo: Vec<&ManifestRecord> = manifest
        .records()
        .iter()
        .filter(|r| have.iter().any(|h| !h.contains(&r.image_id)))
        .collect();
    let already_cached = manifest.len() - todo.len();
    log::info!(
        "{} images, {already_cached} fully cached, {} to extract over {} branches",
        manifest.len(),
        todo.len(),
        pipelines.len()
    );

    let mut failed = Vec::new();
    let mut extracted = 0;
    for chunk in todo.chunks(EXTRACT_CHUNK) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|r| {
                let run = || -> mcfuse::Result<Vec<Option<mcfuse::backbone::FeatureVector>>> {
                    let img = load_image(manifest.resolve(r))?;
                    (0..pipelines.len())
                        .map(|b| {
                            if have[b].contains(&r.image_id) {
                                Ok(None)
                            } else {
                                Ok(Some(extractor.branch_batch(b, &[(r.image_id, &img)])?.remove(0)))
                            }
                        })
                        .collect()
                };
                (*r, run())
            })
            .collect();
        for (r, res) in results {
            match res {
                Ok(parts) => {
                    for (b, f) in parts.into_iter().enumerate() {
                        if let Some(feature) = f {
                            have[b].insert(r.image_id);
                            caches[b].push(CacheRecord {
                                label: r.label,
                                feature,
                            })?;
                        }
                    }
                    extracted += 1;
                }
                Err(e) => {
                    log::error!("image {} ({}): {e}", r.image_id, r.path.display());
                    failed.push((r.image_id, e.to_string()));
                }
            }
        }
        for (cache, p) in caches.iter_mut().zip(&pipelines) {
            cache.sort();
            cache.save(cfg.cache_path(p))?;
        }
        log::info!("extracted {extracted}/{}", todo.len());
    }

    let summary = ExtractSummary {
        branches: pipelines.iter().map(|p| p.branch.clone()).collect(),
        images: manifest.len(),
        extracted,
        already_cached,
        failed,
    };
    write_report(
        &cfg.experiment.output_dir.join("extract.json"),
        "extract",
        &prov,
        &summary,
    )?;
    println!(
        "extract: {} branch cache(s), {} extracted, {} already cached, {} failed",
        pipelines.len(),
        summary.extracted,
        summary.already_cached,
        summary.failed.len()
    );
    if summary.failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!(
            "{} image(s) failed to extract",
            summary.failed.len()
        )))
    }
}

#[derive(Serialize)]
struct TrainSummary {
    param_count: usize,
    train_images: usize,
    val_images: usize,
    selected_epoch: usize,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
    model: PathBuf,
}

pub fn train(config: &Path) -> CmdResult {
    let (cfg, prov) = load_config(config)?;
    let manifest = DatasetManifest::load(&cfg.experiment.manifest)?;
    let features = CachedFeatures::load(&cfg)?;
    let train_recs: Vec<_> = manifest.in_split(Split::Train).collect();
    if train_recs.is_empty() {
        return Err(Failure::Data(
            "the manifest has no train split; run `mcfuse split` first".into(),
        ));
    }
    let val_recs: Vec<_> = manifest.in_split(Split::Val).collect();
    let train = features.fused(&train_recs)?;
    let val = features.fused(&val_recs)?;
    let (model, log) = train_head(&train, &cfg.train, &val)?;

    let out = &cfg.experiment.output_dir;
    let path = out.join(MODEL_FILE);
    model.save(&path)?;
    let log_path = out.join("train_log.csv");
    let mut w = create_file(&log_path)?;
    log.write_csv(&mut w)?;
    let selected = log.epochs[log.selected_epoch - 1];
    let summary = TrainSummary {
        param_count: model.param_count(),
        train_images: train.len(),
        val_images: val.len(),
        selected_epoch: log.selected_epoch,
        train_accuracy: model.score(&train)?.1,
        val_accuracy: selected.val_acc,
        model: path.clone(),
    };
    write_report(&out.join("train.json"), "train", &prov, &summary)?;
    println!(
        "train: {} parameters, epoch {} selected, train accuracy {:.4}{}",
        summary.param_count,
        summary.selected_epoch,
        summary.train_accuracy,
        summary
            .val_accuracy
            .map(|a| format!(", val accuracy {a:.4}"))
            .unwrap_or_default()
    );
    println!("model written to {}", path.display());
    Ok(())
}

fn fused_for(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    records: &[&ManifestRecord],
    use_cache: bool,
) -> CmdResult<Vec<FusedFeature>> {
    if use_cache {
        if let Ok(cached) = CachedFeatures::load(cfg) {
            if records.iter().all(|r| cached.covers(r.image_id)) {
                return cached.fused(records);
            }
        }
    }
    let extractor = extractor(cfg)?;
    let images = records
        .par_iter()
        .map(|r| Ok((r.image_id, load_image(manifest.resolve(r))?, Some(r.label))))
        .collect::<mcfuse::Result<Vec<_>>>()?;
    Ok(extractor.fused_many(&images)?)
}

pub struct EvalArgs {
    pub config: PathBuf,
    pub manifest: Option<PathBuf>,
    pub split: Split,
    pub model: Option<PathBuf>,
    pub name: Option<String>,
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let (cfg, prov) = load_config(&args.config)?;
    let external = args.manifest.is_some();
    let manifest_path = args.manifest.clone().unwrap_or_else(|| cfg.experiment.manifest.clone());
    let manifest = DatasetManifest::load(&manifest_path)?;
    let model = load_model(&model_path(&cfg, args.model), cfg.pipelines().len() * FEATURE_DIM)?;
    let records = manifest.eval_records(args.split);
    if records.is_empty() {
        return Err(Failure::Data(format!(
            "{} has no {} images to evaluate",
            manifest_path.display(),
            args.split
        )));
    }
    let features = fused_for(&cfg, &manifest, &records, !external)?;
    let preds = features
        .iter()
        .zip(&records)
        .map(|(f, r)| Ok((r.image_id, r.label, model.predict(f)?.class)))
        .collect::<mcfuse::Result<Vec<_>>>()?;
    let report = evaluate(preds.iter().map(|&(_, t, p)| (t, p)))?;

    let name = args.name.unwrap_or_else(|| match &args.manifest {
        Some(p) => format!(
            "eval-{}",
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        ),
        None => "eval".into(),
    });
    let dir = cfg.experiment.output_dir.join(&name);
    create_dir(&dir)?;
    write_with(&dir.join("metrics.csv"), |w| report.write_csv(w))?;
    write_with(&dir.join("confusion.csv"), |w| report.write_confusion_csv(w))?;
    write_with(&dir.join("predictions.csv"), |w| evalkit::write_predictions(&preds, w))?;
    let text = format!(
        "manifest: {}\nimages: {}\nconfig sha256: {}\nseed: {}\n\n{}",
        manifest_path.display(),
        preds.len(),
        prov.config_sha256,
        prov.seed,
        report.render()
    );
    std::fs::write(dir.join("report.txt"), &text).map_err(|e| io_failure(&dir, e))?;
    write_report(&dir.join("report.json"), "eval", &prov, &report)?;
    print!("{text}");
    Ok(())
}

pub fn robustness(config: &Path, model: Option<PathBuf>, qualities: Option<Vec<u8>>) -> CmdResult {
    let (cfg, prov) = load_config(config)?;
    let manifest = DatasetManifest::load(&cfg.experiment.manifest)?;
    let extractor = extractor(&cfg)?;
    let model = load_model(&model_path(&cfg, model), extractor.dim())?;
    let qualities = match qualities {
        Some(q) => q
            .into_iter()
            .map(QualityFactor::new)
            .collect::<mcfuse::Result<Vec<_>>>()
            .map_err(|e| Failure::Usage(e.to_string()))?,
        None => sweep_qualities(),
    };
    let images = load_split(&manifest, Split::Test)?;
    let points = robustness_sweep(&model, &extractor, &images, &qualities)?;
    let out = &cfg.experiment.output_dir;
    write_with(&out.join("robustness.csv"), |w| {
        evalkit::robustness::write_sweep_csv(&points, w)
    })?;
    write_report(&out.join("robustness.json"), "robustness", &prov, &points)?;
    println!("qf  accuracy");
    for p in &points {
        println!("{:>3}  {:.4}", p.quality, p.report.total);
    }
    Ok(())
}

#[derive(Serialize)]
struct TsneSummary {
    points: usize,
    perplexity: f64,
    iterations: usize,
    silhouette_by_class: Option<f64>,
}

pub fn tsne_cmd(config: &Path, split: Split, perplexity: Option<f64>, iterations: Option<usize>) -> CmdResult {
    let (cfg, prov) = load_config(config)?;
    let manifest = DatasetManifest::load(&cfg.experiment.manifest)?;
    let records = manifest.eval_records(split);
    let features = fused_for(&cfg, &manifest, &records, true)?;
    let mut tcfg = cfg.tsne.clone();
    if let Some(p) = perplexity {
        tcfg.perplexity = p;
    }
    if let Some(i) = iterations {
        tcfg.iterations = i;
    }
    let labels: Vec<Class> = records.iter().map(|r| r.label).collect();
    let values: Vec<Vec<f32>> = features.into_iter().map(|f| f.values).collect();
    let emb = tsne(&values, &labels, &tcfg).map_err(|e| match e {
        mcfuse::Error::Precondition(m) => Failure::Usage(m),
        e => e.into(),
    })?;
    let ids: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let sil = evalkit::silhouette(&emb.points, &ids).ok();
    let out = &cfg.experiment.output_dir;
    write_with(&out.join("tsne.csv"), |w| emb.write_csv(w))?;
    std::fs::write(out.join("tsne.svg"), emb.to_svg()).map_err(|e| io_failure(out, e))?;
    let summary = TsneSummary {
        points: emb.points.len(),
        perplexity: tcfg.perplexity,
        iterations: tcfg.iterations,
        silhouette_by_class: sil,
    };
    write_report(&out.join("tsne.json"), "tsne", &prov, &summary)?;
    println!(
        "tsne: {} points embedded{}",
        summary.points,
        sil.map(|s| format!(", silhouette by class {s:.3}")).unwrap_or_default()
    );
    Ok(())
}

pub struct CamArgs {
    pub config: PathBuf,
    pub model: Option<PathBuf>,
    pub image_ids: Vec<u64>,
    pub split: Split,
    pub limit: usize,
    pub class: Option<Class>,
    pub markings: Option<PathBuf>,
}

type ImageAgreements = Vec<(u64, Class, explain::Agreement)>;

#[derive(Serialize)]
struct CamEntry {
    image_id: u64,
    truth: Class,
    predicted: Class,
    explained: Class,
    probabilities: [f64; 3],
    logit: f64,
    logit_from_map: f64,
    heatmap: PathBuf,
    overlay: PathBuf,
}

pub fn cam(args: CamArgs) -> CmdResult {
    let (cfg, prov) = load_config(&args.config)?;
    let manifest = DatasetManifest::load(&cfg.experiment.manifest)?;
    let extractor = extractor(&cfg)?;
    let model = load_model(&model_path(&cfg, args.model), extractor.dim())?;
    let records: Vec<&ManifestRecord> = if args.image_ids.is_empty() {
        manifest.eval_records(args.split).into_iter().take(args.limit).collect()
    } else {
        args.image_ids
            .iter()
            .map(|id| {
                manifest
                    .get(*id)
                    .ok_or_else(|| Failure::Data(format!("image {id} is not in the manifest")))
            })
            .collect::<CmdResult<_>>()?
    };
    if records.is_empty() {
        return Err(Failure::Data("no images selected".into()));
    }
    let markings: HashMap<u64, Vec<RegionMarking>> = match &args.markings {
        Some(path) => read_markings(path)?,
        None => HashMap::new(),
    };

    let dir = cfg.experiment.output_dir.join("cam");
    create_dir(&dir)?;
    let results = records
        .par_iter()
        .map(|r| -> CmdResult<(CamEntry, ImageAgreements)> {
            let img = load_image(manifest.resolve(r))?;
            let out = extractor.outputs(r.image_id, &img)?;
            let fused = extractor.fuse_parts(&out.features, Some(r.label))?;
            let pred = model.predict(&fused)?;
            let class = args.class.unwrap_or(pred.class);
            let heat = explain::cam(&model, &out.maps, class)?;
            let logit = model.logits(&fused)?[class.index()];
            let stem = format!("{}_{}", r.image_id, class.name().to_ascii_lowercase());
            let heat_path = dir.join(format!("{stem}.png"));
            let over_path = dir.join(format!("{stem}_overlay.png"));
            heat.save_png(&heat_path)?;
            overlay(&heat, &img)?.save_png(&over_path)?;
            let frame = (img.width() as u32, img.height() as u32);
            let side = INPUT_SIDE as u32;
            let agreements = markings
                .get(&r.image_id)
                .into_iter()
                .flatten()
                .map(|m| {
                    let scaled = RegionMarking {
                        annotation_id: m.annotation_id.clone(),
                        boxes: m.boxes.iter().map(|b| b.rescale(frame, (side, side))).collect(),
                    };
                    Ok((r.image_id, class, marking_agreement(&heat, &scaled)?))
                })
                .collect::<mcfuse::Result<Vec<_>>>()?;
            Ok((
                CamEntry {
                    image_id: r.image_id,
                    truth: r.label,
                    predicted: pred.class,
                    explained: class,
                    probabilities: pred.probabilities,
                    logit,
                    logit_from_map: heat.combined.mean() + model.bias()[class.index()],
                    heatmap: heat_path,
                    overlay: over_path,
                },
                agreements,
            ))
        })
        .collect::<CmdResult<Vec<_>>>()?;

    let (entries, agreements): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let agreements: Vec<_> = agreements.into_iter().flatten().collect();
    if !agreements.is_empty() {
        write_with(&dir.join("agreement.csv"), |w| {
            explain::write_agreement_csv(&agreements, w)
        })?;
    }
    write_report(&dir.join("cam.json"), "cam", &prov, &entries)?;
    println!(
        "cam: {} heatmap(s) in {}{}",
        entries.len(),
        dir.display(),
        if agreements.is_empty() {
            String::new()
        } else {
            format!(", {} marking comparison(s)", agreements.len())
        }
    );
    Ok(())
}

/// Region markings from an exported annotation file, keyed by image.
fn read_markings(path: &Path) -> CmdResult<HashMap<u64, Vec<RegionMarking>>> {
    let file = std::fs::File::open(path).map_err(|e| io_failure(path, e))?;
    let records = mcfuse_psycho::export::read_records(std::io::BufReader::new(file))?;
    let mut out: HashMap<u64, Vec<RegionMarking>> = HashMap::new();
    for r in records.into_iter().filter(|r| !r.boxes.is_empty()) {
        out.entry(r.image_id).or_default().push(RegionMarking {
            annotation_id: format!("{}/{}", r.session_id, r.image_id),
            boxes: r.boxes,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct SignificanceSummary {
    images: usize,
    agreement_table: [[u64; 3]; 3],
    statistic: f64,
    df: usize,
    p_value: f64,
}

pub fn significance(a: &Path, b: &Path, out: Option<&Path>) -> CmdResult {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| io_failure(p, e));
    let paired = PairedPredictions::join_csv(open(a)?, open(b)?)?;
    let sm = stuart_maxwell(&paired)?;
    let summary = SignificanceSummary {
        images: paired.len(),
        agreement_table: paired.agreement_table(),
        statistic: sm.statistic,
        df: sm.df,
        p_value: sm.p_value,
    };
    println!(
        "Stuart-Maxwell over {} paired images: statistic {:.6}, df {}, p {:.6}",
        summary.images, sm.statistic, sm.df, sm.p_value
    );
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}
