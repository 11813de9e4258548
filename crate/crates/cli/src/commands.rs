use crate::manifest::RunManifest;
use crate::plots::{self, Series};
use crate::{ConfigArgs, Failure};
use log::{info, warn};
use rmmdf::backbones::SaliencyMap;
use rmmdf::checkpoint;
use rmmdf::config::{consumer_seed, Preset, RunConfig, SeedConsumer};
use rmmdf::data::{self, SyntheticSpec, DEFAULT_MEANS, IMAGE_EXTS};
use rmmdf::engine::{evaluate_mae, Example, IterationRecord, Rmmdf, TrainLog, Trainer, Variant};
use rmmdf::kernels;
use rmmdf::metrics::{self, MetricReport};
use rmmdf::tensor::Tensor;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn mkdir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

/// Builds the run configuration from file or preset plus flag overrides and
/// records both in the manifest.
fn resolve(cfg: &ConfigArgs, manifest: &mut RunManifest) -> Result<RunConfig, Failure> {
    let mut run = match &cfg.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
            RunConfig::from_toml_str(&text).map_err(|e| io_fail(path, e))?
        }
        None => RunConfig::preset(cfg.preset.as_deref().unwrap_or("micro").parse::<Preset>()?),
    };
    let overrides = &mut manifest.overrides;
    if let Some(seed) = cfg.seed {
        run.training.seed = seed;
        overrides.insert("seed".into(), json!(seed));
    }
    if let Some(stages) = cfg.stages {
        run.network.stages = stages;
        overrides.insert("stages".into(), json!(stages));
    }
    if let Some(res) = cfg.resolution {
        run.network.resolution = res;
        overrides.insert("resolution".into(), json!(res));
    }
    if let Some(wm) = cfg.width_mult {
        run.network.width_multiplier = wm;
        overrides.insert("width_mult".into(), json!(wm));
    }
    if let Some(it) = cfg.iterations {
        run.training.iterations = it;
        overrides.insert("iterations".into(), json!(it));
    }
    run.validate()?;
    manifest.config_path = cfg.config.clone();
    manifest.preset = if cfg.config.is_none() {
        Some(cfg.preset.clone().unwrap_or_else(|| "micro".into()))
    } else {
        None
    };
    manifest.seed = Some(run.training.seed);
    manifest.config = Some(run.clone());
    Ok(run)
}

fn load_training_set(root: &Path, resolution: usize) -> Result<(Vec<String>, Vec<Example>), Failure> {
    let set = data::load_dataset(root)?;
    for r in &set.rejects {
        warn!("skipping {}: {}", r.path.display(), r.reason);
    }
    if set.samples.is_empty() {
        return Err(Failure::usage(format!("no image/mask pairs under {}", root.display())));
    }
    let ids = set.samples.iter().map(|s| s.id.clone()).collect();
    let examples = set
        .samples
        .iter()
        .map(|s| data::preprocess(s, resolution))
        .collect::<rmmdf::error::Result<Vec<_>>>()?;
    Ok((ids, examples))
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    train_mae: f64,
    stage_mae: Vec<f64>,
    seconds: f64,
}

/// Trains one variant, writing its log, periodic checkpoints, final weights
/// and a short summary under `dir`.
fn train_variant(
    run: &RunConfig,
    variant: Variant,
    examples: &[Example],
    dir: &Path,
    init_from: Option<&Path>,
) -> Result<(Rmmdf, TrainSummary), Failure> {
    let start = Instant::now();
    let mut model = Rmmdf::new(run.network.clone(), variant, run.training.seed)?;
    if let Some(path) = init_from {
        let report = checkpoint::load_pretrained(&mut model, path)?;
        info!("initialized {} tensors from {}, skipped {}", report.loaded.len(), path.display(), report.skipped.len());
    }
    info!("{variant}: {} trainable parameters", model.store().trainable_count());
    let ckpt_dir = dir.join("checkpoints");
    let every = run.training.checkpoint_every;
    if every > 0 {
        mkdir(&ckpt_dir)?;
    }
    let mut log = TrainLog::create(&dir.join("train_log.csv"))?;
    let seed = run.training.seed.to_string();
    let mut trainer = Trainer::new(model, run)?;
    let records = trainer.fit(examples, run.training.iterations, |t, rec: &IterationRecord| {
        log.append(rec)?;
        if rec.iteration == 1 || rec.iteration.is_multiple_of(50) {
            info!(
                "iter {:>6} loss {:.4} (vgg {:.4} resnet {:.4} sdf {:.4}) lr {:.2e}",
                rec.iteration, rec.total, rec.loss_vgg, rec.loss_resnet, rec.loss_sdf, rec.lr
            );
        }
        if every > 0 && rec.iteration.is_multiple_of(every) {
            let path = ckpt_dir.join(format!("iter_{:06}.safetensors", rec.iteration));
            checkpoint::save(t.model(), &path, &[("iteration", rec.iteration.to_string()), ("seed", seed.clone())])?;
        }
        Ok(())
    });
    let records = match records {
        Ok(r) => r,
        Err(e) if e.is_numerical() => {
            return Err(Failure {
                code: 2,
                message: format!("training diverged: {e}"),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let model = trainer.into_model();
    checkpoint::save(
        &model,
        &dir.join("model.safetensors"),
        &[("iteration", run.training.iterations.to_string()), ("seed", seed)],
    )?;
    let mae = evaluate_mae(&model, examples)?;
    let summary = TrainSummary {
        variant: variant.name(),
        iterations: records.len(),
        initial_loss: records.first().map_or(f64::NAN, |r| r.total),
        final_loss: records.last().map_or(f64::NAN, |r| r.total),
        train_mae: mae.final_mae,
        stage_mae: mae.stages,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    if !records.is_empty() {
        let top = records.iter().map(|r| r.total).fold(0.0, f64::max);
        plots::lines(
            &dir.join("loss.svg"),
            &format!("training loss, {variant}"),
            ("iteration", "total loss"),
            0.0..records.len() as f64,
            0.0..top * 1.05,
            &[Series {
                label: "",
                points: records.iter().map(|r| (r.iteration as f64, r.total)).collect(),
            }],
        )?;
    }
    Ok((model, summary))
}

pub fn train(cfg: &ConfigArgs, data_root: &Path, out: &Path, variant: &str, init_from: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("train", out);
    let run = resolve(cfg, &mut manifest)?;
    let variant = Variant::from_name(variant)?;
    manifest.write()?;
    std::fs::write(out.join("config.toml"), run.to_toml_string()).map_err(|e| io_fail(out, e))?;
    let (_, examples) = load_training_set(data_root, run.network.resolution)?;
    info!("training {variant} on {} images for {} iterations", examples.len(), run.training.iterations);
    let (_, summary) = train_variant(&run, variant, &examples, out, init_from)?;
    info!(
        "done in {:.0}s: loss {:.4} -> {:.4}, training-set MAE {:.4}",
        summary.seconds, summary.initial_loss, summary.final_loss, summary.train_mae
    );
    Ok(())
}

fn uses_config(cfg: &ConfigArgs) -> bool {
    cfg.config.is_some()
        || cfg.preset.is_some()
        || cfg.stages.is_some()
        || cfg.resolution.is_some()
        || cfg.width_mult.is_some()
}

/// Resamples a map to `(h, w)`.
fn to_size(map: &SaliencyMap, h: usize, w: usize) -> Result<SaliencyMap, Failure> {
    if map.resolution() == (h, w) {
        return Ok(map.clone());
    }
    let t = kernels::resize_bilinear(map.tensor(), h, w).map(|v| v.clamp(0.0, 1.0));
    Ok(SaliencyMap::new(t)?)
}

pub fn predict(cfg: &ConfigArgs, ckpt_path: &Path, data_root: &Path, out: &Path, dump_stages: bool) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("predict", out);
    let model = if uses_config(cfg) {
        let run = resolve(cfg, &mut manifest)?;
        let ckpt = checkpoint::read(ckpt_path)?;
        let mut model = Rmmdf::new(run.network, ckpt.variant, 0)?;
        checkpoint::apply_strict(&mut model, &ckpt)?;
        model
    } else {
        checkpoint::load(ckpt_path)?
    };
    manifest.write()?;
    let image_dir = data_root.join("images");
    let dir = if image_dir.is_dir() { image_dir } else { data_root.to_path_buf() };
    let images = data::files_by_stem(&dir, &IMAGE_EXTS)?;
    if images.is_empty() {
        return Err(Failure::usage(format!("no images under {}", dir.display())));
    }
    if dump_stages && !model.variant().resnet {
        warn!("{} has no recursive stages; writing final maps only", model.variant());
    }
    let res = model.config().resolution;
    for (id, path) in &images {
        let image = data::load_image(path)?;
        let (w, h) = image.dimensions();
        let prediction = model.predict(&data::prepare_image(&image, res, DEFAULT_MEANS)?)?;
        let (h, w) = (h as usize, w as usize);
        data::save_prediction(&out.join(format!("{id}.png")), &to_size(&prediction.saliency, h, w)?)?;
        if dump_stages {
            for (t, m) in prediction.stages.iter().enumerate() {
                data::save_prediction(&out.join(format!("{id}_stage{}.png", t + 1)), &to_size(m, h, w)?)?;
            }
        }
    }
    info!("wrote maps for {} images to {}", images.len(), out.display());
    Ok(())
}

fn score(preds: &[SaliencyMap], gts: &[Tensor], ids: &[String], out: &Path, beta_sq: f64) -> Result<MetricReport, Failure> {
    let report = metrics::summarize_with(preds, gts, beta_sq)?;
    let curve = metrics::pr_curve(preds, gts)?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("per_image.csv"), Some(ids))?;
    curve.write_csv(&out.join("pr_curve.csv"), beta_sq)?;
    plots::lines(
        &out.join("pr_curve.svg"),
        "precision-recall",
        ("recall", "precision"),
        0.0..1.0,
        0.0..1.05,
        &[Series {
            label: "",
            points: curve.recall.iter().copied().zip(curve.precision.iter().copied()).collect(),
        }],
    )?;
    plots::lines(
        &out.join("f_curve.svg"),
        "F-measure vs threshold",
        ("threshold", "F"),
        0.0..1.0,
        0.0..1.05,
        &[Series {
            label: "",
            points: curve.thresholds.iter().copied().zip(curve.f_curve(beta_sq)).collect(),
        }],
    )?;
    Ok(report)
}

pub fn eval(pred_dir: &Path, gt_dir: &Path, out: &Path, beta_sq: f64) -> Result<(), Failure> {
    RunManifest::new("eval", out).write()?;
    let mask_dir = gt_dir.join("masks");
    let mask_dir = if mask_dir.is_dir() { mask_dir } else { gt_dir.to_path_buf() };
    let masks = data::files_by_stem(&mask_dir, &["png"])?;
    let preds = data::files_by_stem(pred_dir, &["png"])?;
    let (mut ids, mut maps, mut gts) = (Vec::new(), Vec::new(), Vec::new());
    for (id, mask_path) in &masks {
        let Some(pred_path) = preds.get(id) else {
            warn!("no prediction for {id}");
            continue;
        };
        let gt = data::mask_to_tensor(&data::load_mask(mask_path)?);
        let (h, w) = gt.shape().spatial();
        let map = data::load_saliency(pred_path)?;
        if map.resolution() != (h, w) {
            warn!("{id}: prediction is {:?}, mask is {:?}; resampling", map.resolution(), (h, w));
        }
        maps.push(to_size(&map, h, w)?);
        gts.push(gt);
        ids.push(id.clone());
    }
    if ids.is_empty() {
        return Err(Failure::usage(format!(
            "no prediction in {} matches a mask in {}",
            pred_dir.display(),
            mask_dir.display()
        )));
    }
    let report = score(&maps, &gts, &ids, out, beta_sq)?;
    info!(
        "{} images: maxF {:.4} avgF {:.4} MAE {:.4} (P {:.4}, R {:.4})",
        ids.len(),
        report.max_f,
        report.avg_f,
        report.mae,
        report.avg_precision,
        report.avg_recall
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    parameters: usize,
    ave_p: f64,
    ave_r: f64,
    avg_f: f64,
    max_f: f64,
    mae: f64,
    final_loss: f64,
}

pub fn ablate(cfg: &ConfigArgs, data_root: &Path, out: &Path) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("ablate", out);
    let run = resolve(cfg, &mut manifest)?;
    manifest.write()?;
    std::fs::write(out.join("config.toml"), run.to_toml_string()).map_err(|e| io_fail(out, e))?;
    let (ids, examples) = load_training_set(data_root, run.network.resolution)?;
    let gts: Vec<Tensor> = examples.iter().map(|(_, m)| m.clone()).collect();
    let mut rows = Vec::new();
    for variant in Variant::ladder() {
        let dir: PathBuf = out.join(variant.name());
        mkdir(&dir)?;
        info!("ablation: training {variant}");
        let (model, summary) = train_variant(&run, variant, &examples, &dir, None)?;
        let preds = examples
            .iter()
            .map(|(img, _)| Ok(model.predict(img)?.saliency))
            .collect::<Result<Vec<_>, Failure>>()?;
        let report = score(&preds, &gts, &ids, &dir, metrics::BETA_SQ)?;
        rows.push(AblationRow {
            variant: variant.name(),
            parameters: model.store().trainable_count(),
            ave_p: report.avg_precision,
            ave_r: report.avg_recall,
            avg_f: report.avg_f,
            max_f: report.max_f,
            mae: report.mae,
            final_loss: summary.final_loss,
        });
    }

    let csv_path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_fail(&csv_path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| io_fail(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_fail(&csv_path, e))?;

    let mut table = String::from("| variant | params | aveP | aveR | avgF | maxF | MAE |\n|---|---:|---:|---:|---:|---:|---:|\n");
    for r in &rows {
        table.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.variant, r.parameters, r.ave_p, r.ave_r, r.avg_f, r.max_f, r.mae
        ));
    }
    std::fs::write(out.join("ablation.md"), &table).map_err(|e| io_fail(out, e))?;
    println!("{table}");

    let labels: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
    plots::bars(
        &out.join("ablation.svg"),
        "ablation on the training set",
        &labels,
        &[
            ("aveP", rows.iter().map(|r| r.ave_p).collect()),
            ("aveR", rows.iter().map(|r| r.ave_r).collect()),
            ("avgF", rows.iter().map(|r| r.avg_f).collect()),
            ("MAE", rows.iter().map(|r| r.mae).collect()),
        ],
    )?;
    let (vgg, full) = (&rows[0], &rows[4]);
    if full.mae > vgg.mae {
        warn!(
            "full variant MAE {:.4} is above the vgg-only MAE {:.4}; worth investigating",
            full.mae, vgg.mae
        );
    }
    Ok(())
}

pub fn generate(out: &Path, count: usize, resolution: usize, seed: u64) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("generate", out);
    manifest.seed = Some(seed);
    manifest.write()?;
    let spec = SyntheticSpec::new(consumer_seed(seed, SeedConsumer::Synthetic), count, resolution);
    let samples = data::generate_synthetic(&spec)?;
    for s in &samples {
        data::save_sample(out, s)?;
    }
    write_json(&out.join("synthetic.json"), &spec)?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}
