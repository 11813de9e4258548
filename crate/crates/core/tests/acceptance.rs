//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so the report is always printed.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmmdf::autograd::Graph;
use rmmdf::backbones::SaliencyMap;
use rmmdf::config::{NetworkConfig, Preset, RunConfig};
use rmmdf::data::{generate_synthetic, preprocess, SyntheticSpec};
use rmmdf::engine::{evaluate_mae, Example, LossHead, Rmmdf, Trainer, Variant};
use rmmdf::fusion::{DenseAggregation, DetailRefinement, ResizeDirection};
use rmmdf::metrics::{self, MetricReport};
use rmmdf::params::ParamStore;
use rmmdf::tensor::{Shape, Tensor};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Tensor {
    Tensor::uniform(Shape::new(n, 3, res, res), -0.5, 0.5, rng)
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Tensor {
    let data = (0..n * res * res).map(|_| f64::from(rng.random_bool(0.4))).collect();
    Tensor::from_vec(Shape::new(n, 1, res, res), data).unwrap()
}

// --- shape suite -----------------------------------------------------------

fn shape_suite() -> Outcome {
    let config = NetworkConfig::full_scale();
    let model = Rmmdf::new(config.clone(), Variant::FULL, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = model.store();
    let g = Graph::new(store, false);
    let out = model
        .forward(&g, g.input(random_image(&mut rng, 1, 256)), false)
        .map_err(|e| e.to_string())?;

    let sizes: Vec<usize> = out.sdf_trace.iter().map(|(_, s)| s.h).collect();
    ensure(sizes == [256, 128, 64, 32, 32, 64, 128, 256, 256], || format!("fusion-head sizes {sizes:?}"))?;
    let widths: Vec<usize> = out.sdf_trace.iter().map(|(_, s)| s.c).collect();
    ensure(widths == [64, 64, 64, 64, 64, 64, 64, 64, 2], || format!("fusion-head channels {widths:?}"))?;
    let logits = g.shape(out.logits.unwrap());
    ensure(logits == Shape::new(1, 2, 256, 256), || format!("logits {logits}"))?;

    let vgg_c = [64, 128, 256, 512, 512];
    let res_c = [64, 256, 512, 1024, 2048];
    for stage in &out.stages {
        let x = stage.x.as_ref().unwrap().shapes(&g);
        let f = stage.f.as_ref().unwrap().shapes(&g);
        for i in 1..=5 {
            let side = 256 >> i;
            let (xs, fs) = (*x.level(i), *f.level(i));
            ensure(xs == Shape::new(1, vgg_c[i - 1], side, side), || format!("stage {} X_{i} is {xs}", stage.t))?;
            ensure(fs == Shape::new(1, res_c[i - 1], side, side), || format!("stage {} F_{i} is {fs}", stage.t))?;
        }
        let m = g.shape(stage.m.unwrap());
        ensure(m == Shape::new(1, 1, 256, 256), || format!("M^{} is {m}", stage.t))?;
    }
    ensure(out.stages.len() == 3, || "expected three stages".into())?;
    Ok(format!("{} parameters, level 5 at 8x8", store.trainable_count()))
}

// --- refinement branch -------------------------------------------------------

fn refinement_branch() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let config = NetworkConfig::micro(32, 1, 1);
    let drm = DetailRefinement::new(&mut store, &config, &mut rng);
    let g = Graph::new(&store, false);
    let mut seen = [0usize; 3];
    for trial in 0..200 {
        let level = rng.random_range(1..=5);
        let c = config.vgg_widths()[level - 1];
        let (xh, xw) = (rng.random_range(1..=48), rng.random_range(1..=48));
        let (mh, mw) = if trial % 10 == 0 {
            (xh, xw)
        } else {
            (rng.random_range(1..=48), rng.random_range(1..=48))
        };
        let x = g.input(Tensor::zeros(Shape::new(1, c, xh, xw)));
        let m = g.input(Tensor::full(Shape::new(1, 1, mh, mw), 0.5));
        let (y, dir) = drm.refine_details(&g, level, x, m).map_err(|e| e.to_string())?;
        // the map shrinks when it covers more pixels than X, grows when fewer
        let expected = if mh * mw > xh * xw {
            ResizeDirection::Down
        } else if mh * mw < xh * xw {
            ResizeDirection::Up
        } else {
            ResizeDirection::None
        };
        ensure(dir == expected, || format!("X {xh}x{xw}, M {mh}x{mw}: got {dir:?}"))?;
        let ys = g.shape(y);
        ensure(ys.spatial() == (xh, xw) && ys.c == c, || format!("output {ys} for X {xh}x{xw}"))?;
        seen[expected as usize] += 1;
    }
    Ok(format!("200 pairs, up/down/none = {}/{}/{}", seen[0], seen[1], seen[2]))
}

// --- aggregation structure --------------------------------------------------

fn aggregation_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for res in [32, 64, 256] {
        let config = NetworkConfig::micro(res, 1, 1);
        let mut store = ParamStore::new();
        let vgg = rmmdf::backbones::VggStream::new(&mut store, &config, &mut rng);
        let dam = DenseAggregation::new(&mut store, &config, &mut rng);
        let g = Graph::new(&store, false);
        let x = vgg.forward(&g, g.input(random_image(&mut rng, 1, res))).map_err(|e| e.to_string())?;
        for i in 1..=5 {
            let agg = dam.dense_aggregate(&g, &x, i, 1).map_err(|e| e.to_string())?;
            for j in 1..=5 {
                let expected = match j.cmp(&i) {
                    std::cmp::Ordering::Greater => ResizeDirection::Up,
                    std::cmp::Ordering::Less => ResizeDirection::Down,
                    std::cmp::Ordering::Equal => ResizeDirection::None,
                };
                ensure(agg.directions[j - 1] == expected, || {
                    format!("res {res}, level {i}, source {j}: {:?}", agg.directions[j - 1])
                })?;
                checked += 1;
            }
            ensure(g.shape(agg.data).spatial() == g.shape(*x.level(i)).spatial(), || format!("level {i} size"))?;
        }
    }
    Ok(format!("{checked} (level, source) pairs"))
}

// --- metric oracles ----------------------------------------------------------

struct OracleReport {
    max_f: f64,
    avg_f: f64,
    mae: f64,
}

fn oracle_mae(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64
}

fn oracle_f(p: f64, r: f64) -> f64 {
    if 0.3 * p + r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

/// Counts at threshold k/255 by direct comparison over every pixel of every
/// image with foreground.
fn oracle_pr(preds: &[Vec<f64>], gts: &[Vec<f64>], k: usize) -> (f64, f64) {
    let t = k as f64 / 255.0;
    let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
    for (p, g) in preds.iter().zip(gts) {
        if !g.contains(&1.0) {
            continue;
        }
        for i in 0..p.len() {
            let pos = p[i] >= t;
            let fg = g[i] == 1.0;
            if pos && fg {
                tp += 1;
            } else if pos {
                fp += 1;
            } else if fg {
                fnn += 1;
            }
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    (precision, tp as f64 / (tp + fnn) as f64)
}

fn oracle_summary(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> OracleReport {
    let mut max_f: f64 = 0.0;
    for k in 0..256 {
        let (p, r) = oracle_pr(preds, gts, k);
        max_f = max_f.max(oracle_f(p, r));
    }
    let mut f_sum = 0.0;
    let mut scored = 0;
    for (p, g) in preds.iter().zip(gts) {
        if !g.contains(&1.0) {
            continue;
        }
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        let t = if 2.0 * mean > 1.0 { 1.0 } else { 2.0 * mean };
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            match (p[i] >= t, g[i] == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        f_sum += oracle_f(precision, tp / (tp + fnn));
        scored += 1;
    }
    let mae = preds.iter().zip(gts).map(|(p, g)| oracle_mae(p, g)).sum::<f64>() / preds.len() as f64;
    OracleReport {
        max_f,
        avg_f: f_sum / scored as f64,
        mae,
    }
}

fn fixture(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, usize, usize) {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let n = rng.random_range(1..=4);
    let quantized = rng.random_bool(0.5);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..n {
        preds.push(
            (0..h * w)
                .map(|_| {
                    if quantized {
                        rng.random_range(0..=255) as f64 / 255.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect(),
        );
        let mut g: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_bool(0.35))).collect();
        if i == 0 && !g.contains(&1.0) {
            g[0] = 1.0;
        }
        gts.push(g);
    }
    (preds, gts, h, w)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tol = 1e-9;
    let fixtures = 60;
    for case in 0..fixtures {
        let (preds, gts, h, w) = fixture(&mut rng);
        let shape = Shape::new(1, 1, h, w);
        let maps: Vec<SaliencyMap> = preds
            .iter()
            .map(|p| SaliencyMap::new(Tensor::from_vec(shape, p.clone()).unwrap()).unwrap())
            .collect();
        let masks: Vec<Tensor> = gts.iter().map(|g| Tensor::from_vec(shape, g.clone()).unwrap()).collect();
        for (m, (p, g)) in maps.iter().zip(preds.iter().zip(&gts)) {
            let got = metrics::mae(m, &Tensor::from_vec(shape, g.clone()).unwrap()).unwrap();
            ensure((got - oracle_mae(p, g)).abs() < tol, || format!("case {case}: mae"))?;
        }
        let curve = metrics::pr_curve(&maps, &masks).map_err(|e| e.to_string())?;
        for k in 0..256 {
            let (p, r) = oracle_pr(&preds, &gts, k);
            ensure((curve.precision[k] - p).abs() < tol && (curve.recall[k] - r).abs() < tol, || {
                format!("case {case}, k={k}: ({}, {}) vs ({p}, {r})", curve.precision[k], curve.recall[k])
            })?;
            let f = metrics::f_measure(p, r, 0.3);
            ensure((f - oracle_f(p, r)).abs() < tol, || format!("case {case}, k={k}: f"))?;
        }
        let report: MetricReport = metrics::summarize(&maps, &masks).map_err(|e| e.to_string())?;
        let o = oracle_summary(&preds, &gts);
        ensure((report.max_f - o.max_f).abs() < tol, || format!("case {case}: max_f {} vs {}", report.max_f, o.max_f))?;
        ensure((report.avg_f - o.avg_f).abs() < tol, || format!("case {case}: avg_f {} vs {}", report.avg_f, o.avg_f))?;
        ensure((report.mae - o.mae).abs() < tol, || format!("case {case}: mae {} vs {}", report.mae, o.mae))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{fixtures} fixtures in {:.2}s", elapsed.as_secs_f64()))
}

// --- gradient check ----------------------------------------------------------

/// Steps of 1e-5 and up let ReLU and max-pool kinks fall inside the
/// stencil for a few entries; at 1e-6 they match to about seven digits.
const FD_STEP: f64 = 1e-6;
/// Relative errors are taken against `max(|analytic|, |numeric|, FD_FLOOR)`.
/// Central differences at this step carry absolute noise up to about 2e-9,
/// so gradients below the floor are effectively compared to within 1e-8.
const FD_FLOOR: f64 = 1e-4;

fn total_loss(model: &Rmmdf, image: &Tensor, mask: &Tensor) -> f64 {
    let g = Graph::new(model.store(), true);
    let out = model.forward(&g, g.input(image.clone()), false).unwrap();
    let heads = model.loss_heads(&g, &out, mask).unwrap();
    let total = model.total_loss(&g, &heads, &Default::default());
    g.value(total).data()[0]
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = NetworkConfig::micro(32, 2, 2);
    let mut model = Rmmdf::new(config, Variant::FULL, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = random_image(&mut rng, 2, 32);
    let mask = random_mask(&mut rng, 2, 32);

    let grads = {
        let g = Graph::new(model.store(), true);
        let out = model.forward(&g, g.input(image.clone()), false).unwrap();
        let heads = model.loss_heads(&g, &out, &mask).unwrap();
        let total = model.total_loss(&g, &heads, &Default::default());
        g.backward(total)
    };

    let groups = [
        "vgg.block", "vgg.head", "resnet.stem", "resnet.layer", "resnet.decoder", "fusion.drm", "fusion.dam.reduce",
        "fusion.dam.mix", "fusion.dam.inject", "sdf.fuse", "sdf.enc", "sdf.dec", "sdf.classifier",
    ];
    let trainable: Vec<_> = model.store().trainable_ids().collect();
    let mut picks = Vec::new();
    for prefix in groups {
        let members: Vec<_> = trainable.iter().copied().filter(|&id| model.store().name(id).starts_with(prefix)).collect();
        ensure(!members.is_empty(), || format!("no parameters under {prefix}"))?;
        picks.push(*members.choose(&mut rng).unwrap());
    }
    while picks.len() < 30 {
        picks.push(*trainable.choose(&mut rng).unwrap());
    }

    let mut worst: (f64, String) = (0.0, String::new());
    for id in picks {
        let len = model.store().get(id).len();
        let k = rng.random_range(0..len);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
        let orig = model.store().get(id).data()[k];
        model.store_mut().get_mut(id).data_mut()[k] = orig + FD_STEP;
        let up = total_loss(&model, &image, &mask);
        model.store_mut().get_mut(id).data_mut()[k] = orig - FD_STEP;
        let down = total_loss(&model, &image, &mask);
        model.store_mut().get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        let name = format!("{}[{k}] analytic {analytic:.6e} numeric {numeric:.6e}", model.store().name(id));
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        ensure(rel < 1e-4, || format!("{name}: relative error {rel:.2e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("30 entries, worst {:.2e} ({}), {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()))
}

// --- overfit smoke and stage improvement ------------------------------------

struct OverfitRun {
    initial_loss: f64,
    final_loss: f64,
    final_mae: f64,
    stage_mae: Vec<f64>,
    elapsed: Duration,
}

fn overfit_data(resolution: usize) -> Vec<Example> {
    generate_synthetic(&SyntheticSpec::new(0, 8, resolution))
        .unwrap()
        .iter()
        .map(|s| preprocess(s, resolution).unwrap())
        .collect()
}

fn overfit_run() -> Result<OverfitRun, String> {
    let start = Instant::now();
    let run = RunConfig::preset(Preset::Micro);
    let data = overfit_data(run.network.resolution);
    let model = Rmmdf::new(run.network.clone(), Variant::FULL, run.training.seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, &run).map_err(|e| e.to_string())?;
    let log = trainer
        .fit(&data, run.training.iterations, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let mae = evaluate_mae(trainer.model(), &data).map_err(|e| e.to_string())?;
    Ok(OverfitRun {
        initial_loss: log[0].total,
        final_loss: log.last().unwrap().total,
        final_mae: mae.final_mae,
        stage_mae: mae.stages,
        elapsed: start.elapsed(),
    })
}

fn overfit_smoke(run: &Result<OverfitRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    ensure(r.final_mae < 0.05, || format!("training-set MAE {:.4}", r.final_mae))?;
    ensure(r.final_loss < r.initial_loss, || format!("loss {:.4} -> {:.4}", r.initial_loss, r.final_loss))?;
    ensure(r.elapsed < Duration::from_secs(600), || format!("took {:?}", r.elapsed))?;
    Ok(format!(
        "MAE {:.4}, loss {:.4} -> {:.4}, {:.0}s",
        r.final_mae,
        r.initial_loss,
        r.final_loss,
        r.elapsed.as_secs_f64()
    ))
}

fn stage_improvement(run: &Result<OverfitRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let (first, last) = (r.stage_mae[0], *r.stage_mae.last().unwrap());
    ensure(r.stage_mae.len() == 3, || format!("{} stages", r.stage_mae.len()))?;
    ensure(last <= first + 0.01, || format!("MAE(M^3) {last:.4} > MAE(M^1) {first:.4} + 0.01"))?;
    Ok(format!("stage MAE {:?}", r.stage_mae.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()))
}

// --- determinism -------------------------------------------------------------

fn short_run_report() -> MetricReport {
    let mut run = RunConfig::preset(Preset::Micro);
    run.training.seed = 11;
    run.optimizer.batch_size = 3;
    let data = overfit_data(32);
    let model = Rmmdf::new(run.network.clone(), Variant::FULL, run.training.seed).unwrap();
    let mut trainer = Trainer::new(model, &run).unwrap();
    trainer.fit(&data, 15, |_, _| Ok(())).unwrap();
    let preds: Vec<SaliencyMap> = data.iter().map(|(img, _)| trainer.model().predict(img).unwrap().saliency).collect();
    let gts: Vec<Tensor> = data.iter().map(|(_, m)| m.clone()).collect();
    metrics::summarize(&preds, &gts).unwrap()
}

fn determinism() -> Outcome {
    let a = short_run_report();
    let b = short_run_report();
    ensure((a.max_f - b.max_f).abs() <= 1e-9, || "max_f differs".into())?;
    ensure((a.avg_f - b.avg_f).abs() <= 1e-9, || "avg_f differs".into())?;
    ensure((a.mae - b.mae).abs() <= 1e-9, || "mae differs".into())?;
    for (x, y) in a.per_image.iter().zip(&b.per_image) {
        ensure((x.mae - y.mae).abs() <= 1e-9 && (x.f_measure - y.f_measure).abs() <= 1e-9, || {
            format!("image {} differs", x.index)
        })?;
    }
    Ok(format!("max_f {:.6}, avg_f {:.6}, mae {:.6} twice", a.max_f, a.avg_f, a.mae))
}

// --- loss-head audit -----------------------------------------------------------

fn loss_head_audit() -> Outcome {
    let model = Rmmdf::new(NetworkConfig::micro(32, 2, 3), Variant::FULL, 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask = random_mask(&mut rng, 1, 32);
    let g = Graph::new(model.store(), true);
    let out = model.forward(&g, g.input(random_image(&mut rng, 1, 32)), false).map_err(|e| e.to_string())?;
    let heads = model.loss_heads(&g, &out, &mask).map_err(|e| e.to_string())?;
    let kinds: Vec<LossHead> = heads.iter().map(|(h, _)| *h).collect();
    ensure(kinds == [LossHead::Vgg, LossHead::Resnet, LossHead::Sdf], || format!("heads {kinds:?}"))?;
    let mut readers = Vec::new();
    for (head, v) in &heads {
        let layers: Vec<String> = g.nearest_layers(*v).iter().map(|&id| model.store().name(id).to_string()).collect();
        ensure(!layers.is_empty(), || format!("{} head reads no layer", head.name()))?;
        ensure(layers.iter().all(|n| !n.starts_with("fusion.")), || {
            format!("{} head reads {layers:?} directly", head.name())
        })?;
        readers.push(format!("{}<-{}", head.name(), layers.join("+")));
    }
    let total = model.total_loss(&g, &heads, &Default::default());
    let grads = g.backward(total);
    let fusion_without_grad = model
        .store()
        .trainable_ids()
        .filter(|&id| model.store().name(id).starts_with("fusion.") && grads.norm(id) <= 1e-12)
        .count();
    ensure(fusion_without_grad == 0, || format!("{fusion_without_grad} fusion parameters get no gradient"))?;
    Ok(format!("3 heads: {}", readers.join(", ")))
}

fn main() {
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = outcome.as_ref().map_or_else(Clone::clone, Clone::clone);
        println!("[{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
        results.push((name, outcome, start.elapsed()));
    };

    record("shape suite at 256x256, full width", &mut shape_suite);
    record("refinement resize branch, 200 random size pairs", &mut refinement_branch);
    record("aggregation resize directions per level", &mut aggregation_structure);
    record("metric oracle equivalence", &mut metric_oracles);
    record("gradient check, 30 sampled entries", &mut gradient_check);
    let run = catch_unwind(overfit_run).unwrap_or_else(|_| Err("overfit run panicked".into()));
    record("overfit smoke on 8 synthetic images", &mut || overfit_smoke(&run));
    record("later stages no worse than the first", &mut || stage_improvement(&run));
    record("determinism of metric reports", &mut determinism);
    record("three loss heads, none reading a fusion layer", &mut loss_head_audit);

    let failed = results.iter().filter(|(_, o, _)| o.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
