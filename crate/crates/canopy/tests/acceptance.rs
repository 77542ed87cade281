//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use canopy::raster_io::{read_mask, write_tile};
use canopy_core::loss::LossConfig;
use canopy_core::metrics::{evaluate, Confusion};
use canopy_core::model::{build_attention_unet, ModelConfig};
use canopy_core::morphology::{dilate, erode};
use canopy_core::preprocess::{assemble_image, minmax_normalize, percentile_stretch, resample_bilinear, BandSet, PreprocessConfig};
use canopy_core::refine::{refine_query, PredictionRecord, Query, RefineConfig, Variant};
use canopy_core::synthetic::blob_samples;
use canopy_core::tensor::Tensor;
use canopy_core::train::{train, TrainConfig};
use canopy_core::{Mask, RasterTile, SampleKey, Sensor};
use chrono::NaiveDate;
use common::{build, canopy, s, tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    let start = Instant::now();
    let model = build_attention_unet(ModelConfig { in_channels: 3, depth: 1, base_filters: 2 }, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(2, 3, 8, 8, (0..2 * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let labels: Vec<f64> = (0..2 * 64).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
    let loss = LossConfig::default();
    let analytic = model.loss_and_gradients(&x, &labels, &loss).unwrap().gradients.values;
    let mut probe = model.clone();
    let mut passed = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + STEP;
        let up = probe.training_loss(&x, &labels, &loss).unwrap();
        probe.values_mut()[i] = original - STEP;
        let down = probe.training_loss(&x, &labels, &loss).unwrap();
        probe.values_mut()[i] = original;
        let numeric = (up - down) / (2.0 * STEP);
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-10 || (a - numeric).abs() / scale <= TOL {
            passed += 1;
        }
    }
    let fraction = passed as f64 / analytic.len() as f64;
    ensure(fraction >= 0.99, || format!("{passed}/{} within tolerance", analytic.len()))?;
    within(start.elapsed(), 60)?;
    Ok(format!("{passed}/{} parameters within {TOL}", analytic.len()))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.gen_range(0.0..1.0);
    Mask::new(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect()).unwrap()
}

/// Sliding min (erode) or max (dilate) with pixels outside the grid read as 0.
fn brute_filter(m: &Mask, k: usize, take_min: bool) -> Vec<u8> {
    let (h, w) = m.shape();
    let r = (k / 2) as isize;
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = if take_min { 1 } else { 0 };
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize { 0 } else { m.get(yy as usize, xx as usize) };
                    acc = if take_min { acc.min(v) } else { acc.max(v) };
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn morphology_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let m = random_mask(&mut rng, 32, 32);
        let k = [1, 3, 5][trial % 3];
        ensure(erode(&m, k).unwrap().data() == brute_filter(&m, k, true).as_slice(), || format!("erode differs, trial {trial}"))?;
        ensure(dilate(&m, k).unwrap().data() == brute_filter(&m, k, false).as_slice(), || format!("dilate differs, trial {trial}"))?;
    }
    within(start.elapsed(), 30)?;
    Ok("1000 masks, kernels 1/3/5".into())
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for trial in 0..10_000 {
        let (pred, truth) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let report = evaluate(&pred, &truth).unwrap();
        ensure(report.confusion == Confusion { tp, fp, fn_, tn }, || format!("confusion differs, trial {trial}"))?;
        let (acc, f1, iou) = if tp + fp + fn_ == 0 {
            ((tp + tn) as f64 / 256.0, 1.0, 1.0)
        } else {
            ((tp + tn) as f64 / 256.0, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / (tp + fp + fn_) as f64)
        };
        ensure(report.pixel_accuracy == acc && report.f1 == f1 && report.iou == iou, || format!("metrics differ, trial {trial}"))?;
        let gap = (report.f1 - 2.0 * report.iou / (1.0 + report.iou)).abs();
        worst = worst.max(gap);
        ensure(gap <= 1e-12, || format!("f1/iou identity off by {gap:e}, trial {trial}"))?;
    }
    within(start.elapsed(), 30)?;
    Ok(format!("10000 pairs, worst identity gap {worst:.1e}"))
}

fn random_tile(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RasterTile {
    let (lo, span) = (rng.gen_range(-1e4..1e4), 10f64.powf(rng.gen_range(-3.0..5.0)));
    if rng.gen_bool(0.05) {
        return RasterTile::filled(h, w, lo).unwrap();
    }
    RasterTile::new(h, w, (0..h * w).map(|_| lo + span * rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn preprocessing_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let band = random_tile(&mut rng, h, w);
        let stretched = percentile_stretch(&band, 0.0).unwrap();
        let reference = minmax_normalize(&band);
        for (a, b) in stretched.values().iter().zip(reference.values()) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-12, || format!("stretch(0) differs from min-max by {worst:e}, trial {trial}"))?;
    }
    for trial in 0..1000 {
        let sensor = if trial % 2 == 0 { Sensor::Landsat8 } else { Sensor::Sentinel1 };
        let (h, w) = (rng.gen_range(2..30), rng.gen_range(2..30));
        let bands: BandSet = sensor.bands().iter().map(|b| (b.to_string(), random_tile(&mut rng, h, w))).collect();
        let config = PreprocessConfig { stretch_percent: rng.gen_range(0.0..49.0), resample_target: (16, 16), ..PreprocessConfig::default() };
        let image = assemble_image(&bands, sensor, &config).unwrap();
        ensure(image.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{sensor} output left [0,1], trial {trial}"))?;
    }
    for trial in 0..1000 {
        let c = rng.gen_range(-1e6..1e6);
        let tile = RasterTile::filled(rng.gen_range(1..40), rng.gen_range(1..40), c).unwrap();
        let out = resample_bilinear(&tile, rng.gen_range(1..70), rng.gen_range(1..70)).unwrap();
        ensure(out.values().iter().all(|&v| v == c), || format!("constant tile not preserved, trial {trial}"))?;
    }
    Ok(format!("3 x 1000 trials, worst stretch gap {worst:.1e}"))
}

/// 10x10 grid: a 5x5 block of mean 0.5, a 3x4 block of mean 1/3 and an isolated
/// speckle of mean 0.9 over the kept records; the cloudy record would lift all of them.
fn refinement_fixture() -> (Query, Vec<PredictionRecord>, Mask) {
    let date = |d| NaiveDate::from_ymd_opt(2019, 8, d).unwrap();
    let key = |sensor, d| SampleKey { lat: -4.1, lon: -54.85, date: date(d), sensor };
    let grid = |block: f64, side: f64, speckle: f64| {
        let values = (0..100)
            .map(|p| {
                let (r, c) = (p / 10, p % 10);
                if (2..=6).contains(&r) && (2..=6).contains(&c) {
                    block
                } else if r >= 7 && c <= 3 {
                    side
                } else if (r, c) == (0, 9) {
                    speckle
                } else {
                    0.0
                }
            })
            .collect();
        RasterTile::new(10, 10, values).unwrap()
    };
    let red = RasterTile::filled(10, 10, 0.1).unwrap();
    let nir = |cloudy: usize| RasterTile::new(10, 10, (0..100).map(|p| if p < cloudy { 0.1 } else { 0.5 }).collect()).unwrap();
    let records = vec![
        PredictionRecord { key: key(Sensor::Landsat8, 1), prob_mask: grid(0.9, 0.4, 0.9), red: Some(red.clone()), nir: Some(nir(0)) },
        // 1% sub-threshold: at the limit, kept.
        PredictionRecord { key: key(Sensor::Landsat8, 2), prob_mask: grid(0.3, 0.3, 0.9), red: Some(red.clone()), nir: Some(nir(1)) },
        // 2% sub-threshold: over the limit, discarded.
        PredictionRecord { key: key(Sensor::Landsat8, 3), prob_mask: grid(1.0, 1.0, 1.0), red: Some(red), nir: Some(nir(2)) },
        PredictionRecord { key: key(Sensor::Sentinel1, 4), prob_mask: grid(0.3, 0.3, 0.9), red: None, nir: None },
    ];
    let expected = Mask::from_rows(&[
        [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    ])
    .unwrap();
    (Query { lat: -4.1, lon: -54.85, date: date(10) }, records, expected)
}

fn refinement_pipeline(dir: &Path) -> Outcome {
    let (query, records, expected) = refinement_fixture();
    let lib = refine_query(&query, &records, &RefineConfig::default(), Variant::Refined).map_err(|e| e.to_string())?;
    ensure(lib.mask.data() == expected.data(), || "library mask differs from the hand-computed mask".into())?;

    let mut index = String::new();
    for (n, r) in records.iter().enumerate() {
        write_tile(&dir.join(format!("p{n}.tif")), &r.prob_mask).unwrap();
        index += &format!("{} {} {} {} prob=p{n}.tif", r.key.sensor, r.key.lat, r.key.lon, r.key.date);
        if let (Some(red), Some(nir)) = (&r.red, &r.nir) {
            write_tile(&dir.join(format!("r{n}.tif")), red).unwrap();
            write_tile(&dir.join(format!("n{n}.tif")), nir).unwrap();
            index += &format!(" red=r{n}.tif nir=n{n}.tif");
        }
        index.push('\n');
    }
    std::fs::write(dir.join("records.txt"), index).unwrap();
    std::fs::write(dir.join("queries.txt"), format!("{} {} {}\n", query.lat, query.lon, query.date)).unwrap();
    let out = dir.join("out");
    let code = canopy(&["refine", "--records", s(&dir.join("records.txt")), "--queries", s(&dir.join("queries.txt")),
        "--variant", "v2", "--out", s(&out), "--run-id", "fixture"]);
    ensure(code == 0, || format!("refine exited with {code}"))?;
    let written = read_mask(&out.join(format!("refine/fixture/masks/{}.tif", query.stem()))).map_err(|e| e.to_string())?;
    ensure(written.data() == expected.data(), || "CLI mask differs from the hand-computed mask".into())?;
    Ok(format!("{} foreground pixels, cloudy record discarded", expected.count_ones()))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let samples = blob_samples(8, 16, Sensor::Sentinel1, 2023).unwrap();
    let model = build_attention_unet(ModelConfig { in_channels: 3, depth: 2, base_filters: 24 }, 7).unwrap();
    let config = TrainConfig { batch_size: 8, epochs: 200, seed: 7, ..TrainConfig::for_sensor(Sensor::Sentinel1) };
    ensure(config.learning_rate == 1e-4 && config.loss.bce_weight == config.loss.dice_weight, || "recipe drifted".into())?;
    let (_, history) = train(model, &samples, &samples, &config).map_err(|e| e.to_string())?;
    ensure(history.updates == 200, || format!("{} optimizer steps", history.updates))?;
    let best = history.records.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let first = history.records.iter().find(|r| r.train_accuracy >= 0.99).map(|r| r.epoch);
    ensure(best >= 0.99, || format!("best train accuracy {best:.4} after 200 steps"))?;
    within(start.elapsed(), 600)?;
    Ok(format!("train accuracy {best:.4}, first >= 0.99 at step {}", first.unwrap_or(0)))
}

fn pipeline(fixture: &common::Fixture, out: &Path) -> Result<(), String> {
    let model = ["--depth", "2", "--base-filters", "4", "--tile-size", "32", "--batch-size", "4", "--epochs", "3", "--seed", "5"];
    let run = |args: Vec<&str>| {
        let code = canopy(&args);
        ensure(code == 0, || format!("`{}` exited with {code}", args.join(" ")))
    };
    let mut indexes = Vec::new();
    for (name, manifest) in [("s1", &fixture.s1_manifest), ("l8", &fixture.l8_manifest)] {
        let id = format!("det-{name}");
        let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--run-id", &id];
        args.extend(model);
        run(args)?;
        let ckpt = out.join(format!("train/{id}/model.ckpt"));
        run(vec!["predict", "--manifest", s(manifest), "--checkpoint", s(&ckpt), "--tile-size", "32", "--out", s(out), "--run-id", &id])?;
        indexes.push(out.join(format!("predict/{id}/records.txt")));
    }
    run(vec!["refine", "--records", s(&indexes[0]), "--records", s(&indexes[1]), "--queries", s(&fixture.queries),
        "--variant", "v2", "--out", s(out), "--run-id", "det"])?;
    let masks = out.join("refine/det/masks");
    run(vec!["evaluate", "--pred", s(&masks), "--truth", s(&fixture.truth), "--out", s(out), "--run-id", "det"])
}

fn determinism(dir: &Path) -> Outcome {
    let fixture = build(&dir.join("fixture"), 6, 48, 20, 32);
    let (a, b) = (dir.join("a"), dir.join("b"));
    pipeline(&fixture, &a)?;
    pipeline(&fixture, &b)?;
    let (ta, tb) = (tree(&a), tree(&b));
    ensure(!ta.is_empty() && ta == tb, || {
        let differing: Vec<_> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
        format!("output trees differ: {differing:?}")
    })?;
    let provenance = std::fs::read_to_string(a.join("refine/det/provenance.txt")).unwrap();
    ensure(provenance.contains("cloudy("), || "fixture cloud was not screened".into())?;
    Ok(format!("{} files byte-identical across two runs", ta.len()))
}

const DEFAULT_CONFIG: &str = "batch_size=16
learning_rate=0.0001
epochs=50
adam_beta1=0.9
adam_beta2=0.999
adam_epsilon=0.00000001
bce_weight=0.5
dice_weight=0.5
seed=0
val_fraction=0.1
depth=4
base_filters=64
tile_size=256
stretch_percent=1
augment_optical=true
ndvi_threshold=0.1
cloud_limit=0.01
agg_threshold=0.4
kernel=3
pool_sensors=true
variant=v2
averaging=micro
";

fn config_fidelity() -> Outcome {
    let output = Command::new(env!("CARGO_BIN_EXE_canopy")).arg("--print-config").env_remove("CANOPY_OUT").output().unwrap();
    ensure(output.status.success(), || format!("exit {:?}", output.status.code()))?;
    let text = String::from_utf8(output.stdout).unwrap();
    ensure(text == DEFAULT_CONFIG, || format!("printed config:\n{text}"))?;
    for line in ["batch_size=16", "learning_rate=0.0001", "epochs=50", "ndvi_threshold=0.1", "cloud_limit=0.01", "agg_threshold=0.4"] {
        ensure(text.lines().any(|l| l == line), || format!("missing {line}"))?;
    }
    Ok("defaults 16 / 0.0001 / 50 / 0.1 / 0.01 / 0.4".into())
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let (d5, d7) = (dir.path().join("c5"), dir.path().join("c7"));
    std::fs::create_dir_all(&d5).unwrap();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + Send + '_>)> = vec![
        ("loss gradient check", Box::new(gradient_check)),
        ("morphology oracle", Box::new(morphology_oracle)),
        ("metric oracle", Box::new(metric_oracle)),
        ("preprocessing contracts", Box::new(preprocessing_contracts)),
        ("refinement fixture", Box::new(|| refinement_pipeline(&d5))),
        ("overfit", Box::new(overfit)),
        ("determinism", Box::new(|| determinism(&d7))),
        ("config fidelity", Box::new(config_fidelity)),
    ];
    let results: Vec<(&str, Outcome, Duration)> = std::thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .into_iter()
            .map(|(name, f)| {
                (name, scope.spawn(move || {
                    let start = Instant::now();
                    (f(), start.elapsed())
                }))
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| match h.join() {
                Ok((outcome, elapsed)) => (name, outcome, elapsed),
                Err(_) => (name, Err("panicked".to_string()), Duration::ZERO),
            })
            .collect()
    });
    let mut failed = 0;
    for (i, (name, outcome, elapsed)) in results.iter().enumerate() {
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why}; {secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
