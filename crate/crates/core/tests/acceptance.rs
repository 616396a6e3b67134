//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Runs on the bundled MNIST subset in `data/mnist` (or `EDGEOPT_MNIST`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use edgeopt::bench::{compare, run_benchmark, stats, BenchConfig, BenchReport};
use edgeopt::compress::{
    calibrate_activations, prune_count, prune_magnitude, quantize_weights, quantized_logits, sparsity_sweep, PruneMask,
    PruneScope, QuantModel, DEFAULT_SPARSITY_GRID,
};
use edgeopt::data::{load_idx_dir, save_folder, split, LabeledDataset};
use edgeopt::lite::{export_lite, from_bytes, model_size, to_bytes};
use edgeopt::nn::{argmax, canonical_cnn, forward_logits, Backend, ExecutionPlan, LayerSpec, Model};
use edgeopt::report::{emit_comparison, emit_report, OutputFormat};
use edgeopt::tensor::Tensor;
use edgeopt::train::{evaluate, evaluate_with, finetune_masked, gradients, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const CALIBRATION_IMAGES: usize = 100;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);

fn data_dir() -> PathBuf {
    std::env::var_os("EDGEOPT_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    }
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check<T>(r: edgeopt::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Baseline {
    train: LabeledDataset,
    val: LabeledDataset,
    model: Model<f32>,
    accuracy: f64,
    elapsed: Duration,
    dir: tempfile::TempDir,
}

impl Baseline {
    fn build() -> Result<Self, String> {
        let ds = check(load_idx_dir(data_dir()))?;
        let (train_set, val) = check(split(&ds, 0.7, SEED))?;
        let init = check(canonical_cnn::<f32>(&[28, 28, 1], ds.class_names.clone(), SEED))?;
        let start = Instant::now();
        let (mut model, _) = check(train(&init, &train_set, &val, &train_config()))?;
        let elapsed = start.elapsed();
        model.metadata.name = "mnist".into();
        let accuracy = check(evaluate(&model, &val, &plan(&model, Backend::Accelerated)))?.accuracy;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        check(save_folder(&val, dir.path().join("val")))?;
        check(export_lite(&model, dir.path().join("mnist.plite")))?;
        Ok(Self {
            train: train_set,
            val,
            model,
            accuracy,
            elapsed,
            dir,
        })
    }

    fn lite_path(&self) -> PathBuf {
        self.dir.path().join("mnist.plite")
    }

    fn val_folder(&self) -> PathBuf {
        self.dir.path().join("val")
    }

    fn quantized(&self) -> Result<QuantModel, String> {
        let q = check(quantize_weights(&self.model))?;
        check(calibrate_activations(&q, &self.train, CALIBRATION_IMAGES))
    }
}

fn plan(model: &Model<f32>, backend: Backend) -> ExecutionPlan {
    ExecutionPlan::uniform(model.layers(), backend)
}

fn baseline_training(b: &Baseline) -> Outcome {
    ensure(b.accuracy >= 0.97, || format!("val accuracy {:.4} < 0.97", b.accuracy))?;
    ensure(b.elapsed <= TRAIN_BUDGET, || format!("training took {:.1?}", b.elapsed))?;
    Ok(format!(
        "val accuracy {:.4} on {} train / {} val images in {:.1?}",
        b.accuracy,
        b.train.len(),
        b.val.len(),
        b.elapsed
    ))
}

fn prune_and_recover(b: &Baseline) -> Outcome {
    let (pruned, mask) = check(prune_magnitude(&b.model, 0.7, PruneScope::PerLayer))?;
    for (i, layer) in mask.layers.iter().enumerate() {
        if let Some(m) = layer {
            let want = prune_count(0.7, m.keep.len());
            ensure(m.pruned_count().abs_diff(want) <= 1, || {
                format!("layer {i}: {} pruned, expected {want}", m.pruned_count())
            })?;
        }
    }
    let tuned = check(finetune_masked(&pruned, &mask, &b.train, &train_config()))?;
    ensure(zeros_hold(&tuned, &mask), || {
        "pruned weight moved during fine-tuning".into()
    })?;
    let acc = check(evaluate(&tuned, &b.val, &plan(&tuned, Backend::Accelerated)))?.accuracy;
    ensure(acc >= b.accuracy - 0.01, || {
        format!("accuracy {acc:.4} below baseline {:.4} - 0.01", b.accuracy)
    })?;
    Ok(format!(
        "sparsity {:.4}, accuracy {acc:.4} vs baseline {:.4}",
        mask.sparsity(),
        b.accuracy
    ))
}

fn zeros_hold(model: &Model<f32>, mask: &PruneMask) -> bool {
    mask.layers.iter().zip(model.params()).all(|(m, p)| match (m, p) {
        (Some(m), Some(p)) => m.keep.iter().zip(p.weights.data()).all(|(&k, &w)| k || w == 0.0),
        _ => true,
    })
}

fn sparsity_sweep_runs(b: &Baseline) -> Outcome {
    let sweep = check(sparsity_sweep(
        &b.model,
        &b.train,
        &b.val,
        &DEFAULT_SPARSITY_GRID,
        2,
        &train_config(),
        PruneScope::PerLayer,
    ))?;
    ensure(sweep.rows.len() == 9, || format!("{} rows", sweep.rows.len()))?;
    let table = check(edgeopt::report::emit_sweep(&sweep, OutputFormat::Csv))?;
    ensure(table.lines().count() == 10, || {
        "sweep table is not 9 rows plus a header".into()
    })?;
    let (low, high) = (sweep.rows[0].val_accuracy, sweep.rows[8].val_accuracy);
    ensure(high < low, || {
        format!("acc(0.99) = {high:.4} not below acc(0.25) = {low:.4}")
    })?;
    let accs: Vec<String> = sweep.rows.iter().map(|r| format!("{:.3}", r.val_accuracy)).collect();
    Ok(format!("accuracies {}", accs.join(" ")))
}

fn quantized_accuracy(b: &Baseline) -> Outcome {
    let q = b.quantized()?;
    let acc = check(evaluate_with(&q, &b.val))?.accuracy;
    let diff = (acc - b.accuracy).abs();
    ensure(diff <= 0.02, || format!("int8 {acc:.4} vs float {:.4}", b.accuracy))?;
    Ok(format!(
        "int8 {acc:.4} vs float {:.4} ({:.2}pp)",
        b.accuracy,
        100.0 * diff
    ))
}

fn size_properties(b: &Baseline) -> Outcome {
    let (pruned, _) = check(prune_magnitude(&b.model, 0.7, PruneScope::PerLayer))?;
    let dir = b.dir.path();
    let float = check(export_lite(&b.model, dir.join("size-float.plite")))?;
    let sparse = check(export_lite(&pruned, dir.join("size-pruned.plite")))?;
    let quant = check(export_lite(&b.quantized()?, dir.join("size-quant.plite")))?;
    ensure(check(model_size(dir.join("size-pruned.plite")))? == sparse, || {
        "size on disk differs".into()
    })?;
    ensure(float == sparse, || {
        format!("unpruned {float} bytes, pruned {sparse} bytes")
    })?;
    let ratio = quant as f64 / float as f64;
    ensure((0.24..=0.35).contains(&ratio), || {
        format!("quant/float ratio {ratio:.4}")
    })?;
    Ok(format!(
        "float {float} B = pruned {sparse} B, quant {quant} B, ratio {ratio:.4}"
    ))
}

fn format_preservation(b: &Baseline) -> Outcome {
    let back = check(from_bytes(&check(to_bytes(&b.model))?))?;
    let accel = plan(&b.model, Backend::Accelerated);
    for (x, _) in &b.val.items {
        let want = check(forward_logits(&b.model, x, &accel))?;
        let got = check(back.logits_with(x, Backend::Accelerated))?;
        ensure(bits(want.data()) == bits(&got), || {
            "float logits differ after round trip".into()
        })?;
    }
    let before = check(evaluate(&b.model, &b.val, &accel))?.accuracy;
    let after = check(evaluate_with(&back, &b.val))?.accuracy;
    ensure(before == after, || format!("accuracy {before} became {after}"))?;

    let q = b.quantized()?;
    let qback = check(from_bytes(&check(to_bytes(&q))?))?;
    let qplan = ExecutionPlan::uniform(q.layers(), Backend::Accelerated);
    for (x, _) in &b.val.items {
        let want = check(quantized_logits(&q, x, &qplan))?;
        let got = check(qback.logits_with(x, Backend::Accelerated))?;
        ensure(bits(&want) == bits(&got), || {
            "int8 logits differ after round trip".into()
        })?;
    }
    let (qa, qb) = (
        check(evaluate_with(&q, &b.val))?.accuracy,
        check(evaluate_with(&qback, &b.val))?.accuracy,
    );
    ensure(qa == qb, || format!("int8 accuracy {qa} became {qb}"))?;
    Ok(format!(
        "{} images bit-identical; accuracy float {after:.4}, int8 {qb:.4}",
        b.val.len()
    ))
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn statistics_oracle() -> Outcome {
    let s = check(stats(&[10.0, 12.0, 11.0, 13.0, 14.0]))?;
    let sqrt2 = 2f64.sqrt();
    ensure((s.mean - 12.0).abs() <= 1e-12, || format!("mean {}", s.mean))?;
    ensure((s.std - sqrt2).abs() <= 1e-12, || format!("std {}", s.std))?;
    ensure((s.ste - sqrt2 / 5f64.sqrt()).abs() <= 1e-12, || {
        format!("ste {}", s.ste)
    })?;
    let ste = 6.55 / ((100 - 1) as f64).sqrt();
    let shown = format!("{ste:.2}");
    ensure(shown == "0.66", || format!("ste renders as {shown}"))?;
    Ok(format!(
        "({}, {:.6}, {:.6}); ste(6.55, N=100) = {shown}",
        s.mean, s.std, s.ste
    ))
}

fn cold_start(b: &Baseline) -> Outcome {
    let cfg = BenchConfig::default();
    let mut hits = 0;
    let mut ratios = Vec::new();
    for _ in 0..10 {
        let r = check(run_benchmark(b.lite_path(), b.val_folder(), &cfg))?;
        check(r.check_consistency())?;
        hits += (r.t_first_ms > r.mean_ms) as usize;
        ratios.push(format!("{:.1}", r.t_first_ms / r.mean_ms));
    }
    ensure(hits >= 9, || format!("t_first > mean in only {hits}/10 runs"))?;
    Ok(format!(
        "t_first > mean in {hits}/10 runs; t_first/mean = {}",
        ratios.join(" ")
    ))
}

fn backend_equivalence(b: &Baseline) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (reference, accel) = (plan(&b.model, Backend::Reference), plan(&b.model, Backend::Accelerated));
    let mut agree = 0;
    for _ in 0..1000 {
        let x = check(Tensor::from_fn([28, 28, 1], |_| rng.gen::<f32>()))?;
        let r = check(forward_logits(&b.model, &x, &reference))?;
        let a = check(forward_logits(&b.model, &x, &accel))?;
        agree += (argmax(r.data()) == argmax(a.data())) as usize;
    }
    ensure(agree == 1000, || format!("argmax agrees on {agree}/1000 inputs"))?;

    let run = |backend| {
        check(run_benchmark(
            b.lite_path(),
            b.val_folder(),
            &BenchConfig {
                backend,
                ..BenchConfig::default()
            },
        ))
    };
    let reports: Vec<BenchReport> = vec![run(Backend::Reference)?, run(Backend::Accelerated)?];
    let table = check(compare(&reports))?;
    check(emit_comparison(&table, OutputFormat::Markdown))?;
    let (r, a) = (&table.rows[0], &table.rows[1]);
    let verdict = if a.mean_ms <= r.mean_ms {
        "faster"
    } else {
        "SLOWER (recorded, not fatal)"
    };
    Ok(format!(
        "1000/1000 argmax agree; accelerated mean {:.3} ms vs reference {:.3} ms, speedup {:.2} ({verdict})",
        a.mean_ms, r.mean_ms, a.speedup
    ))
}

/// A random classifier with every dimension at most 8: either a two-layer
/// perceptron or a small convolutional net.
fn random_model(seed: u64) -> (Model<f32>, LabeledDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.gen_range(2..=8);
    let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
    let (layers, input): (Vec<LayerSpec>, Vec<usize>) = if seed.is_multiple_of(2) {
        (
            vec![
                LayerSpec::dense(rng.gen_range(2..=8)),
                LayerSpec::ReLU,
                LayerSpec::dense(classes),
                LayerSpec::Softmax,
            ],
            vec![rng.gen_range(2..=8)],
        )
    } else {
        let side = rng.gen_range(5..=8);
        (
            vec![
                LayerSpec::conv(rng.gen_range(1..=4), 3),
                LayerSpec::ReLU,
                LayerSpec::max_pool(2),
                LayerSpec::Flatten,
                LayerSpec::dense(classes),
                LayerSpec::Softmax,
            ],
            vec![side, side, rng.gen_range(1..=2)],
        )
    };
    let mut model = Model::init(layers, input.clone(), names.clone(), seed).unwrap();
    for i in 0..model.layers().len() {
        if let Some(b) = model.bias_mut(i) {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let items = (0..4)
        .map(|k| {
            (
                Tensor::from_fn(input.clone(), |_| rng.gen_range(-1.0..1.0)).unwrap(),
                k % classes,
            )
        })
        .collect();
    (model, LabeledDataset::new(items, names).unwrap())
}

fn mean_loss(model: &Model<f64>, data: &LabeledDataset<f64>) -> f64 {
    gradients(model, data.items.iter().map(|(x, y)| (x, *y))).unwrap().loss
}

fn gradient_check() -> Outcome {
    const EPS: f64 = 1e-3;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (model, data) = random_model(seed);
        let analytic = check(gradients(&model, data.items.iter().map(|(x, y)| (x, *y))))?;
        let (m64, d64): (Model<f64>, LabeledDataset<f64>) = (model.cast(), data.cast());
        for (layer, g) in analytic.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let n_w = g.weights.len();
            for (j, &a) in g.weights.data().iter().chain(g.bias.data()).enumerate() {
                let nudge = |delta: f64| {
                    let mut m = m64.clone();
                    if j < n_w {
                        m.weights_mut(layer).unwrap()[j] += delta;
                    } else {
                        m.bias_mut(layer).unwrap()[j - n_w] += delta;
                    }
                    mean_loss(&m, &d64)
                };
                let numeric = (nudge(EPS) - nudge(-EPS)) / (2.0 * EPS);
                let a = a as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                ensure(rel < 1e-2, || {
                    format!("seed {seed} layer {layer} param {j}: analytic {a:e}, numeric {numeric:e}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} parameters over 20 seeds, worst relative error {worst:.2e}"
    ))
}

struct PipelineRun {
    accuracies: Vec<f64>,
    mask: PruneMask,
    float_file: Vec<u8>,
    quant_file: Vec<u8>,
    report: BenchReport,
}

fn pipeline(ds: &LabeledDataset) -> Result<PipelineRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (train_set, val) = check(split(ds, 0.7, SEED))?;
    let init = check(canonical_cnn::<f32>(&[28, 28, 1], ds.class_names.clone(), SEED))?;
    let (model, _) = check(train(&init, &train_set, &val, &train_config()))?;
    let base = check(evaluate(&model, &val, &plan(&model, Backend::Accelerated)))?.accuracy;
    let (pruned, mask) = check(prune_magnitude(&model, 0.7, PruneScope::PerLayer))?;
    let tuned = check(finetune_masked(
        &pruned,
        &mask,
        &train_set,
        &TrainConfig {
            epochs: 1,
            ..train_config()
        },
    ))?;
    let pruned_acc = check(evaluate(&tuned, &val, &plan(&tuned, Backend::Accelerated)))?.accuracy;
    let q = check(calibrate_activations(
        &check(quantize_weights(&tuned))?,
        &train_set,
        CALIBRATION_IMAGES,
    ))?;
    let quant_acc = check(evaluate_with(&q, &val))?.accuracy;
    let float_path = dir.path().join("model.plite");
    let quant_path = dir.path().join("model-int8.plite");
    check(export_lite(&tuned, &float_path))?;
    check(export_lite(&q, &quant_path))?;
    check(save_folder(&val, dir.path().join("val")))?;
    let report = check(run_benchmark(
        &quant_path,
        dir.path().join("val"),
        &BenchConfig {
            n_images: 2,
            environment: Some(String::new()),
            ..BenchConfig::default()
        },
    ))?;
    check(emit_report(std::slice::from_ref(&report), OutputFormat::Csv))?;
    Ok(PipelineRun {
        accuracies: vec![base, pruned_acc, quant_acc],
        mask,
        float_file: std::fs::read(&float_path).map_err(|e| e.to_string())?,
        quant_file: std::fs::read(&quant_path).map_err(|e| e.to_string())?,
        report,
    })
}

fn end_to_end_determinism() -> Outcome {
    let ds = check(load_idx_dir(data_dir()))?.take(3000);
    let (a, b) = (pipeline(&ds)?, pipeline(&ds)?);
    ensure(a.accuracies == b.accuracies, || {
        format!("{:?} vs {:?}", a.accuracies, b.accuracies)
    })?;
    ensure(a.mask == b.mask, || "pruning masks differ".into())?;
    ensure(a.float_file == b.float_file, || "float model files differ".into())?;
    ensure(a.quant_file == b.quant_file, || "quantized model files differ".into())?;
    let untimed = |r: &BenchReport| {
        (
            r.model_id.clone(),
            r.format,
            r.backend,
            r.n,
            r.accuracy,
            r.single_warm_sample,
        )
    };
    ensure(untimed(&a.report) == untimed(&b.report), || {
        "bench reports differ".into()
    })?;
    Ok(format!(
        "accuracies {:?}, {} + {} identical model bytes",
        a.accuracies,
        a.float_file.len(),
        a.quant_file.len()
    ))
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS [{id:>2}] {title}: {detail} ({secs:.1}s)"),
        Err(why) => println!("FAIL [{id:>2}] {title}: {why} ({secs:.1}s)"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let baseline = catch_unwind(Baseline::build).unwrap_or_else(|_| Err("panicked while training".into()));
    let with = |f: fn(&Baseline) -> Outcome| {
        let b = &baseline;
        move || b.as_ref().map_err(|e| format!("baseline unavailable: {e}")).and_then(f)
    };
    let results = [
        run(1, "baseline training", with(baseline_training)),
        run(2, "prune and recover", with(prune_and_recover)),
        run(3, "sparsity sweep", with(sparsity_sweep_runs)),
        run(4, "int8 accuracy", with(quantized_accuracy)),
        run(5, "file sizes", with(size_properties)),
        run(6, "format preservation", with(format_preservation)),
        run(7, "statistics oracle", statistics_oracle),
        run(8, "cold start", with(cold_start)),
        run(9, "backend equivalence", with(backend_equivalence)),
        run(10, "gradient check", gradient_check),
        run(11, "end-to-end determinism", end_to_end_determinism),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
