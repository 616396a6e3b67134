//! Single-image latency benchmarking with the first (cold) inference kept
//! apart from the warm statistics.
//!
//! Every timed window runs from just before the image file is read to just
//! after the prediction is returned. The model file is parsed lazily inside
//! the first window, the way an interpreter initializes on first use, and no
//! warm-up inference precedes it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{decode_pgm, list_folder};
use crate::error::{Error, Result};
use crate::lite::{import_lite, LiteModel};
use crate::nn::{argmax, softmax, Backend};
use crate::tensor::Tensor;

/// Which artifact a report measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatTag {
    Float,
    Lite,
    LitePruned,
    Quant,
    QuantPruned,
}

impl FormatTag {
    pub const ALL: [FormatTag; 5] = [
        FormatTag::Float,
        FormatTag::Lite,
        FormatTag::LitePruned,
        FormatTag::Quant,
        FormatTag::QuantPruned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormatTag::Float => "float",
            FormatTag::Lite => "lite",
            FormatTag::LitePruned => "lite_pruned",
            FormatTag::Quant => "quant",
            FormatTag::QuantPruned => "quant_pruned",
        }
    }

    /// Tag implied by a loaded model: quantized or not, pruned when its
    /// recorded sparsity is positive.
    pub fn infer(model: &LiteModel) -> Self {
        let pruned = model.metadata().sparsity > 0.0;
        match (model.is_quantized(), pruned) {
            (false, false) => FormatTag::Lite,
            (false, true) => FormatTag::LitePruned,
            (true, false) => FormatTag::Quant,
            (true, true) => FormatTag::QuantPruned,
        }
    }
}

impl fmt::Display for FormatTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FormatTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown format tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub ste: f64,
}

/// Mean, standard deviation and standard error of the warm times:
/// `mean = Σt / m`, `std = sqrt(Σ(t - mean)² / m)`, `ste = std / sqrt(m)`
/// with `m` the number of warm samples. A single sample gives `std = ste = 0`.
pub fn stats(times_ms: &[f64]) -> Result<Stats> {
    if times_ms.is_empty() {
        return Err(Error::InvalidArgument("no warm inference times".into()));
    }
    let m = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / m;
    let std = (times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / m).sqrt();
    Ok(Stats {
        mean,
        std,
        ste: std / m.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_id: String,
    pub format: FormatTag,
    pub backend: Backend,
    /// Total images, cold one included.
    pub n: usize,
    pub t_first_ms: f64,
    pub warm_times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub ste_ms: f64,
    /// Set when only one warm time exists, so `std` and `ste` are 0 by definition.
    pub single_warm_sample: bool,
    pub accuracy: f64,
    /// Seconds since the Unix epoch when the run finished.
    pub timestamp: u64,
    pub environment: String,
}

impl BenchReport {
    /// Recomputes the statistics from `warm_times_ms` and checks them
    /// against the stored values.
    pub fn check_consistency(&self) -> Result<()> {
        if self.n < 2 || self.warm_times_ms.len() != self.n - 1 {
            return Err(Error::InvalidArgument(format!(
                "report has n = {} but {} warm times",
                self.n,
                self.warm_times_ms.len()
            )));
        }
        let s = stats(&self.warm_times_ms)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        if !(close(s.mean, self.mean_ms) && close(s.std, self.std_ms) && close(s.ste, self.ste_ms)) {
            return Err(Error::InvalidArgument(format!(
                "stored statistics of `{}` do not match its warm times",
                self.model_id
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {} outside [0, 1]",
                self.accuracy
            )));
        }
        Ok(())
    }
}

/// Loads its model on the first prediction, not at construction.
#[derive(Debug)]
pub struct Interpreter {
    path: PathBuf,
    backend: Backend,
    model: Option<LiteModel>,
}

impl Interpreter {
    pub fn new(path: impl Into<PathBuf>, backend: Backend) -> Self {
        Self {
            path: path.into(),
            backend,
            model: None,
        }
    }

    pub fn is_loaded(&self) -> bool {
        self.model.is_some()
    }

    pub fn model(&mut self) -> Result<&LiteModel> {
        if self.model.is_none() {
            self.model = Some(import_lite(&self.path)?);
        }
        Ok(self.model.as_ref().expect("just loaded"))
    }

    pub fn predict(&mut self, input: &Tensor<f32>) -> Result<usize> {
        let backend = self.backend;
        let logits = self.model()?.logits_with(input, backend)?;
        Ok(argmax(&softmax(&logits)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_images: usize,
    pub backend: Backend,
    /// Defaults to the model file's stem.
    pub model_id: Option<String>,
    /// Defaults to [`FormatTag::infer`].
    pub format: Option<FormatTag>,
    /// Defaults to [`environment_note`].
    pub environment: Option<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            backend: Backend::Accelerated,
            model_id: None,
            format: None,
            environment: None,
        }
    }
}

/// Short description of the host the numbers came from.
pub fn environment_note() -> String {
    format!(
        "{}-{}, {} build, single-threaded",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "debug" } else { "optimized" }
    )
}

/// Benchmarks `model_path` on `n_images` PGM files from a folder-per-class
/// tree, taken round-robin across classes.
pub fn run_benchmark(
    model_path: impl AsRef<Path>,
    data_root: impl AsRef<Path>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let model_path = model_path.as_ref();
    let n = cfg.n_images;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 images, got {n}")));
    }
    let listing = list_folder(&data_root)?;
    if listing.files.len() < n {
        return Err(Error::dataset(
            data_root.as_ref(),
            format!("{} images requested but only {} available", n, listing.files.len()),
        ));
    }
    let files = listing.round_robin(n);

    let mut interpreter = Interpreter::new(model_path, cfg.backend);
    let mut times = Vec::with_capacity(n);
    let mut correct = 0usize;
    for (i, (path, label)) in files.iter().enumerate() {
        let start = Instant::now();
        let bytes = fs::read(path)?;
        let image = decode_pgm(&bytes, path)?;
        let pred = interpreter.predict(&image)?;
        times.push(start.elapsed().as_micros() as f64 / 1000.0);

        correct += (pred == *label) as usize;
        if i == 0 {
            let names = crate::nn::Classifier::class_names(interpreter.model()?);
            if names != listing.class_names.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "model classes {names:?} do not match data classes {:?}",
                    listing.class_names
                )));
            }
        }
    }

    let model = interpreter.model()?;
    let s = stats(&times[1..])?;
    let model_id = cfg.model_id.clone().unwrap_or_else(|| {
        model_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| model_path.display().to_string())
    });
    Ok(BenchReport {
        model_id,
        format: cfg.format.unwrap_or_else(|| FormatTag::infer(model)),
        backend: cfg.backend,
        n,
        t_first_ms: times[0],
        warm_times_ms: times[1..].to_vec(),
        mean_ms: s.mean,
        std_ms: s.std,
        ste_ms: s.ste,
        single_warm_sample: n == 2,
        accuracy: correct as f64 / n as f64,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        environment: cfg.environment.clone().unwrap_or_else(environment_note),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub format: FormatTag,
    pub backend: Backend,
    pub t_first_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub ste_ms: f64,
    pub accuracy: f64,
    /// `baseline.mean / row.mean`: above 1 when this row is faster.
    pub speedup: f64,
    /// `row.mean / baseline.mean`: below 1 when this row is faster.
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub model_id: String,
    /// Rows in input order; the first one is the baseline.
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side table of reports for one model, relative to the first report.
pub fn compare(reports: &[BenchReport]) -> Result<ComparisonTable> {
    let [baseline, rest @ ..] = reports else {
        return Err(Error::InvalidArgument("comparison needs at least 2 reports".into()));
    };
    if rest.is_empty() {
        return Err(Error::InvalidArgument("comparison needs at least 2 reports".into()));
    }
    if let Some(other) = rest.iter().find(|r| r.model_id != baseline.model_id) {
        return Err(Error::InvalidArgument(format!(
            "cannot compare reports for `{}` and `{}`",
            baseline.model_id, other.model_id
        )));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            format: r.format,
            backend: r.backend,
            t_first_ms: r.t_first_ms,
            mean_ms: r.mean_ms,
            std_ms: r.std_ms,
            ste_ms: r.ste_ms,
            accuracy: r.accuracy,
            speedup: baseline.mean_ms / r.mean_ms,
            mean_ratio: r.mean_ms / baseline.mean_ms,
        })
        .collect();
    Ok(ComparisonTable {
        model_id: baseline.model_id.clone(),
        rows,
    })
}
