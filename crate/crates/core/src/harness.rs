//! Run manifests, run directories, fingerprints and run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::gradcam::CamMap;
use crate::graph::ModelGraph;
use crate::layers::ForwardCtx;
use crate::tensor::{bilinear_resize, Tensor};
use crate::train::{EpochRecord, OptimizerState, TrainConfig};
use crate::weights;
use crate::zoo::{ModelKind, SeedSet};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const WEIGHTS_FILE: &str = "weights.dcw";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EPOCHS_FILE: &str = "epochs.ndtxt";
pub const OPTIMIZER_FILE: &str = "optimizer.dcw";
pub const ARCHITECTURE_FILE: &str = "architecture.txt";
pub const PLOT_FILE: &str = "metrics.ppm";

/// Default threshold for "numerically-close".
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Environment variables recorded verbatim when set, besides every `DET_*`.
pub const CAPTURED_VARS: [&str; 3] = ["TF_DETERMINISTIC_OPS", "TF_CUDNN_DETERMINISTIC", "PYTHONHASHSEED"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub hostname: String,
    pub cpu_model: String,
    pub threads: usize,
    pub available_parallelism: usize,
    pub variables: BTreeMap<String, String>,
}

impl Environment {
    pub fn capture(threads: usize) -> Self {
        let hostname = fs::read_to_string("/etc/hostname")
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".into());
        let cpu_model = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let variables = std::env::vars()
            .filter(|(k, _)| k.starts_with("DET_") || CAPTURED_VARS.contains(&k.as_str()))
            .collect();
        Environment {
            hostname,
            cpu_model,
            threads,
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            variables,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// Directory path, or `synth:<n>` for the synthetic set.
    pub source: String,
    pub train_items: usize,
    pub val_items: usize,
    pub train_digest: String,
    pub val_digest: String,
    pub balanced: bool,
    pub class_names: [String; 2],
}

impl DatasetInfo {
    pub fn new(source: impl Into<String>, train: &Dataset, val: &Dataset) -> Self {
        DatasetInfo {
            source: source.into(),
            train_items: train.len(),
            val_items: val.len(),
            train_digest: train.digest.clone(),
            val_digest: val.digest.clone(),
            balanced: train.balanced() && val.balanced(),
            class_names: train.class_names.clone(),
        }
    }
}

/// Complete record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub model: ModelKind,
    pub pdim: usize,
    pub seeds: SeedSet,
    pub train_config: TrainConfig,
    pub dataset: DatasetInfo,
    pub environment: Environment,
    pub trainable_params: usize,
    pub non_trainable_params: usize,
    pub epochs: Vec<EpochRecord>,
    pub fingerprint: String,
    pub wall_time_s: f64,
}

impl RunManifest {
    /// Pretty JSON with sorted keys.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }
}

/// Hex SHA-256 of the canonical weight stream (trainables, then buffers).
pub fn fingerprint(g: &ModelGraph) -> String {
    weights::fingerprint(g)
}

/// A finished run: manifest plus the model with its trained weights.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub id: String,
    pub manifest: RunManifest,
    pub graph: ModelGraph,
}

pub fn epochs_text(records: &[EpochRecord]) -> String {
    records.iter().map(|r| r.metrics_line() + "\n").collect()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Write every run artefact into `dir`, creating it if needed.
pub fn write_run(dir: &Path, g: &ModelGraph, manifest: &RunManifest, optimizer: Option<&OptimizerState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, WEIGHTS_FILE, &weights::serialize(g))?;
    write(dir, ARCHITECTURE_FILE, g.architecture_manifest().as_bytes())?;
    write(dir, EPOCHS_FILE, epochs_text(&manifest.epochs).as_bytes())?;
    if let Some(opt) = optimizer {
        write(dir, OPTIMIZER_FILE, &opt.to_bytes())?;
    }
    write(dir, PLOT_FILE, &data::encode_ppm(&metrics_plot(&manifest.epochs)?)?)?;
    // manifest last: its presence marks a complete run
    write(dir, MANIFEST_FILE, manifest.to_text().as_bytes())
}

/// Read a run directory and rebuild its model with the stored weights.
pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = RunManifest::from_text(&text).map_err(|e| e.in_file(&mpath))?;
    let mut graph = manifest.model.build(manifest.pdim, &manifest.seeds)?;
    weights::load(&mut graph, &dir.join(WEIGHTS_FILE))?;
    Ok(RunArtifacts {
        id: dir.display().to_string(),
        manifest,
        graph,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "bit-identical")]
    BitIdentical,
    #[serde(rename = "numerically-close")]
    NumericallyClose,
    #[serde(rename = "diverged")]
    Diverged,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::BitIdentical => "bit-identical",
            Verdict::NumericallyClose => "numerically-close",
            Verdict::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub id: String,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightExcerpt {
    pub label: String,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub class: String,
    pub prob_a: f32,
    pub prob_b: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamSimilarity {
    pub iou: f64,
    pub com_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub verdict: Verdict,
    pub tolerance: f64,
    pub fingerprint_a: String,
    pub fingerprint_b: String,
    pub max_abs_diff: f64,
    pub tensors: Vec<TensorDiff>,
    pub val_acc_a: Option<f32>,
    pub val_acc_b: Option<f32>,
    pub accuracy_delta: Option<f32>,
    pub excerpts: Vec<WeightExcerpt>,
    pub predictions: Option<Vec<PredictionRow>>,
    pub cam: Option<CamSimilarity>,
}

fn same_architecture(a: &ModelGraph, b: &ModelGraph) -> Result<()> {
    let ra = a.registry();
    let rb = b.registry();
    let key = |e: &crate::graph::ParamEntry| (e.key(), e.shape.clone(), e.trainable);
    if a.input_dims() != b.input_dims() || ra.len() != rb.len() || ra.iter().map(key).ne(rb.iter().map(key)) {
        return Err(Error::ArchitectureMismatch(format!(
            "`{}` {:?} and `{}` {:?} differ in their parameters",
            a.name(),
            a.input_dims(),
            b.name(),
            b.input_dims()
        )));
    }
    Ok(())
}

/// Compare the weights of two models with identical registries.
pub fn compare_models(a: &ModelGraph, b: &ModelGraph, tolerance: f64) -> Result<(Verdict, Vec<TensorDiff>, Vec<WeightExcerpt>)> {
    same_architecture(a, b)?;
    let registry = a.registry();
    let mut diffs = Vec::with_capacity(registry.len());
    for e in &registry {
        diffs.push(TensorDiff {
            id: e.key(),
            max_abs_diff: a.tensor(e).max_abs_diff(b.tensor(e))?,
        });
    }
    let verdict = if fingerprint(a) == fingerprint(b) {
        Verdict::BitIdentical
    } else if diffs.iter().all(|d| d.max_abs_diff < tolerance) {
        Verdict::NumericallyClose
    } else {
        Verdict::Diverged
    };
    // first conv kernel [:, :, 0, 0], and 32 values of the last-but-one kernel
    let kernels: Vec<_> = registry
        .iter()
        .filter(|e| e.trainable && e.name.ends_with("kernel"))
        .collect();
    let mut excerpts = Vec::new();
    if let Some(first) = kernels.iter().find(|e| e.shape.rank() == 4) {
        let d = first.shape.dims();
        let take = |t: &Tensor| -> Vec<f32> {
            let mut v = Vec::new();
            for i in 0..d[0].min(3) {
                for j in 0..d[1].min(3) {
                    v.push(t.at(&[i, j, 0, 0]));
                }
            }
            v
        };
        excerpts.push(WeightExcerpt {
            label: format!("{}[:3,:3,0,0]", first.key()),
            a: take(a.tensor(first)),
            b: take(b.tensor(first)),
        });
    }
    if kernels.len() >= 2 {
        let e = kernels[kernels.len() - 2];
        let n = e.shape.numel().min(32);
        excerpts.push(WeightExcerpt {
            label: format!("{}[:{n}]", e.key()),
            a: a.tensor(e).data()[..n].to_vec(),
            b: b.tensor(e).data()[..n].to_vec(),
        });
    }
    Ok((verdict, diffs, excerpts))
}

/// Full comparison of two runs, optionally on one `[H, W, 3]` image.
pub fn compare_runs(a: &RunArtifacts, b: &RunArtifacts, image: Option<&Tensor>, tolerance: f64) -> Result<CompareReport> {
    if a.manifest.model != b.manifest.model || a.manifest.pdim != b.manifest.pdim {
        return Err(Error::ArchitectureMismatch(format!(
            "{} at pdim {} vs {} at pdim {}",
            a.manifest.model, a.manifest.pdim, b.manifest.model, b.manifest.pdim
        )));
    }
    let (verdict, tensors, excerpts) = compare_models(&a.graph, &b.graph, tolerance)?;
    let val_acc_a = a.manifest.epochs.last().map(|r| r.val_acc);
    let val_acc_b = b.manifest.epochs.last().map(|r| r.val_acc);
    let (predictions, cam) = match image {
        None => (None, None),
        Some(img) => {
            let names = &a.manifest.dataset.class_names;
            let ta = prediction_table(&a.graph, img, names, 2)?;
            let tb = prediction_table(&b.graph, img, names, 2)?;
            let rows = ta
                .iter()
                .map(|(class, pa)| {
                    let pb = tb.iter().find(|(c, _)| c == class).map_or(f32::NAN, |(_, p)| *p);
                    PredictionRow {
                        class: class.clone(),
                        prob_a: *pa,
                        prob_b: pb,
                    }
                })
                .collect();
            let img = fit_to_model(&a.graph, img)?;
            let ca = crate::gradcam::grad_cam(&a.graph, &img, None, 1)?;
            let cb = crate::gradcam::grad_cam(&b.graph, &img, None, 1)?;
            (Some(rows), Some(cam_similarity(&ca, &cb)?))
        }
    };
    Ok(CompareReport {
        run_a: a.id.clone(),
        run_b: b.id.clone(),
        verdict,
        tolerance,
        fingerprint_a: a.manifest.fingerprint.clone(),
        fingerprint_b: b.manifest.fingerprint.clone(),
        max_abs_diff: tensors.iter().map(|d| d.max_abs_diff).fold(0.0, f64::max),
        tensors,
        val_acc_a,
        val_acc_b,
        accuracy_delta: val_acc_a.zip(val_acc_b).map(|(x, y)| y - x),
        excerpts,
        predictions,
        cam,
    })
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    /// Plain-text report; prediction rows use `Class / A / B` columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run A        {}", self.run_a);
        let _ = writeln!(s, "run B        {}", self.run_b);
        let _ = writeln!(s, "verdict      {}", self.verdict.as_str());
        let _ = writeln!(s, "tolerance    {:e}", self.tolerance);
        let _ = writeln!(s, "max |diff|   {:e}", self.max_abs_diff);
        let acc = |v: Option<f32>| v.map_or("-".to_string(), |a| format!("{a:.8}"));
        let _ = writeln!(s, "val acc A    {}", acc(self.val_acc_a));
        let _ = writeln!(s, "val acc B    {}", acc(self.val_acc_b));
        s.push('\n');
        let width = self.tensors.iter().map(|d| d.id.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(s, "{:<width$}  max |diff|", "tensor");
        for d in &self.tensors {
            let _ = writeln!(s, "{:<width$}  {:e}", d.id, d.max_abs_diff);
        }
        for e in &self.excerpts {
            let _ = writeln!(s, "\n{}", e.label);
            let fmt = |v: &[f32]| v.iter().map(|x| format!("{x:.8}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "  A: {}", fmt(&e.a));
            let _ = writeln!(s, "  B: {}", fmt(&e.b));
        }
        if let Some(rows) = &self.predictions {
            let _ = writeln!(s, "\n{:<16}{:<14}{:<14}", "Class", "A", "B");
            for r in rows {
                let _ = writeln!(s, "{:<16}{:<14.8}{:<14.8}", r.class, r.prob_a, r.prob_b);
            }
        }
        if let Some(c) = &self.cam {
            let _ = writeln!(s, "\ncam IoU      {:.6}", c.iou);
            let _ = writeln!(s, "cam shift    {:.6}", c.com_shift);
        }
        s
    }
}

/// Resize an `[H, W, 3]` image to the model's input size if needed.
pub fn fit_to_model(g: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    let want = g.input_dims();
    if image.dims() == want {
        return Ok(image.clone());
    }
    match (image.dims(), want) {
        ([_, _, c], [h, w, wc]) if c == wc => bilinear_resize(image, *h, *w),
        _ => Err(Error::InvalidArgument(format!(
            "image {} does not fit model input {:?}",
            image.shape(),
            want
        ))),
    }
}

/// Class probabilities of one `[H, W, 3]` image, highest first, ties by
/// class index, at most `k` rows.
pub fn prediction_table(g: &ModelGraph, image: &Tensor, class_names: &[String; 2], k: usize) -> Result<Vec<(String, f32)>> {
    let image = fit_to_model(g, image)?;
    let mut dims = vec![1];
    dims.extend_from_slice(image.dims());
    let (pred, _) = g.forward(&image.reshape(dims)?, &ForwardCtx::infer())?;
    let p1 = pred.data()[0];
    let mut rows = [(0usize, 1.0 - p1), (1, p1)];
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows
        .iter()
        .take(k)
        .map(|&(i, p)| (class_names[i].clone(), p))
        .collect())
}

pub fn format_prediction_table(rows: &[(String, f32)]) -> String {
    rows.iter().map(|(c, p)| format!("{c:<16}{p:.8}\n")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankShift {
    pub class: String,
    pub rank_before: usize,
    pub rank_after: usize,
    pub prob_before: f32,
    pub prob_after: f32,
}

/// Rank (1-based) and probability of every class before and after.
pub fn rank_shifts(before: &[(String, f32)], after: &[(String, f32)]) -> Vec<RankShift> {
    before
        .iter()
        .enumerate()
        .filter_map(|(i, (class, pb))| {
            let j = after.iter().position(|(c, _)| c == class)?;
            Some(RankShift {
                class: class.clone(),
                rank_before: i + 1,
                rank_after: j + 1,
                prob_before: *pb,
                prob_after: after[j].1,
            })
        })
        .collect()
}

pub fn format_rank_shifts(shifts: &[RankShift]) -> String {
    let mut s = format!("{:<16}{:<14}{:<14}{}\n", "Class", "original", "perturbed", "rank");
    for r in shifts {
        let _ = writeln!(
            s,
            "{:<16}{:<14.8}{:<14.8}{} -> {}",
            r.class, r.prob_before, r.prob_after, r.rank_before, r.rank_after
        );
    }
    s
}

fn center_of_mass(grid: &[f32], h: usize, w: usize) -> (f64, f64) {
    let mut total = 0.0f64;
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for i in 0..h {
        for j in 0..w {
            let v = grid[i * w + j] as f64;
            total += v;
            sy += v * i as f64;
            sx += v * j as f64;
        }
    }
    if total > 0.0 {
        (sy / total, sx / total)
    } else {
        ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    }
}

/// IoU of the `>= 0.5` masks (1 when both are empty) and the distance in
/// cells between intensity-weighted centres of mass. A smaller grid is
/// resampled to the larger one first.
pub fn cam_similarity(a: &CamMap, b: &CamMap) -> Result<CamSimilarity> {
    let (ha, wa) = a.dims();
    let (hb, wb) = b.dims();
    let (h, w) = if ha * wa >= hb * wb { (ha, wa) } else { (hb, wb) };
    let fit = |c: &CamMap| -> Result<Vec<f32>> {
        let (ch, cw) = c.dims();
        if (ch, cw) == (h, w) {
            return Ok(c.grid.data().to_vec());
        }
        Ok(bilinear_resize(&c.grid.clone().reshape([ch, cw, 1])?, h, w)?.into_data())
    };
    let (ga, gb) = (fit(a)?, fit(b)?);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in ga.iter().zip(&gb) {
        let (p, q) = (x >= 0.5, y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let (ay, ax) = center_of_mass(&ga, h, w);
    let (by, bx) = center_of_mass(&gb, h, w);
    Ok(CamSimilarity {
        iou,
        com_shift: ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt(),
    })
}

/// Line plot of accuracies and losses per epoch as an RGB image.
///
/// Accuracies use the full height as `[0, 1]`; losses are scaled by the
/// largest loss. Colours: train accuracy blue, validation accuracy green,
/// train loss red, validation loss orange.
pub fn metrics_plot(records: &[EpochRecord]) -> Result<Tensor> {
    const W: usize = 320;
    const H: usize = 200;
    const M: usize = 12;
    let mut img = vec![255.0f32; W * H * 3];
    let mut put = |x: usize, y: usize, c: [f32; 3]| {
        if x < W && y < H {
            img[(y * W + x) * 3..(y * W + x) * 3 + 3].copy_from_slice(&c);
        }
    };
    for x in M..W - M {
        put(x, H - M, [0.0; 3]);
    }
    for y in M..=H - M {
        put(M, y, [0.0; 3]);
    }
    let max_loss = records
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f32, f32::max)
        .max(f32::MIN_POSITIVE);
    let series: [(Box<dyn Fn(&EpochRecord) -> f32>, [f32; 3]); 4] = [
        (Box::new(|r| r.train_acc), [0.0, 0.0, 255.0]),
        (Box::new(|r| r.val_acc), [0.0, 160.0, 0.0]),
        (Box::new(move |r| r.train_loss / max_loss), [220.0, 0.0, 0.0]),
        (Box::new(move |r| r.val_loss / max_loss), [255.0, 140.0, 0.0]),
    ];
    let span_x = (W - 2 * M) as f64;
    let span_y = (H - 2 * M) as f64;
    let to_px = |i: usize, v: f32| -> (f64, f64) {
        let x = if records.len() > 1 {
            M as f64 + span_x * i as f64 / (records.len() - 1) as f64
        } else {
            M as f64 + span_x / 2.0
        };
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 1.0 };
        (x, (H - M) as f64 - span_y * v as f64)
    };
    for (f, color) in &series {
        let pts: Vec<(f64, f64)> = records.iter().enumerate().map(|(i, r)| to_px(i, f(r))).collect();
        for (i, &p) in pts.iter().enumerate() {
            let q = pts.get(i + 1).copied().unwrap_or(p);
            let steps = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = (p.0 + (q.0 - p.0) * t).round() as usize;
                let y = (p.1 + (q.1 - p.1) * t).round() as usize;
                put(x, y, *color);
            }
        }
    }
    Tensor::new([H, W, 3], img)
}

/// Paths of the files a run directory holds.
pub fn run_files(dir: &Path) -> Vec<PathBuf> {
    [WEIGHTS_FILE, MANIFEST_FILE, EPOCHS_FILE, OPTIMIZER_FILE, ARCHITECTURE_FILE, PLOT_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}
