//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails unexpectedly.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use common::{conv_oracle, grad_cases, gradient_errors, random_tensor, separable_oracle};
use detcam::data;
use detcam::gradcam::{cam_grid, grad_cam};
use detcam::harness::{self, RunManifest};
use detcam::layers::conv::{conv2d_forward, separable_conv2d_forward};
use detcam::layers::Padding;
use detcam::weights;
use detcam::zoo::{build_convnet, build_mini_xception, SeedSet, XceptionVariant};
use detcam::{DetRng, Tensor};

/// The ConvNet has no valid geometry below this input size.
const CONVNET_PDIM: &str = "80";

struct Line {
    id: &'static str,
    pass: bool,
    /// A FAIL that is understood and recorded; it does not fail the suite.
    known: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        id,
        pass,
        known: false,
        detail: detail.into(),
    }
}

fn detcam(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_detcam"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DET_")) {
        cmd.env_remove(k);
    }
    cmd.args(args).output().expect("spawn detcam")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).trim().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train(out: &Path, args: &[&str]) -> Result<(RunManifest, Duration), String> {
    let start = Instant::now();
    let mut all = vec!["train", "--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    let o = detcam(&all);
    if !o.status.success() {
        return Err(format!("train exited {:?}: {}", o.status.code(), stderr(&o)));
    }
    let text = std::fs::read_to_string(out.join(harness::MANIFEST_FILE)).map_err(|e| e.to_string())?;
    Ok((RunManifest::from_text(&text).map_err(|e| e.to_string())?, start.elapsed()))
}

fn best_val_acc(m: &RunManifest) -> f32 {
    m.epochs.iter().map(|r| r.val_acc).fold(0.0, f32::max)
}

fn compare_json(a: &Path, b: &Path) -> Result<serde_json::Value, String> {
    let o = detcam(&["compare", "--run-a", a.to_str().unwrap(), "--run-b", b.to_str().unwrap(), "--json"]);
    if !o.status.success() {
        return Err(stderr(&o));
    }
    serde_json::from_str(&stdout(&o)).map_err(|e| e.to_string())
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn pick(rng: &mut DetRng, lo: usize, hi: usize) -> usize {
    lo + rng.next_below((hi - lo + 1) as u64) as usize
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let seeds = SeedSet::default();
    let conv = build_convnet(180, &seeds).map(|g| g.count_trainable());
    let xcp = build_mini_xception(180, &seeds, XceptionVariant::CpuDet).map(|g| g.count_trainable());
    let t = start.elapsed();
    let pass = conv.as_ref().ok() == Some(&991_041) && xcp.as_ref().ok() == Some(&718_849) && t < Duration::from_secs(1);
    line("1 parameter counts", pass, format!("convnet {conv:?}, mini xception {xcp:?}, {t:.2?}"))
}

fn pdim_64_is_rejected(id: &'static str) -> Line {
    let dir = tempfile::tempdir().unwrap();
    let o = detcam(&[
        "train", "--model", "convnet", "--synth", "128", "--pdim", "64", "--epochs", "3", "--seed", "1001", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let msg = stderr(&o);
    let understood = o.status.code() == Some(2) && msg.contains("conv2d_4");
    Line {
        id,
        pass: o.status.success(),
        known: understood,
        detail: format!("exit {:?}: {msg}", o.status.code()),
    }
}

fn criterion_2(root: &Path) -> (Line, Option<PathBuf>) {
    let args = ["--model", "convnet", "--synth", "128", "--pdim", CONVNET_PDIM, "--epochs", "3", "--seed", "1001"];
    let (a, b) = (root.join("c2a"), root.join("c2b"));
    let start = Instant::now();
    let runs = train(&a, &args).and_then(|ra| Ok((ra, train(&b, &args)?)));
    let t = start.elapsed();
    let ((ma, _), (mb, _)) = match runs {
        Ok(r) => r,
        Err(e) => return (line("2 repeated runs bit-identical (pdim 80)", false, e), None),
    };
    let ea = std::fs::read(a.join(harness::EPOCHS_FILE)).unwrap_or_default();
    let eb = std::fs::read(b.join(harness::EPOCHS_FILE)).unwrap_or_default();
    let pass = ma.fingerprint == mb.fingerprint && !ea.is_empty() && ea == eb && t < Duration::from_secs(180);
    let detail = format!("fingerprints {} / {}, epoch files equal {}, {t:.1?}", &ma.fingerprint[..16], &mb.fingerprint[..16], ea == eb);
    (line("2 repeated runs bit-identical (pdim 80)", pass, detail), Some(a))
}

fn criterion_3(root: &Path, reference: Option<&Path>) -> Line {
    let id = "3 threads 1 vs 8 (pdim 80)";
    let Some(reference) = reference else {
        return line(id, false, "no reference run");
    };
    let args = ["--model", "convnet", "--synth", "128", "--pdim", CONVNET_PDIM, "--epochs", "3", "--seed", "1001", "--threads", "8"];
    match train(&root.join("c3"), &args) {
        Err(e) => line(id, false, e),
        Ok((m8, _)) => {
            let text = std::fs::read_to_string(reference.join(harness::MANIFEST_FILE)).unwrap();
            let m1 = RunManifest::from_text(&text).unwrap();
            line(id, m1.fingerprint == m8.fingerprint, format!("{} / {}", &m1.fingerprint[..16], &m8.fingerprint[..16]))
        }
    }
}

fn criterion_4() -> Line {
    let start = Instant::now();
    let (mut worst64, mut worst32) = (0f64, 0f64);
    let mut bad = Vec::new();
    for case in grad_cases() {
        let (e64, e32) = gradient_errors(&case);
        if !(e64 < 1e-6 && e32 < 1e-2) {
            bad.push(case.name);
        }
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
    }
    let t = start.elapsed();
    let pass = bad.is_empty() && t < Duration::from_secs(30);
    line("4 gradient checks", pass, format!("max f64 {worst64:.2e}, max f32 {worst32:.2e}, failing {bad:?}, {t:.1?}"))
}

fn criterion_5() -> Line {
    let mut rng = DetRng::new(5, "acceptance/conv");
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = pick(&mut rng, 1, 4);
        let (h, w) = (pick(&mut rng, k, 9), pick(&mut rng, k, 9));
        let (n, ci, co) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 4), pick(&mut rng, 1, 5));
        let stride = pick(&mut rng, 1, 3);
        let same = rng.next_f32() < 0.5;
        let x = random_tensor(&mut rng, &[n, h, w, ci], -2.0, 2.0);
        let kern = random_tensor(&mut rng, &[k, k, ci, co], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[co], -1.0, 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let got = conv2d_forward(&x, &kern, Some(&b), stride, padding).unwrap();
        let (want, dims) = conv_oracle(x.data(), [n, h, w, ci], kern.data(), [k, k, ci, co], Some(b.data()), stride, same);
        if got.dims() != &dims[..] || bits(got.data()) != bits(&want) {
            mismatches += 1;
        }
    }
    let mut rng = DetRng::new(5, "acceptance/sepconv");
    for _ in 0..100 {
        let k = pick(&mut rng, 1, 3) * 2 - 1;
        let (h, w) = (pick(&mut rng, k, 8), pick(&mut rng, k, 8));
        let (n, ci, co) = (pick(&mut rng, 1, 3), pick(&mut rng, 1, 4), pick(&mut rng, 1, 5));
        let same = rng.next_f32() < 0.5;
        let x = random_tensor(&mut rng, &[n, h, w, ci], -2.0, 2.0);
        let dw = random_tensor(&mut rng, &[k, k, ci, 1], -1.0, 1.0);
        let pw = random_tensor(&mut rng, &[1, 1, ci, co], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[co], -1.0, 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let (got, _) = separable_conv2d_forward(&x, &dw, &pw, Some(&b), padding).unwrap();
        let (want, dims) = separable_oracle(x.data(), [n, h, w, ci], dw.data(), k, k, pw.data(), co, Some(b.data()), same);
        if got.dims() != &dims[..] || bits(got.data()) != bits(&want) {
            mismatches += 1;
        }
    }
    line("5 conv/sepconv oracles", mismatches == 0, format!("{mismatches} of 200 instances differ"))
}

fn criterion_6() -> Line {
    let mut notes = Vec::new();

    // zero gradient: a ConvNet whose output layer is all zeros
    let mut g = build_convnet(80, &SeedSet::default()).unwrap();
    let head = g.registry().last().unwrap().node_id.clone();
    for e in g.registry().into_iter().filter(|e| e.node_id == head) {
        let t = g.tensor_mut(&e);
        *t = Tensor::zeros_like(t);
    }
    let img = random_tensor(&mut DetRng::new(6, "acceptance/img"), &[80, 80, 3], 0.0, 255.0);
    let zero_ok = match grad_cam(&g, &img, None, 1) {
        Ok(cam) => cam.grid.data().iter().all(|&v| v == 0.0),
        Err(e) => {
            notes.push(e.to_string());
            false
        }
    };

    let mut rng = DetRng::new(6, "acceptance/scale");
    let mut worst = 0f64;
    for _ in 0..20 {
        let acts = random_tensor(&mut rng, &[7, 5, 6], 0.0, 3.0);
        let grads = random_tensor(&mut rng, &[7, 5, 6], -1.0, 1.0);
        let base = cam_grid(&acts, &grads).unwrap();
        for c in [1e-3f32, 0.5, 3.0, 1e3] {
            worst = worst.max(base.max_abs_diff(&cam_grid(&acts.map(|v| v * c), &grads).unwrap()).unwrap());
        }
    }

    // one channel with constant gradient g: alpha = g, M = relu(g A) / max
    let acts = random_tensor(&mut rng, &[4, 6, 1], -1.0, 2.0);
    let grads = Tensor::new([4, 6, 1], vec![0.25f32; 24]).unwrap();
    let got = cam_grid(&acts, &grads).unwrap();
    let mut alpha = 0f32;
    for _ in 0..24 {
        alpha += 0.25;
    }
    let alpha = alpha / 24.0;
    let m: Vec<f32> = acts.data().iter().map(|&a| (alpha * a).max(0.0)).collect();
    let max = m.iter().fold(0f32, |x, &y| x.max(y));
    let want: Vec<f32> = m.iter().map(|v| v / max).collect();
    let toy_ok = bits(got.data()) == bits(&want);

    let pass = zero_ok && worst <= 1e-6 && toy_ok;
    notes.push(format!("zero grid {zero_ok}, rescale max diff {worst:.1e}, toy bit-exact {toy_ok}"));
    line("6 grad-cam properties", pass, notes.join("; "))
}

fn criterion_7(root: &Path) -> (Line, Line, Option<(PathBuf, RunManifest)>) {
    let conv_dir = root.join("c7-convnet");
    let args = ["--model", "convnet", "--synth", "400", "--pdim", CONVNET_PDIM, "--epochs", "10", "--seed", "1001"];
    let (conv, keep) = match train(&conv_dir, &args) {
        Err(e) => (line("7 convnet learns synth blobs", false, e), None),
        Ok((m, t)) => {
            let best = best_val_acc(&m);
            let pass = best >= 0.95 && t < Duration::from_secs(600);
            let detail = format!("best val acc {best:.4}, final {:.4}, {t:.1?}", m.epochs.last().map_or(0.0, |r| r.val_acc));
            (line("7 convnet learns synth blobs", pass, detail), Some((conv_dir, m)))
        }
    };
    let args = ["--model", "mini-xception", "--synth", "400", "--pdim", "64", "--epochs", "10", "--batch", "8", "--seed", "1001"];
    let xcp = match train(&root.join("c7-xception"), &args) {
        Err(e) => line("7 mini xception learns synth blobs (batch 8)", false, e),
        Ok((m, t)) => {
            let best = best_val_acc(&m);
            let pass = best >= 0.90 && t < Duration::from_secs(600);
            let detail = format!("best val acc {best:.4}, final {:.4}, {t:.1?}", m.epochs.last().map_or(0.0, |r| r.val_acc));
            line("7 mini xception learns synth blobs (batch 8)", pass, detail)
        }
    };
    (conv, xcp, keep)
}

fn criterion_8(root: &Path, run: Option<&(PathBuf, RunManifest)>) -> Line {
    let id = "8 comparison semantics";
    let Some((a, ma)) = run else {
        return line(id, false, "no trained run");
    };
    let same = match compare_json(a, a) {
        Ok(v) => v["verdict"] == "bit-identical",
        Err(e) => return line(id, false, e),
    };
    // same data and shuffling, different initialization and dropout streams
    let args = [
        "--model", "convnet", "--synth", "400", "--pdim", CONVNET_PDIM, "--epochs", "10", "--seed", "1001", "--kernel-seed", "11",
        "--dropout-seed", "7002",
    ];
    let b = root.join("c8-other-seed");
    if let Err(e) = train(&b, &args) {
        return line(id, false, e);
    }
    let v = match compare_json(a, &b) {
        Ok(v) => v,
        Err(e) => return line(id, false, e),
    };
    let delta = v["accuracy_delta"].as_f64().unwrap_or(f64::NAN);
    let diff = v["max_abs_diff"].as_f64().unwrap_or(0.0);
    let pass = same && v["verdict"] == "diverged" && delta.abs() <= 0.05 && diff >= 1e-2;
    let detail = format!(
        "self bit-identical {same}, other {} with val acc {:.4} vs {:.4}, max weight diff {diff:.3}",
        v["verdict"],
        ma.epochs.last().map_or(0.0, |r| r.val_acc),
        v["val_acc_b"].as_f64().unwrap_or(f64::NAN)
    );
    line(id, pass, detail)
}

fn criterion_9(root: &Path, run: Option<&Path>) -> Line {
    let id = "9 crop then rank-shift report";
    let Some(run) = run else {
        return line(id, false, "no trained run");
    };
    let val = data::synth_blobs_split(2, 80, 1001, "val").unwrap();
    let original = root.join("c9-original.ppm");
    let cropped = root.join("c9-cropped.ppm");
    data::write_ppm(&original, &val.image(0).unwrap()).unwrap();
    let o = detcam(&["perturb", "--image", original.to_str().unwrap(), "--crop", "0,0,40,80", "--out", cropped.to_str().unwrap()]);
    if !o.status.success() {
        return line(id, false, stderr(&o));
    }
    // the remaining columns are resized back to the original size
    let changed = match (data::read_ppm(&original), data::read_ppm(&cropped)) {
        (Ok(a), Ok(b)) => a.dims() == b.dims() && a != b,
        _ => false,
    };
    let o = detcam(&[
        "predict", "--run", run.to_str().unwrap(), "--image", original.to_str().unwrap(), "--against", cropped.to_str().unwrap(),
    ]);
    let out = stdout(&o);
    let rows = out.lines().filter(|l| l.contains(" -> ")).count();
    let pass = o.status.success() && out.starts_with("Class") && rows == 2 && changed;
    line(id, pass, format!("same size, pixels changed {changed}, report:\n{}", out.trim_end()))
}

fn criterion_10(run: Option<&Path>) -> Line {
    let id = "10 save/load/save and checksum";
    let Some(run) = run else {
        return line(id, false, "no trained run");
    };
    let path = run.join(harness::WEIGHTS_FILE);
    let first = std::fs::read(&path).unwrap();
    let mut g = build_convnet(80, &SeedSet::default()).unwrap();
    if let Err(e) = weights::load(&mut g, &path) {
        return line(id, false, e.to_string());
    }
    let again = weights::serialize(&g);
    let mut corrupt = first.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    let rejected = weights::decode(&corrupt).is_err();
    let pass = first == again && rejected;
    line(id, pass, format!("{} bytes, re-save identical {}, corrupted rejected {rejected}", first.len(), first == again))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let mut lines = vec![criterion_1()];
    let (c2, reference) = criterion_2(root);
    lines.push(c2);
    lines.push(pdim_64_is_rejected("2 as written: convnet at pdim 64"));
    lines.push(criterion_3(root, reference.as_deref()));
    lines.push(pdim_64_is_rejected("3 as written: convnet at pdim 64"));
    lines.push(criterion_4());
    lines.push(criterion_5());
    lines.push(criterion_6());
    let (c7a, c7b, trained) = criterion_7(root);
    lines.push(c7a);
    lines.push(c7b);
    lines.push(criterion_8(root, trained.as_ref()));
    lines.push(criterion_9(root, reference.as_deref()));
    lines.push(criterion_10(reference.as_deref()));

    let mut unexpected = 0;
    for l in &lines {
        let status = match (l.pass, l.known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("{status:<13} criterion {}: {}", l.id, l.detail);
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
