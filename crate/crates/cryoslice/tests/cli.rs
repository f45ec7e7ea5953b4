use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cryoslice::cli::load_dataset;
use cryoslice::config::RunConfig;
use cryoslice::manifest::{file_sha256, Manifest};
use cryoslice::{mrc, tables};
use cryoslice_core::physics::{ctf_value, CtfParams, OpticsConfig};
use cryoslice_core::sim::{make_phantom, PhantomSpec, Scale};
use cryoslice_core::training::{TrainMode, TrainState};

fn cryoslice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryoslice")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cryoslice(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = cryoslice(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16^3 clean dataset with a tiny encoder, quick enough for tests.
fn small_config(mode: TrainMode) -> RunConfig {
    let mut c = RunConfig::preset('A', Scale::Desk).unwrap();
    c.dataset.n = 16;
    c.dataset.n_images = 120;
    c.dataset.train_fraction = 0.75;
    c.train.mode = mode;
    c.train.batch_size = 8;
    c.train.steps = 6;
    c.train.eval_interval = 3;
    c.train.encoder_filters = [2, 3, 4];
    c.train.encoder_mlp = vec![8];
    c
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, c.to_json()).unwrap();
    p
}

fn simulate(dir: &Path, c: &RunConfig) -> PathBuf {
    let cfg = write_config(dir, "run.json", c);
    let data = dir.join("data");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    data
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn simulate_writes_the_dataset_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(TrainMode::Learned);
    let data = simulate(tmp.path(), &c);
    let stack = mrc::read(&data.join("particles.mrcs")).unwrap();
    assert_eq!((stack.header.nx, stack.header.ny, stack.header.nz), (16, 16, 120));
    let meta = tables::read_metadata(&data.join("metadata.csv")).unwrap();
    assert_eq!(meta.len(), 120);
    assert!(meta.iter().all(|m| m.snr_db.is_none() && m.ctf.is_none() && m.sigma == 0.0));
    let (n, _, gt) = mrc::read_volume(&data.join("ground_truth.mrc")).unwrap();
    assert_eq!(n, 16);
    let phantom = make_phantom(&PhantomSpec::five_blob(16, 1.0)).unwrap();
    assert!(gt.iter().zip(phantom.data()).all(|(a, b)| *a == *b as f32 as f64));
    assert_eq!(RunConfig::load(&data.join("config.json")).unwrap(), c);
    let m: Manifest = serde_json::from_slice(&read(&data.join("manifest.json"))).unwrap();
    assert_eq!((m.command.as_str(), m.seed, m.config_sha256.as_deref()), ("simulate", Some(c.dataset.seed), Some(c.hash().as_str())));
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    for f in ["particles.mrcs", "metadata.csv", "ground_truth.mrc", "config.json"] {
        assert_eq!(m.outputs[f], file_sha256(&data.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn noisy_preset_records_its_snr() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("f");
    ok(&["simulate", "--preset", "tableF", "--out", s(&data)]);
    let meta = tables::read_metadata(&data.join("metadata.csv")).unwrap();
    assert_eq!(meta.len(), 2200);
    assert!(meta.iter().all(|m| m.snr_db == Some(-10.0) && m.ctf.is_none() && m.sigma > 0.0));
}

#[test]
fn simulate_is_byte_reproducible_and_guards_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &small_config(TrainMode::Learned));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["particles.mrcs", "metadata.csv", "ground_truth.mrc", "config.json", "manifest.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let err = fails_with(&["simulate", "--config", s(&cfg), "--out", s(&a)], 1);
    assert!(err.contains("--force"), "{err}");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a), "--force", "--seed", "9"]);
    assert_ne!(read(&a.join("particles.mrcs")), read(&b.join("particles.mrcs")));
}

#[test]
fn bad_configs_exit_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&small_config(TrainMode::Tomo).to_json()).unwrap();
    v["dataset"]["snr"] = 3.into();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let err = fails_with(&["simulate", "--config", s(&p), "--out", s(&tmp.path().join("o"))], 1);
    assert!(err.contains("unknown field `snr`"), "{err}");
    fails_with(&["simulate", "--preset", "tableZ", "--out", s(&tmp.path().join("o"))], 1);
    fails_with(&["simulate", "--out", s(&tmp.path().join("o"))], 1);
    fails_with(&["frobnicate"], 1);
}

#[test]
fn zero_steps_write_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(TrainMode::Learned);
    let data = simulate(tmp.path(), &c);
    let out = tmp.path().join("t");
    ok(&["train", "--data", s(&data), "--out", s(&out), "--steps", "0"]);
    c.train.steps = 0;
    let (stack, _) = load_dataset(&data, &c).unwrap();
    let init = TrainState::init(&stack, &c.train).unwrap();
    let (_, _, vol) = mrc::read_volume(&out.join("volume.mrc")).unwrap();
    assert!(vol.iter().zip(&init.volume).all(|(a, b)| *a == *b as f32 as f64));
    let (_, w) = cryoslice::weights::read_encoder(&out.join("encoder.json")).unwrap();
    assert_eq!(Some(w), init.encoder);
    let rows = tables::read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].step, 0);
    assert_eq!(tables::read_poses(&out.join("poses.csv")).unwrap().len(), 120);
}

#[test]
fn training_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), &small_config(TrainMode::Learned));
    for mode in ["learned", "rawad"] {
        let (a, b) = (tmp.path().join(format!("{mode}-a")), tmp.path().join(format!("{mode}-b")));
        ok(&["train", "--data", s(&data), "--out", s(&a), "--mode", mode]);
        ok(&["train", "--data", s(&data), "--out", s(&b), "--mode", mode]);
        let files: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        assert!(files.len() >= 6, "{files:?}");
        for f in files {
            assert_eq!(read(&a.join(&f)), read(&b.join(&f)), "{mode}: {f}");
        }
        let rows = tables::read_metrics(&a.join("metrics.csv")).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 3, 6]);
    }
    assert!(tmp.path().join("rawad-a/pose_table.json").exists());
}

#[test]
fn tomo_loss_trends_down_and_eval_reproduces_the_last_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(TrainMode::Tomo);
    c.dataset.n_images = 240;
    c.train.lr_volume = 2e-2;
    c.train.steps = 600;
    c.train.eval_interval = 50;
    c.train.batch_size = 16;
    let data = simulate(tmp.path(), &c);
    let out = tmp.path().join("t");
    ok(&["train", "--data", s(&data), "--out", s(&out)]);
    let rows = tables::read_metrics(&out.join("metrics.csv")).unwrap();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            if b.step - a.step <= 200 {
                assert!(b.loss <= 1.1 * a.loss, "loss rose from {} (step {}) to {} (step {})", a.loss, a.step, b.loss, b.step);
            }
        }
    }
    let last = rows.last().unwrap();
    assert_eq!(last.step, 600);
    assert!(last.loss < 1e-2 * rows[0].loss);

    let ev = tmp.path().join("e");
    let n_train = "180";
    ok(&[
        "eval",
        "--volume",
        s(&out.join("volume.mrc")),
        "--reference",
        s(&data.join("ground_truth.mrc")),
        "--poses",
        s(&out.join("poses.csv")),
        s(&data.join("metadata.csv")),
        "--from-index",
        n_train,
        "--out",
        s(&ev),
    ]);
    let report = tables::read_report(&ev.join("report.csv")).unwrap();
    assert!((report.fsc_resolution - last.fsc_resolution.unwrap()).abs() <= 1e-9, "{report:?} vs {last:?}");
    assert!((report.pose_mae_raw_deg.unwrap() - last.pose_mae_raw_deg).abs() <= 1e-9);
    assert!((report.pose_mae_aligned_deg.unwrap() - last.pose_mae_aligned_deg).abs() <= 1e-9);
}

#[test]
fn eval_of_identical_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), &small_config(TrainMode::Tomo));
    let gt = data.join("ground_truth.mrc");
    let meta = data.join("metadata.csv");
    let ev = tmp.path().join("e");
    ok(&["eval", "--volume", s(&gt), "--reference", s(&gt), "--poses", s(&meta), s(&meta), "--out", s(&ev)]);
    let r = tables::read_report(&ev.join("report.csv")).unwrap();
    assert_eq!((r.fsc_resolution, r.fsc_resolution_unaligned), (2.0, 2.0));
    assert_eq!((r.pose_mae_raw_deg, r.gauge_flip), (Some(0.0), Some(false)));
    assert!(r.pose_mae_aligned_deg.unwrap() < 1e-9);
    let fsc = std::fs::read_to_string(ev.join("fsc.csv")).unwrap();
    assert_eq!(fsc.lines().next().unwrap(), "shell_freq_cyc_per_px,resolution_A,fsc");
    assert_eq!(fsc.lines().count(), 1 + 9);
}

#[test]
fn mismatched_inputs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), &small_config(TrainMode::Tomo));
    let small = tmp.path().join("small.mrc");
    mrc::write_volume(&small, 8, 1.0, &[0.0; 512]).unwrap();
    let gt = data.join("ground_truth.mrc");
    let err = fails_with(&["eval", "--volume", s(&small), "--reference", s(&gt), "--out", s(&tmp.path().join("e"))], 2);
    assert!(err.contains("8^3") && err.contains("16^3"), "{err}");

    let meta = data.join("metadata.csv");
    let text = std::fs::read_to_string(&meta).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[4] = lines[4].replacen(",0,", ",zero,", 1);
    std::fs::write(&meta, lines.join("\n") + "\n").unwrap();
    let err = fails_with(&["train", "--data", s(&data), "--out", s(&tmp.path().join("t"))], 2);
    assert!(err.contains("line 5") && err.contains("`t1`") && err.contains("`zero`"), "{err}");

    lines[4] = text.lines().nth(4).unwrap().to_owned();
    lines.truncate(50);
    std::fs::write(&meta, lines.join("\n") + "\n").unwrap();
    let err = fails_with(&["train", "--data", s(&data), "--out", s(&tmp.path().join("t2"))], 2);
    assert!(err.contains("49 rows") && err.contains("120 images"), "{err}");
}

#[test]
fn divergent_training_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(TrainMode::Tomo);
    c.train.lr_volume = 1e300;
    let data = simulate(tmp.path(), &c);
    let out = tmp.path().join("t");
    let err = fails_with(&["train", "--data", s(&data), "--out", s(&out)], 3);
    assert!(err.contains("snapshot_volume.mrc"), "{err}");
    let (n, _, _) = mrc::read_volume(&out.join("snapshot_volume.mrc")).unwrap();
    assert_eq!(n, 16);
    assert!(!out.join("volume.mrc").exists());
}

fn project(vol: &Path, out: &Path, pose: &str, defocus: Option<&str>) -> Vec<f64> {
    let mut args = vec!["project", "--volume", s(vol), "--pose", pose, "--out", s(out)];
    if let Some(d) = defocus {
        args.extend(["--defocus", d]);
    }
    ok(&args);
    let m = mrc::read(out).unwrap();
    assert_eq!((m.header.nx, m.header.ny, m.header.nz), (32, 32, 1));
    m.data
}

fn phantom_file(dir: &Path) -> (PathBuf, Vec<f64>) {
    let v = make_phantom(&PhantomSpec::five_blob(32, 1.0)).unwrap();
    let p = dir.join("phantom.mrc");
    mrc::write_volume(&p, 32, 1.0, v.data()).unwrap();
    let (_, _, data) = mrc::read_volume(&p).unwrap();
    (p, data)
}

#[test]
fn identity_projection_is_the_z_sum() {
    let tmp = tempfile::tempdir().unwrap();
    let (vol, data) = phantom_file(tmp.path());
    let out = tmp.path().join("p.mrc");
    let img = project(&vol, &out, "1,0,0,0", None);
    let mut oracle = vec![0.0; 32 * 32];
    for z in 0..32 {
        for (o, v) in oracle.iter_mut().zip(&data[z * 1024..(z + 1) * 1024]) {
            *o += v;
        }
    }
    let num: f64 = img.iter().zip(&oracle).map(|(a, b)| (a - *b as f32 as f64).powi(2)).sum();
    let den: f64 = oracle.iter().map(|b| b * b).sum();
    assert!((num / den).sqrt() < 1e-8, "relative error {}", (num / den).sqrt());
    let first = read(&out);
    assert_eq!(read(&out), { project(&vol, &tmp.path().join("q.mrc"), "1,0,0,0", None); read(&tmp.path().join("q.mrc")) });
    let err = fails_with(&["project", "--volume", s(&vol), "--pose", "1,0,0,0", "--out", s(&out)], 1);
    assert!(err.contains("--force"));
    ok(&["project", "--volume", s(&vol), "--pose", "1,0,0,0", "--out", s(&out), "--force"]);
    assert_eq!(read(&out), first);
}

#[test]
fn non_unit_quaternions_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let (vol, _) = phantom_file(tmp.path());
    let out = tmp.path().join("p.mrc");
    let err = fails_with(&["project", "--volume", s(&vol), "--pose", "1,0,0,1e-2", "--out", s(&out)], 1);
    assert!(err.contains("norm"), "{err}");
    fails_with(&["project", "--volume", s(&vol), "--pose", "1,0,0", "--out", s(&out)], 1);
    assert!(!out.exists());
    ok(&["project", "--volume", s(&vol), "--pose", "1,0,0,1e-7", "--out", s(&out)]);
}

/// Defocus placing a CTF zero exactly on frequency radius `r` (grid units).
fn defocus_with_zero_at(r: usize, optics: &OpticsConfig) -> f64 {
    let k = r as f64 / (32.0 * optics.pixel_size);
    let f = |d: f64| ctf_value(optics, &CtfParams { d1_um: d, d2_um: d, alpha_rad: 0.0 }, k, 0.0);
    let (mut lo, mut hi) = (0.4, 1.2);
    let steps = 400;
    let mut bracket = None;
    for i in 0..steps {
        let (a, b) = (lo + (hi - lo) * i as f64 / steps as f64, lo + (hi - lo) * (i + 1) as f64 / steps as f64);
        if f(a).signum() != f(b).signum() {
            bracket = Some((a, b));
            break;
        }
    }
    (lo, hi) = bracket.expect("a zero crossing in [0.4, 1.2] um");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo).signum() == f(mid).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn defocused_projection_vanishes_on_ctf_zero_rings() {
    let tmp = tempfile::tempdir().unwrap();
    let (vol, _) = phantom_file(tmp.path());
    let optics = OpticsConfig::default();
    for r in [5usize, 10] {
        let d = defocus_with_zero_at(r, &optics);
        let img = project(&vol, &tmp.path().join(format!("ctf{r}.mrc")), "0.8,0.36,0,0.48", Some(&format!("{d},{d},0")));
        let spectrum = dft2(&img, 32);
        let max = spectrum.iter().cloned().fold(0.0, f64::max);
        let mut on_ring = 0;
        for ky in 0..32i64 {
            for kx in 0..32i64 {
                let (fx, fy) = (if kx > 16 { kx - 32 } else { kx }, if ky > 16 { ky - 32 } else { ky });
                if (fx * fx + fy * fy) as usize == r * r {
                    on_ring += 1;
                    let a = spectrum[(ky * 32 + kx) as usize];
                    assert!(a < 1e-6 * max, "r {r}: |F| = {a} at ({fx}, {fy}), max {max}");
                }
            }
        }
        assert!(on_ring >= 4);
        let near = spectrum[r - 1].max(spectrum[r + 1]);
        assert!(near > 1e-4 * max, "neighbouring frequencies keep signal");
    }
}

/// Magnitudes of the unshifted 2D DFT of an `n x n` image.
fn dft2(img: &[f64], n: usize) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; n * n];
    for ky in 0..n {
        for kx in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let ph = -tau * ((kx * x + ky * y) % n) as f64 / n as f64;
                    re += img[y * n + x] * ph.cos();
                    im += img[y * n + x] * ph.sin();
                }
            }
            out[ky * n + kx] = re.hypot(im);
        }
    }
    out
}
