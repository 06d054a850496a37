use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use faconformer::data_io::read_container;
use sha2::{Digest, Sha256};

const SMOKE_TOML: &str = "\
[model]
n_bands = 2
eeg_channels = 4
emg_channels = 2
time_points = 256
kernel_sizes = [3, 5, 7, 9]
fuse_filters = 8
icscm_kernel = 5
se_reduction_ratio = 4
attn_heads = 2
attn_dim = 4
emg_filters = 4

[train]
learning_rate = 1e-3
epochs = 2
batch_size = 8
folds = 3

[bank]
start_hz = 8.0
width_hz = 6.0
";

fn faconf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faconf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn faconf")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = faconf(args, dir);
    assert!(
        out.status.success(),
        "faconf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir holding a smoke config and a 30-trial 4-channel dataset.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("smoke.toml"), SMOKE_TOML).unwrap();
    ok(
        &[
            "synth",
            "--trials",
            "30",
            "--eeg-channels",
            "4",
            "--time-points",
            "256",
            "-o",
            "toy.fact",
        ],
        tmp.path(),
    );
    tmp
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn synth_is_readable_and_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let line = ok(
        &[
            "synth",
            "--trials",
            "300",
            "--classes",
            "3",
            "--seed",
            "7",
            "-o",
            "a.fact",
        ],
        dir,
    );
    assert!(
        line.contains("trials=300") && line.contains("counts=[100, 100, 100]"),
        "{line}"
    );
    ok(
        &[
            "synth",
            "--trials",
            "300",
            "--classes",
            "3",
            "--seed",
            "7",
            "-o",
            "b.fact",
        ],
        dir,
    );
    ok(
        &[
            "synth",
            "--trials",
            "300",
            "--classes",
            "3",
            "--seed",
            "8",
            "-o",
            "c.fact",
        ],
        dir,
    );

    let set = read_container(&dir.join("a.fact")).unwrap();
    assert_eq!(
        (
            set.len(),
            set.n_classes(),
            set.eeg_channels,
            set.time_points
        ),
        (300, 3, 8, 500)
    );
    assert_eq!(sha(&dir.join("a.fact")), sha(&dir.join("b.fact")));
    assert_ne!(sha(&dir.join("a.fact")), sha(&dir.join("c.fact")));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        &["synth", "--classes", "0", "-o", "x.fact"][..],
        &["synth", "--trials", "many", "-o", "x.fact"],
        &["train"],
        &["filter-probe", "--step", "0"],
    ] {
        let out = faconf(args, dir);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(!dir.join("x.fact").exists());
    let bogus = faconf(&["filter-probe", "--set", "model.bogus=1"], dir);
    assert_eq!(bogus.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bogus.stderr).contains("bogus"));
}

#[test]
fn train_writes_artifacts_and_summary() {
    let tmp = workspace();
    let dir = tmp.path();
    let line = ok(
        &["train", "toy.fact", "--config", "smoke.toml", "-o", "run"],
        dir,
    );
    let line = line.trim();
    let (acc, kappa) = line
        .strip_prefix("mean_acc=")
        .and_then(|s| s.split_once(" mean_kappa="))
        .unwrap_or_else(|| panic!("summary line {line:?}"));
    assert!((0.0..=1.0).contains(&acc.parse::<f64>().unwrap()));
    assert!(kappa.parse::<f64>().unwrap().is_finite());

    let run = dir.join("run");
    assert_eq!(
        fs::read_to_string(run.join("summary.txt")).unwrap().trim(),
        line
    );
    for k in 0..3 {
        assert!(run.join(format!("fold{k}.ckpt")).exists());
        let hist = fs::read_to_string(run.join(format!("fold{k}_history.csv"))).unwrap();
        assert_eq!(hist.lines().count(), 3, "{hist}");
        assert!(hist.starts_with("epoch,train_loss,val_acc\n"));
    }
    assert_eq!(
        fs::read_to_string(run.join("folds.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let missing = faconf(&["train", "nope.fact", "--config", "smoke.toml"], dir);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.fact"));
}

#[test]
fn zero_learning_rate_still_runs() {
    let tmp = workspace();
    let line = ok(
        &[
            "train",
            "toy.fact",
            "--config",
            "smoke.toml",
            "--lr",
            "0",
            "-o",
            "frozen",
        ],
        tmp.path(),
    );
    assert!(line.starts_with("mean_acc="), "{line}");
}

#[test]
fn eval_reports_and_rejects_mismatched_checkpoints() {
    let tmp = workspace();
    let dir = tmp.path();
    ok(
        &["train", "toy.fact", "--config", "smoke.toml", "-o", "run"],
        dir,
    );
    let line = ok(
        &[
            "eval",
            "toy.fact",
            "--checkpoint",
            "run/fold0.ckpt",
            "--config",
            "smoke.toml",
            "-o",
            "ev",
        ],
        dir,
    );
    assert!(
        line.starts_with("accuracy=") && line.contains(" kappa=") && line.trim().ends_with("n=30"),
        "{line}"
    );

    let cm = fs::read_to_string(dir.join("ev/confusion.csv")).unwrap();
    let row_sums: Vec<u64> = cm
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.parse::<u64>().unwrap())
                .sum()
        })
        .collect();
    assert_eq!(row_sums, vec![10, 10, 10]);
    let preds = fs::read_to_string(dir.join("ev/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 31);
    assert_eq!(preds.lines().next(), Some("trial,label,predicted"));

    let test_fold = ok(
        &[
            "eval",
            "toy.fact",
            "--checkpoint",
            "run/fold1.ckpt",
            "--config",
            "smoke.toml",
            "--subset",
            "test",
            "--fold",
            "1",
            "-o",
            "ev1",
        ],
        dir,
    );
    assert!(test_fold.trim().ends_with("n=10"), "{test_fold}");

    let wrong = faconf(
        &[
            "eval",
            "toy.fact",
            "--checkpoint",
            "run/fold0.ckpt",
            "--config",
            "smoke.toml",
            "--set",
            "model.fuse_filters=16",
        ],
        dir,
    );
    assert_eq!(wrong.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&wrong.stderr);
    assert!(msg.contains("parameter") && msg.contains("shape"), "{msg}");
}

#[test]
fn ablate_table_and_unknown_switch() {
    let tmp = workspace();
    let dir = tmp.path();
    let table = ok(
        &[
            "ablate",
            "toy.fact",
            "--config",
            "smoke.toml",
            "--epochs",
            "1",
            "--disable",
            "band_attention",
        ],
        dir,
    );
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows[0],
        ["variant", "param_count", "mean_acc", "mean_kappa"]
    );
    assert_eq!(rows.len(), 3, "{table}");
    assert_eq!(rows[1][0], "full");
    let full: usize = rows[1][1].parse().unwrap();
    let ablated: usize = rows[2][1].parse().unwrap();
    assert!(ablated < full, "{table}");

    let bad = faconf(
        &[
            "ablate",
            "toy.fact",
            "--config",
            "smoke.toml",
            "--disable",
            "attention",
        ],
        dir,
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn filter_probe_lists_every_band() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["filter-probe"], tmp.path());
    let blocks: Vec<&str> = text.split("\n\n").collect();
    assert_eq!(blocks.len(), 9);
    for (i, b) in blocks.iter().enumerate() {
        let mut lines = b.lines();
        assert!(lines.next().unwrap().starts_with(&format!("# band {i}: ")));
        assert_eq!(lines.next(), Some("freq_hz,magnitude_db"));
        assert_eq!(lines.count(), 1251);
    }
}

#[test]
fn help_shows_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(&["train", "--help"], tmp.path());
    for needle in ["1e-6", "500", "100", "0.5", "--set"] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
}

#[test]
fn import_round_trips_csv_exports() {
    let tmp = workspace();
    let dir = tmp.path();
    let set = read_container(&dir.join("toy.fact")).unwrap();
    let (eeg, emg, labels) = (
        dir.join("eeg.csv"),
        dir.join("emg.csv"),
        dir.join("labels.txt"),
    );
    faconformer::data_io::export_csv(&set, &eeg, &emg, &labels).unwrap();
    let line = ok(
        &[
            "import",
            "--eeg",
            "eeg.csv",
            "--emg",
            "emg.csv",
            "--labels",
            "labels.txt",
            "--fs",
            "250",
            "-o",
            "back.fact",
        ],
        dir,
    );
    assert!(
        line.contains("trials=30") && line.contains("eeg_channels=4"),
        "{line}"
    );
    let back = read_container(&dir.join("back.fact")).unwrap();
    assert_eq!(back.labels, set.labels);
    assert_eq!(back.eeg, set.eeg);

    fs::write(&labels, "0\n1\n2\n0\n1\n2\n0\n").unwrap();
    let bad = faconf(
        &[
            "import",
            "--eeg",
            "eeg.csv",
            "--emg",
            "emg.csv",
            "--labels",
            "labels.txt",
            "--fs",
            "250",
            "-o",
            "x.fact",
        ],
        dir,
    );
    assert_eq!(bad.status.code(), Some(1));
}
