use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpcc_core::data::Dataset;
use mpcc_core::zorder::{cdps, paired_center_gap, DEFAULT_BITS};
use mpcc_core::PointCloud;

const TINY: &str = "n_points = 64
g = 8
k = 8
d = 16
n_blocks = 1
n_state = 4
s = 4
batch = 2
coarse_points = 8
epochs = 2
max_steps = 6
";

fn mpcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcc"))
        .args(args)
        .env_remove("MPCC_SEED")
        .output()
        .expect("spawn mpcc")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.cfg");
        fs::write(&config, TINY).unwrap();
        ok(&mpcc(&[
            "gen-data",
            "--out",
            s(&root.join("data")),
            "--per-category",
            "2",
            "--points",
            "64",
            "--seed",
            "3",
        ]));
        Self {
            _tmp: tmp,
            root,
            config,
        }
    }

    fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    fn train(&self, out: &str) -> Output {
        mpcc(&[
            "train",
            "--config",
            s(&self.config),
            "--source-dir",
            s(&self.data("source")),
            "--target-dir",
            s(&self.data("target-train")),
            "--out",
            s(&self.root.join(out)),
        ])
    }
}

#[test]
fn gen_data_layout() {
    let f = Fixture::new();
    assert!(f.root.join("data/manifest.csv").exists());
    assert!(f.data("source/box/box-00000.gt.xyz").exists());
    assert!(f.data("target-train/box/box-00000.xyz").exists());
    assert!(!f.data("target-train/box/box-00000.gt.xyz").exists());
    assert!(f
        .data("target-eval/table-like/table-like-00001.gt.xyz")
        .exists());
}

#[test]
fn train_eval_are_reproducible() {
    let f = Fixture::new();
    let stdout = ok(&f.train("run1"));
    assert!(stdout.contains("# resolved config (seed 0)"));
    assert!(stdout.contains("d = 16"));
    ok(&f.train("run2"));
    let loss1 = fs::read_to_string(f.root.join("run1/loss.csv")).unwrap();
    let loss2 = fs::read_to_string(f.root.join("run2/loss.csv")).unwrap();
    assert_eq!(loss1, loss2);
    assert_eq!(
        loss1.lines().next().unwrap(),
        "step,loss_cd,l_sp,l_ch,total"
    );
    assert_eq!(loss1.lines().count(), 7);
    assert!(f.root.join("run1/config.txt").exists());
    assert!(f.root.join("run1/model.mpcc").exists());
    assert!(f.root.join("run1/ckpt-epoch0001.mpcc").exists());

    let eval = |ckpt: &str, metric: &str, out: &str| {
        ok(&mpcc(&[
            "eval",
            "--ckpt",
            s(&f.root.join(ckpt).join("model.mpcc")),
            "--data-dir",
            s(&f.data("target-eval")),
            "--metric",
            metric,
            "--out",
            s(&f.root.join(out)),
        ]));
        fs::read_to_string(f.root.join(out)).unwrap()
    };
    let t1 = eval("run1", "cd", "t1.csv");
    let t2 = eval("run2", "cd", "t2.csv");
    assert_eq!(t1, t2);
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines[0], "category,metric,value,scale");
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("Avg,cd-l2-sum,"));
    let rows: Vec<f64> = lines[1..6]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let avg: f64 = lines[6].split(',').nth(2).unwrap().parse().unwrap();
    assert!((avg - rows.iter().sum::<f64>() / 5.0).abs() < 1e-9 * avg.abs().max(1.0));

    let uhd = eval("run1", "uhd", "t3.csv");
    assert!(uhd.contains(",uhd-l2-partial2pred,") && uhd.contains(",100\n"));
}

#[test]
fn unlabeled_split_cannot_be_scored_with_cd() {
    let f = Fixture::new();
    ok(&f.train("run"));
    let out = mpcc(&[
        "eval",
        "--ckpt",
        s(&f.root.join("run/model.mpcc")),
        "--data-dir",
        s(&f.data("target-train")),
        "--out",
        s(&f.root.join("t.csv")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn seed_env_overrides_config() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_mpcc"))
        .args([
            "train",
            "--dry-run",
            "--config",
            s(&f.config),
            "--source-dir",
            s(&f.data("source")),
            "--target-dir",
            s(&f.data("target-train")),
            "--out",
            s(&f.root.join("x")),
        ])
        .env("MPCC_SEED", "77")
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("seed = 77"));
    assert!(stdout.contains("dry run"));
    assert!(!f.root.join("x").exists());
}

#[test]
fn error_paths_and_exit_codes() {
    let f = Fixture::new();
    let missing = mpcc(&[
        "train",
        "--config",
        s(&f.config),
        "--source-dir",
        s(&f.data("source")),
        "--target-dir",
        s(&f.root.join("nope")),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));

    let bad = f.root.join("bad.cfg");
    fs::write(&bad, format!("{TINY}d = 18\n")).unwrap();
    let out = mpcc(&[
        "train",
        "--dry-run",
        "--config",
        s(&bad),
        "--source-dir",
        s(&f.data("source")),
        "--target-dir",
        s(&f.data("target-train")),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("D % S"));

    fs::write(&bad, "warmup = 3\n").unwrap();
    let out = mpcc(&[
        "train",
        "--dry-run",
        "--config",
        s(&bad),
        "--source-dir",
        s(&f.data("source")),
        "--target-dir",
        s(&f.data("target-train")),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = mpcc(&[
        "scan",
        "--input",
        "/no/such.xyz",
        "--input2",
        "/no/such.xyz",
        "--out",
        "/tmp",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such.xyz"));

    assert!(!mpcc(&["train", "--bogus-flag"]).status.success());
}

#[test]
fn divergence_exits_with_code_four() {
    let f = Fixture::new();
    let cfg = f.root.join("hot.cfg");
    fs::write(&cfg, format!("{TINY}lr = 1e30\nmax_steps = 6\n")).unwrap();
    let out = mpcc(&[
        "train",
        "--config",
        s(&cfg),
        "--source-dir",
        s(&f.data("source")),
        "--target-dir",
        s(&f.data("target-train")),
        "--out",
        s(&f.root.join("hot")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(f.root.join("hot/divergence.txt").exists());
}

fn read_patches(dir: &Path, g: usize) -> Vec<[f64; 3]> {
    (0..g)
        .flat_map(|i| {
            PointCloud::read_xyz(dir.join(format!("patch_{i:04}.xyz")))
                .unwrap()
                .into_points()
        })
        .collect()
}

#[test]
fn scan_round_trip() {
    let f = Fixture::new();
    let a = f.data("source/cylinder/cylinder-00000.xyz");
    let b = f.data("target-train/box/box-00001.xyz");
    let out = f.root.join("scan");
    ok(&mpcc(&[
        "scan",
        "--input",
        s(&a),
        "--input2",
        s(&b),
        "--g",
        "8",
        "--k",
        "8",
        "--out",
        s(&out),
    ]));
    let ca = PointCloud::read_xyz(&a).unwrap();
    let cb = PointCloud::read_xyz(&b).unwrap();
    let (pa, pb, _) = cdps(&ca, &cb, 8, 8, DEFAULT_BITS).unwrap();
    assert_eq!(read_patches(&out.join("a"), 8), pa.points);
    assert_eq!(read_patches(&out.join("b"), 8), pb.points);
    let csv = fs::read_to_string(out.join("patches.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);

    // N == G·K: the patches are a permutation of the input
    let mut sorted_in: Vec<_> = ca.points().iter().map(|p| p.map(f64::to_bits)).collect();
    let mut sorted_out: Vec<_> = pa.points.iter().map(|p| p.map(f64::to_bits)).collect();
    sorted_in.sort_unstable();
    sorted_out.sort_unstable();
    assert_eq!(sorted_in, sorted_out);

    let same = f.root.join("same");
    ok(&mpcc(&[
        "scan",
        "--input",
        s(&a),
        "--input2",
        s(&a),
        "--g",
        "8",
        "--k",
        "8",
        "--out",
        s(&same),
    ]));
    for i in 0..8 {
        let name = format!("patch_{i:04}.xyz");
        assert_eq!(
            fs::read(same.join("a").join(&name)).unwrap(),
            fs::read(same.join("b").join(&name)).unwrap()
        );
    }
}

#[test]
fn bench_rows_and_reproducibility() {
    let f = Fixture::new();
    let run = |out: &str| {
        let stdout = ok(&mpcc(&[
            "bench",
            "--config",
            s(&f.config),
            "--points",
            "128",
            "--reps",
            "3",
            "--out",
            s(&f.root.join(out)),
        ]));
        (
            stdout,
            fs::read_to_string(f.root.join(out).join("bench.csv")).unwrap(),
        )
    };
    let (stdout, b1) = run("b1");
    let (_, b2) = run("b2");
    assert_eq!(b1, b2);
    assert_eq!(b1.lines().count(), 1 + 3);
    assert!(stdout.contains("params ") && stdout.contains("median_ms"));
    assert!(f.root.join("b1/timing.csv").exists());
}

#[test]
fn export_embed_shape() {
    let f = Fixture::new();
    ok(&f.train("run"));
    let out = f.root.join("embed.csv");
    ok(&mpcc(&[
        "export-embed",
        "--ckpt",
        s(&f.root.join("run/model.mpcc")),
        "--source-dir",
        s(&f.data("source")),
        "--target-dir",
        s(&f.data("target-train")),
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 10 + 10);
    assert!(lines.iter().all(|l| l.split(',').count() == 16 + 2));
    assert_eq!(lines.iter().filter(|l| l.contains(",target,")).count(), 10);

    let stat = fs::read_to_string(out.with_extension("cdps.csv")).unwrap();
    let row: Vec<f64> = stat
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[0], 10.0);
    let src = Dataset::read(&f.data("source")).unwrap();
    let tgt = Dataset::read(&f.data("target-train")).unwrap();
    let (mut shared, mut indep) = (0.0, 0.0);
    for (a, b) in src.samples.iter().zip(&tgt.samples) {
        let (s, i) = paired_center_gap(&a.partial, &b.partial, 8, 8, DEFAULT_BITS).unwrap();
        shared += s;
        indep += i;
    }
    assert_eq!(row[1], shared / 10.0);
    assert_eq!(row[2], indep / 10.0);
}
