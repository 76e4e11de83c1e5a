use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sonartrack::annotation::write_boxes;
use sonartrack::evalkit::{read_summary, Modality};
use sonartrack::imaging::ImageF32;
use sonartrack::train::read_loss_log;
use sonartrack::BBox;

fn sonartrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonartrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sonartrack(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const B: BBox = BBox::new(0.0, 0.0, 10.0, 10.0);

/// One four-frame sequence: exact hit, half-width shift, agreed absence,
/// missed target in RGB; sonar predictions are exact.
fn mini_benchmark(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let bench = root.join("bench");
    let seq = bench.join("seq01");
    for m in ["rgb", "sonar"] {
        fs::create_dir_all(seq.join(m)).unwrap();
        for i in 0..4 {
            ImageF32::new(4, 4).save(&seq.join(m).join(format!("{i:04}.png"))).unwrap();
        }
    }
    let gt_rgb = [B, B, BBox::ABSENT, B];
    let gt_sonar = [B, BBox::new(20.0, 20.0, 8.0, 6.0), BBox::ABSENT, B];
    write_boxes(&seq.join("rgb.txt"), &gt_rgb).unwrap();
    write_boxes(&seq.join("sonar.txt"), &gt_sonar).unwrap();
    fs::write(seq.join("attributes.txt"), "OC\nLSR\n").unwrap();

    let res = root.join("results").join("seq01");
    fs::create_dir_all(&res).unwrap();
    write_boxes(&res.join("rgb.txt"), &[B, BBox::new(5.0, 0.0, 10.0, 10.0), BBox::ABSENT, BBox::ABSENT]).unwrap();
    write_boxes(&res.join("sonar.txt"), &gt_sonar).unwrap();
    (bench, root.join("results"))
}

#[test]
fn eval_matches_golden_scores_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, results) = mini_benchmark(tmp.path());
    let out = tmp.path().join("eval");
    let printed = ok(&["eval", "--dataset", s(&bench), "--results", s(&results), "--out", s(&out), "--name", "mini"]);

    let summary = read_summary(&out.join("summary.json")).unwrap();
    let rgb = summary.iter().find(|x| x.modality == Modality::Rgb).unwrap();
    // overlap 1/3 passes 7 of 21 thresholds; normalized distance 0.5 passes 1 of 51
    assert!((rgb.sr - 49.0 / 84.0).abs() < 1e-12, "{}", rgb.sr);
    assert_eq!(rgb.pr, 0.75);
    assert!((rgb.npr - 103.0 / 204.0).abs() < 1e-12, "{}", rgb.npr);
    let sonar = summary.iter().find(|x| x.modality == Modality::Sonar).unwrap();
    assert_eq!((sonar.sr, sonar.pr, sonar.npr), (1.0, 1.0, 1.0));

    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mini_table.md")).unwrap();
    assert_eq!(printed, golden);
    assert_eq!(fs::read_to_string(out.join("table.md")).unwrap(), golden);
}

#[test]
fn oracle_tracking_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, _) = mini_benchmark(tmp.path());
    let res = tmp.path().join("oracle");
    ok(&["track", "--oracle", "--dataset", s(&bench), "--out", s(&res)]);
    let out = tmp.path().join("eval");
    ok(&["eval", "--dataset", s(&bench), "--results", s(&res), "--out", s(&out)]);
    for x in read_summary(&out.join("summary.json")).unwrap() {
        assert_eq!((x.sr, x.pr, x.npr), (1.0, 1.0, 1.0), "{}", x.modality);
        assert_eq!(x.tracker, "oracle");
    }
}

#[test]
fn empty_results_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, _) = mini_benchmark(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = sonartrack(&["eval", "--dataset", s(&bench), "--results", s(&empty), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seq01"));
}

#[test]
fn exit_codes() {
    assert_eq!(sonartrack(&["--help"]).status.code(), Some(0));
    assert_eq!(sonartrack(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sonartrack(&["--no.such.key=1", "config"]).status.code(), Some(1));
    assert_eq!(sonartrack(&["--profile", "nope", "config"]).status.code(), Some(1));
    assert_eq!(sonartrack(&["--train.lr", "config"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(sonartrack(&["track", "--oracle", "--dataset", s(&missing), "--out", s(tmp.path())]).status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let help = ok(&["--help"]);
    for key in ["train.lr", "model.scam.mode", "model.backbone.scam_layers", "srst.saliency", "tracker.threshold", "seed"] {
        assert!(help.contains(key), "--help does not mention {key}");
    }
}

#[test]
fn config_reflects_profile_and_overrides() {
    let toml = ok(&["--profile", "toy", "--scam.mode=softmax_nogim", "--seed", "5", "config"]);
    let v: toml::Table = toml::from_str(&toml).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(5));
    assert_eq!(v["model"]["scam"]["mode"].as_str(), Some("softmax_nogim"));
    assert_eq!(v["model"]["backbone"]["depth"].as_integer(), Some(2));
}

#[test]
fn plot_shows_every_tracker() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, results) = mini_benchmark(tmp.path());
    let oracle = tmp.path().join("oracle");
    ok(&["track", "--oracle", "--dataset", s(&bench), "--out", s(&oracle)]);
    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    ok(&["eval", "--dataset", s(&bench), "--results", s(&results), "--out", s(&ea), "--name", "alpha"]);
    ok(&["eval", "--dataset", s(&bench), "--results", s(&oracle), "--out", s(&eb), "--name", "beta"]);
    let plots = tmp.path().join("plots");
    ok(&["plot", "--out", s(&plots), s(&ea.join("summary.json")), s(&eb.join("summary.json"))]);
    let svgs: Vec<_> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert!(svgs.len() >= 6, "{svgs:?}");
    for p in svgs {
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("alpha") && text.contains("beta"), "{} misses a tracker", p.display());
    }
}

#[test]
fn datagen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["--seed", "4", "--datagen.sequences=2", "--datagen.frames=10", "datagen", "--out", s(out)]);
    }
    let files = |root: &Path| {
        let mut v = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    v.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    let fa = files(&a);
    assert!(!fa.is_empty());
    assert_eq!(fa, files(&b));
}

#[test]
fn divergence_exits_with_numeric_code_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["--profile", "toy", "--datagen.sequences=2", "--datagen.frames=12", "datagen", "--out", s(&data)]);
    let run = tmp.path().join("run");
    let out = sonartrack(&["--profile", "toy", "--train.steps=20", "--train.lr=1e12", "train", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.safetensors").is_file());
}

#[test]
fn small_pool_overfits() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["--profile", "toy", "--datagen.sequences=2", "--datagen.frames=20", "datagen", "--out", s(&data)]);
    let run = tmp.path().join("run");
    ok(&["--profile", "toy", "--train.steps=200", "--train.pool_size=20", "train", "--data", s(&data), "--out", s(&run)]);
    let losses = read_loss_log(&run.join("loss.csv")).unwrap();
    assert_eq!(losses.len(), 200);
    let first = losses[0].1;
    let last = losses[190..].iter().map(|l| l.1).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    // the pinned toy model loads its own checkpoint
    let res = tmp.path().join("res");
    let ckpt = run.join("checkpoint.safetensors");
    ok(&["--profile", "toy", "track", "--dataset", s(&data.join("benchmark")), "--checkpoint", s(&ckpt), "--out", s(&res)]);
    let mismatch = sonartrack(&[
        "--profile",
        "toy",
        "--backbone.dim=32",
        "track",
        "--dataset",
        s(&data.join("benchmark")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&res),
    ]);
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("dim"));
}
