use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mdgru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdgru"))
        .args(args)
        .env("MDGRU_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Desk geometry with a tiny network and dataset so commands finish in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let mut text = mdgru::config::RunConfig::desk().to_toml();
    text = text
        .replace("count = 70", "count = 8")
        .replace("input_conv_channels = 16", "input_conv_channels = 2")
        .replace("mdgru_channels = [8, 16, 32]", "mdgru_channels = [1, 1, 2]")
        .replace("pointwise_channels = [12, 24, 48]", "pointwise_channels = [1, 2, 2]")
        .replace("epochs = 40", "epochs = 1")
        .replace("checkpoint_every = 10", "checkpoint_every = 1");
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

fn synth(cfg: &Path, out: &Path) {
    let o = mdgru(&["synth", "--config", p(cfg), "--out", p(out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_reproducible_and_echoes_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&cfg, &a);
    synth(&cfg, &b);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let echoed = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 1"));
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 8);

    let c = tmp.path().join("c");
    let o = mdgru(&["synth", "--config", p(&cfg), "--seed", "2", "--out", p(&c)]);
    assert_eq!(code(&o), 0);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = mdgru(&["synth", "--split-weights", "0.8,-0.1,0.3", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("split"), "{}", stderr(&o));

    let o = mdgru(&["synth", "--profile", "huge", "--out", p(&out)]);
    assert_eq!(code(&o), 2);

    let cfg = small_config(tmp.path());
    let bad = tmp.path().join("bad.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("[train]", "[train]\nlearning_rat = 1.0");
    fs::write(&bad, text).unwrap();
    let o = mdgru(&["synth", "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let o = mdgru(&["synth", "--config", p(&cfg), "--profile", "desk", "--out", p(&out)]);
    assert_eq!(code(&o), 2);

    let o = mdgru(&["train", "--stage", "middle", "--manifest", "m.tsv", "--out", p(&out)]);
    assert_eq!(code(&o), 2);

    let o = mdgru(&[
        "localize",
        "--volume",
        "v.rvol",
        "--coarse",
        p(&tmp.path().join("missing.mdgc")),
        "--fine",
        "f.mdgc",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_localize_evaluate() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    synth(&cfg, &data);
    let manifest = data.join("manifest.tsv");

    let train = |stage: &str, n: &str, out: &Path, epochs: &str| {
        let o = mdgru(&[
            "train",
            "--config",
            p(&cfg),
            "--stage",
            stage,
            "--superres-n",
            n,
            "--epochs",
            epochs,
            "--manifest",
            p(&manifest),
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };

    // Zero epochs leave exactly the initialization behind.
    let init = tmp.path().join("init");
    train("coarse", "1", &init, "0");
    assert_eq!(fs::read_to_string(init.join("loss.csv")).unwrap(), "iteration,train_loss,val_loss\n");
    assert!(init.join("model.mdgc").exists());
    assert!(!init.join("checkpoint-epoch0001.mdgc").exists());

    let coarse = tmp.path().join("coarse");
    let log = train("coarse", "1", &coarse, "1");
    assert!(log.lines().any(|l| l.starts_with("event=epoch epoch=1 ")), "{log}");
    let again = tmp.path().join("coarse2");
    train("coarse", "1", &again, "1");
    for f in ["loss.csv", "model.mdgc", "checkpoint-epoch0001.mdgc", "config.toml"] {
        assert_eq!(fs::read(coarse.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(coarse.join("model.mdgc")).unwrap(),
        fs::read(init.join("model.mdgc")).unwrap()
    );

    let fine1 = tmp.path().join("fine1");
    train("fine", "1", &fine1, "1");
    let fine2 = tmp.path().join("fine2");
    train("fine", "2", &fine2, "1");
    let (c, f1, f2) = (coarse.join("model.mdgc"), fine1.join("model.mdgc"), fine2.join("model.mdgc"));

    let volume = data.join("volumes/subj0000.rvol");
    let loc = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "localize",
            "--config",
            p(&cfg),
            "--volume",
            p(&volume),
            "--coarse",
            p(&c),
            "--fine",
            p(&f1),
            "--fine",
            p(&f2),
            "--out",
            p(out),
        ];
        args.extend_from_slice(extra);
        mdgru(&args)
    };
    let (l1, l2) = (tmp.path().join("l1"), tmp.path().join("l2"));
    let o = loc(&l1, &["--superres-n", "2", "--parabola", "on"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&loc(&l2, &["--superres-n", "2", "--parabola", "on"])), 0);
    assert_eq!(dir_bytes(&l1), dir_bytes(&l2));
    let landmark = mdgru::data_io::read_landmark(&l1.join("landmark.txt")).unwrap();
    assert!(landmark.coords.iter().all(|&c| (-0.5..63.5).contains(&c)), "{landmark:?}");
    let dists = fs::read_to_string(l1.join("distributions.csv")).unwrap();
    assert_eq!(dists.lines().count(), 1 + 3 * 32 + 3 * 64);
    assert!(fs::read_to_string(l1.join("config.toml")).unwrap().contains("superres = 2"));

    let o = loc(&tmp.path().join("l3"), &["--superres-n", "4"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = mdgru(&[
        "localize",
        "--config",
        p(&cfg),
        "--volume",
        p(&volume),
        "--coarse",
        p(&f1),
        "--fine",
        p(&f1),
        "--out",
        p(&tmp.path().join("l4")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let eval = tmp.path().join("eval");
    let o = mdgru(&[
        "evaluate",
        "--config",
        p(&cfg),
        "--manifest",
        p(&manifest),
        "--coarse",
        p(&c),
        "--fine",
        p(&f2),
        "--fine",
        p(&f1),
        "--out",
        p(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports = mdgru::evaluation::from_csv(&fs::read_to_string(eval.join("errors.csv")).unwrap()).unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(labels, ["coarse-only", "fine,32", "fine+parab,32", "fine,64", "fine+parab,64"]);
    let test_subjects = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.ends_with("\ttest"))
        .count();
    assert!(reports.iter().all(|r| r.cases.len() == test_subjects));
    assert!(fs::read_to_string(eval.join("report.txt")).unwrap().contains("fine+parab,64"));
}

#[test]
fn gradcheck_passes_and_detects_flipped_gradients() {
    let o = mdgru(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("check=coarse_network_mini status=pass"), "{text}");
    assert!(text.contains("check=conv3d_stride2 "));
    assert!(text.lines().any(|l| l.starts_with("event=done passed=true")));

    let o = mdgru(&["gradcheck", "--flip-sign"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8(o.stdout).unwrap().contains("status=FAIL"));
}
