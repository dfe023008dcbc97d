use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
[synth]
n = 2
duration_s = 15

[data]
stride = 25

[model]
n = 2
history = 50
horizon = 100
patch = 10
d_model = 8
experts = 2
layers = 1
heads = 2

[train]
batch_size = 16
max_steps = 4
";

fn fdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdn")).args(args).output().expect("spawn fdn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    path
}

fn synth(dir: &Path, cfg: &Path, count: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = fdn(&["synth", "--config", s(cfg), "--episodes", count, "--seed", "7", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fdn(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&fdn(&["frobnicate"])), 1);
    assert_eq!(code(&fdn(&[])), 1);
    assert_eq!(code(&fdn(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let o = fdn(&["train", "--config", s(&bad), "--episodes", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = fdn(&["synth", "--episodes", "many", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn synth_writes_episodes_sidecars_and_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = synth(dir.path(), &cfg, "3");
    let names: Vec<String> =
        fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    let count = |suffix: &str| names.iter().filter(|n| n.ends_with(suffix)).count();
    assert_eq!(count(".meta"), 3);
    assert_eq!(count(".truth.csv"), 3);
    assert_eq!(count(".csv") - count(".truth.csv"), 3);
    assert_eq!(count(".ini"), 1);
    let manifest = fs::read_to_string(data.join("run.ini")).unwrap();
    assert!(manifest.contains("command=synth") || manifest.contains("command = synth"), "{manifest}");
    assert!(manifest.contains("episode_002.csv"));
}

#[test]
fn train_evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = synth(dir.path(), &cfg, "3");
    let run = dir.path().join("run");
    let o = fdn(&["train", "--config", s(&cfg), "--episodes", s(&data), "--seed", "3", "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = run.join("checkpoint");
    assert!(ck.join("manifest.ini").exists());

    let eval = |out: &Path| {
        let o = fdn(&[
            "evaluate", "--config", s(&cfg), "--model", s(&ck), "--episodes", s(&data), "--delays", "100,1000", "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(!stderr(&o).contains("never trained"));
        fs::read_to_string(out.join("report.csv")).unwrap()
    };
    let a = eval(&dir.path().join("e1"));
    let b = eval(&dir.path().join("e2"));
    assert_eq!(a, b);
    // one held-out episode, two delays, sixteen rows each
    assert_eq!(a.lines().count(), 1 + 2 * 16);
    assert!(a.lines().any(|l| l.contains(",100,")) && a.lines().any(|l| l.contains(",1000,")));

    // a retrained checkpoint hashes identically
    let run2 = dir.path().join("run2");
    let o = fdn(&["train", "--config", s(&cfg), "--episodes", s(&data), "--seed", "3", "--out", s(&run2)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(ck.join("params.bin")).unwrap(), fs::read(run2.join("checkpoint/params.bin")).unwrap());
    assert_eq!(fs::read(run.join("loss.csv")).unwrap(), fs::read(run2.join("loss.csv")).unwrap());
}

#[test]
fn runtime_failures_exit_two_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = fdn(&["evaluate", "--model", s(&dir.path().join("missing")), "--episodes", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("evaluate"), "{}", stderr(&o));

    let data = synth(dir.path(), &cfg, "3");
    let run = dir.path().join("run");
    let o = fdn(&["train", "--config", s(&cfg), "--episodes", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before = fs::read(run.join("checkpoint/params.bin")).unwrap();
    let o = fdn(&["transfer", "--config", s(&cfg), "--model", s(&run.join("checkpoint")), "--episodes", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("transfer"), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("checkpoint/params.bin")).unwrap(), before);
}

#[test]
fn untrained_checkpoint_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = synth(dir.path(), &cfg, "3");
    let run = dir.path().join("run");
    let zero = dir.path().join("zero.cfg");
    fs::write(&zero, CONFIG.replace("max_steps = 4", "max_steps = 0")).unwrap();
    let o = fdn(&["train", "--config", s(&zero), "--episodes", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = fdn(&[
        "evaluate", "--config", s(&cfg), "--model", s(&run.join("checkpoint")), "--episodes", s(&data), "--delays", "100",
        "--out", s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("never trained"));
}

#[test]
fn pretrain_then_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = synth(dir.path(), &cfg, "3");
    let pre = dir.path().join("pre");
    let o = fdn(&["pretrain", "--config", s(&cfg), "--episodes", s(&data), "--data-util", "50", "--out", s(&pre)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tr = dir.path().join("tr");
    let o = fdn(&[
        "transfer", "--config", s(&cfg), "--model", s(&pre.join("checkpoint")), "--episodes", s(&data), "--stage",
        "linear_probe", "--out", s(&tr),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tr.join("linear_probe/manifest.ini").exists());
    assert!(!tr.join("fine_tune").exists());
}

#[test]
fn spectrum_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[eval]\nplot_seconds = 2\n");
    let data = synth(dir.path(), &cfg, "3");
    let sp = dir.path().join("sp");
    let o = fdn(&["spectrum", "--config", s(&cfg), "--episodes", s(&data), "--out", s(&sp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(sp.join("spectrum.csv")).unwrap().starts_with("freq_hz,fx"));

    let run = dir.path().join("run");
    assert_eq!(code(&fdn(&["train", "--config", s(&cfg), "--episodes", s(&data), "--out", s(&run)])), 0);
    let pl = dir.path().join("pl");
    let o = fdn(&["plot", "--config", s(&cfg), "--model", s(&run.join("checkpoint")), "--episodes", s(&data), "--delays", "100", "--out", s(&pl)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(pl.join("fx_100ms.svg").exists());
}

#[test]
fn ablate_trains_one_model_per_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = synth(dir.path(), &cfg, "3");
    let out = dir.path().join("abl");
    let o = fdn(&[
        "ablate", "--config", s(&cfg), "--episodes", s(&data), "--flags", "no_res_head,no_trend_head", "--delays", "100", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["full", "no_res_head", "no_trend_head"] {
        assert!(out.join(name).join("checkpoint/manifest.ini").exists(), "{name}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    let o = fdn(&["ablate", "--episodes", s(&data), "--flags", "no_such_flag", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}
