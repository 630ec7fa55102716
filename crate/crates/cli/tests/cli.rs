use std::path::Path;
use std::process::{Command, Output};

fn afrcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afrcnn"))
        .args(args)
        .env("AFRCNN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn total_params(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("params ")).expect("summary line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn params_default_a_frcnn() {
    let o = afrcnn(&[
        "params", "--scheme", "a-frcnn", "--stages", "5", "--channels", "512", "--fusion", "concat", "--macro", "sc",
    ]);
    assert!(o.status.success());
    let m = total_params(&o);
    assert!((m - 6.1).abs() <= 0.61, "{m}");
}

#[test]
fn flops_sum_fusion_prints_gflops() {
    let o = afrcnn(&["flops", "--scheme", "a-frcnn", "--blocks", "16", "--fusion", "sum", "--seconds", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("GFlops"));
}

#[test]
fn tsv_report_round_trips() {
    let o = afrcnn(&["params", "--stages", "3", "--format", "tsv"]);
    assert!(o.status.success());
    let parsed = afrcnn::analysis::parse_report(&stdout(&o)).unwrap();
    assert!(!parsed.rows.is_empty());
    assert_eq!(parsed.params, parsed.rows.iter().map(|r| r.params).sum::<u64>());
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["params", "--bogus"],
        vec!["params", "--stages", "1"],
        vec!["params", "--scheme", "nope"],
        vec!["train"],
        vec!["nonsense"],
    ] {
        let o = afrcnn(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_failures_exit_two() {
    let o = afrcnn(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let o = afrcnn(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["make-data", "train", "separate", "eval", "params", "flops", "gradcheck", "dump-graph"] {
        assert!(text.contains(sub), "{sub}");
        let h = afrcnn(&[sub, "--help"]);
        assert!(h.status.success(), "{sub}");
        assert!(stdout(&h).contains("--seed") && stdout(&h).contains("--config"), "{sub}");
    }
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nstages = 3\n").unwrap();
    let with = afrcnn(&["params", "--stages", "6", "--config", cfg.to_str().unwrap()]);
    let plain = afrcnn(&["params", "--stages", "3"]);
    assert!(with.status.success());
    assert_eq!(total_params(&with), total_params(&plain));
    std::fs::write(&cfg, "[model]\nstagez = 3\n").unwrap();
    assert_eq!(afrcnn(&["params", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn dump_graph_reports_paths() {
    let o = afrcnn(&["dump-graph", "--scheme", "a-frcnn", "--stages", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("longest_path 6"));
    assert!(text.contains("edge e0"));
}

#[test]
fn gradcheck_ops_pass() {
    let o = afrcnn(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn data_train_separate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let o = afrcnn(&["make-data", "--out", s(&data), "--count", "2", "--seconds", "0.5", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let tiny = [
        "--channels", "8", "--enc-channels", "8", "--stages", "2", "--blocks", "2", "--fusion", "sum",
    ];
    let mut args = vec!["train", "--train-dir", s(&data), "--out-dir", s(&runs), "--epochs", "1", "--batch-size", "2"];
    args.extend(tiny);
    let o = afrcnn(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epoch\tstep\tlr\ttrain_loss\tvalid_si_snri"));
    let ckpt = runs.join("best.ckpt");
    assert!(ckpt.exists() && runs.join("last.ckpt").exists());

    let mix = data.join("utt0000").join("mix.wav");
    let sep = dir.path().join("sep");
    let run_sep = || afrcnn(&["separate", "--checkpoint", s(&ckpt), "--input", s(&mix), "--out-dir", s(&sep)]);
    assert!(run_sep().status.success());
    let first = std::fs::read(sep.join("spk1.wav")).unwrap();
    assert!(run_sep().status.success());
    assert_eq!(std::fs::read(sep.join("spk1.wav")).unwrap(), first);
    let input = afrcnn::audio::read_wav(&mix).unwrap();
    for k in 1..=2 {
        let w = afrcnn::audio::read_wav(sep.join(format!("spk{k}.wav"))).unwrap();
        assert_eq!(w.len(), input.len());
    }

    let wrong = dir.path().join("16k.wav");
    afrcnn::audio::write_wav(&wrong, &afrcnn::audio::Waveform::new(vec![0.0; 800], 16000)).unwrap();
    let o = afrcnn(&["separate", "--checkpoint", s(&ckpt), "--input", s(&wrong), "--out-dir", s(&sep)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("16000") && err.contains("8000"), "{err}");

    let o = afrcnn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with(afrcnn::objectives::MetricReport::HEADER));
    assert!(text.contains("si_snri\t"));
}
