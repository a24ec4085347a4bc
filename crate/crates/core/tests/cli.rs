//! End-to-end checks of the `semstitch` binary: flags, exit codes, files.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use semstitch::cli::RunConfig;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semstitch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Four quadrant fragments of a small synthetic slide plus ground truth.
fn quadrants(dir: &Path) -> Vec<String> {
    let out = dir.join("frags");
    let o = run(&["fragment", "--synthetic-size", "1024", "--seed", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    (0..4).map(|i| out.join(format!("frag-{i}.png")).to_string_lossy().into_owned()).collect()
}

fn default_in_help(help: &str, flag: &str) -> Option<String> {
    // clap wraps long help onto the next line; scan the flag's paragraph.
    let start = [" ", "\n"].iter().find_map(|end| help.find(&format!("--{flag}{end}")))?;
    let para = &help[start..];
    let end = para[2..].find("\n  -").map(|i| i + 2).unwrap_or(para.len());
    let para = &para[..end];
    let d = para.find("[default: ")? + "[default: ".len();
    Some(para[d..d + para[d..].find(']')?].to_string())
}

#[test]
fn help_enumerates_every_flag_with_its_default() {
    let cfg = RunConfig::default();
    let expect = [
        ("seed", cfg.seed.to_string()),
        ("threads", cfg.threads.to_string()),
        ("out-dir", cfg.out_dir.display().to_string()),
        ("processing-mpp", format!("{:.1}", cfg.processing_mpp)),
        ("output-mpp", cfg.output_mpp.to_string()),
        ("patch-size", cfg.patch_size.to_string()),
        ("stride", cfg.stride.to_string()),
        ("neighborhood", cfg.neighborhood.to_string()),
        ("encoder", cfg.encoder.name().to_string()),
        ("ransac-threshold", cfg.ransac.inlier_threshold.to_string()),
        ("ransac-iterations", cfg.ransac.max_iterations.to_string()),
        ("ransac-sample", cfg.ransac.sample_size.to_string()),
        ("bridge-dim", semstitch::cli::DEFAULT_BRIDGE_DIM.to_string()),
        ("oracle-sigma", "0".to_string()),
    ];
    for sub in ["stitch", "fragment", "evaluate"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success());
        let help = String::from_utf8(o.stdout).unwrap();
        for (flag, want) in &expect {
            assert_eq!(default_in_help(&help, flag).as_deref(), Some(want.as_str()), "{sub} --{flag}");
        }
        // every option paragraph other than free-form inputs states a default
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            let flag = line.trim_start()[2..].split([' ', '<']).next().unwrap();
            if ["help", "config", "ground-truth", "slide", "bridge"].contains(&flag) {
                continue;
            }
            assert!(default_in_help(&help, flag).is_some(), "{sub} --{flag} has no documented default");
        }
    }
}

#[test]
fn unknown_experiment_exits_1_and_lists_ids() {
    let o = run(&["evaluate", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for id in semstitch::cli::EXPERIMENT_IDS {
        assert!(err.contains(id), "{err}");
    }
}

#[test]
fn unreadable_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not an image").unwrap();
    for input in [bad.to_str().unwrap(), "/does/not/exist.png"] {
        let o = run(&["stitch", input, "--out-dir", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{input}");
        assert!(stderr(&o).starts_with("error:"));
    }
}

#[test]
fn encode_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let resp = dir.path().join("out.bin");
    let o = run(&["encode", common::fixture("bad_magic.bin").to_str().unwrap(), resp.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"));
    assert!(!resp.exists());
}

#[test]
fn encode_serves_builtin_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let resp = dir.path().join("out.bin");
    let req = common::fixture("sspb_small.bin");
    // 4x3 patches are not square
    let o = run(&["encode", req.to_str().unwrap(), resp.to_str().unwrap(), "--kind", "baseline"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["encode", req.to_str().unwrap(), resp.to_str().unwrap(), "--kind", "loopback", "--dim", "4"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&resp).unwrap(), std::fs::read(common::fixture("ssfv_small_loopback.bin")).unwrap());
}

#[test]
fn single_input_is_a_complete_mosaic() {
    let dir = tempfile::tempdir().unwrap();
    let frags = quadrants(dir.path());
    let out = dir.path().join("one");
    let o = run(&["stitch", &frags[0], "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["merges"].as_array().unwrap().len(), 0);
    assert_eq!(m["complete"], true);
    assert!(out.join("composite.png").exists());
}

#[test]
fn oracle_quadrants_merge_three_times() {
    let dir = tempfile::tempdir().unwrap();
    let frags = quadrants(dir.path());
    let gt = dir.path().join("frags/ground_truth.json");
    let out = dir.path().join("st");
    let mut args = vec!["stitch"];
    args.extend(frags.iter().map(String::as_str));
    args.extend(["--ground-truth", gt.to_str().unwrap(), "--encoder", "oracle", "--output-mpp", "1"]);
    args.extend(["--out-dir", out.to_str().unwrap(), "--format", "tif"]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["merges"].as_array().unwrap().len(), 3);
    assert_eq!(m["complete"], true);
    assert!(out.join("composite.tif").exists());
}

#[test]
fn impossible_consensus_is_a_partial_mosaic() {
    let dir = tempfile::tempdir().unwrap();
    let frags = quadrants(dir.path());
    let out = dir.path().join("st");
    let mut args = vec!["stitch"];
    args.extend(frags.iter().take(2).map(String::as_str));
    args.extend(["--ransac-threshold", "1e-9", "--out-dir", out.to_str().unwrap()]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(manifest(&out)["complete"], false);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let frags = quadrants(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "neighborhood": 2}"#).unwrap();
    let out = dir.path().join("st");
    let o = run(&["stitch", &frags[0], "--config", cfg.to_str().unwrap(), "--seed", "7", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["neighborhood"], 2);

    std::fs::write(&cfg, r#"{"sede": 5}"#).unwrap();
    let o = run(&["stitch", &frags[0], "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn external_encoder_goes_through_the_bridge() {
    let dir = tempfile::tempdir().unwrap();
    let frags = quadrants(dir.path());
    let out = dir.path().join("ext");
    let bridge = format!("{} encode --kind baseline", env!("CARGO_BIN_EXE_semstitch"));
    let o = bin()
        .args(["stitch", &frags[0], &frags[1], "--encoder", "external", "--bridge-dim", "192"])
        .args(["--out-dir", out.to_str().unwrap()])
        .env("SEMSTITCH_BRIDGE", &bridge)
        .output()
        .unwrap();
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
    assert!(out.join("bridge/frag-0/patches.bin").exists());
    assert!(out.join("bridge/frag-0/features.bin").exists());

    // wrong width declared: the reply has 192 columns
    let o = bin()
        .args(["stitch", &frags[0], "--encoder", "external", "--bridge-dim", "1024"])
        .args(["--out-dir", out.to_str().unwrap()])
        .env("SEMSTITCH_BRIDGE", &bridge)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    // failing bridge command
    let o = bin()
        .args(["stitch", &frags[0], "--encoder", "external", "--out-dir", out.to_str().unwrap()])
        .env("SEMSTITCH_BRIDGE", "false")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bridge"), "{}", stderr(&o));
}

#[test]
fn repeated_evaluation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run_no in 0..2 {
        let out = dir.path().join(format!("r{run_no}"));
        let o = run(&[
            "evaluate",
            "similarity-vs-offset",
            "--slide-size",
            "768",
            "--trials",
            "1",
            "--values",
            "0,100,300",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("similarity-vs-offset.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.pop().unwrap()).unwrap();
    assert!(text.starts_with("experiment,variable,value,metric,mean,std,n\n"));
}
