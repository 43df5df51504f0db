use std::path::{Path, PathBuf};
use std::process::Command;

use isostory::io::decode_latent;
use isostory::metrics::{AblationTable, ConsistencyReport};
use isostory::pipeline::Pipeline;
use isostory::plan::{parse_script, StoryPlan};
use isostory_cli::commands::load_plan;
use isostory_cli::config::RunConfigFile;
use isostory_cli::manifest::Manifest;

const SCRIPT: &str = "character Ana: a tall woman in a green coat\n\
character Bo: a small boy with a kite\n\
scene: Ana waits at the station\n\
scene: Ana and Bo fly a kite on the hill\n\
scene: Bo sleeps while Ana reads\n";

const SMALL: &str = "[pipeline]\nh = 6\nw = 6\nd = 8\nd_txt = 8\nsteps = 4\nseed = 3\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isostory"))
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("story.txt");
    std::fs::write(&script, SCRIPT).unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    (dir, script, config)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["isostory"];
    full.extend_from_slice(args);
    let code = isostory_cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_round_trip() {
    let (dir, script, _) = setup();
    let plan_path = dir.path().join("plan.json");
    let status = bin()
        .args(["plan", "--script", s(&script), "--out", s(&plan_path)])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let written = StoryPlan::from_json(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(written, parse_script(SCRIPT).unwrap());
    assert_eq!(load_plan(&plan_path).unwrap(), written);
}

#[test]
fn plan_unknown_character_exits_one() {
    let (dir, _, _) = setup();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "character Ana: a woman\nscene [Ana, Zed]: Ana meets Zed\n").unwrap();
    let output = bin()
        .args(["plan", "--script", s(&bad), "--out", s(&dir.path().join("p.json"))])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("Zed") && stderr.contains("line 2"), "{stderr}");
}

#[test]
fn plan_without_input_is_usage_error() {
    let (code, _, err) = run(&["plan"]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["plan", "--script", "/nonexistent/story.txt"]);
    assert_eq!(code, 2);
}

#[test]
fn invalid_config_key_exits_two() {
    let (dir, script, _) = setup();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pipeline]\nlambada = 1.0\n").unwrap();
    let output = bin()
        .args([
            "generate",
            s(&script),
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("r")),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("lambada"));
}

#[test]
fn generate_writes_run_directory() {
    let (dir, script, config) = setup();
    let out = dir.path().join("run");
    let (code, stdout, err) = run(&[
        "generate",
        s(&script),
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--dump-attn",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("overall"));
    for f in [
        "manifest.json",
        "report.json",
        "report.txt",
        "bank.json",
        "plan.json",
        "scene_000/latent.bin",
        "scene_000/map_0.pgm",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.scenes.len(), 3);
    assert!(!manifest.baseline);
    assert!(!manifest.scenes[1].traces.is_empty());
    assert!(!std::fs::read_to_string(out.join("manifest.json"))
        .unwrap()
        .contains(s(dir.path())));
    let report: ConsistencyReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.characters.len() + report.notes.len(), 2);

    // Re-running into a previous run directory replaces it.
    let (code, _, err) = run(&["generate", s(&script), "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(!out.join("scene_001/attn").exists());

    let occupied = dir.path().join("occupied");
    std::fs::create_dir_all(&occupied).unwrap();
    std::fs::write(occupied.join("keep.txt"), "x").unwrap();
    let (code, _, _) = run(&["generate", s(&script), "--config", s(&config), "--out", s(&occupied)]);
    assert_eq!(code, 2);
    assert!(occupied.join("keep.txt").is_file());
}

#[test]
fn lambda_zero_is_baseline() {
    let (dir, script, config) = setup();
    let out = dir.path().join("base");
    let (code, _, err) = run(&[
        "generate",
        s(&script),
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--lambda",
        "0",
    ]);
    assert_eq!(code, 0, "{err}");
    let report: ConsistencyReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.baseline);
    assert!(std::fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("baseline"));

    let cfg = RunConfigFile::parse(SMALL).unwrap().pipeline_config().unwrap();
    let plan = parse_script(SCRIPT).unwrap();
    let pipeline = Pipeline::new(cfg).unwrap();
    for i in 0..3 {
        let latent = decode_latent(&std::fs::read(out.join(format!("scene_{i:03}/latent.bin"))).unwrap()).unwrap();
        let plain = pipeline.plain_scene_latent(&plan, i).unwrap();
        assert_eq!(
            latent.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn ablate_writes_five_rows() {
    let (dir, script, config) = setup();
    let out = dir.path().join("abl");
    let (code, stdout, err) = run(&["ablate", s(&script), "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout.lines().count(), 6);
    let table = AblationTable::from_json(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert!(table.rows[0].report.baseline);
    assert!(!table.rows[0].switches.iso_cross && !table.rows[0].switches.iso_self);

    let again = dir.path().join("abl2");
    run(&["ablate", s(&script), "--config", s(&config), "--out", s(&again)]);
    let second = AblationTable::from_json(&std::fs::read_to_string(again.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table, second);
}

#[test]
fn inspect_outputs_and_errors() {
    let (dir, script, config) = setup();
    let out = dir.path().join("run");
    assert_eq!(
        run(&[
            "generate",
            s(&script),
            "--config",
            s(&config),
            "--out",
            s(&out),
            "--dump-attn"
        ])
        .0,
        0
    );

    let (code, stdout, err) = run(&["inspect", s(&out), "--scene", "1", "--character", "Ana"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("n_m:") && stdout.contains("cv:"));
    let target = out.join("inspect/scene_001_0");
    for f in ["map.pgm", "summary.txt"] {
        assert!(target.join(f).is_file(), "{f}");
    }
    assert!(stdout.contains("mask: ok") == target.join("overlay.pgm").is_file());
    assert!(std::fs::read_dir(&target).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("reference_mass")));

    let (code, _, err) = run(&["inspect", s(&out), "--scene", "0", "--character", "Bo"]);
    assert_eq!(code, 1);
    assert!(err.contains("scene 0"), "{err}");

    let manifest_path = out.join("manifest.json");
    let mut manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest.scenes[2].masks.get_mut(&1).unwrap().degenerate = true;
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let alt = dir.path().join("degenerate");
    let (code, stdout, err) = run(&["inspect", s(&out), "--scene", "2", "--character", "1", "--out", s(&alt)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("degenerate"));
    assert!(!alt.join("overlay.pgm").exists() && !alt.join("mask.pgm").exists());

    std::fs::remove_file(out.join("scene_002/map_0.pgm")).unwrap();
    let (code, _, err) = run(&["inspect", s(&out), "--scene", "2", "--character", "Ana"]);
    assert_eq!(code, 1);
    assert!(err.contains("map_0.pgm"), "{err}");
}
