use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use isostory::bank::ReferenceBank;
use isostory::io::{decode_latent, encode_latent, Pgm};
use isostory::llm::{plan_with_llm, HttpEndpoint, DEFAULT_TEMPLATE};
use isostory::metrics::{ablation_run, consistency_report, DEFAULT_GRID};
use isostory::pipeline::{Pipeline, PipelineConfig, SceneResult};
use isostory::plan::{parse_script, validate_plan, StoryPlan};

use crate::config::{PlannerMode, RunConfigFile};
use crate::error::CliError;
use crate::manifest::{BankSummary, Manifest, MaskSummary, SceneSummary, TraceFile};
use crate::{read_text, write_file, Command, RunFlags};

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Plan {
            script,
            llm,
            config,
            out: plan_out,
        } => cmd_plan(
            script.as_deref(),
            llm.as_deref(),
            config.as_deref(),
            plan_out.as_deref(),
            out,
        ),
        Command::Generate { plan, flags } => cmd_generate(&plan, &flags, out).map(|_| 0),
        Command::Ablate { plan, flags } => cmd_ablate(&plan, &flags, out).map(|_| 0),
        Command::Inspect {
            run,
            scene,
            character,
            out: inspect_out,
        } => cmd_inspect(&run, scene, &character, inspect_out.as_deref(), out).map(|_| 0),
    }
}

/// Writes the plan and prints diagnostics; exit code 0 only for a clean plan.
pub fn cmd_plan(
    script: Option<&Path>,
    storyline: Option<&str>,
    config: Option<&Path>,
    plan_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let cfg = RunConfigFile::load(config)?;
    let plan = match (script, storyline) {
        (Some(path), _) => parse_script(&read_text(path)?)?,
        (None, Some(story)) => {
            let template = match &cfg.planner.template {
                Some(p) => read_text(p)?,
                None => DEFAULT_TEMPLATE.to_string(),
            };
            let endpoint = HttpEndpoint::from_env(
                cfg.planner.endpoint.clone(),
                Duration::from_secs(cfg.planner.timeout_secs),
            )?;
            plan_with_llm(story, &endpoint, &template)?
        }
        (None, None) => {
            let hint = match cfg.planner.mode {
                PlannerMode::Llm => "planner mode is llm: pass --llm <storyline>",
                PlannerMode::Script => "pass --script <path> or --llm <storyline>",
            };
            return Err(CliError::Usage(hint.into()));
        }
    };
    let target = plan_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("plan.json"));
    write_file(&target, plan.to_json()?)?;
    let diagnostics = validate_plan(&plan);
    for d in &diagnostics {
        let _ = writeln!(out, "diagnostic: {d}");
    }
    let _ = writeln!(
        out,
        "plan: {} characters, {} scenes -> {}",
        plan.characters.len(),
        plan.scenes.len(),
        target.display()
    );
    Ok(if diagnostics.is_empty() { 0 } else { 1 })
}

/// Reads a plan JSON file (`.json`) or a story script and checks it.
pub fn load_plan(path: &Path) -> Result<StoryPlan, CliError> {
    let text = read_text(path)?;
    let plan = if path.extension().is_some_and(|e| e == "json") {
        StoryPlan::from_json(&text)?
    } else {
        parse_script(&text)?
    };
    let diagnostics = validate_plan(&plan);
    if !diagnostics.is_empty() {
        let lines: Vec<String> = diagnostics.iter().map(|d| d.to_string()).collect();
        return Err(CliError::Domain(format!(
            "invalid plan {}:\n{}",
            path.display(),
            lines.join("\n")
        )));
    }
    Ok(plan)
}

fn resolve(flags: &RunFlags) -> Result<(PipelineConfig, PathBuf), CliError> {
    let mut file = RunConfigFile::load(flags.config.as_deref())?;
    if let Some(seed) = flags.seed {
        file.pipeline.seed = seed;
    }
    if let Some(lambda) = flags.lambda {
        file.pipeline.lambda = lambda;
    }
    if flags.dump_attn {
        file.output.dump_attn = true;
    }
    let dir = flags.out.clone().unwrap_or_else(|| file.output.directory.clone());
    Ok((file.pipeline_config()?, dir))
}

fn prepare_run_dir(dir: &Path) -> Result<(), CliError> {
    if dir.join("manifest.json").is_file() {
        std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    } else if dir.is_dir() && dir.read_dir().map_err(|e| CliError::io(dir, e))?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} is not empty and is not a previous run directory",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn scene_dir(scene: usize) -> String {
    format!("scene_{scene:03}")
}

fn write_scene(
    dir: &Path,
    r: &SceneResult,
    config: &PipelineConfig,
    plan: &StoryPlan,
) -> Result<SceneSummary, CliError> {
    let name = scene_dir(r.scene);
    let sdir = dir.join(&name);
    write_file(&sdir.join("latent.bin"), encode_latent(&r.latent))?;
    for (id, map) in &r.maps {
        write_file(
            &sdir.join(format!("map_{id}.pgm")),
            Pgm::from_map(map, config.h, config.w)?.encode(),
        )?;
    }
    for (id, m) in &r.masks {
        if !m.degenerate {
            write_file(
                &sdir.join(format!("mask_{id}.pgm")),
                Pgm::from_bits(&m.bits, m.h, m.w)?.encode(),
            )?;
        }
    }
    let mut traces = Vec::new();
    for t in &r.traces {
        let stem = format!("attn/step_{:02}_block_{}", t.step, t.block);
        write_file(
            &sdir.join(format!("{stem}_softmax.bin")),
            encode_latent(&t.softmax_weights),
        )?;
        write_file(&sdir.join(format!("{stem}_weights.bin")), encode_latent(&t.weights))?;
        let pgm = Pgm::from_map(t.weights.values(), t.weights.rows(), t.weights.cols())?;
        write_file(&sdir.join(format!("{stem}_weights.pgm")), pgm.encode())?;
        for m in &t.masks {
            let bits = Pgm::from_bits(&m.bits, m.h, m.w)?;
            write_file(&sdir.join(format!("{stem}_mask_{}.pgm", m.character)), bits.encode())?;
        }
        traces.push(TraceFile {
            step: t.step,
            block: t.block,
            file: format!("{name}/{stem}"),
            layout: t.layout.clone(),
            masks: t.masks.iter().map(|m| m.character).collect(),
        });
    }
    let spec = &plan.scenes[r.scene];
    Ok(SceneSummary {
        scene: r.scene,
        directory: name,
        present: spec.present.iter().copied().collect(),
        new: spec.new.iter().copied().collect(),
        old: spec.old.iter().copied().collect(),
        masks: r
            .masks
            .iter()
            .map(|(&id, m)| {
                (
                    id,
                    MaskSummary {
                        popcount: m.popcount(),
                        cv: m.cv,
                        degenerate: m.degenerate,
                    },
                )
            })
            .collect(),
        isolated_steps: r.isolated_steps,
        stored: r.stored.iter().map(|s| (s.character, s.block, s.n)).collect(),
        diagnostics: r.diagnostics.clone(),
        traces,
    })
}

/// Runs the story and writes the run directory; returns its path.
pub fn cmd_generate(plan_path: &Path, flags: &RunFlags, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let plan = load_plan(plan_path)?;
    let (config, dir) = resolve(flags)?;
    let pipeline = Pipeline::new(config.clone())?;
    let (results, bank) = pipeline.run_story(&plan)?;
    let report = consistency_report(&results, &plan, &config)?;

    prepare_run_dir(&dir)?;
    let scenes = results
        .iter()
        .map(|r| write_scene(&dir, r, &config, &plan))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        baseline: report.baseline,
        characters: plan.characters.iter().map(|c| (c.id, c.name.clone())).collect(),
        config,
        scenes,
        bank: bank_summary(&bank),
    };
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(isostory::Error::from)?,
    )?;
    write_file(&dir.join("plan.json"), plan.to_json()?)?;
    write_file(&dir.join("bank.json"), bank.to_json()?)?;
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(isostory::Error::from)?,
    )?;
    let text = report.to_text();
    write_file(&dir.join("report.txt"), &text)?;
    let _ = write!(out, "{text}");
    let _ = writeln!(out, "run directory: {}", dir.display());
    Ok(dir)
}

fn bank_summary(bank: &ReferenceBank) -> Vec<BankSummary> {
    bank.entries()
        .map(|e| BankSummary {
            character: e.character,
            block: e.block,
            n: e.n,
            source_scene: e.source_scene,
        })
        .collect()
}

/// Runs the fixed ablation grid and writes `ablation.json` and `ablation.txt`.
pub fn cmd_ablate(plan_path: &Path, flags: &RunFlags, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let plan = load_plan(plan_path)?;
    let (mut config, dir) = resolve(flags)?;
    config.trace_attention = false;
    let table = ablation_run(&plan, &config, &DEFAULT_GRID)?;
    let json = dir.join("ablation.json");
    write_file(&json, table.to_json()?)?;
    let text = table.to_text();
    write_file(&dir.join("ablation.txt"), &text)?;
    let _ = write!(out, "{text}");
    Ok(json)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|_| CliError::Missing(format!("missing artifact {}", path.display())))
}

/// Writes map, mask, overlay and attention visualizations for one character
/// of one scene and prints its mask summary.
pub fn cmd_inspect(
    run: &Path,
    scene: usize,
    character: &str,
    inspect_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<PathBuf, CliError> {
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&run.join("manifest.json"))?)
        .map_err(|e| CliError::Domain(format!("unreadable manifest: {e}")))?;
    let summary = manifest
        .scene(scene)
        .ok_or_else(|| CliError::Domain(format!("run has no scene {scene}")))?;
    let (id, name) = manifest
        .characters
        .iter()
        .find(|(id, name)| name == character || id.to_string() == character)
        .cloned()
        .ok_or_else(|| CliError::Domain(format!("unknown character `{character}`")))?;
    if !summary.present.contains(&id) {
        return Err(CliError::Domain(format!(
            "character {name} is not present in scene {scene}"
        )));
    }
    let mask = summary
        .masks
        .get(&id)
        .ok_or_else(|| CliError::Missing(format!("scene {scene} has no mask record for {name}")))?;
    let (h, w) = (manifest.config.h, manifest.config.w);
    let sdir = run.join(&summary.directory);
    let target = inspect_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("inspect").join(format!("{}_{id}", summary.directory)));

    let map = Pgm::decode(&read_bytes(&sdir.join(format!("map_{id}.pgm")))?)?;
    write_file(&target.join("map.pgm"), map.encode())?;
    let mut lines = vec![
        format!("scene {scene} character {name} (id {id})"),
        format!("n_m: {}", mask.popcount),
        format!("cv: {:.6}", mask.cv),
    ];
    if mask.degenerate {
        lines.push("mask: degenerate (no overlay written)".into());
    } else {
        let bits = Pgm::decode(&read_bytes(&sdir.join(format!("mask_{id}.pgm")))?)?;
        write_file(&target.join("mask.pgm"), bits.encode())?;
        let overlay = Pgm {
            pixels: map
                .pixels
                .iter()
                .zip(&bits.pixels)
                .map(|(&m, &b)| if b > 0 { m } else { m / 4 })
                .collect(),
            ..map.clone()
        };
        write_file(&target.join("overlay.pgm"), overlay.encode())?;
        lines.push("mask: ok".into());
    }

    let mut written = 0;
    for t in &summary.traces {
        let Some(span) = t.layout.span_of(id) else { continue };
        let weights = decode_latent(&read_bytes(&run.join(format!("{}_weights.bin", t.file)))?)?;
        let mass: Vec<f32> = (0..weights.rows())
            .map(|r| {
                weights.row(r)[span.start..span.start + span.len]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let pgm = Pgm::from_map(&mass, h, w)?;
        write_file(
            &target.join(format!("reference_mass_step_{:02}_block_{}.pgm", t.step, t.block)),
            pgm.encode(),
        )?;
        written += 1;
    }
    lines.push(format!("attention views: {written}"));
    let text = lines.join("\n") + "\n";
    write_file(&target.join("summary.txt"), &text)?;
    let _ = write!(out, "{text}");
    Ok(target)
}
