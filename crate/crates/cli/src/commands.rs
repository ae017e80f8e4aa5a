use std::path::{Path, PathBuf};

use coupling_core::model::load_checkpoint;
use coupling_core::report::{
    validate_dir, write_adjacency, write_manifest, RunManifest, EMERGENCE_CSV, LOSS_CSV, SWEEP_CSV,
};
use coupling_lab::experiment::{correlation_sweep, emergence_experiment, SWEEP_SUMMARY_JSON};
use coupling_lab::task::generate_task;
use coupling_lab::train::{checkpoint_file_name, train};
use serde_json::json;

use crate::analyze::{analyze, AnalyzeOptions};
use crate::error::{config, CliError, Result};
use crate::kv::KvDoc;
use crate::prompts::read_prompts;
use crate::specs::{
    probes_from, run_from, sweep_runs, task_from, EMERGENCE_KEYS, PROBE_KEYS, RUN_KEYS, SWEEP_KEYS, TASK_KEYS,
};

const TOOL: &str = env!("CARGO_PKG_NAME");
const VERSION: &str = env!("CARGO_PKG_VERSION");

fn manifest(dir: &Path, command: &str, seed: u64, config: serde_json::Value, mut files: Vec<String>) -> Result<()> {
    files.sort();
    files.dedup();
    let m = RunManifest {
        tool: TOOL.to_string(),
        version: VERSION.to_string(),
        command: command.to_string(),
        seed,
        config,
        files,
    };
    write_manifest(dir, &m)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| config(format!("cannot create {}: {e}", dir.display())))
}

/// One spec file can drive every command, so only keys that no command
/// reads are reported.
fn read_spec(path: &Path) -> Result<KvDoc> {
    let doc = KvDoc::read(path)?;
    let all: Vec<&str> = [TASK_KEYS, RUN_KEYS, PROBE_KEYS, SWEEP_KEYS, EMERGENCE_KEYS].concat();
    doc.warn_unknown(&all);
    Ok(doc)
}

pub fn run_analyze(checkpoint: &Path, prompts: &Path, out: &Path, opts: &AnalyzeOptions) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let prompts = read_prompts(prompts)?;
    let analysis = analyze(&model, &prompts, opts)?;
    create_dir(out)?;
    let files = analysis.write(out)?;
    let cfg = json!({
        "checkpoint": checkpoint.display().to_string(),
        "n_prompts": prompts.len(),
        "k": analysis.k,
        "options": opts,
        "model": model.config,
    });
    manifest(out, "analyze", opts.seed, cfg, files)?;
    let means: Vec<f64> = analysis.prompts.iter().filter_map(|a| a.depthwise_mean).collect();
    if !means.is_empty() {
        println!(
            "mean depth-wise coupling (K = {}): {:.4}",
            analysis.k,
            means.iter().sum::<f64>() / means.len() as f64
        );
    }
    Ok(())
}

pub fn run_train(spec: &Path, out: &Path) -> Result<()> {
    let doc = read_spec(spec)?;
    let task = task_from(&doc)?;
    let run = run_from(&doc, &task)?;
    let data = generate_task(&task)?;
    create_dir(out)?;
    let output = train(&run, &data, Some(out))?;
    let mut files: Vec<String> = output
        .checkpoints
        .iter()
        .flat_map(|c| {
            let json = checkpoint_file_name(c.step);
            let blob = json.replace(".json", ".bin");
            [json, blob]
        })
        .collect();
    files.push(LOSS_CSV.file.to_string());
    let cfg = json!({ "spec": doc.to_json(), "task": task, "run": run });
    manifest(out, "train", run.seed, cfg, files)?;
    println!(
        "trained {} steps: final val loss {:.4} (uniform baseline {:.4})",
        run.steps,
        output.final_val_loss,
        task.uniform_baseline()
    );
    Ok(())
}

/// `ckpt-<step>.json` files in `dir`, sorted by step.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| config(format!("cannot read {}: {e}", dir.display())))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| config(e.to_string()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}

pub fn run_emergence(spec: &Path, out: &Path) -> Result<()> {
    let doc = read_spec(spec)?;
    let task = task_from(&doc)?;
    let probes = probes_from(&doc, &task)?;
    create_dir(out)?;
    let mut files = Vec::new();
    let (checkpoints, seed) = match doc.get::<PathBuf>("checkpoint_dir")? {
        Some(dir) => (discover_checkpoints(&dir)?, doc.get_or("seed", 0)?),
        None => {
            let run = run_from(&doc, &task)?;
            let ckpt_dir = out.join("checkpoints");
            train(&run, &generate_task(&task)?, Some(&ckpt_dir))?;
            (discover_checkpoints(&ckpt_dir)?, run.seed)
        }
    };
    let report = emergence_experiment(&checkpoints, &probes)?;
    report.write_csv(out)?;
    files.push(EMERGENCE_CSV.file.to_string());
    if let Some(last) = report.checkpoints.last() {
        write_adjacency(out, &last.adjacency)?;
        files.push(coupling_core::report::ADJACENCY_JSON.to_string());
        files.push(coupling_core::report::ADJACENCY_CSV.file.to_string());
    }
    let cfg = json!({ "spec": doc.to_json(), "task": task, "probes": probes });
    manifest(out, "emergence", seed, cfg, files)?;
    for c in &report.checkpoints {
        println!(
            "step {:>6}: coupling {} lss {}",
            c.step,
            c.depthwise.map_or("NaN".into(), |v| format!("{v:.4}")),
            c.lss.map_or("NaN".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

pub fn run_sweep(spec: &Path, out: &Path) -> Result<()> {
    let doc = read_spec(spec)?;
    let task = task_from(&doc)?;
    let base = run_from(&doc, &task)?;
    let runs = sweep_runs(&doc, &base)?;
    let probes = probes_from(&doc, &task)?;
    let report = correlation_sweep(&runs, &task, &probes)?;
    create_dir(out)?;
    report.write(out)?;
    let files = vec![SWEEP_CSV.file.to_string(), SWEEP_SUMMARY_JSON.to_string()];
    let cfg = json!({ "spec": doc.to_json(), "task": task, "runs": runs });
    manifest(out, "sweep", base.seed, cfg, files)?;
    match report.spearman {
        Some(r) => println!(
            "spearman(coupling, val loss) = {r:.4}: higher coupling {} lower loss",
            if r < 0.0 { "tracks" } else { "does not track" }
        ),
        None => println!("spearman correlation undefined"),
    }
    Ok(())
}

pub fn run_validate(dir: &Path) -> Result<()> {
    let results = validate_dir(dir)?;
    if results.is_empty() {
        return Err(config(format!("no known output files in {}", dir.display())));
    }
    let mut bad = 0;
    for v in &results {
        match &v.result {
            Ok(rows) => println!("ok      {} ({rows} rows)", v.file),
            Err(e) => {
                bad += 1;
                println!("invalid {}: {e}", v.file);
            }
        }
    }
    if bad > 0 {
        return Err(CliError::Invalid(bad));
    }
    Ok(())
}
