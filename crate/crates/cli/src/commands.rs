use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use sal_core::data::{
    load_manifest, make_phantom_dataset, write_dataset, Dataset, PHANTOM_NUM_CLASSES,
};
use sal_core::evaluation::{evaluate_subjects, run_protocol, Method, ResultRow, ResultTable};
use sal_core::model::Checkpoint;
use sal_core::training::{finetune as run_finetune, pretrain as run_pretrain, ExperimentConfig};
use sal_core::training::{Pretrainer, StepRecord};
use sal_core::{Error, Result};

use crate::RunArgs;

pub const WORKERS_ENV: &str = "SAL_NUM_WORKERS";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Resolves the configuration from file, overrides, `--seed` and the
/// worker variable, then writes the frozen snapshot before anything else.
fn prepare(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut overrides = run.overrides.clone();
    if let Some(seed) = run.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        overrides.push(format!("workers={w}"));
    }
    let cfg = match &run.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml_with_overrides("", &overrides)?,
    };
    io(&run.out, fs::create_dir_all(&run.out))?;
    let snap = run.out.join("config.toml");
    io(&snap, fs::write(&snap, cfg.to_toml()))?;
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.data.manifest.as_ref().ok_or_else(|| {
        Error::Config("data.manifest is not set (use --set data.manifest=PATH)".into())
    })?;
    Dataset::load(&load_manifest(path)?)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = BufWriter::new(io(path, File::create(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        io(path, writeln!(f, "{line}"))?;
    }
    io(path, f.flush())
}

fn write_table(out: &Path, stem: &str, table: &ResultTable) -> Result<()> {
    let csv = out.join(format!("{stem}.csv"));
    io(&csv, fs::write(&csv, table.to_csv()))?;
    let json = out.join(format!("{stem}.json"));
    io(&json, fs::write(&json, table.to_json()))
}

pub fn synth(subjects: usize, slices: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    io(out, fs::create_dir_all(out))?;
    let args = serde_json::json!({
        "subjects": subjects, "V": slices, "size": size, "seed": seed,
    });
    let snap = out.join("synth.json");
    io(&snap, fs::write(&snap, args.to_string() + "\n"))?;
    let volumes = make_phantom_dataset(subjects, slices, size, size, seed)?;
    let manifest = write_dataset(out, &volumes, PHANTOM_NUM_CLASSES)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn pretrain(run: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = prepare(run)?;
    let dataset = load_dataset(&cfg)?;
    let logs = run.out.join("logs");
    io(&logs, fs::create_dir_all(&logs))?;
    let log_path = logs.join("pretrain.jsonl");
    let mut log = BufWriter::new(io(&log_path, File::create(&log_path))?);
    let mut write = |r: &StepRecord| -> Result<()> {
        let line = serde_json::to_string(r).expect("serializable record");
        io(&log_path, writeln!(log, "{line}"))
    };
    let mut ckpt = match resume {
        None => {
            let mut failed = None;
            let outcome = run_pretrain(&dataset, &cfg, |r| {
                if failed.is_none() {
                    failed = write(r).err();
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            outcome.checkpoint
        }
        Some(path) => {
            let mut trainer = Pretrainer::resume(&Checkpoint::load(path)?)?;
            trainer.config().validate_for_dataset(&dataset)?;
            let volumes = dataset.unlabeled();
            while trainer.steps_done() < trainer.total_steps() {
                write(&trainer.step(&volumes)?)?;
            }
            trainer.checkpoint()
        }
    };
    io(&log_path, log.flush())?;
    let path = run.out.join("checkpoints").join("encoder.bin");
    ckpt.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn finetune(run: &RunArgs, subjects: &[String], checkpoint: Option<&Path>) -> Result<()> {
    let cfg = prepare(run)?;
    let dataset = load_dataset(&cfg)?;
    let init = checkpoint.map(Checkpoint::load).transpose()?;
    let outcome = run_finetune(&dataset, subjects, &cfg, init.as_ref())?;
    let logs = run.out.join("logs");
    io(&logs, fs::create_dir_all(&logs))?;
    write_jsonl(&logs.join("finetune.jsonl"), &outcome.log)?;
    if let Some(m) = &outcome.manifest {
        let p = run.out.join("transfer.json");
        io(&p, fs::write(&p, serde_json::to_string_pretty(m).expect("serializable")))?;
    }
    let (train_dsc, _) = evaluate_subjects(&outcome.model, &dataset, subjects)?;
    let mut ckpt = Checkpoint::new("finetune", cfg.to_json());
    ckpt.push_module("", &outcome.model);
    ckpt.meta.step = cfg.finetune.iterations;
    let path = run.out.join("checkpoints").join("model.bin");
    ckpt.save(&path)?;
    let summary = serde_json::json!({"train_dsc": train_dsc, "checkpoint": path});
    let p = run.out.join("summary.json");
    io(&p, fs::write(&p, summary.to_string() + "\n"))?;
    println!("{summary}");
    Ok(())
}

pub fn evaluate(run: &RunArgs, checkpoints: &[String], with_random: bool) -> Result<()> {
    let cfg = prepare(run)?;
    let mut loaded = Vec::new();
    for item in checkpoints {
        let (name, path) = item.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--checkpoint {item:?} is not NAME=PATH"))
        })?;
        loaded.push((name.to_string(), Checkpoint::load(Path::new(path))?));
    }
    let dataset = load_dataset(&cfg)?;
    let mut methods = Vec::new();
    if with_random {
        methods.push(Method::random());
    }
    methods.extend(loaded.iter().map(|(n, c)| Method::pretrained(n, c)));
    let table = run_protocol(
        &dataset,
        &methods,
        &cfg.evaluation.ms,
        cfg.evaluation.k,
        cfg.seed,
        &cfg,
    )?;
    write_table(&run.out, "results", &table)?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn sweep(run: &RunArgs, param: &str, values: &[String]) -> Result<()> {
    let base = prepare(run)?;
    let key = format!("loss.{param}");
    // Every grid point is validated before any training starts.
    let mut configs = Vec::with_capacity(values.len());
    let mut rejected = Vec::new();
    for v in values {
        let text = base.to_toml();
        match ExperimentConfig::from_toml_with_overrides(&text, &[format!("{key}={v}")]) {
            Ok(c) => configs.push((format!("{param}={v}"), c)),
            Err(e) => rejected.push(format!("{v}: {e}")),
        }
    }
    if !rejected.is_empty() {
        return Err(Error::Config(format!("invalid {key} grid: {}", rejected.join("; "))));
    }
    let dataset = load_dataset(&base)?;
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut records = Vec::new();
    for (label, cfg) in &configs {
        let ckpt = run_pretrain(&dataset, cfg, |_| {})?.checkpoint;
        let table = run_protocol(
            &dataset,
            &[Method::pretrained(label, &ckpt)],
            &cfg.evaluation.ms,
            cfg.evaluation.k,
            cfg.seed,
            cfg,
        )?;
        rows.extend(table.rows);
        records.extend(table.records);
    }
    let table = ResultTable { rows, records };
    write_table(&run.out, "sweep", &table)?;
    print!("{}", table.to_csv());
    Ok(())
}
