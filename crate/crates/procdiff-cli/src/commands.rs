//! Command implementations. Each command reads verified inputs, runs the
//! library, and writes outputs whose provenance (config and input hashes)
//! makes the experiment DAG reconstructable from manifests alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use procdiff::bundle::ModelBundle;
use procdiff::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use procdiff::corpus::generate_corpus;
use procdiff::error::{Error, Result};
use procdiff::evaluation::{
    self as eval, EvalReport, ForecastMode, ReportProvenance, REPORT_SCHEMA_VERSION,
};
use procdiff::io::{read_corpus_dir, write_corpus_dir, write_jsonl, CorpusDir};
use procdiff::training::{self, TrainLog};
use procdiff::types::Split;

use crate::config::ExperimentConfig;

/// Provenance stub written next to every command's outputs.
#[derive(Debug, Serialize)]
struct RunRecord {
    command: String,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seed: u64,
    generated_at: String,
}

fn now_unix() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into())
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(procdiff::hash::sha256_hex(&std::fs::read(path)?))
}

fn write_run_record(
    out: &Path,
    command: &str,
    config_hash: &str,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> Result<()> {
    let record = RunRecord {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        inputs,
        outputs,
        seed,
        generated_at: now_unix(),
    };
    std::fs::write(out.join("run.json"), serde_json::to_vec_pretty(&record).unwrap())?;
    Ok(())
}

pub fn cmd_gen_corpus(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path, seed)?;
    let corpus_cfg = cfg.corpus_config()?;
    let (records, table) = generate_corpus(&corpus_cfg)?;
    let manifest = write_corpus_dir(out, &records, &table, &corpus_cfg)?;
    let outputs: BTreeMap<String, String> =
        manifest.files.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    write_run_record(out, "gen-corpus", &cfg.hash(), cfg.seed, BTreeMap::new(), outputs)?;
    println!(
        "wrote {} sequences over {} phrases to {}",
        records.len(),
        table.len(),
        out.display()
    );
    for (name, hash) in &manifest.files {
        println!("  {name}  sha256:{hash}");
    }
    Ok(())
}

fn load_inputs(corpus_dir: &Path) -> Result<CorpusDir> {
    read_corpus_dir(corpus_dir)
}

fn write_training_outputs(
    out: &Path,
    bundle: &ModelBundle,
    optimizer: Option<&procdiff::optim::Optimizer>,
    log: &TrainLog,
) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, bundle, optimizer)?;
    write_jsonl(&out.join("log.jsonl"), &log.rows)?;
    write_jsonl(&out.join("curves.jsonl"), &log.curves)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint.ckpt".to_string(), file_hash(&ckpt_path)?);
    outputs.insert("log.jsonl".to_string(), file_hash(&out.join("log.jsonl"))?);
    outputs.insert("curves.jsonl".to_string(), file_hash(&out.join("curves.jsonl"))?);
    Ok(outputs)
}

fn stamp_provenance(bundle: &mut ModelBundle, cfg_hash: &str, corpus: &CorpusDir) -> Result<()> {
    bundle.provenance.config_hash = cfg_hash.to_string();
    bundle.provenance.corpus_hash = corpus.manifest.corpus_hash()?.to_string();
    Ok(())
}

pub fn cmd_pretrain(
    config_path: &Path,
    corpus_dir: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path, seed)?;
    let corpus = load_inputs(corpus_dir)?;
    let cfg_hash = cfg.hash();
    let train_cfg = cfg.train_config()?;

    let outcome = match checkpoint {
        None => training::pretrain(&corpus.records, &corpus.table, &cfg.model_config()?, &train_cfg)?,
        Some(ckpt_path) => {
            let LoadedCheckpoint { bundle, optimizer } = load_checkpoint(ckpt_path)?;
            if bundle.provenance.config_hash != cfg_hash {
                return Err(Error::Integrity(format!(
                    "checkpoint was produced by config {}, current config is {}",
                    bundle.provenance.config_hash, cfg_hash
                )));
            }
            if bundle.provenance.corpus_hash != corpus.manifest.corpus_hash()? {
                return Err(Error::Integrity("checkpoint corpus hash does not match".into()));
            }
            let optimizer = optimizer
                .ok_or_else(|| Error::Integrity("checkpoint has no optimizer state".into()))?;
            training::continue_pretrain(bundle, optimizer, &corpus.records, &corpus.table, &train_cfg)?
        }
    };

    let mut bundle = outcome.bundle;
    stamp_provenance(&mut bundle, &cfg_hash, &corpus)?;
    let outputs = write_training_outputs(out, &bundle, Some(&outcome.optimizer), &outcome.log)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".to_string(), corpus.manifest.corpus_hash()?.to_string());
    if let Some(c) = checkpoint {
        inputs.insert("checkpoint".to_string(), file_hash(c)?);
    }
    write_run_record(out, "pretrain", &cfg_hash, cfg.seed, inputs, outputs)?;
    let last = outcome.log.curves.iter().filter(|c| c.split == "train").last();
    if let Some(row) = last {
        println!("pretrain done: epoch {} mean train loss {:.4}", row.epoch, row.total);
    }
    println!("checkpoint: {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

fn load_bundle_for(corpus: &CorpusDir, checkpoint: &Path) -> Result<(ModelBundle, String)> {
    let loaded = load_checkpoint(checkpoint)?;
    let bundle = loaded.bundle;
    let table_hash = training::table_checksum(&corpus.table);
    if bundle.table_hash != table_hash {
        return Err(Error::Integrity(
            "checkpoint was trained against a different phrase table".into(),
        ));
    }
    if bundle.model.observation_dim != corpus.table.observation_dim()
        || bundle.model.embedding_dim != corpus.table.embedding_dim()
    {
        return Err(Error::Integrity("checkpoint dims incompatible with corpus".into()));
    }
    let hash = file_hash(checkpoint)?;
    Ok((bundle, hash))
}

pub fn cmd_probe(
    config_path: &Path,
    corpus_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path, seed)?;
    let corpus = load_inputs(corpus_dir)?;
    let (mut bundle, ckpt_hash) = load_bundle_for(&corpus, checkpoint)?;
    let labeled: Vec<(procdiff::types::ClipObservation, usize)> = corpus
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.sequence.clips.iter().cloned().zip(r.sequence.phrase_ids.iter().copied()))
        .collect();
    let (head, log) =
        training::fit_linear_probe(&bundle, &corpus.table, &labeled, &cfg.probe_config()?)?;
    bundle.probe = Some(head);
    let cfg_hash = cfg.hash();
    stamp_provenance(&mut bundle, &cfg_hash, &corpus)?;
    let outputs = write_training_outputs(out, &bundle, None, &log)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".to_string(), corpus.manifest.corpus_hash()?.to_string());
    inputs.insert("checkpoint".to_string(), ckpt_hash);
    write_run_record(out, "probe", &cfg_hash, cfg.seed, inputs, outputs)?;
    println!("probe head attached; checkpoint: {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

pub fn cmd_finetune_forecast(
    config_path: &Path,
    corpus_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path, seed)?;
    let corpus = load_inputs(corpus_dir)?;
    let (bundle, ckpt_hash) = load_bundle_for(&corpus, checkpoint)?;
    let (mut tuned, log) =
        training::finetune_forecaster(&bundle, &corpus.records, &corpus.table, &cfg.forecast_config()?)?;
    let cfg_hash = cfg.hash();
    stamp_provenance(&mut tuned, &cfg_hash, &corpus)?;
    let outputs = write_training_outputs(out, &tuned, None, &log)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".to_string(), corpus.manifest.corpus_hash()?.to_string());
    inputs.insert("checkpoint".to_string(), ckpt_hash);
    write_run_record(out, "finetune-forecast", &cfg_hash, cfg.seed, inputs, outputs)?;
    if log.warnings > 0 {
        eprintln!("warning: skipped {} empty-context examples", log.warnings);
    }
    println!("forecast head attached; checkpoint: {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

pub fn cmd_finetune_activity(
    config_path: &Path,
    corpus_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path, seed)?;
    let corpus = load_inputs(corpus_dir)?;
    let (bundle, ckpt_hash) = load_bundle_for(&corpus, checkpoint)?;
    let (mut tuned, log) =
        training::finetune_activity(&bundle, &corpus.records, &cfg.activity_config()?)?;
    let cfg_hash = cfg.hash();
    stamp_provenance(&mut tuned, &cfg_hash, &corpus)?;
    let outputs = write_training_outputs(out, &tuned, None, &log)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".to_string(), corpus.manifest.corpus_hash()?.to_string());
    inputs.insert("checkpoint".to_string(), ckpt_hash);
    write_run_record(out, "finetune-activity", &cfg_hash, cfg.seed, inputs, outputs)?;
    println!("activity readout attached; checkpoint: {}", out.join("checkpoint.ckpt").display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub task: String,
    pub mode: String,
    pub k: usize,
    pub samples: usize,
    pub out: PathBuf,
    pub seed: u64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let corpus = load_inputs(&args.corpus)?;
    let (bundle, ckpt_hash) = load_bundle_for(&corpus, &args.checkpoint)?;
    let split = Split::Val;
    let mode: ForecastMode = match args.mode.as_str() {
        "approximate" => ForecastMode::Approximate,
        "expectation" => ForecastMode::Expectation { samples: args.samples },
        "oracle" => ForecastMode::Oracle { k: args.k },
        other => return Err(Error::invalid_input(format!("unknown mode {other:?}"))),
    };

    let (task_name, mut summary) = match args.task.as_str() {
        "classify" => (
            "classify",
            eval::eval_classification(&bundle, &corpus.table, &corpus.records, split)?,
        ),
        "forecast" => (
            "forecast",
            eval::eval_forecast(&bundle, &corpus.table, &corpus.records, split, mode, args.seed)?,
        ),
        "activity" => ("activity", eval::eval_activity(&bundle, &corpus.records, split)?),
        other => return Err(Error::invalid_input(format!("unknown task {other:?}"))),
    };

    // diversity extras ride along with oracle-mode forecasting
    if args.task == "forecast" && matches!(mode, ForecastMode::Oracle { .. }) {
        let (branching, deterministic) = eval::grammar_prefix_contexts(
            &corpus.config.grammars,
            &corpus.table,
            corpus.config.obs_noise_sigma,
            8,
            args.seed,
        )?;
        if !branching.is_empty() {
            let mut rng = procdiff::rng::derive_rng(args.seed, &[91]);
            let (distinct, coverage) =
                eval::diversity_stats(&bundle, &corpus.table, &branching, args.k, &mut rng)?;
            summary.extras.insert("diversity_mean_distinct".into(), distinct);
            summary.extras.insert("diversity_coverage".into(), coverage);
        }
        if !deterministic.is_empty() {
            let mut rng = procdiff::rng::derive_rng(args.seed, &[92]);
            let share =
                eval::modal_share(&bundle, &corpus.table, &deterministic, args.k, &mut rng)?;
            summary.extras.insert("modal_share".into(), share);
        }
    }

    let mode_name = if args.task == "forecast" { mode.name() } else { "direct" };
    let mut report = EvalReport::from_summary(
        task_name,
        split,
        mode_name,
        &summary,
        ReportProvenance {
            bundle_hash: ckpt_hash,
            corpus_hash: corpus.manifest.corpus_hash()?.to_string(),
            config_hash: bundle.provenance.config_hash.clone(),
            seed: args.seed,
            inference_mode: mode_name.to_string(),
        },
    );
    report.generated_at = Some(now_unix());

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    std::fs::write(
        args.out.join("per_category.csv"),
        procdiff::report::per_category_csv(&report),
    )?;

    println!("task      split  mode          top1    examples");
    println!(
        "{:<9} {:<6} {:<13} {:<7.4} {}",
        report.task, report.split, report.mode, report.top1, report.examples
    );
    for (key, value) in &report.extras {
        println!("  {key} = {value:.4}");
    }
    println!("canonical report hash: {}", report.canonical_hash());
    Ok(())
}

pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<()> {
    if files.is_empty() {
        return Err(Error::invalid_input("need at least one report file"));
    }
    let mut runs: Vec<(String, EvalReport)> = Vec::new();
    for path in files {
        let bytes = std::fs::read(path)?;
        let report: EvalReport = serde_json::from_slice(&bytes)
            .map_err(|e| Error::invalid_config(format!("{}: {e}", path.display())))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::invalid_config(format!(
                "{}: schema version {} != {}",
                path.display(),
                report.schema_version,
                REPORT_SCHEMA_VERSION
            )));
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report")
            .to_string();
        let name = match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            Some(parent) if name == "report" => parent.to_string(),
            _ => name,
        };
        runs.push((name, report));
    }

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.csv"), procdiff::report::comparison_csv(&runs))?;
    std::fs::write(out.join("comparison.svg"), procdiff::report::comparison_svg(&runs))?;
    for (name, report) in &runs {
        std::fs::write(
            out.join(format!("{name}_categories.csv")),
            procdiff::report::per_category_csv(report),
        )?;
        std::fs::write(
            out.join(format!("{name}_categories.svg")),
            procdiff::report::per_category_svg(report),
        )?;
    }
    println!("wrote comparison over {} runs to {}", runs.len(), out.display());
    Ok(())
}
