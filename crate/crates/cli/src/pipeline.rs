//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from directories written by earlier stages and writes only into its own
//! output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use opstress::analysis::{self, CampaignSummary, OutputStats, TransferMatrix};
use opstress::attacks::{self, AttackMethod, AttackRecord};
use opstress::operators::{Arch, Checkpoint, DifferentiableMap, PreparedOperator};
use opstress::sensitivity::{self, SensitivityProfile, SensitivitySummary};
use opstress::synthdata::{Dataset, CHANNELS};
use opstress::theory::{self, TheoryReport};
use opstress::training::{evaluate_rel_l2, train, TrainReport};
use opstress::{Error, Result};

use crate::config::RunConfig;

pub const SUMMARY_NAME: &str = "summary.json";
pub const THEORY_NAME: &str = "theory_report.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, arch: Arch) -> PathBuf {
    dir.join(format!("{}.ckpt", arch.tag()))
}

pub fn records_path(dir: &Path, method: AttackMethod, model: &str, k: usize) -> PathBuf {
    dir.join(format!("{}_{model}_k{k}.jsonl", method.tag()))
}

pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(cfg.dataset)?;
    ds.save(out)?;
    cfg.snapshot(out)?;
    info!(
        "wrote {} train and {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(ds)
}

/// Trains every configured architecture; writes `<arch>.ckpt` and
/// `<arch>_report.json`.
pub fn train_models(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<TrainReport>> {
    let ds = Dataset::load(data)?;
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for &arch in &cfg.archs {
        let (model, report) = train(arch, &ds, &cfg.model, &cfg.train_for(arch))?;
        info!(
            "{arch}: test rel L2 {:.2}% after {} epochs ({} parameters)",
            100.0 * report.test_rel_l2,
            report.epochs_run,
            report.param_count
        );
        Checkpoint {
            model,
            normalizer: ds.normalizer.clone(),
        }
        .save(&checkpoint_path(out, arch))?;
        write_json(&out.join(format!("{}_report.json", arch.tag())), &report)?;
        reports.push(report);
    }
    cfg.snapshot(out)?;
    Ok(reports)
}

/// A trained model ready for attack, with its clean test error.
pub struct LoadedModel {
    pub label: String,
    pub op: PreparedOperator<f64>,
    pub clean_error: f64,
}

pub fn load_model(ds: &Dataset, path: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.normalizer != ds.normalizer {
        return Err(Error::ModelMismatch(format!(
            "{} was trained on a different dataset",
            path.display()
        )));
    }
    let trunk = ds.trunk_norm();
    let (clean_error, _) = evaluate_rel_l2(&ckpt.model, &ds.standardized_test(), &trunk)?;
    let label = ckpt.model.arch.tag().to_string();
    Ok(LoadedModel {
        label,
        op: PreparedOperator::new(ckpt.model, trunk)?,
        clean_error,
    })
}

pub fn load_models(ds: &Dataset, paths: &[PathBuf]) -> Result<Vec<LoadedModel>> {
    paths.iter().map(|p| load_model(ds, p)).collect()
}

/// Standardized test inputs attacked by the campaign, keyed by test index.
pub fn attack_samples(cfg: &RunConfig, ds: &Dataset) -> Vec<(usize, Vec<f64>)> {
    ds.standardized_test()
        .into_iter()
        .take(cfg.samples)
        .map(|s| s.b)
        .enumerate()
        .collect()
}

/// Runs one attack method on every model and writes one JSON-lines file
/// per `(model, k)`.
pub fn run_attack(
    cfg: &RunConfig,
    method: AttackMethod,
    data: &Path,
    models: &[PathBuf],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = Dataset::load(data)?;
    let samples = attack_samples(cfg, &ds);
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for m in load_models(&ds, models)? {
        let c = &cfg.campaign;
        let records = match method {
            AttackMethod::De => attacks::de_campaign(&m.op, &m.label, &samples, c)?,
            AttackMethod::Random => attacks::random_campaign(
                &m.op,
                &m.label,
                &samples,
                &c.ks,
                cfg.random_trials,
                cfg.random_seed,
                &c.thresholds,
            )?,
            AttackMethod::Pgd => attacks::pgd_campaign(&m.op, &m.label, &samples, &c.ks, &cfg.pgd, &c.thresholds)?,
        };
        let mut ks = c.ks.clone();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let path = records_path(out, method, &m.label, k);
            let mut w = BufWriter::new(fs::File::create(&path)?);
            let subset: Vec<AttackRecord> = records.iter().filter(|r| r.k == k).cloned().collect();
            attacks::write_records(&subset, &mut w)?;
            w.flush()?;
            let wins = subset.iter().filter(|r| r.succeeded(0.3)).count();
            info!("{} {} k={k}: {wins}/{} above 0.3", method.tag(), m.label, subset.len());
            written.push(path);
        }
    }
    cfg.snapshot(out)?;
    Ok(written)
}

/// All records in `*.jsonl` files of `dir`, in file-name order.
pub fn read_record_dir(dir: &Path) -> Result<Vec<AttackRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(attacks::read_records(BufReader::new(fs::File::open(&f)?))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityRow {
    pub model: String,
    pub summary: SensitivitySummary,
}

/// Annotates records with stealth metrics, summarizes them and profiles
/// the Jacobian of every model. Writes `summary.json`, `records.jsonl`
/// (annotated), `sensitivity_<model>.jsonl` and `sensitivity.json`.
pub fn analyze(
    cfg: &RunConfig,
    data: &Path,
    models: &[PathBuf],
    records_dir: &Path,
    out: &Path,
) -> Result<CampaignSummary> {
    let ds = Dataset::load(data)?;
    let loaded = load_models(&ds, models)?;
    let mut records = read_record_dir(records_dir)?;
    let test_inputs: Vec<Vec<f64>> = ds.standardized_test().into_iter().map(|s| s.b).collect();
    let by_id: BTreeMap<usize, Vec<f64>> = test_inputs.iter().cloned().enumerate().collect();
    let samples = attack_samples(cfg, &ds);
    fs::create_dir_all(out)?;
    let mut clean = BTreeMap::new();
    let mut sens = Vec::new();
    for m in &loaded {
        clean.insert(m.label.clone(), m.clean_error);
        let stats = OutputStats::from_map(&m.op, &test_inputs, CHANNELS)?;
        let mut mine: Vec<AttackRecord> = records.iter().filter(|r| r.model == m.label).cloned().collect();
        analysis::annotate(&m.op, &mut mine, &by_id, &stats)?;
        let mut it = mine.into_iter();
        for r in records.iter_mut().filter(|r| r.model == m.label) {
            *r = it.next().expect("same filter");
        }
        let profiles: Vec<SensitivityProfile> =
            sensitivity::profile_samples(&m.op, &samples, cfg.epsilon, cfg.sensitivity)?;
        let mut w = BufWriter::new(fs::File::create(out.join(format!("sensitivity_{}.jsonl", m.label)))?);
        sensitivity::write_jsonl(&profiles, &mut w)?;
        w.flush()?;
        if let Some(summary) = sensitivity::summarize(&profiles) {
            info!(
                "{}: d_eff {:.2} +- {:.2}",
                m.label, summary.d_eff.mean, summary.d_eff.std
            );
            sens.push(SensitivityRow {
                model: m.label.clone(),
                summary,
            });
        }
    }
    let unknown = records.iter().filter(|r| !clean.contains_key(&r.model)).count();
    if unknown > 0 {
        log::warn!("{unknown} records belong to models that were not loaded; they stay unannotated");
    }
    let summary = analysis::summarize(&records, &cfg.campaign.thresholds, &clean, cfg.confidence)?;
    let mut w = BufWriter::new(fs::File::create(out.join("records.jsonl"))?);
    attacks::write_records(&records, &mut w)?;
    w.flush()?;
    write_json(&out.join(SUMMARY_NAME), &summary)?;
    write_json(&out.join("sensitivity.json"), &sens)?;
    cfg.snapshot(out)?;
    Ok(summary)
}

/// Replays each model's successful DE attacks on every model.
pub fn transfer(
    cfg: &RunConfig,
    data: &Path,
    models: &[PathBuf],
    records_dir: &Path,
    out: &Path,
) -> Result<TransferMatrix> {
    let ds = Dataset::load(data)?;
    let loaded = load_models(&ds, models)?;
    let records: Vec<AttackRecord> = read_record_dir(records_dir)?
        .into_iter()
        .filter(|r| r.method == AttackMethod::De)
        .collect();
    let by_model: Vec<(String, Vec<AttackRecord>)> = loaded
        .iter()
        .map(|m| {
            (
                m.label.clone(),
                records.iter().filter(|r| r.model == m.label).cloned().collect(),
            )
        })
        .collect();
    let sources: Vec<(&str, &[AttackRecord])> = by_model.iter().map(|(l, r)| (l.as_str(), r.as_slice())).collect();
    let targets: Vec<(&str, &dyn DifferentiableMap)> = loaded
        .iter()
        .map(|m| (m.label.as_str(), &m.op as &dyn DifferentiableMap))
        .collect();
    let by_id: BTreeMap<usize, Vec<f64>> = ds.standardized_test().into_iter().map(|s| s.b).enumerate().collect();
    let tm = analysis::transfer_matrix(&sources, &targets, &by_id, cfg.transfer_tau)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("transfer.json"), &tm)?;
    analysis::write_transfer_csv(&tm, &out.join("transfer.csv"))?;
    cfg.snapshot(out)?;
    Ok(tm)
}

/// Synthetic theory checks, plus linearization (and the POD ceiling) on
/// any trained models given.
pub fn verify_theory(cfg: &RunConfig, data: Option<&Path>, models: &[PathBuf], out: &Path) -> Result<TheoryReport> {
    let mut report = theory::verify_synthetic(&cfg.theory)?;
    if !models.is_empty() {
        let data = data.ok_or_else(|| Error::Config("model checks need --data".into()))?;
        let ds = Dataset::load(data)?;
        let samples: Vec<Vec<f64>> = attack_samples(cfg, &ds).into_iter().map(|(_, b)| b).collect();
        let tcfg = theory::TheoryConfig {
            epsilon: cfg.epsilon,
            ..cfg.theory.clone()
        };
        for m in load_models(&ds, models)? {
            theory::verify_model(&mut report, &m.label, &m.op, &samples, &tcfg)?;
        }
    }
    for c in &report.checks {
        info!(
            "{:<22} {} trials, worst slack {:+.3e}: {}",
            c.name,
            c.trials,
            c.worst_slack,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    for l in &report.linearization {
        info!("linearization {}: alpha {:.4}", l.model, l.alpha);
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(THEORY_NAME), &report)?;
    cfg.snapshot(out)?;
    Ok(report)
}

/// Renders a campaign summary as CSV tables.
pub fn report(summary: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let summary: CampaignSummary = serde_json::from_reader(BufReader::new(fs::File::open(summary)?))?;
    analysis::write_tables(&summary, out)
}
