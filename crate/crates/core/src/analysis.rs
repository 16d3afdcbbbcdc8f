//! Campaign statistics over attack records: success rates with Wilson
//! intervals, per-channel damage, which branch the attack touched, how
//! visible the attack is to a z-score monitor, and transfer between models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attacks::{attack_seed, de_attack, AttackMethod, AttackRecord, DEConfig, Objective};
use crate::error::{Error, Result};
use crate::numcore::norm2;
use crate::operators::DifferentiableMap;
use crate::sensitivity::MeanStd;
use crate::synthdata::{BRANCH1_DIM, CHANNELS, CHANNEL_NAMES};
use crate::training::rel_l2_slices;

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: usize, n: usize, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidInput("Wilson interval needs at least one trial".into()));
    }
    if successes > n {
        return Err(Error::InvalidInput(format!("{successes} successes out of {n} trials")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidInput(format!("confidence {confidence} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // The closed form hits the ends only up to rounding.
    let lower = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let upper = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchClass {
    B1Only,
    B2Only,
    Mixed,
}

/// Which branch an effective perturbation touched. Branch 1 holds the
/// first `b1_size` coordinates.
pub fn classify_branch(indices: &[usize], b1_size: usize) -> Result<BranchClass> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("no effective perturbation to classify".into()));
    }
    let in_b1 = indices.iter().filter(|&&i| i < b1_size).count();
    Ok(match in_b1 {
        n if n == indices.len() => BranchClass::B1Only,
        0 => BranchClass::B2Only,
        _ => BranchClass::Mixed,
    })
}

/// Spatial mean of every channel of a flattened `[N x C]` field.
pub fn channel_summary(field: &[f64], channels: usize) -> Vec<f64> {
    let n = field.len() / channels;
    let mut out = vec![0.0; channels];
    for row in field.chunks_exact(channels) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.into_iter().map(|s| s / n as f64).collect()
}

/// Mean and standard deviation of each channel's spatial mean over a set
/// of clean outputs: the reference a z-score monitor would use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl OutputStats {
    pub fn from_outputs(outputs: &[Vec<f64>], channels: usize) -> Result<Self> {
        if outputs.len() < 2 {
            return Err(Error::InvalidInput(
                "output statistics need at least two clean outputs".into(),
            ));
        }
        let summaries: Vec<Vec<f64>> = outputs.iter().map(|f| channel_summary(f, channels)).collect();
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let ms = MeanStd::of(summaries.iter().map(|s| s[c])).expect("non-empty");
            if ms.std == 0.0 {
                return Err(Error::DegenerateStatistic {
                    what: format!("output channel {c} summary"),
                });
            }
            mean.push(ms.mean);
            std.push(ms.std);
        }
        Ok(Self { mean, std })
    }

    pub fn from_map<M: DifferentiableMap + ?Sized>(map: &M, inputs: &[Vec<f64>], channels: usize) -> Result<Self> {
        Self::from_outputs(&map.eval_many(inputs)?, channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthMetrics {
    /// Every channel summary of the attacked output lies strictly within
    /// three standard deviations of the clean mean.
    pub z_pass: bool,
    pub max_abs_z: f64,
    /// Relative output change over relative input change; zero when the
    /// input did not change, absent when the clean input is zero.
    pub amplification: Option<f64>,
    /// Relative error of each output channel against the clean output.
    pub channel_errors: Vec<Option<f64>>,
}

pub fn stealth_from_outputs(
    f_clean: &[f64],
    f_adv: &[f64],
    b_clean: &[f64],
    b_adv: &[f64],
    stats: &OutputStats,
) -> Result<StealthMetrics> {
    let channels = stats.mean.len();
    let summary = channel_summary(f_adv, channels);
    let max_abs_z = summary
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(s, (m, sd))| ((s - m) / sd).abs())
        .fold(0.0, f64::max);
    let out_rel = rel_l2_slices(f_adv, f_clean)?;
    let in_diff: Vec<f64> = b_adv.iter().zip(b_clean).map(|(a, c)| a - c).collect();
    let (bn, dn) = (norm2(b_clean), norm2(&in_diff));
    let amplification = if bn > 0.0 && dn > 0.0 {
        Some(out_rel / (dn / bn))
    } else if bn > 0.0 {
        Some(0.0)
    } else {
        None
    };
    let channel_errors = (0..channels)
        .map(|c| {
            let pick = |f: &[f64]| f.iter().skip(c).step_by(channels).copied().collect::<Vec<f64>>();
            rel_l2_slices(&pick(f_adv), &pick(f_clean)).ok()
        })
        .collect();
    Ok(StealthMetrics {
        z_pass: max_abs_z < 3.0,
        max_abs_z,
        amplification,
        channel_errors,
    })
}

/// Stealth metrics of one record, evaluating the model at the clean and
/// attacked inputs.
pub fn stealth_metrics<M: DifferentiableMap + ?Sized>(
    map: &M,
    record: &AttackRecord,
    b_clean: &[f64],
    stats: &OutputStats,
) -> Result<StealthMetrics> {
    let outs = map.eval_many(&[b_clean.to_vec(), record.b_adv.clone()])?;
    stealth_from_outputs(&outs[0], &outs[1], b_clean, &record.b_adv, stats)
}

/// Fills `stealth` on every valid record whose sample is known.
pub fn annotate<M: DifferentiableMap + ?Sized>(
    map: &M,
    records: &mut [AttackRecord],
    samples: &BTreeMap<usize, Vec<f64>>,
    stats: &OutputStats,
) -> Result<()> {
    records.par_iter_mut().try_for_each(|r| {
        if let (true, Some(b)) = (r.valid, samples.get(&r.sample_id)) {
            r.stealth = Some(stealth_metrics(map, r, b, stats)?);
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFractions {
    pub b1_only: f64,
    pub b2_only: f64,
    pub mixed: f64,
}

/// Statistics of one (model, method, k, tau) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: AttackMethod,
    pub k: usize,
    pub tau: f64,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub mean_error: f64,
    pub median_error: f64,
    pub max_error: f64,
    /// Mean relative error per output channel over annotated records.
    pub channel_mean_error: Option<Vec<f64>>,
    /// Over successful attacks only.
    pub branch: Option<BranchFractions>,
    /// Share of successful attacks passing the z-score monitor.
    pub z_pass_rate: Option<f64>,
    pub mean_amplification: Option<f64>,
    /// Mean successful error over the model's clean test error.
    pub degradation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub rows: Vec<SummaryRow>,
    /// Records dropped because a model evaluation failed.
    pub invalid: usize,
    pub confidence: f64,
    /// How the z-score statistic is formed.
    pub z_statistic: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    MeanStd::of(v).map(|m| m.mean)
}

/// Groups valid records by (model, method, k) and summarizes each group at
/// every threshold. `clean_errors` maps a model label to its clean test
/// error, used for the degradation factor.
pub fn summarize(
    records: &[AttackRecord],
    thresholds: &[f64],
    clean_errors: &BTreeMap<String, f64>,
    confidence: f64,
) -> Result<CampaignSummary> {
    let mut groups: BTreeMap<(String, AttackMethod, usize), Vec<&AttackRecord>> = BTreeMap::new();
    let mut invalid = 0;
    for r in records {
        if r.valid {
            groups.entry((r.model.clone(), r.method, r.k)).or_default().push(r);
        } else {
            invalid += 1;
        }
    }
    let mut rows = Vec::new();
    for ((model, method, k), recs) in groups {
        let errors: Vec<f64> = recs.iter().map(|r| r.fitness).collect();
        let annotated: Vec<&StealthMetrics> = recs.iter().filter_map(|r| r.stealth.as_ref()).collect();
        let channel_mean_error = (!annotated.is_empty()).then(|| {
            (0..CHANNELS)
                .map(|c| {
                    mean_of(
                        annotated
                            .iter()
                            .filter_map(|s| s.channel_errors.get(c).copied().flatten()),
                    )
                    .unwrap_or(f64::NAN)
                })
                .collect()
        });
        for &tau in thresholds {
            let wins: Vec<&&AttackRecord> = recs.iter().filter(|r| r.succeeded(tau)).collect();
            let (lo, hi) = wilson_ci(wins.len(), recs.len(), confidence)?;
            let branch = if wins.is_empty() {
                None
            } else {
                let mut counts = [0usize; 3];
                for r in &wins {
                    match classify_branch(&r.support, BRANCH1_DIM)? {
                        BranchClass::B1Only => counts[0] += 1,
                        BranchClass::B2Only => counts[1] += 1,
                        BranchClass::Mixed => counts[2] += 1,
                    }
                }
                let n = wins.len() as f64;
                Some(BranchFractions {
                    b1_only: counts[0] as f64 / n,
                    b2_only: counts[1] as f64 / n,
                    mixed: counts[2] as f64 / n,
                })
            };
            let win_stealth: Vec<&StealthMetrics> = wins.iter().filter_map(|r| r.stealth.as_ref()).collect();
            let z_pass_rate = (!win_stealth.is_empty())
                .then(|| win_stealth.iter().filter(|s| s.z_pass).count() as f64 / win_stealth.len() as f64);
            let mean_amplification = mean_of(win_stealth.iter().filter_map(|s| s.amplification));
            let mean_win = mean_of(wins.iter().map(|r| r.fitness));
            let degradation = match (mean_win, clean_errors.get(&model)) {
                (Some(m), Some(&c)) if c > 0.0 => Some(m / c),
                _ => None,
            };
            rows.push(SummaryRow {
                model: model.clone(),
                method,
                k,
                tau,
                n: recs.len(),
                successes: wins.len(),
                rate: wins.len() as f64 / recs.len() as f64,
                ci_lower: lo,
                ci_upper: hi,
                mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
                median_error: median(errors.clone()),
                max_error: errors.iter().copied().fold(0.0, f64::max),
                channel_mean_error: channel_mean_error.clone(),
                branch,
                z_pass_rate,
                mean_amplification,
                degradation,
            });
        }
    }
    Ok(CampaignSummary {
        rows,
        invalid,
        confidence,
        z_statistic: "per-channel spatial mean of the output field, |z| < 3 against clean test outputs".into(),
    })
}

/// Fraction of each source model's successful attacks that also succeed
/// on each target model. Entries are absent when a source has no
/// successful attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub tau: f64,
    /// Successful source attacks per row.
    pub counts: Vec<usize>,
    pub rates: Vec<Vec<Option<f64>>>,
}

pub fn transfer_matrix(
    sources: &[(&str, &[AttackRecord])],
    targets: &[(&str, &dyn DifferentiableMap)],
    samples: &BTreeMap<usize, Vec<f64>>,
    tau: f64,
) -> Result<TransferMatrix> {
    let mut counts = Vec::new();
    let mut rates = Vec::new();
    for (_, recs) in sources {
        let wins: Vec<&AttackRecord> = recs.iter().filter(|r| r.succeeded(tau)).collect();
        counts.push(wins.len());
        let mut row = Vec::new();
        for (_, map) in targets {
            if wins.is_empty() {
                row.push(None);
                continue;
            }
            let hits: Vec<Result<bool>> = wins
                .par_iter()
                .map(|r| {
                    let b = samples
                        .get(&r.sample_id)
                        .ok_or_else(|| Error::InvalidInput(format!("sample {} missing", r.sample_id)))?;
                    let adv = crate::attacks::apply(b, &r.indices, &r.values)?;
                    let mut obj = Objective::new(*map, b)?;
                    Ok(obj.score(&adv)? > tau)
                })
                .collect();
            let mut n_hit = 0;
            for h in hits {
                n_hit += h? as usize;
            }
            row.push(Some(n_hit as f64 / wins.len() as f64));
        }
        rates.push(row);
    }
    Ok(TransferMatrix {
        sources: sources.iter().map(|(s, _)| s.to_string()).collect(),
        targets: targets.iter().map(|(t, _)| t.to_string()).collect(),
        tau,
        counts,
        rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSensitivity {
    pub k: usize,
    pub tau: f64,
    pub seeds: Vec<u64>,
    /// Success rate per seed, percent.
    pub rates: Vec<f64>,
    pub mean_errors: Vec<f64>,
    /// Population standard deviation across seeds, percentage points.
    pub rate_std: f64,
    pub mean_error_std: f64,
}

/// Repeats the DE attack on every sample once per seed.
#[allow(clippy::too_many_arguments)]
pub fn seed_sensitivity<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    samples: &[(usize, Vec<f64>)],
    k: usize,
    de: &DEConfig,
    seeds: &[u64],
    tau: f64,
) -> Result<SeedSensitivity> {
    if seeds.len() < 2 {
        return Err(Error::Config("seed sensitivity needs at least two seeds".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut rates = Vec::new();
    let mut mean_errors = Vec::new();
    for &seed in seeds {
        let recs: Vec<Result<AttackRecord>> = samples
            .par_iter()
            .map(|(id, b)| {
                let cfg = DEConfig {
                    seed: attack_seed(seed, AttackMethod::De, *id, k),
                    ..de.clone()
                };
                de_attack(map, model, *id, b, k, &cfg, &[tau], None)
            })
            .collect();
        let recs: Vec<AttackRecord> = recs.into_iter().collect::<Result<_>>()?;
        let n = recs.len() as f64;
        rates.push(100.0 * recs.iter().filter(|r| r.succeeded(tau)).count() as f64 / n);
        mean_errors.push(recs.iter().map(|r| r.fitness).sum::<f64>() / n);
    }
    Ok(SeedSensitivity {
        k,
        tau,
        seeds: seeds.to_vec(),
        rate_std: MeanStd::of(rates.iter().copied()).expect("non-empty").std,
        mean_error_std: MeanStd::of(mean_errors.iter().copied()).expect("non-empty").std,
        rates,
        mean_errors,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format {
        kind: "csv",
        detail: e.to_string(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        kind: "csv",
        detail: e.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the campaign tables as CSV into `dir` and returns their paths.
///
/// - `success_rates.csv`: models by budget, one block per threshold.
/// - `success_ci.csv`: rate, successes, n and Wilson bounds per cell.
/// - `channel_errors.csv`: mean relative error per output channel.
/// - `branch_classes.csv`: branch-class fractions of successful attacks.
/// - `stealth.csv`: z-pass rate, amplification and degradation.
pub fn write_tables(summary: &CampaignSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut ks: Vec<usize> = summary.rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();

    let path = dir.join("success_rates.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["method".to_string(), "tau".into(), "model".into()];
    header.extend(ks.iter().map(|k| format!("k={k}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut blocks: BTreeMap<(AttackMethod, String, String), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in &summary.rows {
        blocks
            .entry((r.method, format!("{:.2}", r.tau), r.model.clone()))
            .or_default()
            .insert(r.k, 100.0 * r.rate);
    }
    for ((method, tau, model), by_k) in &blocks {
        let mut rec = vec![method.tag().to_string(), tau.clone(), model.clone()];
        rec.extend(
            ks.iter()
                .map(|k| by_k.get(k).map(|v| format!("{v:.1}")).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(path);

    let path = dir.join("success_ci.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "method",
        "model",
        "k",
        "tau",
        "n",
        "successes",
        "rate_pct",
        "ci_lower_pct",
        "ci_upper_pct",
        "mean_error",
        "median_error",
        "max_error",
    ])
    .map_err(csv_err)?;
    for r in &summary.rows {
        w.write_record([
            r.method.tag().to_string(),
            r.model.clone(),
            r.k.to_string(),
            format!("{:.2}", r.tau),
            r.n.to_string(),
            r.successes.to_string(),
            format!("{:.1}", 100.0 * r.rate),
            format!("{:.1}", 100.0 * r.ci_lower),
            format!("{:.1}", 100.0 * r.ci_upper),
            format!("{:.6}", r.mean_error),
            format!("{:.6}", r.median_error),
            format!("{:.6}", r.max_error),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(path);

    let path = dir.join("channel_errors.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["method".to_string(), "model".into(), "k".into()];
    header.extend(CHANNEL_NAMES.iter().map(|c| c.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &summary.rows {
        if !seen.insert((r.method, r.model.clone(), r.k)) {
            continue;
        }
        let mut rec = vec![r.method.tag().to_string(), r.model.clone(), r.k.to_string()];
        match &r.channel_mean_error {
            Some(ch) => rec.extend(ch.iter().map(|v| format!("{v:.6}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), CHANNELS)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(path);

    let path = dir.join("branch_classes.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "method",
        "model",
        "k",
        "tau",
        "successes",
        "b1_only_pct",
        "b2_only_pct",
        "mixed_pct",
    ])
    .map_err(csv_err)?;
    for r in &summary.rows {
        let b = r.branch;
        w.write_record([
            r.method.tag().to_string(),
            r.model.clone(),
            r.k.to_string(),
            format!("{:.2}", r.tau),
            r.successes.to_string(),
            fmt_opt(b.map(|b| 100.0 * b.b1_only)),
            fmt_opt(b.map(|b| 100.0 * b.b2_only)),
            fmt_opt(b.map(|b| 100.0 * b.mixed)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(path);

    let path = dir.join("stealth.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "method",
        "model",
        "k",
        "tau",
        "successes",
        "z_pass_pct",
        "mean_amplification",
        "degradation",
    ])
    .map_err(csv_err)?;
    for r in &summary.rows {
        w.write_record([
            r.method.tag().to_string(),
            r.model.clone(),
            r.k.to_string(),
            format!("{:.2}", r.tau),
            r.successes.to_string(),
            fmt_opt(r.z_pass_rate.map(|v| 100.0 * v)),
            fmt_opt(r.mean_amplification),
            fmt_opt(r.degradation),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(path);
    Ok(paths)
}

/// Transfer rates as a source-by-target CSV grid (percent).
pub fn write_transfer_csv(m: &TransferMatrix, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["source".to_string(), "successes".into()];
    header.extend(m.targets.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for ((src, n), row) in m.sources.iter().zip(&m.counts).zip(&m.rates) {
        let mut rec = vec![src.clone(), n.to_string()];
        rec.extend(row.iter().map(|v| fmt_opt(v.map(|x| 100.0 * x))));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
