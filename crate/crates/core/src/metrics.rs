//! AUC, percentile bootstrap intervals, CI-overlap significance and report files.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{simulate_latency, LinkModel, RoundLog};
use crate::model::{Model, ModelSpec};
use crate::rng::{derive_seed, rng_from_seed};
use crate::wire::encoded_len;

pub const DEFAULT_BOOTSTRAPS: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Mann-Whitney AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
///
/// Ties are resolved on exact integer counts, so the result is the single
/// rounding of `(2·wins + ties) / (2·n⁺·n⁻)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut twice_u) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal as scores.
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                pos += 1
            } else {
                neg += 1
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the AUC.
///
/// Resample `b` draws from its own stream `derive_seed(seed, "bootstrap", 0, b)`
/// and is redrawn until it contains both classes.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    auc(scores, labels)?;
    if n_boot == 0 {
        return Err(Error::config("n_boot must be >= 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level must be in (0, 1), got {level}")));
    }
    let n = scores.len();
    let mut stats: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from_seed(derive_seed(seed, "bootstrap", 0, b as u64));
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            loop {
                for k in 0..n {
                    let j = rng.random_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                if let Ok(a) = auc(&s, &l) {
                    return a;
                }
            }
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&stats, alpha), quantile(&stats, 1.0 - alpha)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Client name or `"All"`.
    pub scope: String,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
}

impl EvalResult {
    pub fn from_scores(scope: &str, scores: &[f64], labels: &[u8], n_boot: usize, seed: u64) -> Result<Self> {
        let point = auc(scores, labels)?;
        let (ci_low, ci_high) = bootstrap_ci(scores, labels, n_boot, DEFAULT_LEVEL, seed)?;
        Ok(Self {
            scope: scope.to_string(),
            auc: point,
            ci_low,
            ci_high,
            n_samples: scores.len(),
        })
    }
}

/// Closed-interval overlap test: significant iff the CIs are disjoint.
pub fn significant(a: &EvalResult, b: &EvalResult) -> bool {
    a.ci_high < b.ci_low || b.ci_high < a.ci_low
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub experiment: String,
    pub trainable_params: usize,
    /// Per client, per round.
    pub message_bytes_up: usize,
    pub message_bytes_down: usize,
    pub latency_ms: f64,
    pub flops_per_sample: u64,
}

pub fn efficiency_report(experiment: &str, spec: &ModelSpec, link: &LinkModel) -> Result<EfficiencyReport> {
    let model = Model::build(spec, 0)?;
    let trainable = model.extract_trainable();
    let bytes = encoded_len(&trainable, None);
    debug_assert_eq!(trainable.numel(), spec.trainable_count()?);
    Ok(EfficiencyReport {
        experiment: experiment.to_string(),
        trainable_params: trainable.numel(),
        message_bytes_up: bytes,
        message_bytes_down: bytes,
        latency_ms: 1e3 * (simulate_latency(bytes, link)? * 2.0),
        flops_per_sample: spec.flops_per_sample(),
    })
}

pub const RESULTS_HEADER: &str = "scope,auc,ci_low,ci_high,n";
pub const EFFICIENCY_HEADER: &str =
    "experiment,trainable_params,message_bytes_up,message_bytes_down,latency_ms,flops_per_sample";

pub fn results_csv(results: &[EvalResult]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in results {
        s += &format!("{},{},{},{},{}\n", r.scope, r.auc, r.ci_low, r.ci_high, r.n_samples);
    }
    s
}

pub fn efficiency_csv(rows: &[EfficiencyReport]) -> String {
    let mut s = format!("{EFFICIENCY_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.experiment, r.trainable_params, r.message_bytes_up, r.message_bytes_down, r.latency_ms, r.flops_per_sample
        );
    }
    s
}

#[derive(Serialize)]
struct WeightRecord<'a> {
    round: usize,
    client: &'a str,
    weight: f64,
}

/// One `{round, client, weight}` object per line.
pub fn weights_jsonl(logs: &[RoundLog]) -> String {
    let mut s = String::new();
    for log in logs {
        for (client, &weight) in log.clients.iter().zip(&log.weights) {
            let rec = WeightRecord {
                round: log.round,
                client,
                weight,
            };
            s += &serde_json::to_string(&rec).expect("plain record");
            s.push('\n');
        }
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `weights.jsonl` and `efficiency.csv` into `dir`.
pub fn emit_reports(dir: &Path, results: &[EvalResult], logs: &[RoundLog], efficiency: &[EfficiencyReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("results.csv"), &results_csv(results))?;
    write_file(&dir.join("weights.jsonl"), &weights_jsonl(logs))?;
    write_file(&dir.join("efficiency.csv"), &efficiency_csv(efficiency))
}

/// Parses a file written by [`results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EvalResult {
                scope: f[0].to_string(),
                auc: num(f[1])?,
                ci_low: num(f[2])?,
                ci_high: num(f[3])?,
                n_samples: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
