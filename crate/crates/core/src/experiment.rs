//! Experiment configs, sweep expansion and the run / report / compare drivers
//! behind the command-line tool.
//!
//! A config is TOML; every table rejects unknown keys. The sweep lists
//! (`heads`, `regimes`, `aggregations`) expand to their Cartesian product and
//! each run gets its own output directory and a seed derived from its name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::backbone::{build_encoder, EncoderConfig, FrozenEncoder};
use crate::baselines::{centralized_train, ncc_scores, run_federated_ncc, NccDistance};
use crate::data::{
    builtin_federation, generate_federation, scale_counts, write_federation, ClientDataset, HeterogeneityConfig,
    Manifest, Sample,
};
use crate::error::{Error, Result};
use crate::federation::{evaluate, run_federation, simulate_latency, write_round_logs, FedConfig, LinkModel, RoundLog};
use crate::heads::{HeadConfig, HeadKind};
use crate::metrics::{
    efficiency_csv, emit_reports, read_results_csv, significant, EfficiencyReport, EvalResult, DEFAULT_BOOTSTRAPS,
    EFFICIENCY_HEADER,
};
use crate::model::{InputMode, Model, ModelSpec, Regime};
use crate::optim::OptimizerKind;
use crate::rng::derive_seed;
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Feature files written by `gen-data`; the builtin registry is
    /// synthesised in memory when absent.
    pub manifest: Option<PathBuf>,
    /// Multiplies every builtin split count.
    pub scale: f64,
    pub mode: InputMode,
    pub shift: f64,
    pub separation: f64,
    pub noise: f64,
    pub outlier_client: Option<String>,
    pub outlier_factor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let h = HeterogeneityConfig::default();
        Self {
            manifest: None,
            scale: 1.0,
            mode: InputMode::Features,
            shift: h.shift,
            separation: h.separation,
            noise: h.noise,
            outlier_client: h.outlier_client,
            outlier_factor: h.outlier_factor,
        }
    }
}

impl DataConfig {
    pub fn heterogeneity(&self, seed: u64) -> HeterogeneityConfig {
        HeterogeneityConfig {
            shift: self.shift,
            separation: self.separation,
            noise: self.noise,
            outlier_client: self.outlier_client.clone(),
            outlier_factor: self.outlier_factor,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub heads: Vec<HeadKind>,
    pub regimes: Vec<Regime>,
    pub aggregations: Vec<AggregationMethod>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            heads: vec![HeadKind::ConvS],
            regimes: vec![Regime::ClsOnly],
            aggregations: vec![AggregationMethod::FedAvg],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub local_epochs: usize,
    pub eval_batch_size: usize,
    pub parallel_clients: bool,
    pub dtype: DType,
    pub width_divisor: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let f = FedConfig::default();
        Self {
            rounds: f.rounds,
            batch_size: f.batch_size,
            lr: f.lr,
            optimizer: f.optimizer,
            local_epochs: f.local_epochs,
            eval_batch_size: f.eval_batch_size,
            parallel_clients: f.parallel_clients,
            dtype: DType::F32,
            width_divisor: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bootstraps: usize,
    /// Also run the federated nearest-centroid baseline.
    pub ncc: bool,
    pub ncc_distance: NccDistance,
    /// Also train each head on the pooled data.
    pub centralized: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bootstraps: DEFAULT_BOOTSTRAPS,
            ncc: true,
            ncc_distance: NccDistance::Euclidean,
            centralized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub sweep: SweepConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub link: LinkModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            out_dir: PathBuf::from("results"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            sweep: SweepConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            link: LinkModel::default(),
        }
    }
}

/// One point of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub name: String,
    pub spec: ModelSpec,
    pub fed: FedConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks every field and every sweep point before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::config(format!("invalid experiment name {:?}", self.name)));
        }
        if !(self.data.scale.is_finite() && self.data.scale > 0.0) {
            return Err(Error::config(format!("data.scale must be > 0, got {}", self.data.scale)));
        }
        self.data.heterogeneity(0).validate()?;
        if self.sweep.heads.is_empty() || self.sweep.regimes.is_empty() || self.sweep.aggregations.is_empty() {
            return Err(Error::config("sweep lists must be non-empty"));
        }
        if self.training.width_divisor == 0 {
            return Err(Error::config("training.width_divisor must be >= 1"));
        }
        if self.evaluation.bootstraps == 0 {
            return Err(Error::config("evaluation.bootstraps must be >= 1"));
        }
        let mut names = std::collections::BTreeSet::new();
        for plan in self.plans() {
            plan.spec.validate()?;
            plan.fed.validate()?;
            if !names.insert(plan.name.clone()) {
                return Err(Error::config(format!("duplicate sweep point {}", plan.name)));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data", 0, 0)
    }

    fn head_config(&self, kind: HeadKind) -> HeadConfig {
        HeadConfig {
            in_channels: self.encoder.embed_dim,
            width_divisor: self.training.width_divisor,
            ..HeadConfig::new(kind)
        }
    }

    fn spec(&self, head: HeadKind, regime: Regime) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            head: self.head_config(head),
            regime,
            mode: self.data.mode,
            dtype: self.training.dtype,
        }
    }

    fn fed(&self, aggregation: AggregationMethod, seed: u64) -> FedConfig {
        let t = &self.training;
        FedConfig {
            rounds: t.rounds,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            local_epochs: t.local_epochs,
            aggregation,
            seed,
            parallel_clients: t.parallel_clients,
            eval_batch_size: t.eval_batch_size,
            link: self.link,
        }
    }

    /// Sweep points in `heads × regimes × aggregations` order.
    pub fn plans(&self) -> Vec<RunPlan> {
        let mut out = Vec::new();
        for &head in &self.sweep.heads {
            for regime in &self.sweep.regimes {
                for &agg in &self.sweep.aggregations {
                    let name = format!("{}-{}-{}", head.label(), regime.label(), agg.label());
                    let seed = derive_seed(self.seed, &format!("run/{name}"), 0, 0);
                    out.push(RunPlan {
                        spec: self.spec(head, regime.clone()),
                        fed: self.fed(agg, seed),
                        name,
                    });
                }
            }
        }
        out
    }

    /// Loads the manifest or synthesises the builtin federation.
    pub fn clients(&self) -> Result<Vec<ClientDataset>> {
        let shape = self.spec(HeadKind::Linear, Regime::ClsOnly).sample_shape();
        let shape: [usize; 4] = shape.try_into().expect("4-d sample shape");
        match &self.data.manifest {
            Some(path) => {
                let m = Manifest::read(path)?;
                m.load(path.parent().unwrap_or(Path::new(".")), Some(shape))
            }
            None => {
                let specs = scale_counts(&builtin_federation(), self.data.scale)?;
                generate_federation(&specs, &self.data.heterogeneity(self.data_seed()), self.data.mode, shape)
            }
        }
    }

    fn encoder(&self) -> Result<Option<FrozenEncoder>> {
        match self.data.mode {
            InputMode::Features => Ok(None),
            InputMode::Volumes => build_encoder(&self.encoder, self.training.dtype).map(Some),
        }
    }
}

/// Writes the synthetic federation as feature files plus `manifest.toml`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let mut c = cfg.clone();
    c.data.manifest = None;
    write_federation(dir, &c.clients()?)
}

/// Per-client and pooled (`"All"`) test results; the bootstrap seed depends on the scope.
pub fn score_results(
    clients: &[ClientDataset],
    scores: &[Vec<f64>],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<EvalResult>> {
    let mut out = Vec::with_capacity(clients.len() + 1);
    let mut all_s = Vec::new();
    let mut all_l = Vec::new();
    for (c, s) in clients.iter().zip(scores) {
        let labels: Vec<u8> = c.test.iter().map(|x| x.label).collect();
        out.push(EvalResult::from_scores(&c.name, s, &labels, n_boot, derive_seed(seed, &format!("bootstrap/{}", c.name), 0, 0))?);
        all_s.extend_from_slice(s);
        all_l.extend(labels);
    }
    out.push(EvalResult::from_scores("All", &all_s, &all_l, n_boot, derive_seed(seed, "bootstrap/All", 0, 0))?);
    Ok(out)
}

fn test_scores(model: &Model, clients: &[ClientDataset], batch: usize) -> Result<Vec<Vec<f64>>> {
    clients.iter().map(|c| Ok(evaluate(model, &c.test, batch)?.scores)).collect()
}

/// Outcome of one sweep point or baseline.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub name: String,
    pub results: Vec<EvalResult>,
    pub logs: Vec<RoundLog>,
    pub efficiency: EfficiencyReport,
}

fn write_run(dir: &Path, run: &RunOutcome) -> Result<()> {
    let d = dir.join(&run.name);
    emit_reports(&d, &run.results, &run.logs, std::slice::from_ref(&run.efficiency))?;
    write_round_logs(&d.join("rounds.jsonl"), &run.logs)
}

/// Trains and evaluates one sweep point.
pub fn execute_plan(cfg: &ExperimentConfig, plan: &RunPlan, clients: &[ClientDataset]) -> Result<RunOutcome> {
    let res = run_federation(clients, &plan.spec, &plan.fed)?;
    let scores = test_scores(&res.model, clients, plan.fed.eval_batch_size)?;
    Ok(RunOutcome {
        name: plan.name.clone(),
        results: score_results(clients, &scores, cfg.evaluation.bootstraps, plan.fed.seed)?,
        logs: res.logs,
        efficiency: crate::metrics::efficiency_report(&plan.name, &plan.spec, &cfg.link)?,
    })
}

/// Federated NCC on the same clients.
pub fn execute_ncc(cfg: &ExperimentConfig, clients: &[ClientDataset]) -> Result<RunOutcome> {
    let encoder = cfg.encoder()?;
    let fed = run_federated_ncc(clients, encoder.as_ref())?;
    let scores: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| ncc_scores(&c.test, &fed.centroids, encoder.as_ref(), cfg.evaluation.ncc_distance))
        .collect::<Result<_>>()?;
    let seed = derive_seed(cfg.seed, "run/ncc", 0, 0);
    let up = fed.bytes_up.iter().copied().max().unwrap_or(0);
    Ok(RunOutcome {
        name: "ncc".into(),
        results: score_results(clients, &scores, cfg.evaluation.bootstraps, seed)?,
        logs: Vec::new(),
        efficiency: EfficiencyReport {
            experiment: "ncc".into(),
            trainable_params: 0,
            message_bytes_up: up,
            message_bytes_down: 0,
            latency_ms: 1e3 * simulate_latency(up, &cfg.link)?,
            flops_per_sample: match cfg.data.mode {
                InputMode::Features => 0,
                InputMode::Volumes => cfg.encoder.flops_per_sample(),
            },
        },
    })
}

/// Pooled-data reference for one head and regime.
pub fn execute_centralized(cfg: &ExperimentConfig, plan: &RunPlan, clients: &[ClientDataset]) -> Result<RunOutcome> {
    let name = format!("centralized-{}-{}", plan.spec.head.kind.label(), plan.spec.regime.label());
    let res = centralized_train(clients, &plan.spec, &plan.fed)?;
    let scores = test_scores(&res.model, clients, plan.fed.eval_batch_size)?;
    let mut efficiency = crate::metrics::efficiency_report(&name, &plan.spec, &cfg.link)?;
    efficiency.message_bytes_up = 0;
    efficiency.message_bytes_down = 0;
    efficiency.latency_ms = 0.0;
    Ok(RunOutcome {
        results: score_results(clients, &scores, cfg.evaluation.bootstraps, plan.fed.seed)?,
        logs: Vec::new(),
        efficiency,
        name,
    })
}

/// Runs every sweep point and baseline, writing one directory per run under `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let clients = cfg.clients()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // Recorded relative to the results directory so reruns elsewhere stay byte-identical.
    let recorded = ExperimentConfig {
        out_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    std::fs::write(out.join("config.toml"), recorded.to_toml()?).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let mut outcomes = Vec::new();
    let mut centralized_done = std::collections::BTreeSet::new();
    for plan in cfg.plans() {
        let run = execute_plan(cfg, &plan, &clients)?;
        write_run(out, &run)?;
        outcomes.push(run);
        if cfg.evaluation.centralized {
            let key = (plan.spec.head.kind.label(), plan.spec.regime.label());
            if centralized_done.insert(key) {
                let run = execute_centralized(cfg, &plan, &clients)?;
                write_run(out, &run)?;
                outcomes.push(run);
            }
        }
    }
    if cfg.evaluation.ncc {
        let run = execute_ncc(cfg, &clients)?;
        write_run(out, &run)?;
        outcomes.push(run);
    }
    Ok(outcomes)
}

/// Run directories below `dir` that hold a `results.csv`, sorted by name.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    if dir.join("results.csv").is_file() {
        runs.push(dir.to_path_buf());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join("results.csv").is_file() {
            runs.push(p);
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no results.csv found"),
        ));
    }
    Ok(runs)
}

fn run_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// A pair of runs whose pooled intervals do not overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificantPair {
    pub a: String,
    pub b: String,
    pub scope: String,
}

#[derive(Clone, Debug)]
pub struct Report {
    /// Run name → per-scope results.
    pub runs: BTreeMap<String, Vec<EvalResult>>,
    pub efficiency: Vec<EfficiencyReport>,
    pub significant: Vec<SignificantPair>,
}

fn read_efficiency(path: &Path) -> Result<Vec<EfficiencyReport>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(EFFICIENCY_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(EfficiencyReport {
                experiment: f[0].to_string(),
                trainable_params: f[1].parse().map_err(|_| bad())?,
                message_bytes_up: f[2].parse().map_err(|_| bad())?,
                message_bytes_down: f[3].parse().map_err(|_| bad())?,
                latency_ms: f[4].parse().map_err(|_| bad())?,
                flops_per_sample: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Collects run directories and flags significant pairs per scope.
pub fn build_report(dirs: &[PathBuf]) -> Result<Report> {
    let mut runs = BTreeMap::new();
    let mut efficiency = Vec::new();
    for d in dirs {
        runs.insert(run_name(d), read_results_csv(&d.join("results.csv"))?);
        efficiency.extend(read_efficiency(&d.join("efficiency.csv"))?);
    }
    let mut sig = Vec::new();
    let names: Vec<&String> = runs.keys().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            for ra in &runs[*a] {
                if let Some(rb) = runs[*b].iter().find(|r| r.scope == ra.scope) {
                    if significant(ra, rb) {
                        sig.push(SignificantPair {
                            a: (*a).clone(),
                            b: (*b).clone(),
                            scope: ra.scope.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(Report {
        runs,
        efficiency,
        significant: sig,
    })
}

impl Report {
    /// One row per run, one `auc [lo-hi]` column per scope.
    pub fn summary_csv(&self) -> String {
        let mut scopes: Vec<String> = Vec::new();
        for r in self.runs.values().flatten() {
            if !scopes.contains(&r.scope) {
                scopes.push(r.scope.clone());
            }
        }
        let mut s = format!("run,{}\n", scopes.join(","));
        for (name, results) in &self.runs {
            s += name;
            for scope in &scopes {
                s.push(',');
                if let Some(r) = results.iter().find(|r| &r.scope == scope) {
                    s += &format!("{:.4} [{:.4}-{:.4}]", r.auc, r.ci_low, r.ci_high);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn significance_csv(&self) -> String {
        let mut s = String::from("run_a,run_b,scope\n");
        for p in &self.significant {
            s += &format!("{},{},{}\n", p.a, p.b, p.scope);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let files = [
            ("summary.csv", self.summary_csv()),
            ("efficiency_summary.csv", efficiency_csv(&self.efficiency)),
            ("significance.csv", self.significance_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Aggregates every run below `dir` into summary tables written next to them.
pub fn cmd_report(dir: &Path) -> Result<Report> {
    let report = build_report(&find_runs(dir)?)?;
    report.write(dir)?;
    Ok(report)
}

/// Scope-by-scope comparison of two run directories.
pub fn cmd_compare(a: &Path, b: &Path) -> Result<String> {
    let ra = read_results_csv(&a.join("results.csv"))?;
    let rb = read_results_csv(&b.join("results.csv"))?;
    let mut s = String::from("scope,auc_a,auc_b,delta,significant\n");
    for x in &ra {
        if let Some(y) = rb.iter().find(|y| y.scope == x.scope) {
            s += &format!("{},{},{},{},{}\n", x.scope, x.auc, y.auc, y.auc - x.auc, significant(x, y));
        }
    }
    Ok(s)
}

/// Test samples of every client, in client order.
pub fn pooled_test(clients: &[ClientDataset]) -> Vec<Sample> {
    clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
}
