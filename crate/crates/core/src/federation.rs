//! Client and server logic of the federated round loop.
//!
//! Each round the server broadcasts the trainable parameters as a
//! `GLOBAL_MODEL` message, every client trains locally from a fresh optimizer
//! state and answers with a `CLIENT_UPDATE` carrying its post-training values,
//! and the server aggregates the decoded updates with the configured weights.
//! All messages pass through the binary encoder so byte counts are exact.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, fedavg_weights, fedce_weights, leave_one_out_models, rate_my_lora_weights, simple_avg_weights,
    AggregationMethod, AggregationState,
};
use crate::autodiff::Tape;
use crate::data::{stack_samples, ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::{Model, ModelSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::rng::{derive_seed, permutation};
use crate::wire::{MessageKind, WireMessage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub bandwidth_bytes_per_s: f64,
    pub rtt_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_s: 12.5e6,
            rtt_s: 0.05,
        }
    }
}

/// `rtt + bytes / bandwidth`, in seconds.
pub fn simulate_latency(bytes: usize, link: &LinkModel) -> Result<f64> {
    if !(link.bandwidth_bytes_per_s > 0.0 && link.bandwidth_bytes_per_s.is_finite()) || !(link.rtt_s >= 0.0) {
        return Err(Error::config("link bandwidth must be > 0 and rtt >= 0"));
    }
    Ok(link.rtt_s + bytes as f64 / link.bandwidth_bytes_per_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub local_epochs: usize,
    pub aggregation: AggregationMethod,
    pub seed: u64,
    /// Train clients concurrently; results are identical either way.
    pub parallel_clients: bool,
    pub eval_batch_size: usize,
    pub link: LinkModel,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adamw,
            local_epochs: 1,
            aggregation: AggregationMethod::FedAvg,
            seed: 0,
            parallel_clients: true,
            eval_batch_size: 16,
            link: LinkModel::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        simulate_latency(0, &self.link)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Absent when the split lacks one of the classes.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub params: ParamSet,
    pub n_train_samples: usize,
    pub val_metrics: ValMetrics,
    pub update_vector_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<String>,
    pub weights: Vec<f64>,
    pub val: Vec<ValMetrics>,
    pub train_loss: Vec<f64>,
    pub bytes_down: Vec<usize>,
    pub bytes_up: Vec<usize>,
    /// Slowest client's download + upload time.
    pub latency_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedce_grad: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedce_data: Option<Vec<f64>>,
}

/// Scores, labels and loss of a model on a sample list.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// `logit_DE − logit_CN` per sample.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub loss: f64,
    pub accuracy: f64,
}

impl Evaluation {
    pub fn metrics(&self) -> ValMetrics {
        ValMetrics {
            loss: self.loss,
            accuracy: self.accuracy,
            auc: auc(&self.scores, &self.labels).ok(),
        }
    }
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label as usize).collect()
}

/// Inference over `samples` in batches of `batch_size`.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_samples(&refs, model.spec.dtype)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let logits = model.forward(&mut tape, xv)?;
        let labels = labels_of(&refs);
        let loss = tape.cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).get_f64(0) * chunk.len() as f64;
        let lv = tape.value(logits).to_f64_vec();
        let c = model.spec.head.num_classes;
        for (row, &y) in lv.chunks(c).zip(&labels) {
            scores.push(if c >= 2 { row[1] - row[0] } else { row[0] });
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (pred == y) as usize;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        scores,
        labels: samples.iter().map(|s| s.label).collect(),
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

fn l2_distance(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| {
            x.tensor
                .to_f64_vec()
                .iter()
                .zip(y.tensor.to_f64_vec())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Result of one client's local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    pub mean_train_loss: f64,
}

/// Loads `global` into a private copy of `template`, trains for
/// `local_epochs` over seeded shuffles and reports validation metrics.
pub fn local_train(
    template: &Model,
    client: &ClientDataset,
    client_id: usize,
    global: &ParamSet,
    cfg: &FedConfig,
    round: usize,
) -> Result<LocalOutcome> {
    if client.train.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty training split", client.name)));
    }
    let diverged = |detail: String| Error::Divergence {
        round,
        client: client_id,
        detail,
    };
    let mut model = template.clone();
    model.load_trainable(global)?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let n = client.train.len();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..cfg.local_epochs {
        let stream = (round * cfg.local_epochs + epoch) as u64;
        let order = permutation(n, derive_seed(cfg.seed, &format!("shuffle/{}", client.name), 0, stream));
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &client.train[i]).collect();
            let x = stack_samples(&batch, model.spec.dtype)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let logits = model.forward(&mut tape, xv)?;
            let loss = match tape.cross_entropy(logits, &labels_of(&batch)) {
                Ok(l) => l,
                Err(Error::NonFinite(d)) => return Err(diverged(d)),
                Err(e) => return Err(e),
            };
            let lv = tape.value(loss).get_f64(0);
            let grads = match tape.backward_params(loss) {
                Ok(g) => g,
                Err(Error::NonFinite(d)) => return Err(diverged(d)),
                Err(e) => return Err(e),
            };
            opt.step(&mut model.params, &grads, cfg.lr)?;
            loss_sum += lv;
            steps += 1;
        }
    }
    let params = model.extract_trainable();
    if params.iter().any(|(_, p)| !p.tensor.is_finite()) {
        return Err(diverged("non-finite parameters after local training".into()));
    }
    let val_metrics = if client.val.is_empty() {
        ValMetrics::default()
    } else {
        evaluate(&model, &client.val, cfg.eval_batch_size)?.metrics()
    };
    let update_vector_norm = l2_distance(&params, global);
    Ok(LocalOutcome {
        update: ClientUpdate {
            client_id,
            round,
            params,
            n_train_samples: n,
            val_metrics,
            update_vector_norm,
        },
        mean_train_loss: loss_sum / steps.max(1) as f64,
    })
}

/// Final state of a federation run.
#[derive(Clone, Debug)]
pub struct FederationResult {
    /// Model with the final global trainables loaded.
    pub model: Model,
    pub global: ParamSet,
    pub logs: Vec<RoundLog>,
}

fn flatten_delta(update: &ParamSet, base: &ParamSet) -> Vec<f64> {
    let a = update.flatten_f64();
    let b = base.flatten_f64();
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

/// Runs `cfg.rounds` rounds of broadcast, local training and aggregation.
pub fn run_federation(clients: &[ClientDataset], spec: &ModelSpec, cfg: &FedConfig) -> Result<FederationResult> {
    cfg.validate()?;
    let template = Model::build(spec, cfg.seed)?;
    run_federation_from(clients, template, cfg)
}

/// As [`run_federation`] but starting from an already built model.
pub fn run_federation_from(clients: &[ClientDataset], template: Model, cfg: &FedConfig) -> Result<FederationResult> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("a federation needs at least one client"));
    }
    let n = clients.len();
    let mut global = template.extract_trainable();
    let mut state = AggregationState::new(cfg.aggregation, n)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    let names: Vec<String> = clients.iter().map(|c| c.name.clone()).collect();

    for round in 0..cfg.rounds {
        let down = WireMessage::new(MessageKind::GlobalModel, round as u32, global.clone()).encode()?;
        let received = WireMessage::decode(&down)?.params;

        let train_one = |(i, c): (usize, &ClientDataset)| -> Result<(LocalOutcome, Vec<u8>)> {
            let out = local_train(&template, c, i, &received, cfg, round)?;
            let up = WireMessage::new(MessageKind::ClientUpdate, round as u32, out.update.params.clone()).encode()?;
            Ok((out, up))
        };
        let results: Vec<(LocalOutcome, Vec<u8>)> = if cfg.parallel_clients {
            clients.par_iter().enumerate().map(train_one).collect::<Result<_>>()?
        } else {
            clients.iter().enumerate().map(train_one).collect::<Result<_>>()?
        };

        let mut updates = Vec::with_capacity(n);
        let mut bytes_up = Vec::with_capacity(n);
        let mut val = Vec::with_capacity(n);
        let mut train_loss = Vec::with_capacity(n);
        for (out, up) in &results {
            updates.push(WireMessage::decode(up)?.params);
            bytes_up.push(up.len());
            val.push(out.update.val_metrics);
            train_loss.push(out.mean_train_loss);
        }
        let refs: Vec<&ParamSet> = updates.iter().collect();

        let mut fedce_grad = None;
        let mut fedce_data = None;
        let weights = match cfg.aggregation {
            AggregationMethod::SimpleAvg => simple_avg_weights(n)?,
            AggregationMethod::FedAvg => fedavg_weights(&clients.iter().map(|c| c.train.len()).collect::<Vec<_>>())?,
            AggregationMethod::FedCe if n == 1 => vec![1.0],
            AggregationMethod::FedCe => {
                let deltas: Vec<Vec<f64>> = updates.iter().map(|u| flatten_delta(u, &received)).collect();
                let loo = leave_one_out_models(&refs, &state.weights)?;
                let errors: Vec<f64> = loo
                    .iter()
                    .zip(clients)
                    .map(|(m, c)| {
                        let mut model = template.clone();
                        model.load_trainable(m)?;
                        Ok(evaluate(&model, &c.val, cfg.eval_batch_size)?.loss)
                    })
                    .collect::<Result<_>>()?;
                let r = fedce_weights(&deltas, &errors, &state.weights)?;
                fedce_grad = Some(r.grad);
                fedce_data = Some(r.data);
                r.weights
            }
            AggregationMethod::RateMyLora => {
                let cur: Vec<f64> = val.iter().map(|m| m.accuracy).collect();
                let w = match state.history.last() {
                    None => simple_avg_weights(n)?,
                    Some(prev) => rate_my_lora_weights(prev, &cur)?,
                };
                state.history.push(cur);
                w
            }
        };

        global = aggregate(&refs, &weights)?;
        state.weights = weights.clone();
        state.round = round + 1;

        let bytes_down = vec![down.len(); n];
        let mut latency = 0.0f64;
        for &up in &bytes_up {
            latency = latency.max(simulate_latency(down.len(), &cfg.link)? + simulate_latency(up, &cfg.link)?);
        }
        logs.push(RoundLog {
            round,
            clients: names.clone(),
            weights,
            val,
            train_loss,
            bytes_down,
            bytes_up,
            latency_ms: latency * 1e3,
            fedce_grad,
            fedce_data,
        });
    }

    let mut model = template;
    model.load_trainable(&global)?;
    Ok(FederationResult { model, global, logs })
}

/// Writes one JSON object per round.
pub fn write_round_logs(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for log in logs {
        let line = serde_json::to_string(log).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}
