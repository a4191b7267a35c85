//! Federated nearest-centroid classifier and the centralized reference trainer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenEncoder;
use crate::data::{pool, ClientDataset, Sample, LABEL_CN, LABEL_DE};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FedConfig, FederationResult};
use crate::model::ModelSpec;
use crate::params::ParamSet;
use crate::tensor::{DType, Tensor};
use crate::wire::{MessageKind, WireMessage};

pub const SUM_DE: &str = "sum_DE";
pub const SUM_CN: &str = "sum_CN";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NccDistance {
    #[default]
    Euclidean,
    Cosine,
}

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.comp += if self.sum.abs() >= x.abs() {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-class feature sums and counts, indexed by label.
#[derive(Clone, Debug, PartialEq)]
pub struct NccStats {
    pub sums: [Vec<f64>; 2],
    pub counts: [u64; 2],
}

impl NccStats {
    pub fn zeros(dim: usize) -> Self {
        Self {
            sums: [vec![0.0; dim], vec![0.0; dim]],
            counts: [0, 0],
        }
    }

    pub fn dim(&self) -> usize {
        self.sums[0].len()
    }

    /// `NCC_STATS` message carrying `sum_DE`, `sum_CN` and `[n_DE, n_CN]`.
    pub fn to_message(&self, round: u32) -> Result<WireMessage> {
        let mut params = ParamSet::new();
        let d = self.dim();
        params.insert(SUM_DE, Tensor::from_vec(&[d], self.sums[LABEL_DE as usize].clone())?, false)?;
        params.insert(SUM_CN, Tensor::from_vec(&[d], self.sums[LABEL_CN as usize].clone())?, false)?;
        let mut m = WireMessage::new(MessageKind::NccStats, round, params);
        m.counts = vec![self.counts[LABEL_DE as usize], self.counts[LABEL_CN as usize]];
        Ok(m)
    }

    pub fn from_message(m: &WireMessage) -> Result<Self> {
        if m.kind != MessageKind::NccStats || m.counts.len() != 2 {
            return Err(Error::Wire("expected an NCC_STATS message with two class counts".into()));
        }
        let de = m.params.tensor(SUM_DE)?.to_f64_vec();
        let cn = m.params.tensor(SUM_CN)?.to_f64_vec();
        if de.len() != cn.len() {
            return Err(Error::Wire("class sums differ in length".into()));
        }
        let mut s = NccStats::zeros(de.len());
        s.sums[LABEL_DE as usize] = de;
        s.sums[LABEL_CN as usize] = cn;
        s.counts[LABEL_DE as usize] = m.counts[0];
        s.counts[LABEL_CN as usize] = m.counts[1];
        Ok(s)
    }
}

/// Global-average-pooled `[C]` features of a batch laid out as `[N, C, ...]`.
fn pool_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let shape = t.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let v = t.to_f64_vec();
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let s = &v[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                    s.iter().sum::<f64>() / spatial as f64
                })
                .collect()
        })
        .collect()
}

/// Pooled features `g(x)`; raw volumes go through `encoder` first.
pub fn pooled_features(samples: &[Sample], encoder: Option<&FrozenEncoder>) -> Result<Vec<Vec<f64>>> {
    let dtype = match encoder {
        Some(enc) => enc.params.tensor("pos_embed")?.dtype(),
        None => DType::F64,
    };
    samples
        .par_chunks(16)
        .map(|chunk| {
            let items: Vec<Tensor> = chunk.iter().map(|s| s.materialize(dtype)).collect::<Result<_>>()?;
            let x = Tensor::stack(&items)?;
            Ok(pool_rows(&match encoder {
                Some(enc) => enc.encode(&x)?,
                None => x,
            }))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Stats over precomputed features.
pub fn stats_from_features(features: &[Vec<f64>], labels: &[u8]) -> Result<NccStats> {
    let dim = features.first().map_or(0, Vec::len);
    let mut acc = [vec![Neumaier::default(); dim], vec![Neumaier::default(); dim]];
    let mut counts = [0u64; 2];
    for (z, &y) in features.iter().zip(labels) {
        if y > 1 || z.len() != dim {
            return Err(Error::invalid("NCC stats need binary labels and equal-length features"));
        }
        counts[y as usize] += 1;
        for (a, &v) in acc[y as usize].iter_mut().zip(z) {
            a.add(v);
        }
    }
    let [a0, a1] = acc;
    Ok(NccStats {
        sums: [a0.into_iter().map(Neumaier::value).collect(), a1.into_iter().map(Neumaier::value).collect()],
        counts,
    })
}

/// Class-wise sums of pooled features over the client's training split.
pub fn client_ncc_stats(client: &ClientDataset, encoder: Option<&FrozenEncoder>) -> Result<NccStats> {
    let features = pooled_features(&client.train, encoder)?;
    stats_from_features(&features, &client.labels(crate::data::Split::Train))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub mu: [Vec<f64>; 2],
}

/// `μ_c = Σ_i sum_c^i / Σ_i n_c^i`.
pub fn server_centroids(stats: &[NccStats]) -> Result<Centroids> {
    let dim = stats.first().map_or(0, NccStats::dim);
    if stats.iter().any(|s| s.dim() != dim) {
        return Err(Error::invalid("NCC stats differ in dimension"));
    }
    let mut mu = [Vec::new(), Vec::new()];
    for c in 0..2 {
        let n: u64 = stats.iter().map(|s| s.counts[c]).sum();
        if n == 0 {
            return Err(Error::invalid(format!("class {c} has no samples in any client")));
        }
        mu[c] = (0..dim)
            .map(|k| {
                let mut acc = Neumaier::default();
                for s in stats {
                    acc.add(s.sums[c][k]);
                }
                acc.value() / n as f64
            })
            .collect();
    }
    Ok(Centroids { mu })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `d(z, μ_CN) − d(z, μ_DE)`; positive means closer to the DE centroid.
pub fn ncc_score(z: &[f64], centroids: &Centroids, distance: NccDistance) -> Result<f64> {
    let (de, cn) = (&centroids.mu[LABEL_DE as usize], &centroids.mu[LABEL_CN as usize]);
    if z.len() != de.len() || z.len() != cn.len() {
        return Err(Error::invalid(format!("feature length {} vs centroid length {}", z.len(), de.len())));
    }
    Ok(match distance {
        NccDistance::Euclidean => l2(z, cn) - l2(z, de),
        NccDistance::Cosine => cosine(z, de) - cosine(z, cn),
    })
}

#[derive(Clone, Debug)]
pub struct NccFederation {
    pub centroids: Centroids,
    /// Encoded size of each client's stats message.
    pub bytes_up: Vec<usize>,
}

/// One-shot federated NCC: every client ships its stats through the wire format.
pub fn run_federated_ncc(clients: &[ClientDataset], encoder: Option<&FrozenEncoder>) -> Result<NccFederation> {
    let mut stats = Vec::with_capacity(clients.len());
    let mut bytes_up = Vec::with_capacity(clients.len());
    for c in clients {
        let bytes = client_ncc_stats(c, encoder)?.to_message(0)?.encode()?;
        bytes_up.push(bytes.len());
        stats.push(NccStats::from_message(&WireMessage::decode(&bytes)?)?);
    }
    Ok(NccFederation {
        centroids: server_centroids(&stats)?,
        bytes_up,
    })
}

/// Scores for `samples` against the centroids.
pub fn ncc_scores(
    samples: &[Sample],
    centroids: &Centroids,
    encoder: Option<&FrozenEncoder>,
    distance: NccDistance,
) -> Result<Vec<f64>> {
    pooled_features(samples, encoder)?
        .iter()
        .map(|z| ncc_score(z, centroids, distance))
        .collect()
}

/// Trains on the union of all clients with the local trainer; a one-client federation.
pub fn centralized_train(clients: &[ClientDataset], spec: &ModelSpec, cfg: &FedConfig) -> Result<FederationResult> {
    let pooled = pool(clients, "centralized");
    run_federation(std::slice::from_ref(&pooled), spec, cfg)
}
