//! Cohort selection, layer-wise attention, and server parameter updates.
//!
//! Attention scores one agent per layer by the p-norm distance between the
//! server's layer and the agent's uploaded layer, then softmaxes the raw
//! distances across the cohort. The attentive server update steps against
//! the attention-weighted residuals with step size epsilon and adds an
//! optional differential-privacy perturbation scaled by beta. Plain
//! federated averaging is kept alongside as the baseline aggregator.

use crate::error::{Error, Result};
use crate::params::{gaussian_like, layer_norm_diff, ParamSet};
use crate::rng::{site, Streams};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type AgentId = usize;

/// Uniform-without-replacement cohort selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Participating fraction C in (0, 1].
    pub fraction: f64,
    /// Total number of agents K.
    pub total_agents: usize,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "selection fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.total_agents == 0 {
            return Err(Error::Domain("selection needs at least one agent".into()));
        }
        Ok(())
    }

    /// Cohort size `max(ceil(C * K), 1)`.
    pub fn cohort_size(&self) -> usize {
        ((self.fraction * self.total_agents as f64).ceil() as usize).max(1)
    }
}

/// Draw the round's cohort, returned sorted.
pub fn select_agents(policy: &SelectionPolicy, rng: &mut ChaCha12Rng) -> Result<Vec<AgentId>> {
    policy.validate()?;
    let m = policy.cohort_size().min(policy.total_agents);
    let mut ids = rand::seq::index::sample(rng, policy.total_agents, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-layer, per-agent attention weights. Each layer row is a distribution
/// over the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    agent_ids: Vec<AgentId>,
    layer_ids: Vec<String>,
    /// alpha[layer][agent position]
    alpha: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    /// Build from explicit weights; `alpha[layer][agent position]`.
    pub fn new(
        agent_ids: Vec<AgentId>,
        layer_ids: Vec<String>,
        alpha: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if alpha.len() != layer_ids.len() {
            return Err(Error::Structural(format!(
                "{} weight rows for {} layers",
                alpha.len(),
                layer_ids.len()
            )));
        }
        let matrix = AttentionMatrix { agent_ids, layer_ids, alpha };
        matrix.validate()?;
        Ok(matrix)
    }

    /// Equal weight for every agent in every layer.
    pub fn uniform(agent_ids: Vec<AgentId>, layer_ids: Vec<String>) -> Result<Self> {
        if agent_ids.is_empty() {
            return Err(Error::Domain("uniform attention needs at least one agent".into()));
        }
        let row = vec![1.0 / agent_ids.len() as f64; agent_ids.len()];
        let alpha = vec![row; layer_ids.len()];
        Self::new(agent_ids, layer_ids, alpha)
    }

    pub fn agent_ids(&self) -> &[AgentId] {
        &self.agent_ids
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn alpha(&self, layer: usize, agent_pos: usize) -> f64 {
        self.alpha[layer][agent_pos]
    }

    pub fn layer_row(&self, layer: usize) -> &[f64] {
        &self.alpha[layer]
    }

    /// Every layer row must be a distribution. Weights are nonnegative
    /// rather than strictly positive: a score gap beyond ~745 nats
    /// legitimately underflows the softmax to zero.
    pub fn validate(&self) -> Result<()> {
        for (l, row) in self.alpha.iter().enumerate() {
            if row.len() != self.agent_ids.len() {
                return Err(Error::Structural(format!(
                    "attention layer {l} has {} entries for {} agents",
                    row.len(),
                    self.agent_ids.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "attention layer {:?} sums to {sum}",
                    self.layer_ids[l]
                )));
            }
            if row.iter().any(|&a| !(a >= 0.0)) {
                return Err(Error::Numeric(format!(
                    "attention layer {:?} holds a negative or non-finite weight",
                    self.layer_ids[l]
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax; max is subtracted before exponentiation.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Layer-wise attention over the cohort: softmax across agents of the raw
/// p-norm distances between server and uploaded layers. Farther uploads
/// receive more weight; `compute_attention_with` can negate the scores to
/// flip that direction.
pub fn compute_attention(
    server: &ParamSet,
    clients: &BTreeMap<AgentId, ParamSet>,
    p: f64,
) -> Result<AttentionMatrix> {
    compute_attention_with(server, clients, p, false)
}

pub fn compute_attention_with(
    server: &ParamSet,
    clients: &BTreeMap<AgentId, ParamSet>,
    p: f64,
    negate_scores: bool,
) -> Result<AttentionMatrix> {
    if clients.is_empty() {
        return Err(Error::Domain("attention needs at least one client".into()));
    }
    let agent_ids: Vec<AgentId> = clients.keys().copied().collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(agent_ids.len()); server.num_layers()];
    for params in clients.values() {
        let norms = layer_norm_diff(server, params, p)?;
        for (l, n) in norms.into_iter().enumerate() {
            let s = if negate_scores { -n } else { n };
            scores[l].push(s);
        }
    }
    let alpha: Vec<Vec<f64>> = scores.iter().map(|row| softmax(row)).collect();
    let matrix = AttentionMatrix { agent_ids, layer_ids: server.layer_ids(), alpha };
    matrix.validate()?;
    Ok(matrix)
}

/// Knobs of the attentive server update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    /// Server step size epsilon.
    #[serde(default = "default_stepsize")]
    pub stepsize: f64,
    /// Magnitude beta of the privacy perturbation; zero disables it exactly.
    #[serde(default = "default_dp_weight")]
    pub dp_weight: f64,
    /// Standard deviation sigma of the perturbation draws.
    #[serde(default = "default_dp_sigma")]
    pub dp_sigma: f64,
    /// Norm order p used for attention scores and impact distances.
    #[serde(default = "default_norm_order")]
    pub norm_order: f64,
}

fn default_stepsize() -> f64 {
    1.2
}
fn default_dp_weight() -> f64 {
    0.001
}
fn default_dp_sigma() -> f64 {
    1.0
}
fn default_norm_order() -> f64 {
    2.0
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            stepsize: default_stepsize(),
            dp_weight: default_dp_weight(),
            dp_sigma: default_dp_sigma(),
            norm_order: default_norm_order(),
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize > 0.0) || !self.stepsize.is_finite() {
            return Err(Error::Domain(format!(
                "stepsize must be a finite positive real, got {}",
                self.stepsize
            )));
        }
        if !(self.dp_weight >= 0.0) || !self.dp_weight.is_finite() {
            return Err(Error::Domain(format!(
                "dp_weight must be a finite real >= 0, got {}",
                self.dp_weight
            )));
        }
        if !(self.dp_sigma >= 0.0) || !self.dp_sigma.is_finite() {
            return Err(Error::Domain(format!(
                "dp_sigma must be a finite real >= 0, got {}",
                self.dp_sigma
            )));
        }
        if !(self.norm_order >= 1.0) || !self.norm_order.is_finite() {
            return Err(Error::Domain(format!(
                "norm_order must be a finite real >= 1, got {}",
                self.norm_order
            )));
        }
        Ok(())
    }
}

/// Attentive server update. Per layer l the server moves to
/// `w - eps * sum_k alpha_k * (w - w_k + beta * noise_k)`, with `noise_k`
/// drawn per agent from the round's dp stream. `beta = 0` skips the draws
/// entirely so the output matches the noiseless update bit for bit.
pub fn attention_aggregate(
    server: &ParamSet,
    clients: &BTreeMap<AgentId, ParamSet>,
    attn: &AttentionMatrix,
    cfg: &AggregationConfig,
    streams: &Streams,
    round: u64,
) -> Result<ParamSet> {
    cfg.validate()?;
    let cohort: Vec<AgentId> = clients.keys().copied().collect();
    if cohort != attn.agent_ids() {
        return Err(Error::Structural(
            "attention matrix does not cover exactly the client cohort".into(),
        ));
    }
    if attn.layer_ids() != server.layer_ids() {
        return Err(Error::Structural(
            "attention matrix layers do not match the server parameters".into(),
        ));
    }
    for params in clients.values() {
        server.ensure_congruent(params)?;
    }

    let with_noise = cfg.dp_weight > 0.0 && cfg.dp_sigma > 0.0;
    let noise: Vec<Option<ParamSet>> = if with_noise {
        cohort
            .iter()
            .map(|&k| {
                let mut rng = streams.stream(site::DP, round, k as u64);
                gaussian_like(server, cfg.dp_sigma, &mut rng).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; cohort.len()]
    };

    let mut out_layers = Vec::with_capacity(server.num_layers());
    for (l, layer) in server.layers().iter().enumerate() {
        let w = layer.values();
        let mut values = w.to_vec();
        for (pos, &k) in cohort.iter().enumerate() {
            let coeff = cfg.stepsize * attn.alpha(l, pos);
            let cv = clients[&k].layer(l).values();
            match &noise[pos] {
                Some(nv) => {
                    let nl = nv.layer(l).values();
                    for j in 0..values.len() {
                        values[j] -= coeff * (w[j] - cv[j] + cfg.dp_weight * nl[j]);
                    }
                }
                None => {
                    for j in 0..values.len() {
                        values[j] -= coeff * (w[j] - cv[j]);
                    }
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "layer {:?} became non-finite during aggregation",
                layer.id()
            )));
        }
        out_layers.push((layer.id().to_string(), layer.shape().to_vec(), values));
    }
    ParamSet::new(out_layers)
}

/// Unweighted federated averaging: the elementwise mean of the cohort.
pub fn fedavg_aggregate(clients: &BTreeMap<AgentId, ParamSet>) -> Result<ParamSet> {
    let weights: BTreeMap<AgentId, f64> = clients.keys().map(|&k| (k, 1.0)).collect();
    fedavg_aggregate_weighted(clients, &weights)
}

/// Weighted federated averaging with nonnegative weights, normalized to sum
/// one. Used for shard-size weighting.
pub fn fedavg_aggregate_weighted(
    clients: &BTreeMap<AgentId, ParamSet>,
    weights: &BTreeMap<AgentId, f64>,
) -> Result<ParamSet> {
    let mut iter = clients.values();
    let Some(first) = iter.next() else {
        return Err(Error::Domain("averaging needs at least one client".into()));
    };
    for params in clients.values() {
        first.ensure_congruent(params)?;
    }
    let mut total = 0.0;
    for k in clients.keys() {
        let w = weights
            .get(k)
            .copied()
            .ok_or_else(|| Error::Structural(format!("no weight supplied for agent {k}")))?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Domain(format!("weight for agent {k} must be a finite real >= 0")));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Domain("weights must not all be zero".into()));
    }
    let mut layers = Vec::with_capacity(first.num_layers());
    for (l, layer) in first.layers().iter().enumerate() {
        let mut values = vec![0.0; layer.len()];
        for (k, params) in clients {
            let w = weights[k] / total;
            for (v, &c) in values.iter_mut().zip(params.layer(l).values()) {
                *v += w * c;
            }
        }
        layers.push((layer.id().to_string(), layer.shape().to_vec(), values));
    }
    ParamSet::new(layers)
}
