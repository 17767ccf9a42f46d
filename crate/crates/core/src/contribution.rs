//! Impact ledger, contribution shares, and Shapley estimators.
//!
//! While training runs, every round folds a per-agent impact term into a
//! discounted running total. The term for a selected agent is, per layer,
//! `eps * alpha * (ln(upload distance + 1) / ln(server move + 1 + delta) +
//! beta * nu)`, averaged across layers weighted by parameter count; the
//! running total is `round term + gamma * previous`. Unselected agents carry
//! their total over bit for bit. Contribution shares are the min-max scaled,
//! softmaxed totals.
//!
//! For validation the module also carries a characteristic-function Shapley
//! oracle: the utility of an agent subset is the held-out metric of a replay
//! that re-aggregates only that subset's recorded updates with renormalized
//! attention. Exact enumeration covers small cohorts; a permutation-sampling
//! Monte-Carlo estimator covers the rest.

use crate::aggregation::{
    attention_aggregate, compute_attention_with, fedavg_aggregate, fedavg_aggregate_weighted,
    AgentId, AggregationConfig, AttentionMatrix,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{predict_distribution, ModelSpec};
use crate::params::{layer_norm_diff, ParamSet};
use crate::rng::{site, Streams};
use crate::scenario::Dataset;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Guard added inside the denominator log so a motionless server round
/// divides by ~1e-12 instead of zero; normal denominators are unchanged at
/// double precision.
pub const DENOM_GUARD: f64 = 1e-12;

/// Largest cohort `shapley_exact` will enumerate by default.
pub const DEFAULT_EXACT_CAP: usize = 12;

/// One round's bookkeeping inside the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRound {
    pub round: u64,
    /// Selection flag per agent.
    pub selected: Vec<bool>,
    /// Raw per-layer impact terms for the selected agents.
    pub layer_terms: BTreeMap<AgentId, Vec<f64>>,
    /// Parameter-count weighted round term per agent; zero for unselected.
    pub round_terms: Vec<f64>,
    /// Discounted running impact after this round.
    pub impact: Vec<f64>,
}

/// Per-agent impact history across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactLedger {
    num_agents: usize,
    rounds: Vec<LedgerRound>,
}

impl ImpactLedger {
    pub fn new(num_agents: usize) -> Self {
        ImpactLedger { num_agents, rounds: Vec::new() }
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn rounds(&self) -> &[LedgerRound] {
        &self.rounds
    }

    /// Impact vector after the latest recorded round; zeros before round one.
    pub fn latest_impact(&self) -> Vec<f64> {
        self.rounds.last().map(|r| r.impact.clone()).unwrap_or_else(|| vec![0.0; self.num_agents])
    }

    pub fn round_entry(&self, round: u64) -> Option<&LedgerRound> {
        self.rounds.iter().find(|r| r.round == round)
    }

    /// Fold one aggregation round into the ledger.
    ///
    /// `clients` holds exactly the selected agents' uploads; `attn` must
    /// cover the same cohort. `noise_site` picks the stream family for the
    /// impact perturbation draws.
    #[allow(clippy::too_many_arguments)]
    pub fn record_round(
        &mut self,
        round: u64,
        server_before: &ParamSet,
        server_after: &ParamSet,
        clients: &BTreeMap<AgentId, ParamSet>,
        attn: &AttentionMatrix,
        cfg: &AggregationConfig,
        gamma: f64,
        streams: &Streams,
        noise_site: &str,
    ) -> Result<()> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Domain(format!("forgetting factor must lie in (0, 1), got {gamma}")));
        }
        cfg.validate()?;
        let cohort: Vec<AgentId> = clients.keys().copied().collect();
        if cohort != attn.agent_ids() {
            return Err(Error::Structural(
                "attention matrix does not cover exactly the client cohort".into(),
            ));
        }
        if let Some(&bad) = cohort.iter().find(|&&k| k >= self.num_agents) {
            return Err(Error::Structural(format!(
                "agent {bad} outside the ledger's {} agents",
                self.num_agents
            )));
        }

        let prev = self.latest_impact();
        let layer_counts: Vec<f64> =
            server_before.layers().iter().map(|l| l.len() as f64).collect();
        let total_count: f64 = layer_counts.iter().sum();

        // Denominator per layer: ln(server move + 1 + guard), shared by the
        // whole cohort.
        let server_move = layer_norm_diff(server_after, server_before, cfg.norm_order)?;
        let denoms: Vec<f64> = server_move.iter().map(|d| (d + 1.0 + DENOM_GUARD).ln()).collect();

        let mut selected = vec![false; self.num_agents];
        let mut round_terms = vec![0.0; self.num_agents];
        let mut layer_terms = BTreeMap::new();
        let with_noise = cfg.dp_weight > 0.0 && cfg.dp_sigma > 0.0;

        for (pos, &k) in cohort.iter().enumerate() {
            selected[k] = true;
            let upload_dist = layer_norm_diff(server_before, &clients[&k], cfg.norm_order)?;
            let mut rng = streams.stream(noise_site, round, k as u64);
            let mut terms = Vec::with_capacity(denoms.len());
            let mut weighted = 0.0;
            for (l, (&s, &denom)) in upload_dist.iter().zip(&denoms).enumerate() {
                let ratio = (s + 1.0).ln() / denom;
                let perturb = if with_noise {
                    let nu: f64 = cfg.dp_sigma * rng.sample::<f64, _>(StandardNormal);
                    cfg.dp_weight * nu
                } else {
                    0.0
                };
                let term = cfg.stepsize * attn.alpha(l, pos) * (ratio + perturb);
                if !term.is_finite() {
                    return Err(Error::Numeric(format!(
                        "impact term for agent {k} layer {:?} is not finite",
                        server_before.layer(l).id()
                    )));
                }
                weighted += layer_counts[l] * term;
                terms.push(term);
            }
            round_terms[k] = weighted / total_count;
            layer_terms.insert(k, terms);
        }

        // Selected agents discount and add; the rest carry over bitwise.
        let impact: Vec<f64> = (0..self.num_agents)
            .map(|k| if selected[k] { round_terms[k] + gamma * prev[k] } else { prev[k] })
            .collect();

        self.rounds.push(LedgerRound { round, selected, layer_terms, round_terms, impact });
        Ok(())
    }

    /// Record a round in which contribution bookkeeping was skipped: every
    /// agent carries its impact forward unchanged.
    pub fn carry_round(&mut self, round: u64, cohort: &[AgentId]) -> Result<()> {
        let mut selected = vec![false; self.num_agents];
        for &k in cohort {
            if k >= self.num_agents {
                return Err(Error::Structural(format!(
                    "agent {k} outside the ledger's {} agents",
                    self.num_agents
                )));
            }
            selected[k] = true;
        }
        let impact = self.latest_impact();
        self.rounds.push(LedgerRound {
            round,
            selected,
            layer_terms: BTreeMap::new(),
            round_terms: vec![0.0; self.num_agents],
            impact,
        });
        Ok(())
    }

    /// Contribution shares after the given recorded round.
    pub fn contributions(&self, round: u64) -> Result<ContributionVector> {
        let entry = self
            .round_entry(round)
            .ok_or_else(|| Error::Domain(format!("round {round} is not in the ledger")))?;
        ContributionVector::from_impacts(&entry.impact)
    }
}

/// Normalized contribution shares: a strictly positive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionVector {
    values: Vec<f64>,
}

impl ContributionVector {
    /// Min-max scale then softmax. All-equal impacts (including a single
    /// agent) degenerate to the uniform distribution.
    pub fn from_impacts(impacts: &[f64]) -> Result<ContributionVector> {
        if impacts.is_empty() {
            return Err(Error::Domain("cannot normalize an empty impact vector".into()));
        }
        if let Some(pos) = impacts.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("impact for agent {pos} is not finite")));
        }
        Ok(ContributionVector { values: normalize_shares(impacts) })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sum within 1e-9 of one, all entries strictly positive.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("contribution shares sum to {sum}")));
        }
        if self.values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Numeric("contribution shares must be strictly positive".into()));
        }
        Ok(())
    }
}

/// The shared normalization pipeline: min-max to [0, 1], then softmax.
/// Degenerate inputs (all equal) return the uniform distribution.
pub fn normalize_shares(raw: &[f64]) -> Vec<f64> {
    let n = raw.len();
    if n == 1 {
        return vec![1.0];
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![1.0 / n as f64; n];
    }
    let scaled: Vec<f64> = raw.iter().map(|v| (v - min) / (max - min)).collect();
    crate::aggregation::softmax(&scaled)
}

/// Memoizing wrapper around a subset utility function, with an evaluation
/// counter. Safe to share across threads.
pub struct CharacteristicFn {
    evaluator: Evaluator,
    cache: Mutex<HashMap<Vec<AgentId>, f64>>,
    evaluations: AtomicUsize,
}

type Evaluator = Box<dyn Fn(&[AgentId]) -> Result<f64> + Send + Sync>;

impl CharacteristicFn {
    pub fn new(evaluator: impl Fn(&[AgentId]) -> Result<f64> + Send + Sync + 'static) -> Self {
        CharacteristicFn {
            evaluator: Box::new(evaluator),
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    /// Utility of a subset; order and duplicates are irrelevant. Repeated
    /// subsets hit the cache and do not re-invoke the evaluator.
    pub fn value(&self, subset: &[AgentId]) -> Result<f64> {
        let mut key = subset.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let v = (self.evaluator)(&key)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("utility of subset {key:?} is not finite")));
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Number of distinct evaluator invocations so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

fn check_distinct(agents: &[AgentId]) -> Result<()> {
    let mut sorted = agents.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Domain("agent list holds duplicates".into()));
    }
    Ok(())
}

/// Exact Shapley values by subset enumeration, one entry per agent in input
/// order. Refuses cohorts above `cap` agents; use [`shapley_mc`] there.
pub fn shapley_exact_capped(
    chi: &CharacteristicFn,
    agents: &[AgentId],
    cap: usize,
) -> Result<Vec<f64>> {
    let n = agents.len();
    if n == 0 {
        return Err(Error::Domain("shapley needs at least one agent".into()));
    }
    check_distinct(agents)?;
    if n > cap {
        return Err(Error::Budget(format!(
            "exact shapley enumerates 2^{n} subsets, above the cap of {cap} agents; \
             use the monte-carlo estimator instead"
        )));
    }

    // factorials up to 12! stay exact in f64
    let mut fact = vec![1.0; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }

    let members = |mask: u64| -> Vec<AgentId> {
        (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| agents[i]).collect()
    };

    let mut phi = vec![0.0; n];
    for mask in 0u64..(1 << n) {
        let q = mask.count_ones() as usize;
        if q == n {
            continue;
        }
        let without = chi.value(&members(mask))?;
        let weight = fact[q] * fact[n - q - 1] / fact[n];
        for (i, phi_i) in phi.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                continue;
            }
            let with = chi.value(&members(mask | (1 << i)))?;
            *phi_i += weight * (with - without);
        }
    }
    Ok(phi)
}

pub fn shapley_exact(chi: &CharacteristicFn, agents: &[AgentId]) -> Result<Vec<f64>> {
    shapley_exact_capped(chi, agents, DEFAULT_EXACT_CAP)
}

/// Permutation-sampling Monte-Carlo Shapley estimate. Each iteration draws
/// one uniform permutation and credits every agent its marginal over the
/// prefix before it, so one permutation serves the whole cohort.
pub fn shapley_mc(
    chi: &CharacteristicFn,
    agents: &[AgentId],
    iterations: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let n = agents.len();
    if n == 0 {
        return Err(Error::Domain("shapley needs at least one agent".into()));
    }
    if iterations == 0 {
        return Err(Error::Domain("monte-carlo shapley needs at least one iteration".into()));
    }
    check_distinct(agents)?;
    let index_of: HashMap<AgentId, usize> =
        agents.iter().enumerate().map(|(i, &a)| (a, i)).collect();

    let mut acc = vec![0.0; n];
    let mut perm: Vec<AgentId> = agents.to_vec();
    for _ in 0..iterations {
        perm.shuffle(rng);
        let mut prefix: Vec<AgentId> = Vec::with_capacity(n);
        let mut prev = chi.value(&prefix)?;
        for &agent in &perm {
            prefix.push(agent);
            let cur = chi.value(&prefix)?;
            acc[index_of[&agent]] += cur - prev;
            prev = cur;
        }
    }
    Ok(acc.into_iter().map(|v| v / iterations as f64).collect())
}

/// Which server update rule a recorded run used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Attention,
    Fedavg,
}

/// One round of a recorded run: the cohort's uploaded parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRound {
    pub round: u64,
    pub updates: BTreeMap<AgentId, ParamSet>,
}

/// Everything needed to replay a run's aggregation against any agent subset:
/// initial parameters, per-round uploads, the aggregation settings, and the
/// clean eval split. Client training never reruns during replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub model: ModelSpec,
    pub initial_params: ParamSet,
    pub aggregation: AggregationConfig,
    pub aggregator: AggregatorKind,
    pub negate_scores: bool,
    /// Shard-size weights for weighted averaging runs; `None` for uniform.
    pub fedavg_weights: Option<BTreeMap<AgentId, f64>>,
    pub master_seed: u64,
    pub eval: Dataset,
    pub rounds: Vec<TraceRound>,
}

impl RunTrace {
    /// Replay the run keeping only `subset`'s uploads. Rounds in which no
    /// subset member was selected leave the server untouched. Attention is
    /// recomputed over the surviving cohort, so weights renormalize.
    pub fn replay(&self, subset: &[AgentId]) -> Result<ParamSet> {
        let streams = Streams::new(self.master_seed);
        let mut server = self.initial_params.clone();
        for round in &self.rounds {
            let clients: BTreeMap<AgentId, ParamSet> = round
                .updates
                .iter()
                .filter(|(k, _)| subset.contains(k))
                .map(|(&k, v)| (k, v.clone()))
                .collect();
            if clients.is_empty() {
                continue;
            }
            server = match self.aggregator {
                AggregatorKind::Attention => {
                    let attn = compute_attention_with(
                        &server,
                        &clients,
                        self.aggregation.norm_order,
                        self.negate_scores,
                    )?;
                    attention_aggregate(
                        &server,
                        &clients,
                        &attn,
                        &self.aggregation,
                        &streams,
                        round.round,
                    )?
                }
                AggregatorKind::Fedavg => match &self.fedavg_weights {
                    Some(w) => fedavg_aggregate_weighted(&clients, w)?,
                    None => fedavg_aggregate(&clients)?,
                },
            };
        }
        Ok(server)
    }

    /// Held-out metric of a parameter set: accuracy for classifiers,
    /// negative log2 perplexity for next-token models. Higher is better.
    pub fn metric(&self, params: &ParamSet) -> Result<f64> {
        let batch = self.eval.full_batch()?;
        let probs = predict_distribution(&self.model, params, &batch)?;
        match self.eval {
            Dataset::Classification { .. } => metrics::accuracy(&probs, self.eval.targets()),
            Dataset::NextToken { .. } => {
                Ok(-metrics::perplexity(&probs, self.eval.targets())?.log2())
            }
        }
    }
}

/// Characteristic function over a recorded run: utility of a subset is the
/// held-out metric after replaying only that subset's updates.
pub fn make_federated_characteristic(trace: RunTrace) -> CharacteristicFn {
    let trace = Arc::new(trace);
    CharacteristicFn::new(move |subset| {
        let params = trace.replay(subset)?;
        trace.metric(&params)
    })
}

/// Monte-Carlo permutation stream for [`shapley_mc`], derived from a
/// dedicated seed so estimates are reproducible.
pub fn shapley_stream(seed: u64) -> ChaCha12Rng {
    Streams::new(seed).stream(site::SHAPLEY, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::compute_attention;
    use rand::Rng;

    fn streams() -> Streams {
        Streams::new(777)
    }

    fn ps(values: &[&[f64]]) -> ParamSet {
        ParamSet::new(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("l{i}"), vec![v.len()], v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalize_hand_value() {
        // impacts (1, 2, 3) scale to (0, 0.5, 1); softmax of that is
        // (1, e^0.5, e) / (1 + e^0.5 + e), frozen below to 12 places
        let con = normalize_shares(&[1.0, 2.0, 3.0]);
        let expect = [0.186323723226, 0.307195885718, 0.506480391056];
        for (a, b) in con.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{con:?}");
        }
        assert!((con.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_degenerate_and_singleton() {
        assert_eq!(normalize_shares(&[4.2, 4.2, 4.2]), vec![1.0 / 3.0; 3]);
        assert_eq!(normalize_shares(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(normalize_shares(&[7.0]), vec![1.0]);
    }

    #[test]
    fn normalize_preserves_order_and_bounds_spread() {
        let raw = [0.3, -1.0, 2.5, 0.9, 0.2];
        let con = normalize_shares(&raw);
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].partial_cmp(&raw[b]).unwrap());
        for w in order.windows(2) {
            assert!(con[w[0]] < con[w[1]]);
        }
        let max = con.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = con.iter().cloned().fold(f64::INFINITY, f64::min);
        // min-max scaling caps the softmax argument range at 1
        assert!(max / min <= std::f64::consts::E + 1e-12);
    }

    #[test]
    fn single_layer_impact_hand_value() {
        // One layer, eps = 1, alpha = 1, beta = 0, both distances e - 1,
        // gamma = 0.7 on a previous impact of 1: the new impact is
        // 1/1 + 0.7 = 1.7 up to the denominator guard.
        let e = std::f64::consts::E;
        let before = ps(&[&[0.0]]);
        let after = ps(&[&[e - 1.0]]);
        let mut clients = BTreeMap::new();
        clients.insert(0usize, ps(&[&[e - 1.0]]));
        let attn = compute_attention(&before, &clients, 2.0).unwrap();
        let cfg = AggregationConfig {
            stepsize: 1.0,
            dp_weight: 0.0,
            ..Default::default()
        };
        let mut ledger = ImpactLedger::new(1);
        // seed the previous impact at 1.0 via a synthetic first round
        ledger.rounds.push(LedgerRound {
            round: 1,
            selected: vec![true],
            layer_terms: BTreeMap::new(),
            round_terms: vec![1.0],
            impact: vec![1.0],
        });
        ledger
            .record_round(2, &before, &after, &clients, &attn, &cfg, 0.7, &streams(), site::IMPACT)
            .unwrap();
        let imp = ledger.latest_impact();
        assert!((imp[0] - 1.7).abs() < 1e-9, "impact {imp:?}");
    }

    #[test]
    fn unselected_agents_carry_over_bitwise() {
        let before = ps(&[&[0.0, 0.0]]);
        let after = ps(&[&[0.5, 0.1]]);
        let mut clients = BTreeMap::new();
        clients.insert(0usize, ps(&[&[1.0, 0.3]]));
        clients.insert(2usize, ps(&[&[-0.4, 0.8]]));
        let attn = compute_attention(&before, &clients, 2.0).unwrap();
        let cfg = AggregationConfig::default();
        let mut ledger = ImpactLedger::new(4);
        ledger
            .record_round(1, &before, &after, &clients, &attn, &cfg, 0.7, &streams(), site::IMPACT)
            .unwrap();
        let first = ledger.latest_impact();
        let mut clients2 = BTreeMap::new();
        clients2.insert(1usize, ps(&[&[0.2, 0.2]]));
        let attn2 = compute_attention(&before, &clients2, 2.0).unwrap();
        ledger
            .record_round(2, &before, &after, &clients2, &attn2, &cfg, 0.7, &streams(), site::IMPACT)
            .unwrap();
        let second = ledger.latest_impact();
        assert_eq!(first[0].to_bits(), second[0].to_bits());
        assert_eq!(first[2].to_bits(), second[2].to_bits());
        assert_eq!(first[3].to_bits(), second[3].to_bits());
        assert_ne!(first[1].to_bits(), second[1].to_bits());
    }

    #[test]
    fn initial_impact_is_zero_and_gamma_validated() {
        let ledger = ImpactLedger::new(3);
        assert_eq!(ledger.latest_impact(), vec![0.0; 3]);
        let before = ps(&[&[0.0]]);
        let after = ps(&[&[0.1]]);
        let mut clients = BTreeMap::new();
        clients.insert(0usize, ps(&[&[0.1]]));
        let attn = compute_attention(&before, &clients, 2.0).unwrap();
        let cfg = AggregationConfig::default();
        for gamma in [0.0, 1.0, -0.3, f64::NAN] {
            let mut ledger = ImpactLedger::new(1);
            let err = ledger
                .record_round(1, &before, &after, &clients, &attn, &cfg, gamma, &streams(), site::IMPACT)
                .unwrap_err();
            assert!(matches!(err, Error::Domain(_)), "gamma {gamma}");
        }
    }

    #[test]
    fn motionless_server_round_stays_finite() {
        let before = ps(&[&[0.5, 0.5]]);
        let mut clients = BTreeMap::new();
        clients.insert(0usize, ps(&[&[0.7, 0.5]]));
        let attn = compute_attention(&before, &clients, 2.0).unwrap();
        let cfg = AggregationConfig { dp_weight: 0.0, ..Default::default() };
        let mut ledger = ImpactLedger::new(1);
        ledger
            .record_round(1, &before, &before, &clients, &attn, &cfg, 0.7, &streams(), site::IMPACT)
            .unwrap();
        let imp = ledger.latest_impact();
        assert!(imp[0].is_finite());
        assert!(imp[0] > 0.0);
    }

    #[test]
    fn carry_round_changes_nothing() {
        let before = ps(&[&[0.0]]);
        let after = ps(&[&[0.3]]);
        let mut clients = BTreeMap::new();
        clients.insert(0usize, ps(&[&[0.4]]));
        let attn = compute_attention(&before, &clients, 2.0).unwrap();
        let mut ledger = ImpactLedger::new(2);
        ledger
            .record_round(
                1,
                &before,
                &after,
                &clients,
                &attn,
                &AggregationConfig::default(),
                0.7,
                &streams(),
                site::IMPACT,
            )
            .unwrap();
        let before_carry = ledger.latest_impact();
        ledger.carry_round(2, &[0]).unwrap();
        let after_carry = ledger.latest_impact();
        for (a, b) in before_carry.iter().zip(&after_carry) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn contribution_vector_validates() {
        let con = ContributionVector::from_impacts(&[0.5, 1.5, -0.2, 0.9]).unwrap();
        con.validate().unwrap();
        assert!(ContributionVector::from_impacts(&[]).is_err());
        assert!(ContributionVector::from_impacts(&[1.0, f64::NAN]).is_err());
    }

    // --- Shapley on synthetic games ---

    fn additive_game() -> CharacteristicFn {
        // v(Q) = sum of (id + 1) over members: shapley equals each agent's own value
        CharacteristicFn::new(|q| Ok(q.iter().map(|&a| (a + 1) as f64).sum()))
    }

    #[test]
    fn exact_shapley_additive_game() {
        let chi = additive_game();
        let phi = shapley_exact(&chi, &[0, 1, 2]).unwrap();
        for (i, p) in phi.iter().enumerate() {
            assert!((p - (i + 1) as f64).abs() < 1e-9, "{phi:?}");
        }
    }

    #[test]
    fn exact_shapley_symmetric_majority_game() {
        // v(Q) = 1 when |Q| >= 2 of 3: symmetric agents split the unit
        let chi = CharacteristicFn::new(|q| Ok(if q.len() >= 2 { 1.0 } else { 0.0 }));
        let phi = shapley_exact(&chi, &[0, 1, 2]).unwrap();
        for p in &phi {
            assert!((p - 1.0 / 3.0).abs() < 1e-9, "{phi:?}");
        }
    }

    /// Brute-force oracle: enumerate all n! permutations and average the
    /// marginals. Independent of the subset-enumeration implementation.
    fn shapley_by_permutations(chi: &CharacteristicFn, agents: &[AgentId]) -> Vec<f64> {
        fn permutations(items: &[AgentId]) -> Vec<Vec<AgentId>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut tail in permutations(&rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }
        let n = agents.len();
        let mut acc = vec![0.0; n];
        let index_of: HashMap<AgentId, usize> =
            agents.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let perms = permutations(agents);
        let count = perms.len() as f64;
        for perm in perms {
            let mut prefix = Vec::new();
            let mut prev = chi.value(&prefix).unwrap();
            for &a in &perm {
                prefix.push(a);
                let cur = chi.value(&prefix).unwrap();
                acc[index_of[&a]] += cur - prev;
                prev = cur;
            }
        }
        acc.into_iter().map(|v| v / count).collect()
    }

    fn random_game(seed: u64) -> CharacteristicFn {
        // random utility per subset, fixed by hashing the subset with the seed
        CharacteristicFn::new(move |q| {
            let mut h = 0u64;
            for &a in q {
                h = h.wrapping_mul(31).wrapping_add(a as u64 + 1);
            }
            let mut r = Streams::new(seed).stream("game", h, 0);
            Ok(r.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn exact_matches_permutation_oracle_on_random_games() {
        for (n, seed) in [(3usize, 1u64), (4, 2), (5, 3)] {
            let chi = random_game(seed);
            let agents: Vec<AgentId> = (0..n).collect();
            let exact = shapley_exact(&chi, &agents).unwrap();
            let oracle = shapley_by_permutations(&chi, &agents);
            for (a, b) in exact.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9, "n={n}: {exact:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn efficiency_axiom_holds() {
        let chi = random_game(9);
        let agents: Vec<AgentId> = (0..5).collect();
        let phi = shapley_exact(&chi, &agents).unwrap();
        let total: f64 = phi.iter().sum();
        let full = chi.value(&agents).unwrap();
        let empty = chi.value(&[]).unwrap();
        assert!((total - (full - empty)).abs() <= 1e-9);
    }

    #[test]
    fn mc_estimator_approaches_exact() {
        let chi = random_game(4);
        let agents: Vec<AgentId> = (0..5).collect();
        let exact = shapley_exact(&chi, &agents).unwrap();
        let mc = shapley_mc(&chi, &agents, 2000, &mut shapley_stream(11)).unwrap();
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() <= 0.02, "mc {mc:?} vs exact {exact:?}");
        }
    }

    #[test]
    fn mc_efficiency_holds_per_sample() {
        // Each permutation's marginals telescope, so the estimator sums to
        // v(S) - v(empty) exactly regardless of iteration count.
        let chi = random_game(6);
        let agents: Vec<AgentId> = (0..4).collect();
        let mc = shapley_mc(&chi, &agents, 7, &mut shapley_stream(2)).unwrap();
        let total: f64 = mc.iter().sum();
        let expect = chi.value(&agents).unwrap() - chi.value(&[]).unwrap();
        assert!((total - expect).abs() <= 1e-9);
    }

    #[test]
    fn exact_cap_is_a_budget_error() {
        let chi = additive_game();
        let agents: Vec<AgentId> = (0..13).collect();
        let err = shapley_exact(&chi, &agents).unwrap_err();
        assert!(matches!(err, Error::Budget(_)));
        assert!(err.to_string().contains("monte-carlo"));
    }

    #[test]
    fn duplicate_agents_rejected() {
        let chi = additive_game();
        assert!(shapley_exact(&chi, &[0, 1, 1]).is_err());
        assert!(shapley_mc(&chi, &[2, 2], 10, &mut shapley_stream(0)).is_err());
    }

    #[test]
    fn cache_bounds_evaluations() {
        let chi = additive_game();
        let agents: Vec<AgentId> = (0..6).collect();
        shapley_exact(&chi, &agents).unwrap();
        assert!(chi.evaluations() <= 1 << 6, "evaluated {}", chi.evaluations());
        let before = chi.evaluations();
        shapley_exact(&chi, &agents).unwrap();
        assert_eq!(chi.evaluations(), before);
    }

    #[test]
    fn mc_is_deterministic_per_seed() {
        let chi = random_game(12);
        let agents: Vec<AgentId> = (0..6).collect();
        let a = shapley_mc(&chi, &agents, 50, &mut shapley_stream(3)).unwrap();
        let b = shapley_mc(&chi, &agents, 50, &mut shapley_stream(3)).unwrap();
        assert_eq!(a, b);
    }
}
