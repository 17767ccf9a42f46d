//! Experiment orchestration: the round loop, persistence, and the Shapley
//! pass over a finished run.

pub mod config;
pub mod record;

use crate::aggregation::{
    attention_aggregate, compute_attention_with, fedavg_aggregate, fedavg_aggregate_weighted,
    select_agents, AgentId, SelectionPolicy,
};
use crate::contribution::{
    make_federated_characteristic, normalize_shares, shapley_exact, shapley_mc, shapley_stream,
    AggregatorKind, ImpactLedger, RunTrace, TraceRound,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, MetricKind};
use crate::model::{init_params, predict_distribution, ModelSpec};
use crate::params::ParamSet;
use crate::rng::{site, Streams};
use crate::scenario::{apply_corruptions, generate_dataset, Dataset, ScenarioData};
use crate::trainer::client_update;
use config::{ExperimentConfig, ResolvedExperiment, ShapleyMode};
use rayon::prelude::*;
use record::{AttentionRow, RoundRow, RoundTiming, RunRecord, ShapleyReport, Timings};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub trace: RunTrace,
    pub final_params: ParamSet,
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn eval_round(
    model: &ModelSpec,
    params: &ParamSet,
    eval: &Dataset,
    round: u64,
) -> Result<EvalReport> {
    let batch = eval.full_batch()?;
    let probs = predict_distribution(model, params, &batch)?;
    let (kind, value) = match eval {
        Dataset::Classification { .. } => {
            (MetricKind::Accuracy, metrics::accuracy(&probs, eval.targets())?)
        }
        Dataset::NextToken { .. } => {
            (MetricKind::Perplexity, metrics::perplexity(&probs, eval.targets())?)
        }
    };
    Ok(EvalReport { kind, value, sample_count: eval.len(), round })
}

fn shard_weights(shards: &[Dataset]) -> BTreeMap<AgentId, f64> {
    shards.iter().enumerate().map(|(k, s)| (k, s.len() as f64)).collect()
}

/// Stable identity of a run: a digest of its full configuration.
pub fn run_id(config: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&canonical);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(hex[..12].to_string())
}

/// Run the federated loop round by round, keeping the ledger and the replay
/// trace as it goes.
pub fn run_experiment(resolved: &ResolvedExperiment) -> Result<RunOutput> {
    let cfg = &resolved.config;
    let scenario = &resolved.scenario;
    let model = &resolved.model;
    let streams = Streams::new(cfg.master_seed);

    let ScenarioData { shards, eval } = generate_dataset(scenario, &streams)
        .map_err(|e| e.with_context("generating data"))?;
    let shards = apply_corruptions(scenario, shards, &streams)
        .map_err(|e| e.with_context("applying corruptions"))?;

    let mut server = init_params(model, &mut streams.stream(site::INIT, 0, 0))
        .map_err(|e| e.with_context("initializing model"))?;
    let initial_params = server.clone();

    let policy = SelectionPolicy { fraction: cfg.selection.fraction, total_agents: scenario.agents };
    let mut ledger = ImpactLedger::new(scenario.agents);
    let mut timings = Timings::default();
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut trace_rounds = Vec::with_capacity(cfg.rounds as usize);
    let noise_site =
        if cfg.contribution.share_dp_noise { site::DP } else { site::IMPACT };
    let fedavg_weights = (cfg.aggregator == AggregatorKind::Fedavg && cfg.weighted_fedavg)
        .then(|| shard_weights(&shards));

    let pool = (cfg.workers > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
        })
        .transpose()?;

    for round in 1..=cfg.rounds {
        let ctx = |phase: &str| format!("round {round}, {phase}");

        let cohort = select_agents(&policy, &mut streams.stream(site::SELECT, round, 0))
            .map_err(|e| e.with_context(&ctx("selecting agents")))?;

        // local training
        let train_start = Instant::now();
        let train_one = |&k: &AgentId| -> Result<(AgentId, ParamSet)> {
            let mut rng = streams.stream(site::TRAIN, round, k as u64);
            let update = client_update(model, &server, &shards[k], &cfg.trainer, &mut rng)
                .map_err(|e| e.with_context(&format!("round {round}, training agent {k}")))?;
            Ok((k, update))
        };
        let updates: Vec<(AgentId, ParamSet)> = match &pool {
            Some(pool) => {
                pool.install(|| cohort.par_iter().map(train_one).collect::<Result<Vec<_>>>())?
            }
            None => cohort.iter().map(train_one).collect::<Result<_>>()?,
        };
        let clients: BTreeMap<AgentId, ParamSet> = updates.into_iter().collect();
        let train_ms = ms_since(train_start);

        // attention is computed for both aggregators: the plain-average
        // baseline still keeps the same ledger
        let aggregate_start = Instant::now();
        let attn = compute_attention_with(
            &server,
            &clients,
            cfg.aggregation.norm_order,
            cfg.attention.negate_scores,
        )
        .map_err(|e| e.with_context(&ctx("computing attention")))?;
        let server_before = server.clone();
        server = match cfg.aggregator {
            AggregatorKind::Attention => {
                attention_aggregate(&server, &clients, &attn, &cfg.aggregation, &streams, round)
            }
            AggregatorKind::Fedavg => match &fedavg_weights {
                Some(w) => fedavg_aggregate_weighted(&clients, w),
                None => fedavg_aggregate(&clients),
            },
        }
        .map_err(|e| e.with_context(&ctx("aggregating")))?;
        let aggregate_ms = ms_since(aggregate_start);

        // ledger bookkeeping
        let bookkeeping_start = Instant::now();
        if round % cfg.contribution.every_n_rounds == 0 {
            ledger
                .record_round(
                    round,
                    &server_before,
                    &server,
                    &clients,
                    &attn,
                    &cfg.aggregation,
                    cfg.contribution.forgetting,
                    &streams,
                    noise_site,
                )
                .map_err(|e| e.with_context(&ctx("updating the ledger")))?;
        } else {
            ledger
                .carry_round(round, &cohort)
                .map_err(|e| e.with_context(&ctx("updating the ledger")))?;
        }
        let impact = ledger.latest_impact();
        let contribution = ledger
            .contributions(round)
            .map_err(|e| e.with_context(&ctx("normalizing contributions")))?;
        contribution.validate()?;
        let bookkeeping_ms = ms_since(bookkeeping_start);

        // held-out evaluation
        let eval_start = Instant::now();
        let report = eval_round(model, &server, &eval, round)
            .map_err(|e| e.with_context(&ctx("evaluating")))?;
        let eval_ms = ms_since(eval_start);

        let attention_rows = attn
            .layer_ids()
            .iter()
            .enumerate()
            .map(|(l, id)| AttentionRow {
                layer_id: id.clone(),
                alpha: attn.layer_row(l).to_vec(),
            })
            .collect();
        rounds.push(RoundRow {
            round,
            selected: cohort.clone(),
            attention: attention_rows,
            impact,
            contribution: contribution.values().to_vec(),
            eval: report,
        });
        trace_rounds.push(TraceRound { round, updates: clients });
        timings.push(RoundTiming { round, train_ms, aggregate_ms, bookkeeping_ms, eval_ms });
    }

    let last = rounds.last().expect("at least one round");
    let record = RunRecord {
        run_id: run_id(cfg)?,
        config: cfg.clone(),
        layer_ids: server.layer_ids(),
        final_impact: last.impact.clone(),
        final_contribution: last.contribution.clone(),
        final_eval: last.eval,
        rounds,
        timings,
        shapley: None,
    };
    let trace = RunTrace {
        model: model.clone(),
        initial_params,
        aggregation: cfg.aggregation,
        aggregator: cfg.aggregator,
        negate_scores: cfg.attention.negate_scores,
        fedavg_weights,
        master_seed: cfg.master_seed,
        eval,
        rounds: trace_rounds,
    };
    Ok(RunOutput { record, trace, final_params: server })
}

/// Where run directories land: explicit argument, then the config, then the
/// `FEDSIM_OUTPUT_DIR` environment variable, then `runs/`.
pub fn output_base(explicit: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    if let Some(dir) = std::env::var_os("FEDSIM_OUTPUT_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from("runs")
}

/// Run an experiment and write its artifacts under `base/<run id>/`:
/// `record.json`, `trace.json`, `final_params.bin`, both CSV exports, and
/// `summary.json`. Returns the output together with the run directory.
pub fn run_and_persist(resolved: &ResolvedExperiment, base: &Path) -> Result<(RunOutput, PathBuf)> {
    let mut output = run_experiment(resolved)?;
    let dir = base.join(&output.record.run_id);
    std::fs::create_dir_all(&dir)?;

    if resolved.config.shapley.mode != ShapleyMode::Off {
        let report = shapley_for_trace(
            &output.trace,
            resolved.scenario.agents,
            resolved.config.shapley.mode,
            resolved.config.shapley.iterations,
            resolved.config.shapley.seed,
        )?;
        std::fs::write(dir.join("shapley.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        output.record.shapley = Some(report);
    }

    output.record.save(&dir.join("record.json"))?;
    std::fs::write(dir.join("trace.json"), serde_json::to_string(&output.trace)? + "\n")?;
    std::fs::write(dir.join("final_params.bin"), output.final_params.to_bytes())?;
    output.record.export_csv(&dir)?;
    output.record.export_summary(&dir)?;
    Ok((output, dir))
}

/// Run the Shapley estimator against a replay trace. Exact mode enumerates
/// subsets and refuses cohorts above twelve agents; monte-carlo samples
/// `iterations` permutations from a stream seeded by `seed`.
pub fn shapley_for_trace(
    trace: &RunTrace,
    num_agents: usize,
    mode: ShapleyMode,
    iterations: usize,
    seed: u64,
) -> Result<ShapleyReport> {
    let agents: Vec<AgentId> = (0..num_agents).collect();
    let chi = make_federated_characteristic(trace.clone());
    let start = Instant::now();
    let (raw, iterations) = match mode {
        ShapleyMode::Off => {
            return Err(Error::Config("shapley mode is off; pick exact or mc".into()))
        }
        ShapleyMode::Exact => (shapley_exact(&chi, &agents)?, 0),
        ShapleyMode::Mc => {
            (shapley_mc(&chi, &agents, iterations, &mut shapley_stream(seed))?, iterations)
        }
    };
    Ok(ShapleyReport {
        mode,
        iterations,
        seed,
        agents,
        normalized: normalize_shares(&raw),
        raw,
        evaluations: chi.evaluations(),
        elapsed_ms: ms_since(start),
    })
}

/// Load a persisted run directory, compute its Shapley report, and write it
/// back: `shapley.json` plus the `shapley` field of `record.json`.
pub fn run_shapley_on_dir(
    dir: &Path,
    mode: ShapleyMode,
    iterations: usize,
    seed: u64,
) -> Result<ShapleyReport> {
    let mut record = RunRecord::load(&dir.join("record.json"))
        .map_err(|e| e.with_context(&format!("loading {}", dir.display())))?;
    let trace_text = std::fs::read_to_string(dir.join("trace.json"))
        .map_err(|e| Error::Config(format!("cannot read trace in {}: {e}", dir.display())))?;
    let trace: RunTrace = serde_json::from_str(&trace_text)?;
    let report = shapley_for_trace(&trace, record.num_agents(), mode, iterations, seed)?;
    std::fs::write(dir.join("shapley.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    record.shapley = Some(report.clone());
    record.save(&dir.join("record.json"))?;
    Ok(report)
}
