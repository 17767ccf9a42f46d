//! On-disk run records: round-by-round history, timing breakdowns, CSV
//! exports, and the Shapley report attached after the fact.

use crate::aggregation::AgentId;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::runner::config::{ExperimentConfig, ShapleyMode};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Attention weights of one layer, aligned with the round's cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer_id: String,
    pub alpha: Vec<f64>,
}

/// Everything recorded about a single round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u64,
    /// Selected agents, ascending.
    pub selected: Vec<AgentId>,
    /// One row per layer; `alpha[i]` belongs to `selected[i]`.
    pub attention: Vec<AttentionRow>,
    /// Running impact per agent, indexed by agent id.
    pub impact: Vec<f64>,
    /// Contribution share per agent, indexed by agent id.
    pub contribution: Vec<f64>,
    pub eval: EvalReport,
}

/// Wall-clock phase costs of one round, in milliseconds. Informational
/// only; never part of determinism comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RoundTiming {
    pub round: u64,
    pub train_ms: f64,
    pub aggregate_ms: f64,
    pub bookkeeping_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub rounds: Vec<RoundTiming>,
    pub train_ms: f64,
    pub aggregate_ms: f64,
    pub bookkeeping_ms: f64,
    pub eval_ms: f64,
}

impl Timings {
    pub fn push(&mut self, t: RoundTiming) {
        self.train_ms += t.train_ms;
        self.aggregate_ms += t.aggregate_ms;
        self.bookkeeping_ms += t.bookkeeping_ms;
        self.eval_ms += t.eval_ms;
        self.rounds.push(t);
    }
}

/// Result of a Shapley pass over a recorded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub mode: ShapleyMode,
    /// Permutations drawn; zero for exact enumeration.
    pub iterations: usize,
    pub seed: u64,
    pub agents: Vec<AgentId>,
    pub raw: Vec<f64>,
    /// Raw values pushed through the same scaling as contribution shares.
    pub normalized: Vec<f64>,
    /// Distinct subset evaluations performed.
    pub evaluations: usize,
    pub elapsed_ms: f64,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub layer_ids: Vec<String>,
    pub rounds: Vec<RoundRow>,
    pub final_impact: Vec<f64>,
    pub final_contribution: Vec<f64>,
    pub final_eval: EvalReport,
    pub timings: Timings,
    pub shapley: Option<ShapleyReport>,
}

#[derive(Serialize)]
struct ContributionCsvRow {
    round: u64,
    agent_id: usize,
    selected: u8,
    imp: f64,
    con: f64,
}

#[derive(Serialize)]
struct AttentionCsvRow<'a> {
    round: u64,
    agent_id: usize,
    layer_id: &'a str,
    alpha: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    run_id: &'a str,
    rounds: u64,
    agents: usize,
    final_eval: &'a EvalReport,
    final_impact: &'a [f64],
    final_contribution: &'a [f64],
    /// Agent ids sorted by contribution, best first; ties break by id.
    ranking: Vec<AgentId>,
}

fn csv_into_string<F>(fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut writer = csv::Writer::from_writer(Vec::new());
    fill(&mut writer)?;
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serialization(format!("cannot flush csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(format!("csv is not utf-8: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serialization(format!("cannot write csv row: {e}"))
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Number of agents in the run, from the recorded vectors.
    pub fn num_agents(&self) -> usize {
        self.final_contribution.len()
    }

    /// Per-round ledger as CSV: `round,agent_id,selected,imp,con`.
    pub fn contributions_csv(&self) -> Result<String> {
        csv_into_string(|w| {
            for row in &self.rounds {
                for agent in 0..row.impact.len() {
                    w.serialize(ContributionCsvRow {
                        round: row.round,
                        agent_id: agent,
                        selected: u8::from(row.selected.contains(&agent)),
                        imp: row.impact[agent],
                        con: row.contribution[agent],
                    })
                    .map_err(csv_err)?;
                }
            }
            Ok(())
        })
    }

    /// Attention weights as CSV: `round,agent_id,layer_id,alpha`.
    pub fn attention_csv(&self) -> Result<String> {
        csv_into_string(|w| {
            for row in &self.rounds {
                for layer in &row.attention {
                    for (pos, &agent) in row.selected.iter().enumerate() {
                        w.serialize(AttentionCsvRow {
                            round: row.round,
                            agent_id: agent,
                            layer_id: &layer.layer_id,
                            alpha: layer.alpha[pos],
                        })
                        .map_err(csv_err)?;
                    }
                }
            }
            Ok(())
        })
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut ranking: Vec<AgentId> = (0..self.final_contribution.len()).collect();
        ranking.sort_by(|&a, &b| {
            self.final_contribution[b]
                .partial_cmp(&self.final_contribution[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let summary = Summary {
            run_id: &self.run_id,
            rounds: self.rounds.len() as u64,
            agents: self.final_contribution.len(),
            final_eval: &self.final_eval,
            final_impact: &self.final_impact,
            final_contribution: &self.final_contribution,
            ranking,
        };
        Ok(serde_json::to_string_pretty(&summary)? + "\n")
    }

    /// Write `contributions.csv` and `attention.csv` into a directory.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("contributions.csv"), self.contributions_csv()?)?;
        std::fs::write(dir.join("attention.csv"), self.attention_csv()?)?;
        Ok(())
    }

    /// Write `summary.json` into a directory.
    pub fn export_summary(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;

    fn tiny_record() -> RunRecord {
        let eval = EvalReport {
            kind: MetricKind::Accuracy,
            value: 0.5,
            sample_count: 10,
            round: 1,
        };
        RunRecord {
            run_id: "abc123".into(),
            config: ExperimentConfig::default(),
            layer_ids: vec!["out.w".into(), "out.b".into()],
            rounds: vec![RoundRow {
                round: 1,
                selected: vec![0, 2],
                attention: vec![
                    AttentionRow { layer_id: "out.w".into(), alpha: vec![0.25, 0.75] },
                    AttentionRow { layer_id: "out.b".into(), alpha: vec![0.5, 0.5] },
                ],
                impact: vec![0.1, 0.0, 0.3],
                contribution: vec![0.25, 0.2, 0.55],
                eval,
            }],
            final_impact: vec![0.1, 0.0, 0.3],
            final_contribution: vec![0.25, 0.2, 0.55],
            final_eval: eval,
            timings: Timings::default(),
            shapley: None,
        }
    }

    #[test]
    fn record_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let record = tiny_record();
        record.save(&path).unwrap();
        let back = RunRecord::load(&path).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn contribution_csv_lists_every_agent_each_round() {
        let text = tiny_record().contributions_csv().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "round,agent_id,selected,imp,con");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], "1,0,1,0.1,0.25");
        assert_eq!(rows[1], "1,1,0,0.0,0.2");
        assert_eq!(rows[2], "1,2,1,0.3,0.55");
    }

    #[test]
    fn attention_csv_aligns_weights_with_agents() {
        let text = tiny_record().attention_csv().unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "round,agent_id,layer_id,alpha");
        assert_eq!(rows[1], "1,0,out.w,0.25");
        assert_eq!(rows[2], "1,2,out.w,0.75");
        assert_eq!(rows.len(), 5);
    }

    #[test]
    fn summary_ranks_by_contribution() {
        let text = tiny_record().summary_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let ranking: Vec<usize> = value["ranking"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        assert_eq!(ranking, vec![2, 0, 1]);
    }

    #[test]
    fn timings_accumulate() {
        let mut t = Timings::default();
        t.push(RoundTiming { round: 1, train_ms: 5.0, aggregate_ms: 1.0, bookkeeping_ms: 0.5, eval_ms: 2.0 });
        t.push(RoundTiming { round: 2, train_ms: 4.0, aggregate_ms: 1.5, bookkeeping_ms: 0.25, eval_ms: 1.0 });
        assert_eq!(t.train_ms, 9.0);
        assert_eq!(t.bookkeeping_ms, 0.75);
        assert_eq!(t.rounds.len(), 2);
    }
}
