//! Experiment configuration: the TOML schema, scenario presets, and
//! dotted-path command-line overrides.

use crate::aggregation::{AggregationConfig, SelectionPolicy};
use crate::contribution::AggregatorKind;
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::scenario::{ScenarioSpec, TaskKind};
use crate::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Scenario section: either a named preset or a full inline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Preset { preset: String },
    Inline(ScenarioSpec),
}

impl Default for ScenarioChoice {
    fn default() -> Self {
        ScenarioChoice::Preset { preset: "normal".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Fraction of agents drawn each round.
    pub fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { fraction: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContributionConfig {
    /// Discount on the previous impact total, in (0, 1).
    pub forgetting: f64,
    /// Bookkeeping cadence; rounds in between carry impacts forward.
    pub every_n_rounds: u64,
    /// Draw the impact perturbation from the aggregation noise streams
    /// instead of an independent family.
    pub share_dp_noise: bool,
}

impl Default for ContributionConfig {
    fn default() -> Self {
        ContributionConfig { forgetting: 0.7, every_n_rounds: 1, share_dp_noise: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Softmax the negated distances, favoring nearby uploads instead of
    /// far ones.
    pub negate_scores: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShapleyMode {
    #[default]
    Off,
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapleyConfig {
    pub mode: ShapleyMode,
    /// Permutations for the monte-carlo estimator.
    pub iterations: usize,
    /// Seed of the permutation stream, separate from the run's master seed.
    pub seed: u64,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig { mode: ShapleyMode::Off, iterations: 500, seed: 0 }
    }
}

/// Root of an experiment description. Every field has a default, so the
/// empty TOML document is a valid experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub rounds: u64,
    pub aggregator: AggregatorKind,
    /// Weight the plain-average baseline by shard size.
    pub weighted_fedavg: bool,
    pub output_dir: Option<PathBuf>,
    /// Worker threads for local training; results do not depend on this.
    pub workers: usize,
    pub scenario: ScenarioChoice,
    /// Explicit model; omitted means a default sized to the scenario.
    pub model: Option<ModelSpec>,
    pub trainer: TrainerConfig,
    pub aggregation: AggregationConfig,
    pub selection: SelectionConfig,
    pub contribution: ContributionConfig,
    pub attention: AttentionConfig,
    pub shapley: ShapleyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            rounds: 10,
            aggregator: AggregatorKind::Attention,
            weighted_fedavg: false,
            output_dir: None,
            workers: 1,
            scenario: ScenarioChoice::default(),
            model: None,
            trainer: TrainerConfig::default(),
            aggregation: AggregationConfig::default(),
            selection: SelectionConfig::default(),
            contribution: ContributionConfig::default(),
            attention: AttentionConfig::default(),
            shapley: ShapleyConfig::default(),
        }
    }
}

/// A configuration with its scenario and model made concrete.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub scenario: ScenarioSpec,
    pub model: ModelSpec,
}

/// Default model sized to a scenario: one hidden layer of 32 units, an
/// 8-dimensional embedding for language tasks.
pub fn default_model(scenario: &ScenarioSpec) -> ModelSpec {
    match scenario.task {
        TaskKind::Classification => {
            ModelSpec::classifier(scenario.input_dim, vec![32], scenario.num_classes)
        }
        TaskKind::NextToken => {
            ModelSpec::next_token(scenario.vocab_size, 8, vec![32], scenario.context_window)
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self)
            .map_err(|e| Error::Serialization(format!("cannot serialize config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Serialization(format!("cannot serialize config: {e}")))
    }

    /// Make the scenario and model concrete and check every section.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let scenario = match &self.scenario {
            ScenarioChoice::Preset { preset } => ScenarioSpec::preset(preset)?,
            ScenarioChoice::Inline(spec) => spec.clone(),
        };
        scenario.validate()?;
        let model = self.model.clone().unwrap_or_else(|| default_model(&scenario));
        model.validate()?;
        check_model_fits_scenario(&model, &scenario)?;
        self.trainer.validate().map_err(demote_to_config)?;
        self.aggregation.validate().map_err(demote_to_config)?;
        SelectionPolicy { fraction: self.selection.fraction, total_agents: scenario.agents }
            .validate()
            .map_err(demote_to_config)?;
        if !(self.contribution.forgetting > 0.0 && self.contribution.forgetting < 1.0) {
            return Err(Error::Config(format!(
                "contribution.forgetting must lie in (0, 1), got {}",
                self.contribution.forgetting
            )));
        }
        if self.contribution.every_n_rounds == 0 {
            return Err(Error::Config("contribution.every_n_rounds must be at least 1".into()));
        }
        if self.shapley.mode == ShapleyMode::Mc && self.shapley.iterations == 0 {
            return Err(Error::Config("shapley.iterations must be at least 1".into()));
        }
        if self.weighted_fedavg && self.aggregator != AggregatorKind::Fedavg {
            return Err(Error::Config(
                "weighted_fedavg applies only to the fedavg aggregator".into(),
            ));
        }
        Ok(ResolvedExperiment { config: self.clone(), scenario, model })
    }
}

fn demote_to_config(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

fn check_model_fits_scenario(model: &ModelSpec, scenario: &ScenarioSpec) -> Result<()> {
    match scenario.task {
        TaskKind::Classification => {
            if model.kind != ModelKind::Classifier {
                return Err(Error::Config(
                    "classification scenarios need a classifier model".into(),
                ));
            }
            if model.input_dim != scenario.input_dim {
                return Err(Error::Config(format!(
                    "model input_dim {} does not match scenario input_dim {}",
                    model.input_dim, scenario.input_dim
                )));
            }
            if model.output_dim != scenario.num_classes {
                return Err(Error::Config(format!(
                    "model output_dim {} does not match scenario num_classes {}",
                    model.output_dim, scenario.num_classes
                )));
            }
        }
        TaskKind::NextToken => {
            if model.kind != ModelKind::NextToken {
                return Err(Error::Config(
                    "next-token scenarios need a next-token model".into(),
                ));
            }
            if model.output_dim != scenario.vocab_size {
                return Err(Error::Config(format!(
                    "model vocabulary {} does not match scenario vocab_size {}",
                    model.output_dim, scenario.vocab_size
                )));
            }
            if model.context_window != scenario.context_window {
                return Err(Error::Config(format!(
                    "model context_window {} does not match scenario context_window {}",
                    model.context_window, scenario.context_window
                )));
            }
        }
    }
    Ok(())
}

/// Split a `path=value` override into its halves.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((path, value)) if !path.trim().is_empty() => {
            Ok((path.trim().to_string(), value.trim().to_string()))
        }
        _ => Err(Error::Config(format!("override '{arg}' is not of the form path=value"))),
    }
}

/// Apply one dotted-path override to a TOML document, creating intermediate
/// tables as needed. Values parse as TOML (`0.5`, `true`, `[1, 2]`); text
/// that does not parse is taken as a bare string.
pub fn apply_override(root: &mut toml::Value, path: &str, raw_value: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' has an empty segment")));
    }
    let value = parse_toml_value(raw_value);
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Build a config from an optional TOML file plus command-line adjustments,
/// applied in order: file, preset, `--set` overrides.
pub fn compose_config(
    file: Option<&Path>,
    preset: Option<&str>,
    sets: &[String],
) -> Result<ExperimentConfig> {
    let value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let table = text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("invalid TOML in {}: {e}", path.display())))?;
            toml::Value::Table(table)
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    compose_from_value(value, preset, sets)
}

/// Same composition rules as [`compose_config`], but the base document is
/// passed as TOML text instead of a file path.
pub fn compose_config_text(
    document: &str,
    preset: Option<&str>,
    sets: &[String],
) -> Result<ExperimentConfig> {
    let table = document
        .parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    compose_from_value(toml::Value::Table(table), preset, sets)
}

fn compose_from_value(
    mut value: toml::Value,
    preset: Option<&str>,
    sets: &[String],
) -> Result<ExperimentConfig> {
    if let Some(name) = preset {
        // replace, not merge: a file's inline scenario must not bleed into
        // the preset
        if let Some(table) = value.as_table_mut() {
            table.remove("scenario");
        }
        apply_override(&mut value, "scenario.preset", &format!("{name:?}"))?;
    }
    for set in sets {
        let (path, raw) = parse_set(set)?;
        apply_override(&mut value, &path, &raw)?;
    }
    ExperimentConfig::from_value(value)
}
