//! Synthetic datasets, agent shards, and scripted data corruptions.
//!
//! Classification data is drawn from Gaussian blobs around per-class centers;
//! language data is emitted by a fixed synthetic bigram grammar over a small
//! vocabulary. Corruptions rewrite individual shards after generation, so a
//! corrupted agent trains on damaged data while the held-out evaluation set
//! stays clean.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{site, Streams};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    NextToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Treatment {
    /// Replace sample features with i.i.d. noise matching the shard's
    /// per-feature marginal mean and spread. Labels are kept.
    FeatureNoise,
    /// Resample a fraction of labels uniformly from the *other* classes.
    Mislabel,
    /// Truncate the shard to `round(n * (1 - magnitude))` samples.
    Reduce,
    /// Replace a fraction of samples' context and target tokens with
    /// uniformly random ids.
    ShuffleTokens,
}

/// One scripted corruption: which agents, what treatment, how hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub agents: Vec<usize>,
    pub treatment: Treatment,
    pub magnitude: f64,
}

/// Full description of the data side of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub task: TaskKind,
    /// Number of agents K.
    pub agents: usize,
    #[serde(default = "default_samples")]
    pub samples_per_agent: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Classification: feature dimensionality.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Classification: number of classes.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Classification: distance between class centers in feature space.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Next-token: vocabulary size.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Next-token: context tokens per sample.
    #[serde(default = "default_context")]
    pub context_window: usize,
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
}

fn default_samples() -> usize {
    500
}
fn default_eval_samples() -> usize {
    500
}
fn default_input_dim() -> usize {
    16
}
fn default_classes() -> usize {
    10
}
fn default_separation() -> f64 {
    3.0
}
fn default_vocab() -> usize {
    30
}
fn default_context() -> usize {
    4
}

impl ScenarioSpec {
    pub fn classification(agents: usize) -> Self {
        ScenarioSpec {
            task: TaskKind::Classification,
            agents,
            samples_per_agent: default_samples(),
            eval_samples: default_eval_samples(),
            input_dim: default_input_dim(),
            num_classes: default_classes(),
            class_separation: default_separation(),
            vocab_size: default_vocab(),
            context_window: default_context(),
            corruptions: Vec::new(),
        }
    }

    pub fn next_token(agents: usize) -> Self {
        ScenarioSpec {
            task: TaskKind::NextToken,
            agents,
            samples_per_agent: 320,
            eval_samples: 400,
            ..ScenarioSpec::classification(agents)
        }
        .with_task(TaskKind::NextToken)
    }

    fn with_task(mut self, task: TaskKind) -> Self {
        self.task = task;
        self
    }

    fn with_corruptions(mut self, corruptions: Vec<Corruption>) -> Self {
        self.corruptions = corruptions;
        self
    }

    /// Named scenario presets. `agents` in each corruption are 0-indexed.
    pub fn preset(name: &str) -> Result<ScenarioSpec> {
        let spec = match name {
            "normal" => ScenarioSpec::classification(10),
            "noise-last2" => ScenarioSpec::classification(10).with_corruptions(vec![Corruption {
                agents: vec![8, 9],
                treatment: Treatment::FeatureNoise,
                magnitude: 1.0,
            }]),
            "mislabel-last2" => ScenarioSpec::classification(10).with_corruptions(vec![Corruption {
                agents: vec![8, 9],
                treatment: Treatment::Mislabel,
                magnitude: 1.0,
            }]),
            "reduce-last4-70" => ScenarioSpec::next_token(20).with_corruptions(vec![Corruption {
                agents: vec![16, 17, 18, 19],
                treatment: Treatment::Reduce,
                magnitude: 0.7,
            }]),
            "reduce-graded" => ScenarioSpec::next_token(20).with_corruptions(vec![
                Corruption { agents: vec![16, 17], treatment: Treatment::Reduce, magnitude: 0.3 },
                Corruption { agents: vec![18, 19], treatment: Treatment::Reduce, magnitude: 0.7 },
            ]),
            "shuffle-last4" => ScenarioSpec::next_token(20).with_corruptions(vec![Corruption {
                agents: vec![16, 17, 18, 19],
                treatment: Treatment::ShuffleTokens,
                magnitude: 1.0,
            }]),
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario preset {other:?}; available: {}",
                    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
                )));
            }
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Scenario("scenario needs at least one agent".into()));
        }
        if self.samples_per_agent == 0 || self.eval_samples == 0 {
            return Err(Error::Scenario("shards and eval set must be non-empty".into()));
        }
        match self.task {
            TaskKind::Classification => {
                if self.input_dim == 0 {
                    return Err(Error::Scenario("input_dim must be at least 1".into()));
                }
                if self.num_classes < 2 {
                    return Err(Error::Scenario("num_classes must be at least 2".into()));
                }
                if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
                    return Err(Error::Scenario("class_separation must be a finite positive real".into()));
                }
            }
            TaskKind::NextToken => {
                if self.vocab_size < 2 {
                    return Err(Error::Scenario("vocab_size must be at least 2".into()));
                }
                if self.context_window == 0 {
                    return Err(Error::Scenario("context_window must be at least 1".into()));
                }
            }
        }
        for (i, c) in self.corruptions.iter().enumerate() {
            if c.agents.is_empty() {
                return Err(Error::Scenario(format!("corruption {i} targets no agents")));
            }
            for &a in &c.agents {
                if a >= self.agents {
                    return Err(Error::Scenario(format!(
                        "corruption {i} targets agent {a}, but only {} agents exist",
                        self.agents
                    )));
                }
            }
            let m = c.magnitude;
            let ok = match c.treatment {
                Treatment::Reduce => m > 0.0 && m < 1.0,
                _ => m > 0.0 && m <= 1.0,
            };
            if !ok {
                return Err(Error::Scenario(format!(
                    "corruption {i} magnitude {m} outside the valid range for {:?}",
                    c.treatment
                )));
            }
            match (self.task, c.treatment) {
                (TaskKind::Classification, Treatment::ShuffleTokens)
                | (TaskKind::NextToken, Treatment::FeatureNoise)
                | (TaskKind::NextToken, Treatment::Mislabel) => {
                    return Err(Error::Scenario(format!(
                        "corruption {i}: treatment {:?} does not apply to task {:?}",
                        c.treatment, self.task
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Preset names with one-line descriptions, in presentation order.
pub const PRESETS: &[(&str, &str)] = &[
    ("normal", "10 agents, clean Gaussian-blob classification"),
    ("noise-last2", "classification; agents 8-9 train on feature noise"),
    ("mislabel-last2", "classification; agents 8-9 train on mislabeled shards"),
    ("reduce-last4-70", "next-token; agents 16-19 keep only 30% of their shard"),
    ("reduce-graded", "next-token; agents 16-17 lose 30%, agents 18-19 lose 70%"),
    ("shuffle-last4", "next-token; agents 16-19 train on random token sequences"),
];

/// One shard (or the eval split) of generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Dataset {
    Classification {
        input_dim: usize,
        num_classes: usize,
        /// Row-major n x input_dim.
        features: Vec<f64>,
        labels: Vec<usize>,
    },
    NextToken {
        vocab: usize,
        context: usize,
        /// Row-major n x context.
        tokens: Vec<usize>,
        targets: Vec<usize>,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification { labels, .. } => labels.len(),
            Dataset::NextToken { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> &[usize] {
        match self {
            Dataset::Classification { labels, .. } => labels,
            Dataset::NextToken { targets, .. } => targets,
        }
    }

    /// Assemble a batch from the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::Data("batch index out of range".into()));
        }
        match self {
            Dataset::Classification { input_dim, features, labels, .. } => {
                let d = *input_dim;
                let mut values = Vec::with_capacity(indices.len() * d);
                let mut targets = Vec::with_capacity(indices.len());
                for &i in indices {
                    values.extend_from_slice(&features[i * d..(i + 1) * d]);
                    targets.push(labels[i]);
                }
                Batch::dense(indices.len(), d, values, targets)
            }
            Dataset::NextToken { context, tokens, targets, .. } => {
                let c = *context;
                let mut ids = Vec::with_capacity(indices.len() * c);
                let mut t = Vec::with_capacity(indices.len());
                for &i in indices {
                    ids.extend_from_slice(&tokens[i * c..(i + 1) * c]);
                    t.push(targets[i]);
                }
                Batch::tokens(indices.len(), c, ids, t)
            }
        }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

/// Generated data for one experiment: per-agent shards plus a clean eval set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub shards: Vec<Dataset>,
    pub eval: Dataset,
}

/// Fixed bigram grammar for the language task. Token `v` is followed by one
/// of three deterministic successors with probabilities 0.6 / 0.3 / 0.1, so
/// the conditional distribution is learnable while far from uniform.
fn grammar_successors(v: usize, vocab: usize) -> [usize; 3] {
    [(3 * v + 1) % vocab, (5 * v + 2) % vocab, (7 * v + 3) % vocab]
}

const GRAMMAR_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

fn grammar_step(v: usize, vocab: usize, rng: &mut ChaCha12Rng) -> usize {
    let succ = grammar_successors(v, vocab);
    let r: f64 = rng.random();
    if r < GRAMMAR_WEIGHTS[0] {
        succ[0]
    } else if r < GRAMMAR_WEIGHTS[0] + GRAMMAR_WEIGHTS[1] {
        succ[1]
    } else {
        succ[2]
    }
}

/// Labels balanced to within one sample per class, in shuffled order.
fn stratified_labels(n: usize, classes: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn gen_classification(
    spec: &ScenarioSpec,
    n: usize,
    centers: &[f64],
    rng: &mut ChaCha12Rng,
) -> Dataset {
    let d = spec.input_dim;
    let labels = stratified_labels(n, spec.num_classes, rng);
    let mut features = Vec::with_capacity(n * d);
    for &cls in &labels {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features.push(centers[cls * d + j] + z);
        }
    }
    Dataset::Classification { input_dim: d, num_classes: spec.num_classes, features, labels }
}

fn gen_next_token(spec: &ScenarioSpec, n: usize, rng: &mut ChaCha12Rng) -> Dataset {
    let ctx = spec.context_window;
    let vocab = spec.vocab_size;
    let mut tokens = Vec::with_capacity(n * ctx);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = rng.random_range(0..vocab);
        for _ in 0..ctx {
            tokens.push(v);
            v = grammar_step(v, vocab, rng);
        }
        targets.push(v);
    }
    Dataset::NextToken { vocab, context: ctx, tokens, targets }
}

/// Class centers at pairwise distance controlled by `class_separation`:
/// random unit directions scaled by the separation, drawn once per master
/// seed so every shard and the eval set share one distribution.
fn class_centers(spec: &ScenarioSpec, streams: &Streams) -> Vec<f64> {
    let d = spec.input_dim;
    let mut rng = streams.stream(site::DATA, 0, u64::MAX);
    let mut centers = Vec::with_capacity(spec.num_classes * d);
    for _ in 0..spec.num_classes {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        centers.extend(dir.iter().map(|v| spec.class_separation * v / norm));
    }
    centers
}

/// Generate clean shards and the held-out eval set. Deterministic per master
/// seed; each shard draws from its own stream.
pub fn generate_dataset(spec: &ScenarioSpec, streams: &Streams) -> Result<ScenarioData> {
    spec.validate()?;
    match spec.task {
        TaskKind::Classification => {
            let centers = class_centers(spec, streams);
            let shards = (0..spec.agents)
                .map(|k| {
                    let mut rng = streams.stream(site::DATA, 0, k as u64);
                    gen_classification(spec, spec.samples_per_agent, &centers, &mut rng)
                })
                .collect();
            let mut rng = streams.stream(site::DATA_EVAL, 0, 0);
            let eval = gen_classification(spec, spec.eval_samples, &centers, &mut rng);
            Ok(ScenarioData { shards, eval })
        }
        TaskKind::NextToken => {
            let shards = (0..spec.agents)
                .map(|k| {
                    let mut rng = streams.stream(site::DATA, 0, k as u64);
                    gen_next_token(spec, spec.samples_per_agent, &mut rng)
                })
                .collect();
            let mut rng = streams.stream(site::DATA_EVAL, 0, 0);
            let eval = gen_next_token(spec, spec.eval_samples, &mut rng);
            Ok(ScenarioData { shards, eval })
        }
    }
}

/// Sorted choice of `count` distinct indices below `n`.
fn pick_indices(n: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    chosen
}

fn corrupt_feature_noise(shard: &mut Dataset, magnitude: f64, rng: &mut ChaCha12Rng) -> Result<()> {
    let Dataset::Classification { input_dim, features, labels, .. } = shard else {
        return Err(Error::Scenario("feature-noise needs a classification shard".into()));
    };
    let d = *input_dim;
    let n = labels.len();
    // Per-feature marginal moments of the original shard.
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += features[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            let dv = features[i * d + j] - mean[j];
            var[j] += dv * dv;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    let count = (magnitude * n as f64).round() as usize;
    for &i in &pick_indices(n, count, rng) {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[i * d + j] = mean[j] + var[j].sqrt() * z;
        }
    }
    Ok(())
}

fn corrupt_mislabel(shard: &mut Dataset, magnitude: f64, rng: &mut ChaCha12Rng) -> Result<()> {
    let Dataset::Classification { num_classes, labels, .. } = shard else {
        return Err(Error::Scenario("mislabel needs a classification shard".into()));
    };
    let c = *num_classes;
    let n = labels.len();
    let count = (magnitude * n as f64).round() as usize;
    for &i in &pick_indices(n, count, rng) {
        // Uniform over the other c-1 classes, never the original.
        let r = rng.random_range(0..c - 1);
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok(())
}

fn corrupt_reduce(shard: &mut Dataset, magnitude: f64, rng: &mut ChaCha12Rng) -> Result<()> {
    let n = shard.len();
    let keep = ((n as f64) * (1.0 - magnitude)).round() as usize;
    if keep < 1 {
        return Err(Error::Scenario(format!(
            "reduce magnitude {magnitude} leaves an empty shard of {n} samples"
        )));
    }
    let kept = pick_indices(n, keep, rng);
    match shard {
        Dataset::Classification { input_dim, features, labels, .. } => {
            let d = *input_dim;
            let mut nf = Vec::with_capacity(keep * d);
            let mut nl = Vec::with_capacity(keep);
            for &i in &kept {
                nf.extend_from_slice(&features[i * d..(i + 1) * d]);
                nl.push(labels[i]);
            }
            *features = nf;
            *labels = nl;
        }
        Dataset::NextToken { context, tokens, targets, .. } => {
            let c = *context;
            let mut nt = Vec::with_capacity(keep * c);
            let mut ny = Vec::with_capacity(keep);
            for &i in &kept {
                nt.extend_from_slice(&tokens[i * c..(i + 1) * c]);
                ny.push(targets[i]);
            }
            *tokens = nt;
            *targets = ny;
        }
    }
    Ok(())
}

fn corrupt_shuffle_tokens(shard: &mut Dataset, magnitude: f64, rng: &mut ChaCha12Rng) -> Result<()> {
    let Dataset::NextToken { vocab, context, tokens, targets } = shard else {
        return Err(Error::Scenario("shuffle-tokens needs a next-token shard".into()));
    };
    let v = *vocab;
    let c = *context;
    let n = targets.len();
    let count = (magnitude * n as f64).round() as usize;
    for &i in &pick_indices(n, count, rng) {
        for t in tokens[i * c..(i + 1) * c].iter_mut() {
            *t = rng.random_range(0..v);
        }
        targets[i] = rng.random_range(0..v);
    }
    Ok(())
}

/// Apply the scenario's corruption script to freshly generated shards.
/// Entries run in order; untargeted shards pass through untouched.
pub fn apply_corruptions(
    spec: &ScenarioSpec,
    mut shards: Vec<Dataset>,
    streams: &Streams,
) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if shards.len() != spec.agents {
        return Err(Error::Scenario(format!(
            "{} shards supplied for {} agents",
            shards.len(),
            spec.agents
        )));
    }
    for (ci, corruption) in spec.corruptions.iter().enumerate() {
        for &agent in &corruption.agents {
            let mut rng = streams.stream(site::CORRUPT, ci as u64, agent as u64);
            let shard = &mut shards[agent];
            match corruption.treatment {
                Treatment::FeatureNoise => corrupt_feature_noise(shard, corruption.magnitude, &mut rng)?,
                Treatment::Mislabel => corrupt_mislabel(shard, corruption.magnitude, &mut rng)?,
                Treatment::Reduce => corrupt_reduce(shard, corruption.magnitude, &mut rng)?,
                Treatment::ShuffleTokens => corrupt_shuffle_tokens(shard, corruption.magnitude, &mut rng)?,
            }
        }
    }
    Ok(shards)
}
