//! Small fixed-architecture models with hand-derived gradients.
//!
//! Two kinds are supported: a tanh MLP classifier over dense features, and a
//! fixed-context next-token model that feeds learned embeddings of the
//! context tokens, flattened, into the same MLP core. Loss is mean cross
//! entropy in natural log. No autodiff: backprop is written out by hand and
//! checked against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Classifier,
    NextToken,
}

/// Architecture description. For `Classifier`, `input_dim` is the feature
/// count. For `NextToken`, `input_dim` is the embedding width and
/// `output_dim` doubles as the vocabulary size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Number of context tokens consumed per prediction; next-token only.
    #[serde(default = "default_context")]
    pub context_window: usize,
}

fn default_context() -> usize {
    1
}

impl ModelSpec {
    pub fn classifier(input_dim: usize, hidden_dims: Vec<usize>, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Classifier,
            input_dim,
            hidden_dims,
            output_dim: classes,
            context_window: 1,
        }
    }

    pub fn next_token(
        vocab: usize,
        embed_dim: usize,
        hidden_dims: Vec<usize>,
        context_window: usize,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::NextToken,
            input_dim: embed_dim,
            hidden_dims,
            output_dim: vocab,
            context_window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Domain("input_dim must be at least 1".into()));
        }
        if self.output_dim < 2 {
            return Err(Error::Domain("output_dim must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Domain("hidden dims must be at least 1".into()));
        }
        if self.kind == ModelKind::NextToken && self.context_window == 0 {
            return Err(Error::Domain("context_window must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the flattened vector entering the MLP core.
    fn mlp_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Classifier => self.input_dim,
            ModelKind::NextToken => self.context_window * self.input_dim,
        }
    }

    /// Canonical layer layout: `(id, shape)` in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if self.kind == ModelKind::NextToken {
            out.push(("embed".to_string(), vec![self.output_dim, self.input_dim]));
        }
        let mut d_in = self.mlp_input_dim();
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("fc{i}.w"), vec![d_in, h]));
            out.push((format!("fc{i}.b"), vec![h]));
            d_in = h;
        }
        out.push(("out.w".to_string(), vec![d_in, self.output_dim]));
        out.push(("out.b".to_string(), vec![self.output_dim]));
        out
    }

    fn ensure_layout(&self, params: &ParamSet) -> Result<()> {
        let want = self.layout();
        if params.num_layers() != want.len() {
            return Err(Error::Structural(format!(
                "parameter set has {} layers, model expects {}",
                params.num_layers(),
                want.len()
            )));
        }
        for (layer, (id, shape)) in params.layers().iter().zip(&want) {
            if layer.id() != id || layer.shape() != &shape[..] {
                return Err(Error::Structural(format!(
                    "layer {:?} {:?} does not match expected {:?} {:?}",
                    layer.id(),
                    layer.shape(),
                    id,
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// One minibatch. Dense features for the classifier, token ids for the
/// next-token model; targets are class or token ids.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    Dense { rows: usize, cols: usize, values: Vec<f64> },
    Tokens { rows: usize, context: usize, ids: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn dense(rows: usize, cols: usize, values: Vec<f64>, targets: Vec<usize>) -> Result<Batch> {
        if rows == 0 {
            return Err(Error::Data("batch must hold at least one sample".into()));
        }
        if values.len() != rows * cols || targets.len() != rows {
            return Err(Error::Data(format!(
                "dense batch size mismatch: {rows}x{cols} with {} values, {} targets",
                values.len(),
                targets.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dense batch holds a non-finite feature".into()));
        }
        Ok(Batch { inputs: BatchInputs::Dense { rows, cols, values }, targets })
    }

    pub fn tokens(rows: usize, context: usize, ids: Vec<usize>, targets: Vec<usize>) -> Result<Batch> {
        if rows == 0 {
            return Err(Error::Data("batch must hold at least one sample".into()));
        }
        if ids.len() != rows * context || targets.len() != rows {
            return Err(Error::Data(format!(
                "token batch size mismatch: {rows}x{context} with {} ids, {} targets",
                ids.len(),
                targets.len()
            )));
        }
        Ok(Batch { inputs: BatchInputs::Tokens { rows, context, ids }, targets })
    }

    pub fn rows(&self) -> usize {
        match &self.inputs {
            BatchInputs::Dense { rows, .. } => *rows,
            BatchInputs::Tokens { rows, .. } => *rows,
        }
    }
}

/// Row-major probability matrix returned by [`predict_distribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ProbMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Fresh parameters: weights drawn `N(0, 1/fan_in)`, biases zero, embedding
/// rows drawn unit normal (a token lookup has fan-in one).
pub fn init_params<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<ParamSet> {
    spec.validate()?;
    let mut layers = Vec::new();
    for (id, shape) in spec.layout() {
        let count: usize = shape.iter().product();
        let values = if id.ends_with(".b") {
            vec![0.0; count]
        } else {
            let std = if id == "embed" { 1.0 } else { 1.0 / (shape[0] as f64).sqrt() };
            (0..count).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        layers.push((id, shape, values));
    }
    ParamSet::new(layers)
}

struct Forward {
    /// Flattened MLP input, embeddings already applied. B x d0.
    input: Vec<f64>,
    /// Post-tanh activations per hidden layer. B x h_i each.
    hidden: Vec<Vec<f64>>,
    /// Softmax probabilities. B x C.
    probs: Vec<f64>,
    /// Mean cross entropy, natural log.
    loss: f64,
}

fn weights<'a>(spec: &ModelSpec, params: &'a ParamSet) -> Vec<&'a [f64]> {
    let _ = spec;
    params.layers().iter().map(|l| l.values()).collect()
}

/// x (m x k) times w (k x n), row-major.
fn matmul(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let xv = x[i * k + p];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

fn embed_inputs(spec: &ModelSpec, embed: &[f64], rows: usize, context: usize, ids: &[usize]) -> Result<Vec<f64>> {
    if context != spec.context_window {
        return Err(Error::Data(format!(
            "batch context {} does not match model context {}",
            context, spec.context_window
        )));
    }
    let e = spec.input_dim;
    let vocab = spec.output_dim;
    let mut out = vec![0.0; rows * context * e];
    for (pos, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Data(format!("token id {id} out of range for vocab {vocab}")));
        }
        out[pos * e..(pos + 1) * e].copy_from_slice(&embed[id * e..(id + 1) * e]);
    }
    Ok(out)
}

fn forward(spec: &ModelSpec, params: &ParamSet, batch: &Batch, with_loss: bool) -> Result<Forward> {
    spec.ensure_layout(params)?;
    let w = weights(spec, params);
    let b = batch.rows();
    let c = spec.output_dim;

    let (input, mut layer_idx) = match (&batch.inputs, spec.kind) {
        (BatchInputs::Dense { rows, cols, values }, ModelKind::Classifier) => {
            if *cols != spec.input_dim {
                return Err(Error::Data(format!(
                    "batch feature width {} does not match model input_dim {}",
                    cols, spec.input_dim
                )));
            }
            let _ = rows;
            (values.clone(), 0usize)
        }
        (BatchInputs::Tokens { rows, context, ids }, ModelKind::NextToken) => {
            (embed_inputs(spec, w[0], *rows, *context, ids)?, 1usize)
        }
        _ => {
            return Err(Error::Data("batch input kind does not match the model kind".into()));
        }
    };

    if with_loss {
        for &t in &batch.targets {
            if t >= c {
                return Err(Error::Data(format!("target id {t} out of range for {c} outputs")));
            }
        }
    }

    let mut hidden = Vec::with_capacity(spec.hidden_dims.len());
    let mut cur = input.clone();
    let mut d_in = spec.mlp_input_dim();
    for &h in &spec.hidden_dims {
        let mut z = vec![0.0; b * h];
        matmul(&cur, b, d_in, w[layer_idx], h, &mut z);
        let bias = w[layer_idx + 1];
        for i in 0..b {
            for j in 0..h {
                z[i * h + j] = (z[i * h + j] + bias[j]).tanh();
            }
        }
        hidden.push(z.clone());
        cur = z;
        d_in = h;
        layer_idx += 2;
    }

    let mut logits = vec![0.0; b * c];
    matmul(&cur, b, d_in, w[layer_idx], c, &mut logits);
    let bias = w[layer_idx + 1];
    for i in 0..b {
        for j in 0..c {
            logits[i * c + j] += bias[j];
        }
    }

    let mut probs = vec![0.0; b * c];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            probs[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[i * c + j] /= denom;
        }
        if with_loss {
            let t = batch.targets[i];
            loss += denom.ln() - (row[t] - max);
        }
    }
    loss /= b as f64;
    if !loss.is_finite() && with_loss {
        return Err(Error::Numeric("loss became non-finite".into()));
    }
    Ok(Forward { input, hidden, probs, loss })
}

/// Mean cross-entropy loss and its exact gradient, one `ParamSet` congruent
/// with `params`.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
    let fwd = forward(spec, params, batch, true)?;
    let w = weights(spec, params);
    let b = batch.rows();
    let c = spec.output_dim;
    let inv_b = 1.0 / b as f64;

    // dL/dlogits = (softmax - onehot) / B
    let mut dlogits = fwd.probs.clone();
    for (i, &t) in batch.targets.iter().enumerate() {
        dlogits[i * c + t] -= 1.0;
    }
    for v in dlogits.iter_mut() {
        *v *= inv_b;
    }

    let layout = spec.layout();
    let mut grads: Vec<Vec<f64>> = layout
        .iter()
        .map(|(_, shape)| vec![0.0; shape.iter().product()])
        .collect();

    let first_mlp = if spec.kind == ModelKind::NextToken { 1 } else { 0 };
    let nh = spec.hidden_dims.len();

    // Walk the MLP backwards. `delta` is dL/dz for the layer being processed.
    let mut delta = dlogits;
    for layer in (0..=nh).rev() {
        let (below, d_in): (&[f64], usize) = if layer == 0 {
            (&fwd.input, spec.mlp_input_dim())
        } else {
            (&fwd.hidden[layer - 1], spec.hidden_dims[layer - 1])
        };
        let d_out = if layer == nh { c } else { spec.hidden_dims[layer] };
        let wi = first_mlp + 2 * layer;

        // dW = below^T . delta, db = column sums of delta.
        {
            let gw = &mut grads[wi];
            for i in 0..b {
                for p in 0..d_in {
                    let xv = below[i * d_in + p];
                    if xv == 0.0 {
                        continue;
                    }
                    let drow = &delta[i * d_out..(i + 1) * d_out];
                    let grow = &mut gw[p * d_out..(p + 1) * d_out];
                    for (g, dv) in grow.iter_mut().zip(drow) {
                        *g += xv * dv;
                    }
                }
            }
        }
        {
            let gb = &mut grads[wi + 1];
            for i in 0..b {
                for j in 0..d_out {
                    gb[j] += delta[i * d_out + j];
                }
            }
        }

        // Propagate: d_below = delta . W^T, through tanh if below is hidden.
        if layer > 0 || spec.kind == ModelKind::NextToken {
            let wmat = w[wi];
            let mut dbelow = vec![0.0; b * d_in];
            for i in 0..b {
                let drow = &delta[i * d_out..(i + 1) * d_out];
                let orow = &mut dbelow[i * d_in..(i + 1) * d_in];
                for p in 0..d_in {
                    let wrow = &wmat[p * d_out..(p + 1) * d_out];
                    let mut acc = 0.0;
                    for (dv, wv) in drow.iter().zip(wrow) {
                        acc += dv * wv;
                    }
                    orow[p] = acc;
                }
            }
            if layer > 0 {
                let act = &fwd.hidden[layer - 1];
                for (dv, &a) in dbelow.iter_mut().zip(act) {
                    *dv *= 1.0 - a * a;
                }
            }
            delta = dbelow;
        } else {
            delta = Vec::new();
        }
    }

    // Embedding rows accumulate the flattened input gradient slices.
    if spec.kind == ModelKind::NextToken {
        if let BatchInputs::Tokens { context, ids, .. } = &batch.inputs {
            let e = spec.input_dim;
            let ge = &mut grads[0];
            for (pos, &id) in ids.iter().enumerate() {
                let src = &delta[pos * e..(pos + 1) * e];
                let dst = &mut ge[id * e..(id + 1) * e];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            let _ = context;
        }
    }

    let grad = ParamSet::new(
        layout
            .into_iter()
            .zip(grads)
            .map(|((id, shape), values)| (id, shape, values))
            .collect(),
    )?;
    Ok((fwd.loss, grad))
}

/// Row-wise softmax class distribution for each sample.
pub fn predict_distribution(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<ProbMatrix> {
    let fwd = forward(spec, params, batch, false)?;
    Ok(ProbMatrix { rows: batch.rows(), cols: spec.output_dim, values: fwd.probs })
}

/// Probe the analytic gradient against central finite differences at
/// `samples` randomly drawn coordinates. Returns the worst relative
/// disagreement; coordinates where both sides sit below 1e-10 count as
/// exact because the quotient would be pure noise there.
pub fn gradient_check(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Batch,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (_, grad) = loss_and_grad(spec, params, batch)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let li = rng.random_range(0..params.num_layers());
        let vi = rng.random_range(0..params.layer(li).len());
        let analytic = grad.layer(li).values()[vi];
        let perturb = |delta: f64| -> Result<ParamSet> {
            let mut layers = Vec::new();
            for (i, l) in params.layers().iter().enumerate() {
                let mut vals = l.values().to_vec();
                if i == li {
                    vals[vi] += delta;
                }
                layers.push((l.id().to_string(), l.shape().to_vec(), vals));
            }
            ParamSet::new(layers)
        };
        let (lp, _) = loss_and_grad(spec, &perturb(h)?, batch)?;
        let (lm, _) = loss_and_grad(spec, &perturb(-h)?, batch)?;
        let fd = (lp - lm) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs());
        let rel = if denom < 1e-10 { 0.0 } else { (analytic - fd).abs() / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}
