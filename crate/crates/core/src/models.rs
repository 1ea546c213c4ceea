//! Desk-scale differentiable models with hand-rolled backpropagation, plus
//! the synthetic datasets used to exercise the optimizers.
//!
//! Losses are batch means (not sums) so step sizes do not depend on batch
//! size. For the linear regressor that means L(w) = (1/n) sum_i 1/2 (w.x_i - y_i)^2,
//! whose smoothness constant is exactly the largest eigenvalue of A^T A / n.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::param_store::{ParamStore, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Relu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Architecture description. `layer_sizes` runs input -> hidden... -> output;
/// the linear regressor uses a single entry `[d]` (one weight vector, no bias).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn linear(d: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            layer_sizes: vec![d],
            activation: Activation::Relu,
            loss: LossKind::SquaredError,
        }
    }

    pub fn logistic(d: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            layer_sizes: vec![d, classes],
            activation: Activation::Relu,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        ModelSpec { kind: ModelKind::Mlp, layer_sizes, activation, loss: LossKind::CrossEntropy }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        match self.kind {
            ModelKind::Linear => {
                if self.layer_sizes.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "linear model takes layer_sizes = [d_in]".into(),
                    ));
                }
                if self.loss != LossKind::SquaredError {
                    return Err(Error::InvalidConfig(
                        "linear model is a regressor; use squared_error".into(),
                    ));
                }
            }
            ModelKind::Logistic => {
                if self.layer_sizes.len() != 2 {
                    return Err(Error::InvalidConfig(
                        "logistic model takes layer_sizes = [d_in, classes]".into(),
                    ));
                }
                if self.layer_sizes[1] < 2 {
                    return Err(Error::InvalidConfig("need at least two classes".into()));
                }
                if self.loss != LossKind::CrossEntropy {
                    return Err(Error::InvalidConfig(
                        "logistic model uses cross_entropy".into(),
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.layer_sizes.len() < 2 {
                    return Err(Error::InvalidConfig(
                        "mlp needs at least [d_in, d_out]".into(),
                    ));
                }
                match self.loss {
                    LossKind::CrossEntropy => {
                        if *self.layer_sizes.last().unwrap() < 2 {
                            return Err(Error::InvalidConfig("need at least two classes".into()));
                        }
                    }
                    LossKind::SquaredError => {
                        if *self.layer_sizes.last().unwrap() != 1 {
                            return Err(Error::InvalidConfig(
                                "squared_error mlp needs a single output".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn d_out(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Build the parameter store. Weight matrices carry the l1 penalty;
    /// biases are excluded, start at zero, and are trained densely. The final
    /// layer is named "classifier" so per-tensor lambda scaling can target
    /// it. The linear regressor starts at zero (the usual sparse-recovery
    /// start); other weights use fan-in scaled uniform init.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        match self.kind {
            ModelKind::Linear => {
                let d = self.layer_sizes[0];
                tensors.push(ParamTensor::l1("weight", vec![d], vec![0.0; d])?);
            }
            ModelKind::Logistic | ModelKind::Mlp => {
                let n_layers = self.layer_sizes.len() - 1;
                for l in 0..n_layers {
                    let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let w: Vec<f64> =
                        (0..fan_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
                    let b = vec![0.0; fan_out];
                    let prefix = if l == n_layers - 1 {
                        "classifier".to_string()
                    } else {
                        format!("layer{l}")
                    };
                    tensors.push(ParamTensor::l1(
                        &format!("{prefix}.weight"),
                        vec![fan_out, fan_in],
                        w,
                    )?);
                    tensors.push(ParamTensor::excluded(
                        &format!("{prefix}.bias"),
                        vec![fan_out],
                        b,
                    )?);
                }
            }
        }
        ParamStore::new(tensors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major feature matrix with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    rows: usize,
    cols: usize,
    labels: Labels,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Vec<f64>, rows: usize, cols: usize, labels: Labels, seed: u64) -> Result<Self> {
        if features.len() != rows * cols {
            return Err(Error::ShapeMismatch { expected: rows * cols, got: features.len() });
        }
        if labels.len() != rows {
            return Err(Error::ShapeMismatch { expected: rows, got: labels.len() });
        }
        Ok(Dataset { features, rows, cols, labels, seed })
    }

    pub fn n(&self) -> usize {
        self.rows
    }

    pub fn d(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn label_real(&self, i: usize) -> Result<f64> {
        match &self.labels {
            Labels::Real(v) => Ok(v[i]),
            Labels::Class(_) => Err(Error::InvalidConfig("expected real labels".into())),
        }
    }

    pub fn label_class(&self, i: usize) -> Result<usize> {
        match &self.labels {
            Labels::Class(v) => Ok(v[i]),
            Labels::Real(_) => Err(Error::InvalidConfig("expected class labels".into())),
        }
    }

    /// Restriction to the given rows, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::ShapeMismatch { expected: self.rows, got: i });
            }
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
        };
        Dataset::new(features, idx.len(), self.cols, labels, self.seed)
    }

    /// One row per sample, features then the label in the last column.
    /// Floats carry 17 significant digits so the file round-trips bit-exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            for v in self.row(i) {
                let _ = write!(out, "{v:.17e},");
            }
            match &self.labels {
                Labels::Real(v) => {
                    let _ = writeln!(out, "{:.17e}", v[i]);
                }
                Labels::Class(v) => {
                    let _ = writeln!(out, "{}", v[i]);
                }
            }
        }
        out
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str, classification: bool) -> Result<Dataset> {
        let mut features = Vec::new();
        let mut reals = Vec::new();
        let mut classes = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::Serialization("csv row needs features and a label".into()));
            }
            let d = fields.len() - 1;
            match cols {
                None => cols = Some(d),
                Some(c) if c != d => {
                    return Err(Error::ShapeMismatch { expected: c, got: d });
                }
                _ => {}
            }
            for f in &fields[..d] {
                features.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Serialization(format!("bad feature {f:?}: {e}")))?,
                );
            }
            let last = fields[d];
            if classification {
                classes.push(
                    last.parse::<usize>()
                        .map_err(|e| Error::Serialization(format!("bad label {last:?}: {e}")))?,
                );
            } else {
                reals.push(
                    last.parse::<f64>()
                        .map_err(|e| Error::Serialization(format!("bad label {last:?}: {e}")))?,
                );
            }
            rows += 1;
        }
        let cols = cols.unwrap_or(0);
        let labels = if classification { Labels::Class(classes) } else { Labels::Real(reals) };
        Dataset::new(features, rows, cols, labels, 0)
    }

    pub fn load_csv<P: AsRef<Path>>(path: P, classification: bool) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_csv(&text, classification)
    }
}

struct LayerRefs<'a> {
    w: &'a ParamTensor,
    w_idx: usize,
    b: Option<(&'a ParamTensor, usize)>,
}

fn collect_layers<'a>(spec: &ModelSpec, store: &'a ParamStore) -> Result<Vec<LayerRefs<'a>>> {
    let get = |name: &str| -> Result<(& 'a ParamTensor, usize)> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name:?}")))?;
        Ok((&store.tensors()[idx], idx))
    };
    let mut out = Vec::new();
    match spec.kind {
        ModelKind::Linear => {
            let (w, w_idx) = get("weight")?;
            out.push(LayerRefs { w, w_idx, b: None });
        }
        ModelKind::Logistic => {
            let (w, w_idx) = get("classifier.weight")?;
            out.push(LayerRefs { w, w_idx, b: Some(get("classifier.bias")?) });
        }
        ModelKind::Mlp => {
            let n_layers = spec.layer_sizes.len() - 1;
            for l in 0..n_layers {
                let prefix =
                    if l == n_layers - 1 { "classifier".to_string() } else { format!("layer{l}") };
                let (w, w_idx) = get(&format!("{prefix}.weight"))?;
                out.push(LayerRefs { w, w_idx, b: Some(get(&format!("{prefix}.bias"))?) });
            }
        }
    }
    Ok(out)
}

fn affine(w: &ParamTensor, b: Option<&ParamTensor>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = if w.shape().len() == 2 {
        (w.shape()[0], w.shape()[1])
    } else {
        (1, w.shape()[0])
    };
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w.values()[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out[r] = acc + b.map_or(0.0, |b| b.values()[r]);
    }
    out
}

fn activate(a: Activation, z: &mut [f64]) {
    match a {
        Activation::Relu => {
            for v in z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for v in z {
                *v = v.tanh();
            }
        }
    }
}

/// Raw model outputs for one sample (pre-softmax for classifiers).
pub fn forward_logits(spec: &ModelSpec, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.d_in() {
        return Err(Error::ShapeMismatch { expected: spec.d_in(), got: x.len() });
    }
    let layers = collect_layers(spec, store)?;
    let mut a = x.to_vec();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = affine(layer.w, layer.b.map(|(t, _)| t), &a);
        if l != last {
            activate(spec.activation, &mut z);
        }
        a = z;
    }
    Ok(a)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Batch-mean loss and its exact gradient, flattened in store order over all
/// tensors (excluded ones included). Samples are reduced sequentially in
/// index order so results are bit-reproducible.
pub fn loss_and_grad(
    spec: &ModelSpec,
    store: &ParamStore,
    data: &Dataset,
    idx: &[usize],
) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    if idx.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if data.d() != spec.d_in() {
        return Err(Error::ShapeMismatch { expected: spec.d_in(), got: data.d() });
    }
    match (spec.loss, data.labels()) {
        (LossKind::SquaredError, Labels::Real(_)) | (LossKind::CrossEntropy, Labels::Class(_)) => {}
        _ => return Err(Error::InvalidConfig("loss kind does not match label kind".into())),
    }
    let layers = collect_layers(spec, store)?;
    let mut lanes: Vec<Vec<f64>> =
        store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let inv_b = 1.0 / idx.len() as f64;
    let mut total = 0.0;
    let last = layers.len() - 1;

    for &i in idx {
        if i >= data.n() {
            return Err(Error::ShapeMismatch { expected: data.n(), got: i });
        }
        let x = data.row(i);
        // Forward pass, caching post-activation values per layer.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let mut z = affine(layer.w, layer.b.map(|(t, _)| t), acts.last().unwrap());
            if l != last {
                activate(spec.activation, &mut z);
            }
            acts.push(z);
        }
        let logits = acts.last().unwrap();

        // Loss and the gradient at the output.
        let mut dz: Vec<f64> = match spec.loss {
            LossKind::SquaredError => {
                let y = data.label_real(i)?;
                let r = logits[0] - y;
                total += 0.5 * r * r * inv_b;
                vec![r * inv_b]
            }
            LossKind::CrossEntropy => {
                let y = data.label_class(i)?;
                if y >= logits.len() {
                    return Err(Error::InvalidConfig(format!(
                        "class label {y} out of range for {} outputs",
                        logits.len()
                    )));
                }
                let lse = log_sum_exp(logits);
                total += (lse - logits[y]) * inv_b;
                let mut d: Vec<f64> = logits.iter().map(|v| (v - lse).exp() * inv_b).collect();
                d[y] -= inv_b;
                d
            }
        };

        // Backward pass.
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let a_in = &acts[l];
            let cols = a_in.len();
            let lane = &mut lanes[layer.w_idx];
            for (r, dzr) in dz.iter().enumerate() {
                let row = &mut lane[r * cols..(r + 1) * cols];
                for (g, av) in row.iter_mut().zip(a_in) {
                    *g += dzr * av;
                }
            }
            if let Some((_, b_idx)) = layer.b {
                let lane = &mut lanes[b_idx];
                for (g, dzr) in lane.iter_mut().zip(&dz) {
                    *g += dzr;
                }
            }
            if l > 0 {
                // Pull the error back through the weights, then the activation.
                let w = layer.w.values();
                let mut da = vec![0.0; cols];
                for (r, dzr) in dz.iter().enumerate() {
                    let row = &w[r * cols..(r + 1) * cols];
                    for (d, wv) in da.iter_mut().zip(row) {
                        *d += dzr * wv;
                    }
                }
                match spec.activation {
                    Activation::Relu => {
                        for (d, a) in da.iter_mut().zip(a_in) {
                            if *a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for (d, a) in da.iter_mut().zip(a_in) {
                            *d *= 1.0 - a * a;
                        }
                    }
                }
                dz = da;
            }
        }
    }

    let mut grad = Vec::with_capacity(store.d_total());
    for lane in lanes {
        grad.extend(lane);
    }
    Ok((total, grad))
}

/// Fraction of correctly argmax-classified samples; 0.0 for regression
/// models, which have no accuracy notion here. Ties go to the lowest index.
pub fn accuracy(spec: &ModelSpec, store: &ParamStore, data: &Dataset, idx: &[usize]) -> Result<f64> {
    match data.labels() {
        Labels::Real(_) => Ok(0.0),
        Labels::Class(labels) => {
            if idx.is_empty() {
                return Err(Error::InvalidConfig("empty index set".into()));
            }
            let mut hits = 0usize;
            for &i in idx {
                if i >= data.n() {
                    return Err(Error::ShapeMismatch { expected: data.n(), got: i });
                }
                let logits = forward_logits(spec, store, data.row(i))?;
                let mut best = 0usize;
                for (j, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = j;
                    }
                }
                if best == labels[i] {
                    hits += 1;
                }
            }
            Ok(hits as f64 / idx.len() as f64)
        }
    }
}

/// Gaussian design, k-sparse unit-magnitude ground truth at a random support,
/// y = A theta* + sigma * noise. Returns the dataset and theta*.
pub fn gen_sparse_regression(
    d: usize,
    n: usize,
    k_sparse: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Vec<f64>)> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidConfig("need d >= 1 and n >= 1".into()));
    }
    if k_sparse > d {
        return Err(Error::InvalidConfig(format!("k_sparse {k_sparse} exceeds dimension {d}")));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let features: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    // Partial Fisher-Yates for the support, then random signs.
    let mut pool: Vec<usize> = (0..d).collect();
    for j in 0..k_sparse {
        let pick = rng.random_range(j..d);
        pool.swap(j, pick);
    }
    let mut theta = vec![0.0; d];
    for &s in &pool[..k_sparse] {
        theta[s] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = &features[i * d..(i + 1) * d];
        let dot: f64 = row.iter().zip(&theta).map(|(a, t)| a * t).sum();
        let eps: f64 = normal.sample(&mut rng);
        y.push(dot + noise_sigma * eps);
    }
    Ok((Dataset::new(features, n, d, Labels::Real(y), seed)?, theta))
}

/// Unit-variance Gaussian clusters around random centers rescaled so the
/// closest pair of centers sits exactly `separation` apart. Samples are laid
/// out class-major; shuffling is the consumer's job.
pub fn gen_blobs(
    n_per_class: usize,
    classes: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be positive".into()));
    }
    if d_in == 0 {
        return Err(Error::InvalidConfig("d_in must be positive".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidConfig("separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut centers: Vec<f64> = (0..classes * d_in).map(|_| normal.sample(&mut rng)).collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let dist: f64 = (0..d_in)
                .map(|j| {
                    let diff = centers[a * d_in + j] - centers[b * d_in + j];
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    if min_dist < 1e-9 {
        return Err(Error::InvalidConfig("degenerate centers; try another seed".into()));
    }
    let scale = separation / min_dist;
    for c in centers.iter_mut() {
        *c *= scale;
    }
    let rows = classes * n_per_class;
    let mut features = Vec::with_capacity(rows * d_in);
    let mut labels = Vec::with_capacity(rows);
    for c in 0..classes {
        for _ in 0..n_per_class {
            for j in 0..d_in {
                let eps: f64 = normal.sample(&mut rng);
                features.push(centers[c * d_in + j] + eps);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, rows, d_in, Labels::Class(labels), seed)
}

/// Largest eigenvalue of A^T A / n by power iteration with Rayleigh-quotient
/// estimates, relative tolerance 1e-10. `n` is the mean divisor (usually the
/// sample count), passed separately from the matrix dimensions.
pub fn lipschitz_constant_quadratic(a: &[f64], rows: usize, cols: usize, n: usize) -> Result<f64> {
    if a.len() != rows * cols {
        return Err(Error::ShapeMismatch { expected: rows * cols, got: a.len() });
    }
    if rows == 0 || cols == 0 || n == 0 {
        return Err(Error::InvalidConfig("matrix and divisor must be nonempty".into()));
    }
    let inv_n = 1.0 / n as f64;
    let op = |v: &[f64]| -> Vec<f64> {
        let mut av = vec![0.0; rows];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            av[r] = row.iter().zip(v).map(|(x, y)| x * y).sum();
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            for (o, x) in out.iter_mut().zip(row) {
                *o += x * av[r];
            }
        }
        for o in out.iter_mut() {
            *o *= inv_n;
        }
        out
    };
    // Deterministic start with a small tilt so we are not orthogonal to the
    // top eigenvector of structured matrices.
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + (i as f64 + 1.0) * 1e-4).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    let mut prev = f64::NAN;
    for _ in 0..100_000 {
        let w = op(&v);
        let lam: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        if !lam.is_finite() {
            return Err(Error::NonFinite("power iteration"));
        }
        if (lam - prev).abs() <= 1e-10 * lam.abs().max(1e-300) {
            return Ok(lam);
        }
        prev = lam;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    Err(Error::NonConvergence { iterations: 100_000 })
}
