//! Small differentiable classifiers used as client models.
//!
//! Two kinds are supported: reference-class multinomial logistic regression
//! (class 0 has a fixed zero logit, so the binary case is the plain sigmoid)
//! and a tanh MLP whose final linear layer forms the classification head.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, LabeledExample};
use crate::error::{FedError, Result};
use crate::scalar::Scalar;

/// A named, shaped slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat model parameters with named segments.
///
/// Segments are contiguous, non-overlapping, uniquely named and cover the
/// whole value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    segments: Vec<Segment>,
}

impl<T: Scalar> ParamVector<T> {
    /// Zero-filled vector with the given `(name, shape)` layout.
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            if !seen.insert(name.as_str()) {
                return Err(FedError::shape(format!("duplicate segment name `{name}`")));
            }
            let seg = Segment {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Self {
            values: vec![T::zero(); offset],
            segments,
        })
    }

    pub fn from_values(layout: &[(String, Vec<usize>)], values: Vec<T>) -> Result<Self> {
        let mut pv = Self::zeros(layout)?;
        if values.len() != pv.values.len() {
            return Err(FedError::shape(format!(
                "layout needs {} values, got {}",
                pv.values.len(),
                values.len()
            )));
        }
        pv.values = values;
        Ok(pv)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![T::zero(); self.values.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[T]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments == other.segments
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += a * other`; layouts must match.
    pub fn axpy(&mut self, a: T, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(FedError::shape("axpy on mismatched layouts"));
        }
        for (v, &o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
        Ok(())
    }

    /// Concatenate vectors segment-wise, keeping segment order.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let layout: Vec<_> = parts.iter().flat_map(|p| p.layout()).collect();
        let values = parts
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect();
        Self::from_values(&layout, values)
    }

    /// Values converted to another scalar type, same layout.
    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            segments: self.segments.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// Architecture description. `head_segments` names the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub head_segments: Vec<String>,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            head_segments: Vec::new(),
        }
    }

    /// MLP with the final linear layer as head.
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
            head_segments: vec![HEAD_WEIGHT.to_string(), HEAD_BIAS.to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FedError::config("input_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(FedError::config("num_classes must be >= 2"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(FedError::config("hidden layer widths must be >= 1"));
        }
        let names: Vec<String> = self.layout().into_iter().map(|(n, _)| n).collect();
        for h in &self.head_segments {
            if !names.contains(h) {
                return Err(FedError::config(format!(
                    "head segment `{h}` is not a model segment"
                )));
            }
        }
        if self.kind == ModelKind::Mlp && self.head_segments.is_empty() {
            return Err(FedError::config(
                "mlp models need at least one head segment",
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            ModelKind::Logistic => {
                let k = self.num_classes - 1;
                vec![
                    ("weight".to_string(), vec![k, self.input_dim]),
                    ("bias".to_string(), vec![k]),
                ]
            }
            ModelKind::Mlp => {
                let mut layout = Vec::new();
                let mut fan_in = self.input_dim;
                for (i, &h) in self.hidden_dims.iter().enumerate() {
                    layout.push((format!("hidden{i}.weight"), vec![h, fan_in]));
                    layout.push((format!("hidden{i}.bias"), vec![h]));
                    fan_in = h;
                }
                layout.push((HEAD_WEIGHT.to_string(), vec![self.num_classes, fan_in]));
                layout.push((HEAD_BIAS.to_string(), vec![self.num_classes]));
                layout
            }
        }
    }

    pub fn zeros<T: Scalar>(&self) -> Result<ParamVector<T>> {
        self.validate()?;
        ParamVector::zeros(&self.layout())
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases. Logistic
    /// models start at zero.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamVector<T>> {
        let mut params = self.zeros::<T>()?;
        if self.kind == ModelKind::Logistic {
            return Ok(params);
        }
        let segments = params.segments.clone();
        for seg in segments.iter().filter(|s| s.shape.len() == 2) {
            let std = 1.0 / (seg.shape[1] as f64).sqrt();
            for v in &mut params.values[seg.range()] {
                let z: f64 = rng.sample(StandardNormal);
                *v = T::of(z * std);
            }
        }
        Ok(params)
    }

    pub fn check_params<T: Scalar>(&self, params: &ParamVector<T>) -> Result<()> {
        let expected = self.layout();
        if params.layout() != expected {
            return Err(FedError::shape(
                "parameter layout does not match the model spec".to_string(),
            ));
        }
        Ok(())
    }

    /// Number of parameters.
    pub fn num_params(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at<T: Scalar>(logits: &[T], idx: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    logits[idx] - max - lse
}

/// `out = W x + b` for a row-major `rows x cols` matrix.
fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut Vec<T>) {
    let cols = x.len();
    out.clear();
    out.extend(w.chunks_exact(cols).zip(b).map(|(row, &bias)| {
        row.iter()
            .zip(x)
            .fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
    }));
}

struct Activations<T> {
    /// Input followed by every hidden activation.
    layers: Vec<Vec<T>>,
    logits: Vec<T>,
}

fn seg<'a, T: Scalar>(params: &'a ParamVector<T>, name: &str) -> &'a [T] {
    params
        .segment_values(name)
        .expect("layout validated against spec")
}

fn activations<T: Scalar>(spec: &ModelSpec, params: &ParamVector<T>, x: &[T]) -> Activations<T> {
    match spec.kind {
        ModelKind::Logistic => {
            let mut logits = Vec::with_capacity(spec.num_classes);
            let mut rest = Vec::new();
            affine(seg(params, "weight"), seg(params, "bias"), x, &mut rest);
            logits.push(T::zero());
            logits.extend(rest);
            Activations {
                layers: vec![x.to_vec()],
                logits,
            }
        }
        ModelKind::Mlp => {
            let mut layers = vec![x.to_vec()];
            for i in 0..spec.hidden_dims.len() {
                let mut z = Vec::new();
                affine(
                    seg(params, &format!("hidden{i}.weight")),
                    seg(params, &format!("hidden{i}.bias")),
                    layers.last().expect("non-empty"),
                    &mut z,
                );
                z.iter_mut().for_each(|v| *v = v.tanh());
                layers.push(z);
            }
            let mut logits = Vec::new();
            affine(
                seg(params, HEAD_WEIGHT),
                seg(params, HEAD_BIAS),
                layers.last().expect("non-empty"),
                &mut logits,
            );
            Activations { layers, logits }
        }
    }
}

fn check_input<T: Scalar>(spec: &ModelSpec, params: &ParamVector<T>, x: &[T]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(FedError::shape(format!(
            "feature dimension {} != model input_dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    spec.check_params(params)
}

/// Class probabilities for one feature vector.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    features: &[T],
) -> Result<Vec<T>> {
    check_input(spec, params, features)?;
    Ok(softmax(&activations(spec, params, features).logits))
}

/// Probabilities for every example of a dataset, in dataset order.
pub fn predict_proba<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    data: &LabeledDataset<T>,
) -> Result<Vec<Vec<T>>> {
    data.examples()
        .iter()
        .map(|ex| forward(spec, params, &ex.features))
        .collect()
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad<'a, T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    batch: impl IntoIterator<Item = &'a LabeledExample<T>>,
) -> Result<(T, ParamVector<T>)> {
    spec.check_params(params)?;
    let mut grad = params.zeros_like();
    let mut loss = T::zero();
    let mut count = 0usize;
    for ex in batch {
        check_input(spec, params, &ex.features)?;
        if ex.label >= spec.num_classes {
            return Err(FedError::shape(format!(
                "label {} out of range for {} classes",
                ex.label, spec.num_classes
            )));
        }
        loss -= accumulate_example(spec, params, ex, &mut grad);
        count += 1;
    }
    if count == 0 {
        return Err(FedError::EmptyInput(
            "loss_and_grad needs a non-empty batch".into(),
        ));
    }
    let n = T::of_usize(count);
    grad.values.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Adds one example's gradient to `grad`, returns its log-likelihood.
fn accumulate_example<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    ex: &LabeledExample<T>,
    grad: &mut ParamVector<T>,
) -> T {
    let acts = activations(spec, params, &ex.features);
    let log_lik = log_softmax_at(&acts.logits, ex.label);
    let mut dlogits = softmax(&acts.logits);
    dlogits[ex.label] -= T::one();

    match spec.kind {
        ModelKind::Logistic => {
            let d = spec.input_dim;
            let w = grad.segment("weight").expect("layout").range();
            let b = grad.segment("bias").expect("layout").range();
            for (k, &dz) in dlogits.iter().enumerate().skip(1) {
                let row = w.start + (k - 1) * d;
                for (g, &x) in grad.values[row..row + d].iter_mut().zip(&ex.features) {
                    *g += dz * x;
                }
                grad.values[b.start + k - 1] += dz;
            }
        }
        ModelKind::Mlp => {
            let mut upstream = dlogits;
            let n_hidden = spec.hidden_dims.len();
            // Walk from the head back to the first hidden layer.
            for layer in (0..=n_hidden).rev() {
                let (wname, bname) = if layer == n_hidden {
                    (HEAD_WEIGHT.to_string(), HEAD_BIAS.to_string())
                } else {
                    (
                        format!("hidden{layer}.weight"),
                        format!("hidden{layer}.bias"),
                    )
                };
                let input = &acts.layers[layer];
                let cols = input.len();
                let w_range = grad.segment(&wname).expect("layout").range();
                let b_range = grad.segment(&bname).expect("layout").range();
                for (r, &dz) in upstream.iter().enumerate() {
                    let row = w_range.start + r * cols;
                    for (g, &a) in grad.values[row..row + cols].iter_mut().zip(input) {
                        *g += dz * a;
                    }
                    grad.values[b_range.start + r] += dz;
                }
                if layer == 0 {
                    break;
                }
                let w = seg(params, &wname);
                let mut down = vec![T::zero(); cols];
                for (r, &dz) in upstream.iter().enumerate() {
                    for (d, &wv) in down.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                        *d += wv * dz;
                    }
                }
                // tanh'(z) = 1 - a^2
                for (d, &a) in down.iter_mut().zip(input) {
                    *d *= T::one() - a * a;
                }
                upstream = down;
            }
        }
    }
    log_lik
}

/// Client-side SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FedError::config("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(FedError::config("lr must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(FedError::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Shuffles example indices once per epoch and calls `step` on each
/// mini-batch. Indices inside a batch are sorted, so a full batch always sums
/// in dataset order.
pub(crate) fn for_each_batch<R, F>(
    n: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    mut step: F,
) -> Result<()>
where
    R: Rng + ?Sized,
    F: FnMut(&[usize]) -> Result<()>,
{
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend_from_slice(chunk);
            batch.sort_unstable();
            step(&batch)?;
        }
    }
    Ok(())
}

/// Plain mini-batch SGD on a copy of `params`.
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ParamVector<T>> {
    cfg.validate()?;
    spec.check_params(params)?;
    if data.is_empty() {
        return Err(FedError::EmptyInput(
            "local_train on an empty dataset".into(),
        ));
    }
    let lr = T::of(cfg.lr);
    let examples = data.examples();
    let mut current = params.clone();
    for_each_batch(data.len(), cfg, rng, |batch| {
        let (_, grad) = loss_and_grad(spec, &current, batch.iter().map(|&i| &examples[i]))?;
        for (p, &g) in current.values.iter_mut().zip(&grad.values) {
            *p -= lr * g;
        }
        Ok(())
    })?;
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn example(features: Vec<f64>, label: usize) -> LabeledExample<f64> {
        LabeledExample {
            features,
            label,
            domain: 0,
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        for spec in [ModelSpec::logistic(3, 2), ModelSpec::mlp(3, vec![4], 2)] {
            let params = spec.zeros::<f64>().unwrap();
            let p = forward(&spec, &params, &[0.3, -2.0, 7.0]).unwrap();
            assert_eq!(p, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn logistic_is_sigmoid() {
        let spec = ModelSpec::logistic(2, 2);
        let mut params = spec.zeros::<f64>().unwrap();
        params.segment_values_mut("weight").unwrap()[0] = 1.0;
        let p = forward(&spec, &params, &[1.0, 0.0]).unwrap();
        let sigma = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p[1] - sigma).abs() < 1e-12);
        assert!((p[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn mlp_hand_evaluated_forward() {
        // hidden = tanh(I x + 0), logits = I h + [0, 0.5]
        let spec = ModelSpec::mlp(2, vec![2], 2);
        let mut params = spec.zeros::<f64>().unwrap();
        params
            .segment_values_mut("hidden0.weight")
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params
            .segment_values_mut(HEAD_WEIGHT)
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params.segment_values_mut(HEAD_BIAS).unwrap()[1] = 0.5;
        let x = [0.3, -0.7];
        let z0 = 0.3f64.tanh();
        let z1 = (-0.7f64).tanh() + 0.5;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let expected = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let p = forward(&spec, &params, &x).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.zeros::<f64>().unwrap();
        assert!(matches!(
            forward(&spec, &params, &[1.0]),
            Err(FedError::Shape(_))
        ));
    }

    #[test]
    fn zero_params_loss_is_ln2() {
        let spec = ModelSpec::mlp(2, vec![3], 2);
        let params = spec.zeros::<f64>().unwrap();
        let batch = vec![example(vec![1.0, 2.0], 0), example(vec![-1.0, 0.5], 1)];
        let (loss, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(grad.same_layout(&params));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.zeros::<f64>().unwrap();
        let empty: Vec<LabeledExample<f64>> = Vec::new();
        assert!(matches!(
            loss_and_grad(&spec, &params, &empty),
            Err(FedError::EmptyInput(_))
        ));
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_loss() {
        let spec = ModelSpec::logistic(1, 2);
        let mut params = spec.zeros::<f64>().unwrap();
        params.segment_values_mut("weight").unwrap()[0] = 50.0;
        let (loss, _) = loss_and_grad(&spec, &params, &[example(vec![1.0], 1)]).unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn duplicate_segment_names_rejected() {
        let layout = vec![("a".to_string(), vec![2]), ("a".to_string(), vec![1])];
        assert!(ParamVector::<f64>::zeros(&layout).is_err());
    }

    #[test]
    fn segments_are_contiguous() {
        let spec = ModelSpec::mlp(5, vec![4, 3], 3);
        let params = spec.zeros::<f64>().unwrap();
        let mut offset = 0;
        for s in params.segments() {
            assert_eq!(s.offset, offset);
            offset += s.len();
        }
        assert_eq!(offset, params.len());
        assert_eq!(spec.num_params(), params.len());
    }

    #[test]
    fn head_must_name_a_segment() {
        let mut spec = ModelSpec::mlp(2, vec![2], 2);
        spec.head_segments = vec!["nope".into()];
        assert!(spec.validate().is_err());
        spec.head_segments.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let spec = ModelSpec::mlp(3, vec![4], 3);
        let mut rng = stream(1, Stream::Init, &[]);
        let params = spec.init::<f32, _>(&mut rng).unwrap();
        let p = forward(&spec, &params, &[0.1f32, 0.2, -0.3]).unwrap();
        let total: f32 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
