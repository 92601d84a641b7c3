//! Dense feed-forward networks with exact analytic gradients.
//!
//! Parameters live in one flat [`ParamVector`]. Layout is layer-major; within a
//! layer the `(out, in)` weight matrix comes first in row-major order (one row
//! per output unit), followed by the `out` biases. Hidden layers use ReLU, the
//! last layer emits raw logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod gradcheck;

pub use gradcheck::{central_difference, grad_check};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Copies the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Layer sizes of a ReLU MLP: input dim, hidden widths, class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for NetSpec {
    type Error = Error;

    fn try_from(layer_sizes: Vec<usize>) -> Result<Self> {
        NetSpec::new(layer_sizes)
    }
}

impl From<NetSpec> for Vec<usize> {
    fn from(spec: NetSpec) -> Self {
        spec.layer_sizes
    }
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Input(format!(
                "a network needs at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Input(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of weight layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    pub fn layer_param_count(&self, l: usize) -> usize {
        let (i, o) = self.layer_dims(l);
        i * o + o
    }

    /// Offset of layer `l` inside the flat parameter vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_param_count(k)).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.num_layers())
    }

    /// Parameters of every layer except the last.
    pub fn encoder_len(&self) -> usize {
        self.layer_offset(self.num_layers() - 1)
    }

    pub fn head_len(&self) -> usize {
        self.layer_param_count(self.num_layers() - 1)
    }

    /// Same encoder, different number of output classes.
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        let mut sizes = self.layer_sizes.clone();
        *sizes.last_mut().unwrap() = classes;
        Self::new(sizes)
    }
}

/// Flat, deterministically ordered network parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn check_len(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "{what}: lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "add")?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect::<Vec<_>>().into())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other, "sub")?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect::<Vec<_>>().into())
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        self.0.iter().map(|a| a * c).collect::<Vec<_>>().into()
    }

    /// `self += other`, in place.
    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        self.check_len(other, "add_assign")?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn concat(&self, tail: &ParamVector) -> ParamVector {
        let mut v = Vec::with_capacity(self.len() + tail.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&tail.0);
        v.into()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// One layer's parameters in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `(out, in)`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

fn check_params(spec: &NetSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, spec {:?} needs {}",
            params.len(),
            spec.layer_sizes(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Splits a flat vector into per-layer matrices.
pub fn unflatten(spec: &NetSpec, params: &ParamVector) -> Result<Vec<LayerParams>> {
    check_params(spec, params)?;
    let p = params.as_slice();
    let mut off = 0;
    let mut layers = Vec::with_capacity(spec.num_layers());
    for l in 0..spec.num_layers() {
        let (i, o) = spec.layer_dims(l);
        let weights = Matrix::from_vec(o, i, p[off..off + i * o].to_vec())?;
        off += i * o;
        let bias = p[off..off + o].to_vec();
        off += o;
        layers.push(LayerParams { weights, bias });
    }
    Ok(layers)
}

pub fn flatten(layers: &[LayerParams]) -> ParamVector {
    let mut v = Vec::new();
    for layer in layers {
        v.extend_from_slice(layer.weights.as_slice());
        v.extend_from_slice(&layer.bias);
    }
    v.into()
}

/// He-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> ParamVector {
    let mut v = Vec::with_capacity(spec.param_count());
    for l in 0..spec.num_layers() {
        let (i, o) = spec.layer_dims(l);
        let limit = (6.0 / i as f64).sqrt();
        v.extend((0..i * o).map(|_| rng.random_range(-limit..limit)));
        v.extend(std::iter::repeat_n(0.0, o));
    }
    v.into()
}

/// Intermediate values of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch, `activations[L]` the logits.
    pub activations: Vec<Matrix>,
    /// Pre-activation of every layer.
    pub pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

fn affine(input: &Matrix, w: &[f64], b: &[f64], out: usize) -> Matrix {
    let fan_in = input.cols();
    let mut z = Matrix::zeros(input.rows(), out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let zr = z.row_mut(r);
        for (o, zo) in zr.iter_mut().enumerate() {
            let wo = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for (xi, wi) in x.iter().zip(wo) {
                acc += xi * wi;
            }
            *zo = acc;
        }
    }
    z
}

pub fn forward(spec: &NetSpec, params: &ParamVector, batch: &Matrix) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    if batch.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network input is {}",
            batch.cols(),
            spec.input_dim()
        )));
    }
    let p = params.as_slice();
    let layers = spec.num_layers();
    let mut activations = Vec::with_capacity(layers + 1);
    let mut pre_activations = Vec::with_capacity(layers);
    activations.push(batch.clone());
    let mut off = 0;
    for l in 0..layers {
        let (i, o) = spec.layer_dims(l);
        let w = &p[off..off + i * o];
        let b = &p[off + i * o..off + i * o + o];
        off += i * o + o;
        let z = affine(activations.last().unwrap(), w, b, o);
        let a = if l + 1 == layers {
            z.clone()
        } else {
            let mut a = z.clone();
            for x in a.data.iter_mut() {
                *x = x.max(0.0);
            }
            a
        };
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardTrace {
        activations,
        pre_activations,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at position {i} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Batch-mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if logits.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.row(r);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[y];
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (z[c] - lse).exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Gradient of the loss w.r.t. every parameter given `dlogits = dL/dlogits`.
pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<ParamVector> {
    check_params(spec, params)?;
    let layers = spec.num_layers();
    if trace.activations.len() != layers + 1 || trace.pre_activations.len() != layers {
        return Err(Error::Shape(format!(
            "trace has {} layers, spec has {layers}",
            trace.pre_activations.len()
        )));
    }
    for l in 0..layers {
        let (i, o) = spec.layer_dims(l);
        if trace.activations[l].cols() != i || trace.pre_activations[l].cols() != o {
            return Err(Error::Shape(format!("trace layer {l} does not match spec")));
        }
    }
    let rows = trace.activations[0].rows();
    if dlogits.rows() != rows || dlogits.cols() != spec.num_classes() {
        return Err(Error::Shape(format!(
            "dlogits is {}x{}, expected {rows}x{}",
            dlogits.rows(),
            dlogits.cols(),
            spec.num_classes()
        )));
    }

    let p = params.as_slice();
    let mut grad = vec![0.0; spec.param_count()];
    let mut delta = dlogits.clone();
    for l in (0..layers).rev() {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let off = spec.layer_offset(l);
        let input = &trace.activations[l];
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..rows {
                let d = delta.row(r);
                let x = input.row(r);
                for o in 0..fan_out {
                    let dro = d[o];
                    if dro == 0.0 {
                        continue;
                    }
                    gb[o] += dro;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += dro * xi;
                    }
                }
            }
        }
        if l > 0 {
            let w = &p[off..off + fan_in * fan_out];
            let z_prev = &trace.pre_activations[l - 1];
            let mut next = Matrix::zeros(rows, fan_in);
            for r in 0..rows {
                let d = delta.row(r);
                let nr = next.row_mut(r);
                for (o, &dro) in d.iter().enumerate() {
                    if dro == 0.0 {
                        continue;
                    }
                    for (n, wi) in nr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *n += dro * wi;
                    }
                }
                for (n, &z) in nr.iter_mut().zip(z_prev.row(r)) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    Ok(grad.into())
}

/// Loss and full parameter gradient for one labelled batch.
pub fn loss_and_grad(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &Matrix,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    let trace = forward(spec, params, batch)?;
    let (loss, dlogits) = softmax_cross_entropy(trace.logits(), labels)?;
    let grad = backward(spec, params, &trace, &dlogits)?;
    Ok((loss, grad))
}

pub fn loss(spec: &NetSpec, params: &ParamVector, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    let trace = forward(spec, params, batch)?;
    Ok(softmax_cross_entropy(trace.logits(), labels)?.0)
}

/// Class probabilities for every row of `batch`.
pub fn predict_proba(spec: &NetSpec, params: &ParamVector, batch: &Matrix) -> Result<Matrix> {
    Ok(softmax_rows(forward(spec, params, batch)?.logits()))
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    params.check_len(grad, "sgd_step")?;
    Ok(params
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(p, g)| p - lr * g)
        .collect::<Vec<_>>()
        .into())
}

/// Geometric decay from `lr0` at epoch 0 to `lr_final` at the last epoch.
pub fn schedule_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_final: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Input(format!(
            "epoch {epoch} outside [0, {total_epochs})"
        )));
    }
    if !(lr0 > 0.0 && lr_final > 0.0) {
        return Err(Error::Input(format!(
            "learning rates must be positive, got {lr0} and {lr_final}"
        )));
    }
    if total_epochs == 1 || epoch == 0 {
        return Ok(lr0);
    }
    if epoch == total_epochs - 1 {
        return Ok(lr_final);
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr0 * (lr_final / lr0).powf(t))
}

/// A random `(spec, params, batch, labels)` instance for gradient checks:
/// 1 to `max_layers` weight layers, widths in `1..=max_width`, 1 to 8 rows
/// of standard normal inputs, He-initialized weights and biases uniform in
/// `[-0.5, 0.5)`. Nonzero biases keep pre-activations off the ReLU kink even
/// when an upstream layer is entirely inactive.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    max_layers: usize,
    max_width: usize,
) -> (NetSpec, ParamVector, Matrix, Vec<usize>) {
    let layers = rng.random_range(1..=max_layers);
    let mut sizes: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=max_width)).collect();
    *sizes.last_mut().unwrap() = rng.random_range(2..=max_width.max(2));
    let spec = NetSpec::new(sizes).expect("sizes are positive");
    let mut params = init_params(&spec, rng);
    for l in 0..spec.num_layers() {
        let (i, o) = spec.layer_dims(l);
        let start = spec.layer_offset(l) + i * o;
        for b in &mut params.as_mut_slice()[start..start + o] {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let rows = rng.random_range(1..=8);
    let data = (0..rows * spec.input_dim())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let batch = Matrix::from_vec(rows, spec.input_dim(), data).expect("sized above");
    let labels = (0..rows).map(|_| rng.random_range(0..spec.num_classes())).collect();
    (spec, params, batch, labels)
}
