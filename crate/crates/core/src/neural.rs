//! Fully connected Q-network with hand-written backprop and Adam.
//!
//! Weights of each dense layer are stored row-major as a `fan_in x fan_out`
//! matrix so the forward pass is a sequence of contiguous axpy updates.
//! Hidden layers use ReLU, the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_in x fan_out`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseParams {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layer_dims: Vec<usize>,
    layers: Vec<DenseParams>,
}

/// Partial derivatives of a scalar loss, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<DenseParams>,
}

/// Activations of every layer for a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, `batch x out_dim` row-major.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output layer, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 8;

/// `c[m x n] += a[m x k] · b[k x n]`, all row-major.
///
/// Each output element is accumulated over `k` in increasing order with
/// separate multiplies and adds, so the result is identical on every code
/// path regardless of the blocking or instruction set.
fn gemm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { gemm_avx512(a, m, k, b, n, c) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { gemm_avx2(a, m, k, b, n, c) };
        }
    }
    gemm_generic(a, m, k, b, n, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    gemm_generic(a, m, k, b, n, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    gemm_generic(a, m, k, b, n, c)
}

#[inline(always)]
fn gemm_generic(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    let mut r = 0;
    while r + ROW_BLOCK <= m {
        gemm_rows::<ROW_BLOCK>(&a[r * k..(r + ROW_BLOCK) * k], k, b, n, &mut c[r * n..(r + ROW_BLOCK) * n]);
        r += ROW_BLOCK;
    }
    while r < m {
        gemm_rows::<1>(&a[r * k..(r + 1) * k], k, b, n, &mut c[r * n..(r + 1) * n]);
        r += 1;
    }
}

#[inline(always)]
fn gemm_rows<const R: usize>(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    let mut col = 0;
    while col + COL_BLOCK <= n {
        let mut acc = [[0.0f64; COL_BLOCK]; R];
        for (s, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[s * n + col..s * n + col + COL_BLOCK]);
        }
        for kk in 0..k {
            let bt: &[f64; COL_BLOCK] = b[kk * n + col..kk * n + col + COL_BLOCK].try_into().unwrap();
            for (s, row) in acc.iter_mut().enumerate() {
                let av = a[s * k + kk];
                for j in 0..COL_BLOCK {
                    row[j] += av * bt[j];
                }
            }
        }
        for (s, row) in acc.iter().enumerate() {
            c[s * n + col..s * n + col + COL_BLOCK].copy_from_slice(row);
        }
        col += COL_BLOCK;
    }
    for j in col..n {
        for s in 0..R {
            let mut v = c[s * n + j];
            for kk in 0..k {
                v += a[s * k + kk] * b[kk * n + j];
            }
            c[s * n + j] = v;
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

impl MlpNetwork {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| DenseParams::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<DenseParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].fan_in];
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in != *dims.last().unwrap() {
                return Err(Error::Contract(format!(
                    "layer {i} expects {} inputs but the previous layer yields {}",
                    l.fan_in,
                    dims.last().unwrap()
                )));
            }
            if l.weights.len() != l.fan_in * l.fan_out || l.biases.len() != l.fan_out {
                return Err(Error::Contract(format!("layer {i} parameter shapes are inconsistent")));
            }
            dims.push(l.fan_out);
        }
        validate_dims(&dims)?;
        Ok(Self {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseParams] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(DenseParams::values)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(DenseParams::values_mut)
    }

    /// Deep copy, used for the target network.
    pub fn copy_parameters(&self) -> Self {
        self.clone()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input, 1)?.activations.pop().unwrap())
    }

    /// Forward pass over `batch` inputs laid out row-major.
    pub fn forward_trace(&self, inputs: &[f64], batch: usize) -> Result<ForwardTrace> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::Contract(format!(
                "expected {batch} x {} inputs, got {} values",
                self.input_dim(),
                inputs.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &activations[l];
            let mut out = Vec::with_capacity(batch * layer.fan_out);
            for _ in 0..batch {
                out.extend_from_slice(&layer.biases);
            }
            gemm_acc(input, batch, layer.fan_in, &layer.weights, layer.fan_out, &mut out);
            if l != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            activations.push(out);
        }
        Ok(ForwardTrace { batch, activations })
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            layers: self
                .layers
                .iter()
                .map(|l| DenseParams::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    /// Reverse-mode gradients for a single input.
    pub fn backward(&self, input: &[f64], loss_grad_at_output: &[f64]) -> Result<GradientSet> {
        let trace = self.forward_trace(input, 1)?;
        self.backward_trace(&trace, loss_grad_at_output)
    }

    /// Gradients summed over the batch held in `trace`; `output_grad` is
    /// `batch x out_dim`.
    pub fn backward_trace(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<GradientSet> {
        let batch = trace.batch;
        if trace.activations.len() != self.layers.len() + 1
            || trace.activations[0].len() != batch * self.input_dim()
        {
            return Err(Error::Contract("forward trace does not belong to this network".into()));
        }
        if output_grad.len() != batch * self.output_dim() {
            return Err(Error::Contract(format!(
                "expected {batch} x {} output gradients, got {} values",
                self.output_dim(),
                output_grad.len()
            )));
        }
        let mut grads = self.zero_gradients();
        let mut delta = output_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let grad = &mut grads.layers[l];
            let input = &trace.activations[l];
            for d in delta.chunks_exact(layer.fan_out) {
                for (g, v) in grad.biases.iter_mut().zip(d) {
                    *g += v;
                }
            }
            let input_t = transpose(input, batch, layer.fan_in);
            gemm_acc(&input_t, layer.fan_in, batch, &delta, layer.fan_out, &mut grad.weights);
            if l == 0 {
                break;
            }
            let weights_t = transpose(&layer.weights, layer.fan_in, layer.fan_out);
            let mut next = vec![0.0; batch * layer.fan_in];
            gemm_acc(&delta, batch, layer.fan_out, &weights_t, layer.fan_in, &mut next);
            // Inputs to this layer are ReLU outputs; zero activations pass no gradient.
            for (dx, &x) in next.iter_mut().zip(input) {
                if x <= 0.0 {
                    *dx = 0.0;
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.layer_dims.len() + self.parameter_count()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.parameters() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cursor, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n_dims = read_u32(&mut cursor)? as usize;
        if n_dims > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let mut buf = [0u8; 8];
            read_exact(&mut cursor, &mut buf)?;
            dims.push(u64::from_le_bytes(buf) as usize);
        }
        let mut net = Self::zeros(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if cursor.len() != 8 * net.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * net.parameter_count(),
                cursor.len()
            )));
        }
        for (p, chunk) in net.parameters_mut().zip(cursor.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PWRLABNN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_exact(cursor: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cursor
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(cursor, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl GradientSet {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(DenseParams::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(DenseParams::values_mut)
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_to_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.values_mut().for_each(|g| *g *= scale);
        }
    }
}

pub fn mse_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Contract("mean squared error of empty vectors".into()));
    }
    let sum: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moments: GradientSet,
    pub second_moments: GradientSet,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_stability: f64,
}

impl AdamState {
    pub fn new(net: &MlpNetwork) -> Self {
        Self {
            first_moments: net.zero_gradients(),
            second_moments: net.zero_gradients(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_stability: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut MlpNetwork, grads: &GradientSet, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        let shapes_match = net.layers.len() == grads.layers.len()
            && net.layers.iter().zip(&grads.layers).all(|(p, g)| {
                p.weights.len() == g.weights.len() && p.biases.len() == g.biases.len()
            })
            && self.first_moments.layers.len() == grads.layers.len();
        if !shapes_match {
            return Err(Error::Contract("gradient shapes do not match the network".into()));
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon_stability);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        };
        let moments = self.first_moments.layers.iter_mut().zip(&mut self.second_moments.layers);
        for ((p, g), (m, v)) in net.layers.iter_mut().zip(&grads.layers).zip(moments) {
            update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut p.biases, &g.biases, &mut m.biases, &mut v.biases);
        }
        Ok(())
    }
}
