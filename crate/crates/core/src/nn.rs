//! Small dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. For each consecutive layer pair the
//! layout is the `out x in` weight matrix (row-major) followed by `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Normalized exponential over the output units.
    Softmax,
    /// Elementwise `tanh`, range (-1, 1).
    Bounded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    sizes: Vec<usize>,
    head: Head,
}

impl LayerSpec {
    /// `sizes` lists every width from input to output; rectified hidden layers sit in between.
    pub fn new(sizes: Vec<usize>, head: Head) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::InvalidArgument(
                "a network needs input, at least one hidden layer, and output".into(),
            ));
        }
        if sizes.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        Ok(Self { sizes, head })
    }

    /// 1 -> 32 -> 32 -> `classes`, softmax.
    pub fn bnn(classes: usize) -> Self {
        Self::new(vec![1, 32, 32, classes], Head::Softmax).expect("valid BNN spec")
    }

    /// 5 -> 64 x5 -> `actions`, tanh.
    pub fn policy(actions: usize) -> Self {
        Self::new(vec![5, 64, 64, 64, 64, 64, actions], Head::Bounded).expect("valid policy spec")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let layer = Layer {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            layer
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

/// Layer activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each rectified hidden activation.
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    spec: LayerSpec,
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(spec: LayerSpec) -> Self {
        let n = spec.parameter_count();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(spec: LayerSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.parameter_count() {
            return Err(Error::ShapeMismatch {
                expected: spec.parameter_count(),
                actual: values.len(),
            });
        }
        Ok(Self { spec, values })
    }

    /// He-scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        let layers: Vec<Layer> = params.spec.layers().collect();
        for layer in layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut params.values[layer.weights()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    /// Multiplies the output layer's weights by `gain`.
    pub fn scale_output_layer(&mut self, gain: f64) {
        let last = self.spec.layers().last().unwrap();
        for w in &mut self.values[last.weights()] {
            *w *= gain;
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True for weight entries, false for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for layer in self.spec.layers() {
            for m in &mut mask[layer.weights()] {
                *m = true;
            }
        }
        mask
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.spec.input_width() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.input_width(),
                actual: input.len(),
            });
        }
        let layers: Vec<Layer> = self.spec.layers().collect();
        let mut activations = Vec::with_capacity(layers.len());
        activations.push(input.to_vec());
        let mut logits = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let z = self.affine(layer, x);
            if i + 1 == layers.len() {
                logits = z;
            } else {
                activations.push(z.into_iter().map(|v| v.max(0.0)).collect());
            }
        }
        let output = match self.spec.head {
            Head::Softmax => softmax(&logits),
            Head::Bounded => logits.iter().map(|z| z.tanh()).collect(),
        };
        Ok(ForwardCache {
            activations,
            logits,
            output,
        })
    }

    fn affine(&self, layer: &Layer, x: &[f64]) -> Vec<f64> {
        let w = &self.values[layer.weights()];
        let b = &self.values[layer.biases()];
        w.chunks_exact(layer.inputs)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Gradient of `d_output . output(input)` with respect to every parameter,
    /// where `d_output` is the loss gradient at the network output (after the head).
    pub fn gradient(&self, input: &[f64], d_output: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(input)?;
        let d_logits = self.head_backward(&cache, d_output)?;
        let mut grad = vec![0.0; self.values.len()];
        self.backward(&cache, &d_logits, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Gradient when the loss gradient is already known at the head's pre-activation.
    pub fn gradient_wrt_logits(&self, input: &[f64], d_logits: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(input)?;
        let mut grad = vec![0.0; self.values.len()];
        self.backward(&cache, d_logits, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Maps a gradient at the output through the head to the logits.
    pub fn head_backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Result<Vec<f64>> {
        if d_output.len() != self.spec.output_width() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.output_width(),
                actual: d_output.len(),
            });
        }
        let y = &cache.output;
        Ok(match self.spec.head {
            Head::Softmax => {
                let dot: f64 = y.iter().zip(d_output).map(|(p, g)| p * g).sum();
                y.iter().zip(d_output).map(|(p, g)| p * (g - dot)).collect()
            }
            Head::Bounded => y
                .iter()
                .zip(d_output)
                .map(|(t, g)| g * (1.0 - t * t))
                .collect(),
        })
    }

    /// Adds `scale * d(d_logits . logits)/d(params)` into `grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if d_logits.len() != self.spec.output_width() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.output_width(),
                actual: d_logits.len(),
            });
        }
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                actual: grad.len(),
            });
        }
        let layers: Vec<Layer> = self.spec.layers().collect();
        let mut delta: Vec<f64> = d_logits.iter().map(|d| d * scale).collect();
        for (i, layer) in layers.iter().enumerate().rev() {
            let x = &cache.activations[i];
            let w = &self.values[layer.weights()];
            {
                let gw = &mut grad[layer.weights()];
                for (row, d) in gw.chunks_exact_mut(layer.inputs).zip(&delta) {
                    if *d != 0.0 {
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            for (g, d) in grad[layer.biases()].iter_mut().zip(&delta) {
                *g += d;
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (row, d) in w.chunks_exact(layer.inputs).zip(&delta) {
                if *d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
            }
            // Rectifier derivative: pass only where the activation was positive.
            for (p, a) in prev.iter_mut().zip(x) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"NNP1";

    /// `NNP1`, head tag (u8: 0 softmax, 1 bounded), layer count (u32 LE),
    /// widths (u32 LE each), then every parameter as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.spec.sizes.len() + 8 * self.values.len());
        out.extend_from_slice(Self::MAGIC);
        out.push(match self.spec.head {
            Head::Softmax => 0,
            Head::Bounded => 1,
        });
        out.extend_from_slice(&(self.spec.sizes.len() as u32).to_le_bytes());
        for &w in &self.spec.sizes {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, rest) = Self::read_prefix(bytes)?;
        if !rest.is_empty() {
            return Err(format_err(format!("{} trailing bytes", rest.len())));
        }
        Ok(params)
    }

    /// Parses one network from the front of `bytes`, returning the remainder.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, &[u8])> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let head = match r.take(1)?[0] {
            0 => Head::Softmax,
            1 => Head::Bounded,
            t => return Err(format_err(format!("unknown head tag {t}"))),
        };
        let n_layers = r.u32()? as usize;
        if n_layers > 1024 {
            return Err(format_err(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..n_layers)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = LayerSpec::new(sizes, head)?;
        let values = (0..spec.parameter_count())
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        Ok((Self { spec, values }, r.rest()))
    }
}

fn format_err(reason: String) -> Error {
    Error::Format {
        what: "network parameters",
        reason,
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format {
                what: "binary record",
                reason: format!("truncated: wanted {n} bytes, {} left", self.bytes.len()),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(self) -> &'a [u8] {
        self.bytes
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Floor applied inside the logarithm of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln p[target]` and its gradient at the softmax logits, `p - onehot`.
pub fn cross_entropy_loss(probabilities: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= probabilities.len() {
        return Err(Error::ShapeMismatch {
            expected: probabilities.len(),
            actual: target,
        });
    }
    let loss = -probabilities[target].max(LOG_FLOOR).ln();
    let mut grad = probabilities.to_vec();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// `coefficient * |weights|^2` over weights only, and its gradient.
pub fn l2_penalty(params: &NetworkParams, coefficient: f64) -> (f64, Vec<f64>) {
    let mask = params.weight_mask();
    let mut value = 0.0;
    let grad = params
        .values
        .iter()
        .zip(&mask)
        .map(|(&w, &is_weight)| {
            if is_weight {
                value += w * w;
                2.0 * coefficient * w
            } else {
                0.0
            }
        })
        .collect();
    (coefficient * value, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || params.len() != self.first_moment.len() {
            return Err(Error::ShapeMismatch {
                expected: self.first_moment.len(),
                actual: grad.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
