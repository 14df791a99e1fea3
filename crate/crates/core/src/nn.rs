//! A small feedforward network with hand-written backpropagation, the Adam
//! optimiser, one-hot feature encoding and a binary checkpoint format.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! `W_l` (`d_out × d_in`, row-major) followed by its bias `b_l`:
//!
//! ```text
//! z_l = W_l h_{l−1} + b_l,   h_l = leaky(z_l)   (hidden layers)
//! output = z_L               (scalar head)
//! output = softmax(z_L)      (softmax head)
//! ```

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::MeanField;

/// Default negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Hidden-layer width used by every network in the learners.
pub const HIDDEN: usize = 64;

const MAGIC: &[u8; 8] = b"MFIRLNN1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z < 0.0 => slope * z,
            _ => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z < 0.0 => slope,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Scalar,
    Softmax,
}

/// Feedforward network with a flat parameter vector. Equality compares
/// architecture and parameters only.
#[derive(Debug, Clone)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    head: Head,
    params: Vec<f64>,
    offsets: Vec<usize>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.activation == other.activation
            && self.head == other.head
            && self.params == other.params
    }
}

/// Activations recorded by [`Mlp::forward_cached`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

impl Mlp {
    /// All parameters zero.
    pub fn zeros(layer_dims: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        if head == Head::Scalar && *layer_dims.last().expect("len ≥ 2") != 1 {
            return Err(Error::Config("scalar head needs output width 1".into()));
        }
        let mut offsets = Vec::with_capacity(layer_dims.len());
        let mut total = 0;
        for w in layer_dims.windows(2) {
            offsets.push(total);
            total += (w[0] + 1) * w[1];
        }
        offsets.push(total);
        Ok(Self {
            layer_dims,
            activation,
            head,
            params: vec![0.0; total],
            offsets,
            version: 0,
        })
    }

    /// Weights uniform in `±sqrt(6/(d_in + d_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation, head)?;
        for l in 0..net.num_layers() {
            let (din, dout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let bound = (6.0 / (din + dout) as f64).sqrt();
            let start = net.offsets[l];
            for w in &mut net.params[start..start + din * dout] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("len ≥ 2")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn weights(&self, l: usize) -> (&[f64], &[f64]) {
        let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + din * dout];
        let b = &self.params[start + din * dout..start + (din + 1) * dout];
        (w, b)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (w, b) = self.weights(l);
        let din = self.layer_dims[l];
        out.clear();
        out.extend_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            // One-hot features make most first-layer inputs exactly zero.
            if xi == 0.0 {
                continue;
            }
            for (o, row) in out.iter_mut().zip(w.chunks_exact(din)) {
                *o += row[i] * xi;
            }
        }
    }

    /// First-layer pre-activation `W₁x + b₁`.
    ///
    /// Together with [`Mlp::add_input`] and [`Mlp::forward_from_first`] this lets
    /// callers reuse the contribution of a shared input slice (such as the mean
    /// field) across many evaluations.
    pub fn first_layer(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut out = Vec::with_capacity(self.layer_dims[1]);
        self.affine(0, input, &mut out);
        Ok(out)
    }

    /// Adds `value` at input coordinate `index` to a first-layer pre-activation.
    pub fn add_input(&self, z1: &mut [f64], index: usize, value: f64) {
        let din = self.layer_dims[0];
        let (w, _) = self.weights(0);
        for (o, row) in z1.iter_mut().zip(w.chunks_exact(din)) {
            *o += row[index] * value;
        }
    }

    /// Completes a forward pass from the first-layer pre-activation.
    pub fn forward_from_first(&self, z1: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = z1.to_vec();
        let mut next = Vec::new();
        for l in 1..self.num_layers() {
            h.iter_mut().for_each(|z| *z = self.activation.apply(*z));
            self.affine(l, &h, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        if self.head == Head::Softmax {
            softmax_in_place(&mut h);
        }
        h
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let z1 = self.first_layer(input)?;
        Ok(self.forward_from_first(&z1))
    }

    /// Scalar-head convenience.
    pub fn forward_scalar(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward(input)?[0])
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut post = Vec::with_capacity(self.num_layers());
        let mut h = input.to_vec();
        for l in 0..self.num_layers() {
            let mut z = Vec::with_capacity(self.layer_dims[l + 1]);
            self.affine(l, &h, &mut z);
            let last = l + 1 == self.num_layers();
            let a: Vec<f64> = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            post.push(a.clone());
            h = a;
        }
        let mut output = h;
        if self.head == Head::Softmax {
            softmax_in_place(&mut output);
        }
        Ok(ForwardCache {
            version: self.version,
            input: input.to_vec(),
            pre,
            post,
            output,
        })
    }

    /// Accumulates `Σ_k upstream_k · ∂output_k/∂θ` into `grad_params` and, when
    /// requested, `Σ_k upstream_k · ∂output_k/∂x` into `grad_input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let logits_grad = match self.head {
            Head::Scalar => upstream.to_vec(),
            Head::Softmax => {
                let p = &cache.output;
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter()
                    .zip(upstream)
                    .map(|(pk, uk)| pk * (uk - dot))
                    .collect()
            }
        };
        self.backward_from_logits(cache, &logits_grad, grad_params, grad_input)
    }

    /// As [`Mlp::backward`] with the upstream gradient given on the last
    /// pre-softmax layer (for softmax heads, `∂ log p_k/∂z = e_k − p`).
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        logits_grad: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter gradient buffer",
                expected: self.params.len(),
                got: grad_params.len(),
            });
        }
        if logits_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "logit gradient",
                expected: self.output_dim(),
                got: logits_grad.len(),
            });
        }
        let mut delta = logits_grad.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if l + 1 != self.num_layers() {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= self.activation.derivative(z);
                }
            }
            let h_prev: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            let start = self.offsets[l];
            let (gw, gb) = grad_params[start..start + (din + 1) * dout].split_at_mut(din * dout);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * din..(o + 1) * din];
                for (g, &x) in row.iter_mut().zip(h_prev) {
                    if x != 0.0 {
                        *g += d * x;
                    }
                }
            }
            if l > 0 {
                let (w, _) = self.weights(l);
                let mut prev = vec![0.0; din];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wij) in prev.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                        *p += d * wij;
                    }
                }
                delta = prev;
            } else if let Some(gi) = grad_input {
                let (w, _) = self.weights(0);
                if gi.len() != din {
                    return Err(Error::DimensionMismatch {
                        what: "input gradient buffer",
                        expected: din,
                        got: gi.len(),
                    });
                }
                for (o, &d) in delta.iter().enumerate() {
                    for (g, &wij) in gi.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                        *g += d * wij;
                    }
                }
                return Ok(());
            }
        }
        Ok(())
    }

    /// One Adam step that *minimises* along `grads`.
    pub fn adam_step(&mut self, state: &mut AdamState, grads: &[f64]) -> Result<()> {
        let version = self.version + 1;
        state.step(&mut self.params, grads)?;
        self.version = version;
        Ok(())
    }

    /// Writes the magic, a JSON header and the little-endian parameters.
    pub fn save<W: Write>(&self, mut writer: W, codec: Option<&FeatureCodec>) -> Result<()> {
        let header = CheckpointHeader {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            slope: match self.activation {
                Activation::LeakyRelu(s) => s,
                Activation::Identity => 1.0,
            },
            head: self.head,
            codec: codec.cloned(),
            num_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        writer.write_all(MAGIC)?;
        writer.write_all(&(json.len() as u64).to_le_bytes())?;
        writer.write_all(&json)?;
        for p in &self.params {
            writer.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one network written by [`Mlp::save`].
    pub fn load<R: Read>(mut reader: R) -> Result<(Self, Option<FeatureCodec>)> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a network checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        reader.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(Error::Parse(format!(
                "checkpoint header too large ({len} bytes)"
            )));
        }
        let mut json = vec![0u8; len];
        reader.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut net = Self::zeros(header.layer_dims, header.activation, header.head)?;
        if net.params.len() != header.num_params {
            return Err(Error::Parse(
                "checkpoint parameter count does not match layer dims".into(),
            ));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            reader.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok((net, header.codec))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    layer_dims: Vec<usize>,
    activation: Activation,
    slope: f64,
    head: Head,
    codec: Option<FeatureCodec>,
    num_params: usize,
}

/// Numerically stable softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update `θ ← θ − lr·m̂/(√v̂ + ε)`. Refuses non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "adam state",
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// Serialises moments and counter (for resumable training).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.m.len());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], lr: f64) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| Error::Parse("truncated optimiser state".into()))
        };
        let t = u64::from_le_bytes(word(0)?);
        let n = u64::from_le_bytes(word(1)?) as usize;
        let mut state = Self::new(n, lr);
        state.t = t;
        for i in 0..n {
            state.m[i] = f64::from_le_bytes(word(2 + i)?);
            state.v[i] = f64::from_le_bytes(word(2 + n + i)?);
        }
        Ok(state)
    }
}

/// Which parts a [`FeatureCodec`] concatenates (always in the order
/// state ⧺ action ⧺ mean field ⧺ context).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub state: bool,
    pub action: bool,
    pub mean_field: bool,
    pub context: bool,
}

impl Layout {
    pub const REWARD: Layout = Layout {
        state: true,
        action: true,
        mean_field: true,
        context: true,
    };
    pub const POLICY: Layout = Layout {
        state: true,
        action: false,
        mean_field: false,
        context: true,
    };
    pub const STATE_ACTION: Layout = Layout {
        state: true,
        action: true,
        mean_field: false,
        context: false,
    };
}

/// One-hot state/action/context encoding plus the raw mean-field vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_contexts: usize,
    pub layout: Layout,
}

impl FeatureCodec {
    pub fn new(num_states: usize, num_actions: usize, num_contexts: usize, layout: Layout) -> Self {
        Self {
            num_states,
            num_actions,
            num_contexts,
            layout,
        }
    }

    pub fn dim(&self) -> usize {
        let l = self.layout;
        usize::from(l.state) * self.num_states
            + usize::from(l.action) * self.num_actions
            + usize::from(l.mean_field) * self.num_states
            + usize::from(l.context) * self.num_contexts
    }

    /// Offset of the action one-hot block.
    pub fn action_offset(&self) -> usize {
        usize::from(self.layout.state) * self.num_states
    }

    /// Offset of the mean-field block.
    pub fn mean_field_offset(&self) -> usize {
        self.action_offset() + usize::from(self.layout.action) * self.num_actions
    }

    /// Offset of the context one-hot block.
    pub fn context_offset(&self) -> usize {
        self.mean_field_offset() + usize::from(self.layout.mean_field) * self.num_states
    }

    /// Encodes the parts enabled by the layout; each enabled part must be supplied.
    pub fn encode(
        &self,
        state: Option<usize>,
        action: Option<usize>,
        mean_field: Option<&MeanField>,
        context: Option<usize>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let l = self.layout;
        if l.state {
            let s = state.ok_or(Error::Empty("state feature"))?;
            if s >= self.num_states {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    size: self.num_states,
                });
            }
            out[s] = 1.0;
        }
        if l.action {
            let a = action.ok_or(Error::Empty("action feature"))?;
            if a >= self.num_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    size: self.num_actions,
                });
            }
            out[self.action_offset() + a] = 1.0;
        }
        if l.mean_field {
            let mu = mean_field.ok_or(Error::Empty("mean-field feature"))?;
            if mu.len() != self.num_states {
                return Err(Error::DimensionMismatch {
                    what: "mean-field feature",
                    expected: self.num_states,
                    got: mu.len(),
                });
            }
            let off = self.mean_field_offset();
            out[off..off + self.num_states].copy_from_slice(mu.probs());
        }
        if l.context {
            let m = context.ok_or(Error::Empty("context feature"))?;
            if m >= self.num_contexts {
                return Err(Error::IndexOutOfRange {
                    what: "context",
                    index: m,
                    size: self.num_contexts,
                });
            }
            out[self.context_offset() + m] = 1.0;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaky() -> Activation {
        Activation::LeakyRelu(LEAKY_SLOPE)
    }

    /// Independent straight-line evaluation using explicit indexing.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let dims = net.layer_dims();
        let p = net.params();
        let mut h = x.to_vec();
        let mut offset = 0;
        for l in 0..dims.len() - 1 {
            let (din, dout) = (dims[l], dims[l + 1]);
            let mut z = vec![0.0; dout];
            for o in 0..dout {
                let mut acc = p[offset + din * dout + o];
                for i in 0..din {
                    acc += p[offset + o * din + i] * h[i];
                }
                z[o] = acc;
            }
            offset += (din + 1) * dout;
            if l + 2 < dims.len() {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                }
            }
            h = z;
        }
        if net.head() == Head::Softmax {
            let e: Vec<f64> = h.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            h = e.into_iter().map(|v| v / s).collect();
        }
        h
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(vec![8, 64, 64, 1], leaky(), Head::Scalar).unwrap();
        assert_eq!(net.num_params(), 9 * 64 + 65 * 64 + 65);
    }

    #[test]
    fn zero_network_outputs() {
        let net = Mlp::zeros(vec![3, 4, 1], leaky(), Head::Scalar).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0]);
        let net = Mlp::zeros(vec![3, 4, 3], leaky(), Head::Softmax).unwrap();
        for p in net.forward(&[1.0, 2.0, 3.0]).unwrap() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for head in [Head::Scalar, Head::Softmax] {
            let out = if head == Head::Scalar { 1 } else { 3 };
            let net = Mlp::new(vec![5, 7, 6, out], leaky(), head, &mut rng).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = net.forward(&x).unwrap();
            let b = reference_forward(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            assert_eq!(net.forward_cached(&x).unwrap().output(), a.as_slice());
        }
    }

    #[test]
    fn split_first_layer_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(vec![6, 8, 2], leaky(), Head::Softmax, &mut rng).unwrap();
        let mut x = vec![0.0, 0.0, 0.3, 0.7, 0.0, 0.0];
        let mut z1 = net.first_layer(&x).unwrap();
        net.add_input(&mut z1, 0, 1.0);
        x[0] = 1.0;
        let a = net.forward_from_first(&z1);
        let b = net.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-14);
        }
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(vec![3, 1], Activation::Identity, Head::Scalar, &mut rng).unwrap();
        let x = [0.5, -1.5, 2.0];
        let cache = net.forward_cached(&x).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let mut gi = vec![0.0; 3];
        net.backward(&cache, &[2.0], &mut g, Some(&mut gi)).unwrap();
        assert_eq!(g, vec![1.0, -3.0, 4.0, 2.0]);
        for (a, w) in gi.iter().zip(net.params()) {
            assert_abs_diff_eq!(*a, 2.0 * w, epsilon = 1e-15);
        }
    }

    #[test]
    fn finite_difference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(vec![4, 6, 5, 3], leaky(), Head::Softmax, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let cache = net.forward_cached(&x).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let mut gi = vec![0.0; 4];
        net.backward(&cache, &up, &mut g, Some(&mut gi)).unwrap();
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
            assert!((fd - gi[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        let net = Mlp::zeros(vec![3, 4, 1], leaky(), Head::Scalar).unwrap();
        let cache = net.forward_cached(&[1.0, 2.0, 3.0]).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let mut gi = vec![0.0; 3];
        net.backward(&cache, &[1.0], &mut g, Some(&mut gi)).unwrap();
        assert_eq!(gi, vec![0.0; 3]);
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(vec![2, 3, 1], leaky(), Head::Scalar, &mut rng).unwrap();
        let cache = net.forward_cached(&[1.0, 0.0]).unwrap();
        let mut adam = AdamState::new(net.num_params(), 1e-3);
        net.adam_step(&mut adam, &vec![1.0; net.num_params()])
            .unwrap();
        let mut g = vec![0.0; net.num_params()];
        assert!(matches!(
            net.backward(&cache, &[1.0], &mut g, None),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn adam_examples() {
        let mut adam = AdamState::new(3, 1e-4);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);

        let mut adam = AdamState::new(3, 1e-4);
        let mut p = vec![0.0; 3];
        adam.step(&mut p, &[0.5, -2.0, 1e-3]).unwrap();
        assert_abs_diff_eq!(p[0], -1e-4, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 1e-4, epsilon = 1e-6);
        assert_abs_diff_eq!(p[2], -1e-4, epsilon = 1e-6);

        let mut adam = AdamState::new(1, 1e-2);
        let mut p = vec![0.0];
        for _ in 0..100 {
            adam.step(&mut p, &[3.0]).unwrap();
        }
        assert!(p[0] < -0.5);

        assert!(matches!(
            adam.step(&mut p, &[f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        let restored = AdamState::from_bytes(&adam.to_bytes(), 1e-2).unwrap();
        assert_eq!(restored, adam);
    }

    #[test]
    fn encode_examples() {
        let c = FeatureCodec::new(
            3,
            2,
            2,
            Layout {
                state: true,
                action: false,
                mean_field: false,
                context: false,
            },
        );
        assert_eq!(
            c.encode(Some(2), None, None, None).unwrap(),
            vec![0.0, 0.0, 1.0]
        );

        let c = FeatureCodec::new(
            2,
            2,
            2,
            Layout {
                state: false,
                action: false,
                mean_field: true,
                context: false,
            },
        );
        let mu = MeanField::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(
            c.encode(None, None, Some(&mu), None).unwrap(),
            vec![0.25, 0.75]
        );

        let c = FeatureCodec::new(2, 2, 2, Layout::REWARD);
        let v = c.encode(Some(1), Some(0), Some(&mu), Some(1)).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 1.0, 0.0, 0.25, 0.75, 0.0, 1.0]);
        assert!(matches!(
            c.encode(Some(2), Some(0), Some(&mu), Some(0)),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::new(vec![8, 64, 64, 1], leaky(), Head::Scalar, &mut rng).unwrap();
        let codec = FeatureCodec::new(2, 2, 2, Layout::REWARD);
        let mut buf = Vec::new();
        net.save(&mut buf, Some(&codec)).unwrap();
        assert_eq!(&buf[..8], b"MFIRLNN1");
        let (back, back_codec) = Mlp::load(buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layer_dims(), net.layer_dims());
        assert_eq!(back_codec, Some(codec));
        assert!(Mlp::load(&b"garbage!........"[..]).is_err());
    }

    #[test]
    fn same_seed_same_initialisation() {
        let a = Mlp::new(
            vec![4, 5, 2],
            leaky(),
            Head::Softmax,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = Mlp::new(
            vec![4, 5, 2],
            leaky(),
            Head::Softmax,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, xs in proptest::collection::vec(-50.0f64..50.0, 4)) {
            let net = Mlp::new(vec![4, 8, 5], leaky(), Head::Softmax, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let p = net.forward(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }
}
