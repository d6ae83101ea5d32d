//! Dense feedforward networks with reverse-mode gradients and Adam.
//!
//! Checkpoints are JSON objects with fields `widths`, `activation`, `head` and
//! `params`. `params` is flat, layer by layer: the weight matrix of shape
//! `(in, out)` in row-major order, then the `out` biases.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Uniforms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "scale")]
pub enum Head {
    Identity,
    /// `c tanh(z / c)`, bounded by `c`.
    ScaledTanh(f64),
    /// `log(1 + e^z)`, strictly positive.
    Softplus,
}

impl Head {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Head::Identity => z,
            Head::ScaledTanh(c) => c * (z / c).tanh(),
            Head::Softplus => {
                if z > 30.0 {
                    z + (-z).exp()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Head::Identity => 1.0,
            Head::ScaledTanh(c) => {
                let t = (z / c).tanh();
                1.0 - t * t
            }
            Head::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct FeedforwardNet {
    widths: Vec<usize>,
    activation: Activation,
    head: Head,
    layers: Vec<Dense>,
    generation: u64,
}

impl PartialEq for FeedforwardNet {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.activation == other.activation
            && self.head == other.head
            && self.layers == other.layers
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("network has at least one layer")
    }

    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    widths: Vec<usize>,
    activation: Activation,
    head: Head,
    params: Vec<f64>,
}

impl FeedforwardNet {
    /// Glorot-uniform weights from the `(seed, 0)` auxiliary stream, zero biases.
    pub fn new(widths: &[usize], activation: Activation, head: Head, seed: u64) -> Result<Self> {
        Self::validate_widths(widths)?;
        let mut u = Uniforms::new(seed, 0);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let a = (6.0 / (i + o) as f64).sqrt();
                let weight = Array2::from_shape_fn((i, o), |_| a * (2.0 * u.next_unit() - 1.0));
                Dense {
                    weight,
                    bias: Array1::zeros(o),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            head,
            layers,
            generation: fresh_generation(),
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation, head: Head) -> Result<Self> {
        let mut net = Self::new(widths, activation, head, 0)?;
        let n = net.num_params();
        net.set_params(&vec![0.0; n])?;
        Ok(net)
    }

    fn validate_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "a network needs at least input and output widths, all positive; got {widths:?}"
            )));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[k];
                k += 1;
            }
        }
        self.generation = fresh_generation();
        Ok(())
    }

    /// Adds `delta` to the output-layer biases, shifting the pre-head output.
    pub fn shift_output_bias(&mut self, delta: &[f64]) -> Result<()> {
        let last = self.layers.last_mut().unwrap();
        if delta.len() != last.bias.len() {
            return Err(Error::invalid("bias shift has the wrong length"));
        }
        last.bias.iter_mut().zip(delta).for_each(|(b, d)| *b += d);
        self.generation = fresh_generation();
        Ok(())
    }

    /// Multiplies the output-layer weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight.mapv_inplace(|w| w * factor);
        last.bias.mapv_inplace(|b| b * factor);
        self.generation = fresh_generation();
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    fn affine(&self, layer: &Dense, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&layer.weight);
        z += &layer.bias;
        z
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let last = self.layers.len() - 1;
        let mut a = inputs.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = self.affine(layer, &a.view());
            if k < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            } else {
                let head = self.head;
                z.mapv_inplace(|v| head.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_inputs(&inputs)?;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = {
                let a = if k == 0 { inputs } else { post[k - 1].view() };
                self.affine(layer, &a)
            };
            let a = if k < last {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            } else {
                let head = self.head;
                z.mapv(|v| head.apply(v))
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            generation: self.generation,
            inputs: inputs.to_owned(),
            pre,
            post,
        })
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: &ArrayView2<f64>) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::InvalidState(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if upstream.dim() != cache.output().dim() {
            return Err(Error::invalid(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.dim(),
                cache.output().dim()
            )));
        }
        Ok(())
    }

    /// Backpropagates `upstream`; returns the parameter gradient (flat order)
    /// and the gradient with respect to the inputs.
    fn backward_impl(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        self.check_cache(cache, &upstream)?;
        let nl = self.layers.len();
        let head = self.head;
        let mut delta = upstream.to_owned();
        delta.zip_mut_with(&cache.pre[nl - 1], |d, &z| *d *= head.derivative(z));
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(nl);
        for k in (0..nl).rev() {
            let a_prev = if k == 0 { cache.inputs.view() } else { cache.post[k - 1].view() };
            if want_params {
                per_layer.push((a_prev.t().dot(&delta), delta.sum_axis(Axis(0))));
            }
            let mut back = delta.dot(&self.layers[k].weight.t());
            if k > 0 {
                let act = self.activation;
                back.zip_mut_with(&cache.pre[k - 1], |d, &z| *d *= act.derivative(z));
            }
            delta = back;
        }
        let mut grad = Vec::new();
        if want_params {
            grad.reserve(self.num_params());
            for (gw, gb) in per_layer.iter().rev() {
                grad.extend(gw.iter());
                grad.extend(gb.iter());
            }
        }
        Ok((grad, delta))
    }

    /// Gradient of `Σ_rows ⟨upstream, output⟩` with respect to all parameters.
    pub fn param_gradient(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.backward_impl(cache, upstream, true)?.0)
    }

    /// Parameter gradient and input gradient from one backward pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        self.backward_impl(cache, upstream, true)
    }

    /// Row-wise gradient of a scalar output with respect to every input
    /// column, `(rows, input_dim)`.
    pub fn input_gradient_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::invalid("input gradients need a scalar-output network"));
        }
        let cache = self.forward_cached(inputs)?;
        let ones = Array2::ones((inputs.nrows(), 1));
        Ok(self.backward_impl(&cache, ones.view(), false)?.1)
    }

    /// Values and input gradients of a scalar-output network in one pass.
    pub fn value_and_input_gradient(&self, inputs: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if self.output_dim() != 1 {
            return Err(Error::invalid("input gradients need a scalar-output network"));
        }
        let cache = self.forward_cached(inputs)?;
        let ones = Array2::ones((inputs.nrows(), 1));
        let grad = self.backward_impl(&cache, ones.view(), false)?.1;
        Ok((cache.output().column(0).to_vec(), grad))
    }

    /// Gradient of the scalar output at one input row.
    pub fn input_gradient(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::invalid("input shape"))?;
        Ok(self.input_gradient_batch(view)?.row(0).to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            widths: self.widths.clone(),
            activation: self.activation,
            head: self.head,
            params: self.params(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        let mut net = Self::new(&c.widths, c.activation, c.head, 0)?;
        net.set_params(&c.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &FeedforwardNet, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }
}

/// One bias-corrected Adam update of `net` in place.
/// Cosine decay from `base` at the first iteration to `base · final_fraction`
/// at the last.
pub fn cosine_lr(base: f64, final_fraction: f64, iter: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return base;
    }
    let progress = iter as f64 / (iterations - 1) as f64;
    let floor = base * final_fraction;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn adam_step(net: &mut FeedforwardNet, grad: &[f64], state: &mut AdamState) -> Result<()> {
    let n = net.num_params();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "gradient/optimiser sizes ({}, {}) do not match {n} parameters",
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged {
            iteration: state.step,
            reason: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let b1t = 1.0 - state.beta1.powi(state.step as i32);
    let b2t = 1.0 - state.beta2.powi(state.step as i32);
    let mut params = net.params();
    for k in 0..n {
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * grad[k];
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * grad[k] * grad[k];
        let mh = state.m[k] / b1t;
        let vh = state.v[k] / b2t;
        params[k] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    net.set_params(&params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_outputs_zero() {
        let net = FeedforwardNet::zeros(&[3, 8, 2], Activation::Silu, Head::Identity).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 - 4.0);
        assert!(net.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_respect_ranges() {
        let mut net = FeedforwardNet::new(&[2, 16, 1], Activation::Tanh, Head::ScaledTanh(10.0), 4).unwrap();
        net.scale_output_layer(1e3);
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i as f64 - 25.0) * (j as f64 + 1.0));
        assert!(net.forward(x.view()).unwrap().iter().all(|v| v.abs() <= 10.0));
        let net = FeedforwardNet::new(&[2, 16, 1], Activation::Tanh, Head::Softplus, 4).unwrap();
        assert!(net.forward(x.view()).unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn linear_net_weight_gradient_is_outer_product() {
        let net = FeedforwardNet::new(&[3, 2], Activation::Silu, Head::Identity, 1).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let up = Array2::from_shape_vec((1, 2), vec![3.0, -0.25]).unwrap();
        let cache = net.forward_cached(x.view()).unwrap();
        let g = net.param_gradient(&cache, up.view()).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(g[i * 2 + o], x[[0, i]] * up[[0, o]]);
            }
        }
        assert_eq!(&g[6..], &[3.0, -0.25]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = FeedforwardNet::new(&[2, 4, 1], Activation::Silu, Head::Identity, 1).unwrap();
        let x = Array2::zeros((3, 2));
        let cache = net.forward_cached(x.view()).unwrap();
        let g = vec![0.1; net.num_params()];
        let mut adam = AdamState::for_net(&net, 1e-3);
        adam_step(&mut net, &g, &mut adam).unwrap();
        let up = Array2::ones((3, 1));
        assert!(matches!(net.param_gradient(&cache, up.view()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn adam_examples() {
        let mut net = FeedforwardNet::new(&[2, 4, 1], Activation::Silu, Head::Identity, 8).unwrap();
        let before = net.params();
        let mut adam = AdamState::for_net(&net, 1e-3);
        adam_step(&mut net, &vec![0.0; before.len()], &mut adam).unwrap();
        assert_eq!(net.params(), before);

        let mut adam = AdamState::for_net(&net, 1e-3);
        adam_step(&mut net, &vec![2.5; before.len()], &mut adam).unwrap();
        for (a, b) in net.params().iter().zip(&before) {
            assert!((b - a - 1e-3).abs() < 1e-9);
        }

        let mut bad = vec![0.0; before.len()];
        bad[3] = f64::NAN;
        assert!(matches!(
            adam_step(&mut net, &bad, &mut adam),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn softplus_input_gradient_chain_rule() {
        let net = FeedforwardNet::new(&[2, 1], Activation::Silu, Head::Softplus, 2).unwrap();
        let x = [0.3, -0.8];
        let g = net.input_gradient(&x).unwrap();
        let p = net.params();
        let z = x[0] * p[0] + x[1] * p[1] + p[2];
        let s = 1.0 / (1.0 + (-z).exp());
        assert!((g[0] - s * p[0]).abs() < 1e-15);
        assert!((g[1] - s * p[1]).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = FeedforwardNet::new(&[3, 7, 5, 2], Activation::Tanh, Head::ScaledTanh(10.0), 9).unwrap();
        let back = FeedforwardNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.params(), net.params());
    }
}
