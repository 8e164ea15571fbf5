use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Cache, Layer, Mode};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Everything `backprop` needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    input_shape: Vec<usize>,
    caches: Vec<Cache>,
}

/// Parameter gradients keyed by qualified name, plus the gradient w.r.t. the input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub input: Option<Tensor>,
}

impl Gradients {
    /// Accumulates another gradient set (same graph or disjoint graphs).
    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        for (name, g) in other.params {
            match self.params.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.params.insert(name, g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.params.values_mut().for_each(|g| g.scale(factor));
    }

    pub fn empty() -> Self {
        Self {
            params: BTreeMap::new(),
            input: None,
        }
    }
}

/// A topologically ordered stack of layers with named parameters.
///
/// Parameter names are `"{graph}.{layer index}.{slot}"`, e.g. `phi.0.w`.
#[derive(Clone, Debug)]
pub struct Graph {
    name: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
    cached: Option<Trace>,
}

impl Graph {
    pub fn builder(name: &str, input_shape: &[usize]) -> GraphBuilder {
        GraphBuilder {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            current: input_shape.to_vec(),
            layers: Vec::new(),
            error: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers.iter().any(Layer::is_stochastic)
    }

    /// Reseeds the generator behind dropout and input-noise layers.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(format!("{} input", self.name), &expected, x.shape()));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, mode: Mode, mut rng: Option<&mut ChaCha8Rng>, updates: &mut Vec<(usize, super::layers::StatUpdate)>) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache, update) = layer.forward(&h, mode, rng.as_deref_mut())?;
            out.ensure_finite(&format!("{} layer {i} ({}) forward", self.name, layer.kind()))?;
            if let Some(u) = update {
                updates.push((i, u));
            }
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            Trace {
                input_shape: x.shape().to_vec(),
                caches,
            },
        ))
    }

    /// Forward pass that caches intermediates for [`Graph::backward`].
    ///
    /// Train mode updates batch-norm running statistics and draws from the
    /// graph's own generator for stochastic layers.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, trace) = self.trace(x, mode)?;
        self.cached = Some(trace);
        Ok(y)
    }

    /// Backward pass over the cached forward.
    pub fn backward(&self, upstream: &Tensor) -> Result<Gradients> {
        let trace = self.cached.as_ref().ok_or(Error::NoForwardCache)?;
        self.backprop(trace, upstream)
    }

    /// Like [`Graph::forward`] but hands the trace back instead of caching it.
    pub fn trace(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        let mut updates = Vec::new();
        let mut rng = self.rng.clone();
        let result = self.run(x, mode, Some(&mut rng), &mut updates)?;
        self.rng = rng;
        for (i, u) in updates {
            self.layers[i].apply_stat_update(&u);
        }
        Ok(result)
    }

    /// Forward pass that never mutates the graph. In train mode batch-norm
    /// uses batch statistics but running statistics are left alone.
    pub fn trace_frozen(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        if mode == Mode::Train && self.is_stochastic() {
            return Err(Error::invalid(format!(
                "{} has stochastic layers; train-mode forward needs a mutable graph",
                self.name
            )));
        }
        self.run(x, mode, None, &mut Vec::new())
    }

    /// Eval-mode forward; a pure function of the input and parameters.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace_frozen(x, Mode::Eval)?.0)
    }

    pub fn backprop(&self, trace: &Trace, upstream: &Tensor) -> Result<Gradients> {
        self.backprop_with(trace, upstream, true)
    }

    /// Backward pass; skips the input gradient of the first layer when `want_input` is false.
    pub fn backprop_with(&self, trace: &Trace, upstream: &Tensor, want_input: bool) -> Result<Gradients> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::invalid("trace does not belong to this graph"));
        }
        let mut expected = vec![trace.input_shape[0]];
        expected.extend_from_slice(&self.output_shape);
        upstream.expect_shape(&expected, &format!("{} upstream gradient", self.name))?;

        let mut params = BTreeMap::new();
        let mut grad = upstream.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let need_dx = want_input || i > 0;
            let (dx, pgrads) = layer.backward(cache, &grad, need_dx)?;
            for (slot, g) in layer.param_names().iter().zip(pgrads) {
                let name = format!("{}.{i}.{slot}", self.name);
                g.ensure_finite(&format!("gradient of {name}"))?;
                params.insert(name, g);
            }
            match dx {
                Some(dx) => {
                    dx.ensure_finite(&format!("{} layer {i} ({}) backward", self.name, layer.kind()))?;
                    grad = dx;
                }
                None => break,
            }
        }
        let input = (want_input || self.layers.is_empty()).then_some(grad);
        Ok(Gradients { params, input })
    }

    /// Learnable parameters in layer order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, t) in layer.param_names().iter().zip(layer.params()) {
                out.push((format!("{}.{i}.{slot}", self.name), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = self.name.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let slots = layer.param_names();
            for (slot, t) in slots.iter().zip(layer.params_mut()) {
                out.push((format!("{name}.{i}.{slot}"), t));
            }
        }
        out
    }

    /// Every persistent tensor (parameters and running statistics), for checkpoints.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params();
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, t) in layer.buffers() {
                out.push((format!("{}.{i}.{slot}", self.name), t));
            }
        }
        out
    }

    /// Restores state by name; every tensor of this graph must be present with matching shape.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let name = self.name.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (slot, target) in layer.state_mut() {
                let key = format!("{name}.{i}.{slot}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
                src.expect_shape(target.shape(), &key)?;
                *target = src.clone();
            }
        }
        Ok(())
    }

    /// Order-sensitive hash of all persistent tensors.
    pub fn checksum(&self) -> u64 {
        self.state()
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(7) ^ t.checksum())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Validates shapes layer by layer while assembling a [`Graph`].
///
/// Weights use Glorot-uniform initialization, biases start at zero.
pub struct GraphBuilder {
    name: String,
    input_shape: Vec<usize>,
    current: Vec<usize>,
    layers: Vec<Layer>,
    error: Option<Error>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..=limit))
}

impl GraphBuilder {
    /// Appends a layer, checking it against the running per-sample shape.
    pub fn layer(mut self, layer: Layer) -> Self {
        if self.error.is_none() {
            match layer.out_shape(&self.current) {
                Ok(shape) => {
                    self.current = shape;
                    self.layers.push(layer);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self
    }

    pub fn current_shape(&self) -> &[usize] {
        &self.current
    }

    pub fn dense(self, out: usize, rng: &mut impl Rng) -> Self {
        let fin = self.current.iter().product();
        let layer = Layer::Dense {
            w: glorot(&[fin, out], fin, out, rng),
            b: Tensor::zeros(&[out]),
        };
        self.layer(layer)
    }

    /// `kernel x kernel` convolution.
    pub fn conv(self, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let in_ch = self.current.first().copied().unwrap_or(0);
        let rf = kernel * kernel;
        let layer = Layer::Conv2d {
            w: glorot(&[out_ch, in_ch, kernel, kernel], in_ch * rf, out_ch * rf, rng),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        };
        self.layer(layer)
    }

    pub fn conv_transpose(
        self,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let in_ch = self.current.first().copied().unwrap_or(0);
        let rf = kernel * kernel;
        let layer = Layer::ConvTranspose2d {
            w: glorot(&[in_ch, out_ch, kernel, kernel], in_ch * rf, out_ch * rf, rng),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
            out_pad,
        };
        self.layer(layer)
    }

    pub fn max_pool(self) -> Self {
        self.layer(Layer::MaxPool2)
    }

    pub fn relu(self) -> Self {
        self.layer(Layer::Relu)
    }

    pub fn tanh(self) -> Self {
        self.layer(Layer::Tanh)
    }

    pub fn sigmoid(self) -> Self {
        self.layer(Layer::Sigmoid)
    }

    pub fn batch_norm(self) -> Self {
        let features = self.current.first().copied().unwrap_or(0);
        self.layer(Layer::BatchNorm {
            gamma: Tensor::full(&[features.max(1)], 1.0),
            beta: Tensor::zeros(&[features.max(1)]),
            running_mean: Tensor::zeros(&[features.max(1)]),
            running_var: Tensor::full(&[features.max(1)], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        self.layer(Layer::Reshape { shape: shape.to_vec() })
    }

    pub fn flatten(self) -> Self {
        let len = self.current.iter().product();
        self.reshape(&[len])
    }

    pub fn dropout(self, rate: f64) -> Self {
        if !(0.0..1.0).contains(&rate) {
            return self.fail(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.layer(Layer::Dropout { rate })
    }

    pub fn gaussian_noise(self, sigma: f64) -> Self {
        if sigma < 0.0 || !sigma.is_finite() {
            return self.fail(Error::invalid(format!("noise sigma {sigma} must be >= 0")));
        }
        self.layer(Layer::GaussianNoise { sigma })
    }

    fn fail(mut self, e: Error) -> Self {
        self.error.get_or_insert(e);
        self
    }

    /// `rng` seeds the graph's private generator for stochastic layers.
    pub fn build(self, rng: &mut impl RngCore) -> Result<Graph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(Graph {
            name: self.name,
            input_shape: self.input_shape,
            output_shape: self.current,
            layers: self.layers,
            rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
            cached: None,
        })
    }
}
