//! Dense feedforward networks with exact reverse-mode gradients.
//!
//! A network is a stack of affine layers `z = W a + b`. Every layer but the
//! last applies the hidden activation; the output layer is linear.
//!
//! Weights are stored row-major with shape `(fan_out, fan_in)`. Batched
//! evaluation lays samples out row-major as `(batch, dim)` and runs each
//! layer as a single GEMM.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::seed::DecilRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Parameters of a dense network. Also used as the container for parameter
/// gradients and optimizer moments, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetParamsRepr", into = "NetParamsRepr")]
pub struct NetParams {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// On-disk layout: weight matrices as nested rows.
#[derive(Serialize, Deserialize)]
struct NetParamsRepr {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<NetParams> for NetParamsRepr {
    fn from(net: NetParams) -> Self {
        let weights = net
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| w.chunks(net.layer_dims[l]).map(<[f64]>::to_vec).collect())
            .collect();
        NetParamsRepr {
            layer_dims: net.layer_dims,
            activation: net.activation,
            weights,
            biases: net.biases,
        }
    }
}

impl TryFrom<NetParamsRepr> for NetParams {
    type Error = Error;

    fn try_from(repr: NetParamsRepr) -> Result<Self> {
        NetParams::from_rows(repr.layer_dims, repr.activation, repr.weights, repr.biases)
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least 2 layer dims, got {}",
            layer_dims.len()
        )));
    }
    if let Some(pos) = layer_dims.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArchitecture(format!("layer dim {pos} is zero")));
    }
    Ok(())
}

/// Weights uniform on `[-sqrt(3/fan_in), sqrt(3/fan_in)]` (standard deviation
/// `1/sqrt(fan_in)`), biases zero.
pub fn init_net(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<NetParams> {
    validate_dims(layer_dims)?;
    let mut rng = DecilRng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (3.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::InvalidArchitecture(e.to_string()))?;
        weights.push((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetParams {
        layer_dims: layer_dims.to_vec(),
        activation,
        weights,
        biases,
    })
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, row-major `(batch, output_dim)`.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().expect("cache holds at least the input")
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked above in debug builds, guaranteed by
    // the callers' shape checks otherwise), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl NetParams {
    /// Builds a network from nested weight rows, validating every shape.
    pub fn from_rows(
        layer_dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<Vec<f64>>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let n_layers = layer_dims.len() - 1;
        check_len("weight matrix count", n_layers, weights.len())?;
        check_len("bias vector count", n_layers, biases.len())?;
        let mut flat = Vec::with_capacity(n_layers);
        for (l, rows) in weights.into_iter().enumerate() {
            check_len("weight rows", layer_dims[l + 1], rows.len())?;
            let mut w = Vec::with_capacity(layer_dims[l] * layer_dims[l + 1]);
            for row in rows {
                check_len("weight columns", layer_dims[l], row.len())?;
                w.extend(row);
            }
            flat.push(w);
        }
        for (l, b) in biases.iter().enumerate() {
            check_len("bias length", layer_dims[l + 1], b.len())?;
        }
        let net = NetParams {
            layer_dims,
            activation,
            weights: flat,
            biases,
        };
        if !net.is_finite() {
            return Err(Error::Numeric("network parameters contain non-finite values".into()));
        }
        Ok(net)
    }

    /// Same shape, every entry zero.
    pub fn zeros_like(&self) -> Self {
        NetParams {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Row-major `(fan_out, fan_in)` weights of `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// All parameters in a fixed order: layer by layer, weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub(crate) fn check_same_shape(&self, other: &NetParams, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, self.param_count(), other.param_count()))
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.params_mut().for_each(|p| *p *= factor);
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.into_output())
    }

    /// Evaluates `batch` inputs laid out row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<ForwardCache> {
        check_len("forward input", batch * self.input_dim(), inputs.len())?;
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        activations.push(inputs.to_vec());
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut z = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                z.extend_from_slice(&self.biases[l]);
            }
            gemm(
                batch,
                fan_in,
                fan_out,
                &activations[l],
                (fan_in, 1),
                &self.weights[l],
                (1, fan_in),
                1.0,
                &mut z,
                (fan_out, 1),
            );
            if l != last {
                let act = self.activation;
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            activations.push(z);
        }
        Ok(ForwardCache { batch, activations })
    }

    /// Reverse pass for the scalar `sum_b <output_grads[b], output[b]>`.
    ///
    /// Parameter gradients are accumulated into `grads`; the gradient with
    /// respect to the inputs is returned row-major `(batch, input_dim)`.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_grads: &[f64],
        grads: &mut NetParams,
    ) -> Result<Vec<f64>> {
        let batch = cache.batch;
        check_len("output gradient", batch * self.output_dim(), output_grads.len())?;
        check_len("cached layers", self.n_layers() + 1, cache.activations.len())?;
        self.check_same_shape(grads, "gradient buffer")?;

        let mut delta = output_grads.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let a_prev = &cache.activations[l];

            // dW += delta^T * a_prev
            gemm(
                fan_out,
                batch,
                fan_in,
                &delta,
                (1, fan_out),
                a_prev,
                (fan_in, 1),
                1.0,
                &mut grads.weights[l],
                (fan_in, 1),
            );
            let db = &mut grads.biases[l];
            for row in delta.chunks_exact(fan_out) {
                db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }

            // d a_prev = delta * W
            let mut prev = vec![0.0; batch * fan_in];
            gemm(
                batch,
                fan_out,
                fan_in,
                &delta,
                (fan_out, 1),
                &self.weights[l],
                (fan_in, 1),
                0.0,
                &mut prev,
                (fan_in, 1),
            );
            if l > 0 {
                let act = self.activation;
                prev.iter_mut()
                    .zip(a_prev)
                    .for_each(|(g, &a)| *g *= act.derivative_from_output(a));
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `<output_grad, forward(input)>` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(NetParams, Vec<f64>)> {
        let cache = self.forward_batch(input, 1)?;
        let mut grads = self.zeros_like();
        let input_grad = self.backward_batch(&cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }
}
