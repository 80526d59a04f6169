//! Layered architectures, parameter storage and the plain forward pass.
//!
//! Activities are stored batch-major: layer `k` of a batch of `B` samples is a
//! `B x d_k` matrix, and weight `W_{k-1}` has shape `d_k x d_{k-1}`, so a
//! pre-activation is `a_k = z_{k-1} W_{k-1}^T (+ b_{k-1})` row by row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    /// Euclidean projection onto the activation's domain (`R` or `R_{>=0}`).
    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            Activation::Linear => a,
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative used by reverse-mode differentiation. The ReLU kink follows
    /// the projection convention `f(0) = 0` and uses slope 0 there.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_inplace(self, a: &mut Array2<f64>) {
        if self == Activation::Relu {
            a.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// Applies an activation to a vector.
pub fn activation_apply(kind: Activation, a: &Array1<f64>) -> Array1<f64> {
    a.mapv(|v| kind.eval(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    #[serde(default)]
    use_bias: bool,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>, use_bias: bool) -> Result<Self> {
        let arch = Self {
            layer_dims,
            activations,
            use_bias,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Hidden layers share one activation, the output layer gets its own.
    pub fn mlp(layer_dims: &[usize], hidden: Activation, output: Activation, use_bias: bool) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(
                "an architecture needs at least an input and an output dimension".into(),
            ));
        }
        let n = layer_dims.len() - 1;
        let mut activations = vec![hidden; n];
        activations[n - 1] = output;
        Self::new(layer_dims.to_vec(), activations, use_bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(
                "an architecture needs at least an input and an output dimension".into(),
            ));
        }
        if self.activations.len() != self.layer_dims.len() - 1 {
            return Err(Error::DimensionMismatch {
                context: "activations per layer",
                expected: self.layer_dims.len() - 1,
                actual: self.activations.len(),
            });
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("all layer dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Number of layers `L` (excluding the input).
    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Activation of layer `k` in `1..=L`.
    pub fn activation(&self, k: usize) -> Activation {
        self.activations[k - 1]
    }

    pub fn use_bias(&self) -> bool {
        self.use_bias
    }

    /// Total number of units in the lifted state `(z_1, ..., z_L)`.
    pub fn num_units(&self) -> usize {
        self.layer_dims[1..].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    KaimingUniform,
    /// i.i.d. `N(0, sigma^2)` weights, zero biases.
    Gaussian { sigma: f64 },
    /// Weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default of
    /// common deep-learning frameworks.
    UniformFanIn,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::KaimingUniform
    }
}

/// Network weights `W_0, ..., W_{L-1}` with optional biases. The same type
/// doubles as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    pub weights: Vec<Array2<f64>>,
    pub biases: Option<Vec<Array1<f64>>>,
}

impl NetworkParams {
    pub fn from_parts(
        arch: Architecture,
        weights: Vec<Array2<f64>>,
        biases: Option<Vec<Array1<f64>>>,
    ) -> Result<Self> {
        arch.validate()?;
        let l = arch.num_layers();
        if weights.len() != l {
            return Err(Error::DimensionMismatch {
                context: "number of weight matrices",
                expected: l,
                actual: weights.len(),
            });
        }
        let dims = arch.layer_dims();
        for (k, w) in weights.iter().enumerate() {
            if w.nrows() != dims[k + 1] {
                return Err(Error::DimensionMismatch {
                    context: "weight rows",
                    expected: dims[k + 1],
                    actual: w.nrows(),
                });
            }
            if w.ncols() != dims[k] {
                return Err(Error::DimensionMismatch {
                    context: "weight columns",
                    expected: dims[k],
                    actual: w.ncols(),
                });
            }
        }
        match (&biases, arch.use_bias()) {
            (Some(bs), true) => {
                if bs.len() != l {
                    return Err(Error::DimensionMismatch {
                        context: "number of bias vectors",
                        expected: l,
                        actual: bs.len(),
                    });
                }
                for (k, b) in bs.iter().enumerate() {
                    if b.len() != dims[k + 1] {
                        return Err(Error::DimensionMismatch {
                            context: "bias length",
                            expected: dims[k + 1],
                            actual: b.len(),
                        });
                    }
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::InvalidSpec("biases given for an architecture without biases".into()))
            }
            (None, true) => {
                return Err(Error::InvalidSpec("architecture uses biases but none were given".into()))
            }
        }
        let params = Self { arch, weights, biases };
        if !params.is_finite() {
            return Err(Error::InvalidSpec("parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let dims = arch.layer_dims();
        let weights = (0..arch.num_layers())
            .map(|k| Array2::zeros((dims[k + 1], dims[k])))
            .collect();
        let biases = arch
            .use_bias()
            .then(|| (0..arch.num_layers()).map(|k| Array1::zeros(dims[k + 1])).collect());
        Self {
            arch: arch.clone(),
            weights,
            biases,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// `W_{k-1}`, the weight feeding layer `k` in `1..=L`.
    pub fn weight_into(&self, k: usize) -> &Array2<f64> {
        &self.weights[k - 1]
    }

    pub fn bias_into(&self, k: usize) -> Option<&Array1<f64>> {
        self.biases.as_ref().map(|b| &b[k - 1])
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().flatten().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().flatten().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Iterates all parameter entries, weights first, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flatten().flat_map(|b| b.iter().copied()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flatten().flat_map(|b| b.iter_mut()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values()
            .zip(other.values())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.scaled_add(scale, o);
        }
        if let (Some(bs), Some(os)) = (self.biases.as_mut(), other.biases.as_ref()) {
            for (b, o) in bs.iter_mut().zip(os) {
                b.scaled_add(scale, o);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// Pre-activation `a_k = z_{k-1} W_{k-1}^T + b_{k-1}` for a batch.
    pub fn pre_activation(&self, k: usize, z_prev: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = z_prev.dot(&self.weights[k - 1].t());
        if let Some(b) = self.bias_into(k) {
            a += b;
        }
        a
    }
}

/// Lifted activities `z_1, ..., z_L` of a batch together with the clamped
/// input `z_0 = x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationState {
    pub input: Array2<f64>,
    pub layers: Vec<Array2<f64>>,
}

impl ActivationState {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `z_k` for `k` in `0..=L`, where `z_0` is the input.
    pub fn z(&self, k: usize) -> ArrayView2<'_, f64> {
        if k == 0 {
            self.input.view()
        } else {
            self.layers[k - 1].view()
        }
    }

    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("a state has at least one layer")
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|z| z.iter().all(|v| v.is_finite()))
    }

    /// `max_k max |z_k - other_k|`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Restricts the state to a single sample.
    pub fn row(&self, i: usize) -> ActivationState {
        ActivationState {
            input: self.input.select(Axis(0), &[i]),
            layers: self.layers.iter().map(|z| z.select(Axis(0), &[i])).collect(),
        }
    }
}

pub fn init_params(arch: &Architecture, seed: u64, scheme: InitScheme) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(arch);
    let dims = arch.layer_dims().to_vec();
    for k in 0..params.weights.len() {
        let w = &mut params.weights[k];
        match scheme {
            InitScheme::KaimingUniform => {
                let bound = (6.0 / dims[k] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                w.mapv_inplace(|_| dist.sample(&mut rng));
            }
            InitScheme::Gaussian { sigma } => {
                if sigma > 0.0 {
                    let dist = Normal::new(0.0, sigma).expect("positive sigma");
                    w.mapv_inplace(|_| dist.sample(&mut rng));
                }
            }
            InitScheme::UniformFanIn => {
                let bound = 1.0 / (dims[k] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                w.mapv_inplace(|_| dist.sample(&mut rng));
                if let Some(bs) = params.biases.as_mut() {
                    bs[k].mapv_inplace(|_| dist.sample(&mut rng));
                }
            }
        }
    }
    params
}

fn check_input(params: &NetworkParams, x: &ArrayView2<f64>) -> Result<()> {
    let d0 = params.arch().input_dim();
    if x.ncols() != d0 {
        return Err(Error::DimensionMismatch {
            context: "input columns",
            expected: d0,
            actual: x.ncols(),
        });
    }
    Ok(())
}

/// Plain forward pass `z_k = f_k(W_{k-1} z_{k-1} + b_{k-1})`.
pub fn forward(params: &NetworkParams, x: &ArrayView2<f64>) -> Result<ActivationState> {
    check_input(params, x)?;
    let mut layers: Vec<Array2<f64>> = Vec::with_capacity(params.num_layers());
    for k in 1..=params.num_layers() {
        let prev = if k == 1 { x.view() } else { layers[k - 2].view() };
        let mut z = params.pre_activation(k, &prev);
        params.arch().activation(k).apply_inplace(&mut z);
        layers.push(z);
    }
    Ok(ActivationState {
        input: x.to_owned(),
        layers,
    })
}

/// Index of the largest entry per row, ties broken towards the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Matrix with i.i.d. uniform entries in `[-scale, scale]`.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite scale");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}
