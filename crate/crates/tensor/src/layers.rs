//! Dense layers and multilayer perceptrons built on [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f32 },
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// `activation(input · weights + bias)` for a `batch × in` input, `in × out`
/// weights and an `out`-long bias.
pub fn dense_layer(
    g: &mut Graph,
    input: Var,
    weights: Var,
    bias: Var,
    activation: Activation,
) -> Result<Var> {
    let product = g.matmul(input, weights)?;
    let shifted = g.add_bias(product, bias)?;
    activation.apply(g, shifted)
}

/// Shape and activation of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    /// Variance-preserving uniform weights — He for (leaky) ReLU layers,
    /// Glorot otherwise — and zero bias.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let bound = init_bound(spec);
        let weight = (0..spec.inputs * spec.outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![spec.inputs, spec.outputs], weight).with_requires_grad(true),
            bias: Tensor::from_parts(vec![spec.outputs], vec![0.0; spec.outputs]).with_requires_grad(true),
            activation: spec.activation,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weight.shape()[0], self.weight.shape()[1], self.activation)
    }
}

fn init_bound(spec: LayerSpec) -> f32 {
    let (fan_in, fan_out) = (spec.inputs as f32, spec.outputs as f32);
    match spec.activation {
        Activation::Relu => (6.0 / fan_in).sqrt(),
        Activation::LeakyRelu { slope } => (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt(),
        Activation::Sigmoid | Activation::Tanh | Activation::Identity => (6.0 / (fan_in + fan_out)).sqrt(),
    }
}

/// Graph handles for the parameters of an [`Mlp`], in layer order.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        check_chain(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Dense::init(s, rng)).collect(),
        })
    }

    /// Rebuilds a network from its layer specs and the flat parameter
    /// payload produced by [`Mlp::flat_params`].
    pub fn from_flat(specs: &[LayerSpec], params: &[f32]) -> Result<Self> {
        check_chain(specs)?;
        let expected: usize = specs.iter().map(LayerSpec::param_count).sum();
        if expected != params.len() {
            return Err(TensorError::ParamCount {
                expected,
                found: params.len(),
            });
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let slice = params[offset..offset + n].to_vec();
            offset += n;
            slice
        };
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let weight = Tensor::param(vec![s.inputs, s.outputs], take(s.inputs * s.outputs))?;
            let bias = Tensor::param(vec![s.outputs], take(s.outputs))?;
            layers.push(Dense {
                weight,
                bias,
                activation: s.activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Dense::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.params().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Copies the parameters into `g`. With `trainable == false` they enter as
    /// constants: gradients still flow through the network to its input, but
    /// none are recorded for the parameters themselves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.leaf(&l.weight), g.leaf(&l.bias))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Var> {
        let outputs = self.forward_layers(g, bound, x)?;
        Ok(outputs[outputs.len() - 1])
    }

    /// Output of every layer, first to last.
    pub fn forward_layers(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (layer, &(w, b)) in self.layers.iter().zip(&bound.vars) {
            h = dense_layer(g, h, w, b, layer.activation)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Adds the gradients of a trainable binding into the parameters.
    pub fn accumulate_grads(&mut self, bound: &BoundMlp, grads: &Gradients) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            layer.weight.accumulate_grad(grads.wrt(w)?)?;
            layer.bias.accumulate_grad(grads.wrt(b)?)?;
        }
        Ok(())
    }

    /// Forward pass on a `batch × input_dim` tensor without gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut layers = self.infer_layers(x)?;
        Ok(layers.pop().expect("at least one layer"))
    }

    pub fn infer_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let input = g.constant(x.clone());
        let outputs = self.forward_layers(&mut g, &bound, input)?;
        Ok(outputs.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: Vec::new(),
            len: 0,
        });
    }
    for s in specs {
        if s.inputs == 0 || s.outputs == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![s.inputs, s.outputs],
                len: 0,
            });
        }
    }
    for pair in specs.windows(2) {
        if pair[0].outputs != pair[1].inputs {
            return Err(TensorError::ShapeMismatch {
                op: "layer chain",
                left: vec![pair[0].inputs, pair[0].outputs],
                right: vec![pair[1].inputs, pair[1].outputs],
            });
        }
    }
    Ok(())
}
