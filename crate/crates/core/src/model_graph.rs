//! Layer DAG, declarative model config, and the sequential reference
//! forward/backward passes every distributed mode is checked against.
//!
//! A model is built from a TOML document (format version 1):
//!
//! ```toml
//! format_version = 1
//! rng = "chacha8"
//! seed = 42
//! input_shape = [4]
//!
//! [[layers]]
//! kind = "input"
//!
//! [[layers]]
//! kind = "dense"
//! units = 8            # inputs default to the previous layer
//!
//! [[layers]]
//! kind = "add"
//! inputs = [1, 2]      # indices into this list
//!
//! [[layers]]
//! kind = "softmax_xent"
//! ```
//!
//! Layers may be listed in any order; they are topologically sorted (ties
//! broken by list position) and renumbered so that every input id is lower
//! than its consumer's id.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softmax_xent, Tensor, TensorError};

pub type LayerId = usize;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Schema(String),
    #[error("layer {layer}: input {input} does not exist")]
    UnknownInput { layer: usize, input: usize },
    #[error("layers {0:?} form a cycle")]
    Cycle(Vec<usize>),
    #[error("layer {layer} ({kind}): expected {expected} inputs, got {got}")]
    Arity {
        layer: LayerId,
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: {detail}")]
    Shape { layer: LayerId, detail: String },
    #[error("model must have exactly one {kind} layer, found {count}")]
    LayerCount { kind: &'static str, count: usize },
    #[error("layer {0} is not consumed by any layer and is not the loss")]
    DeadLayer(LayerId),
    #[error("missing activation for layer {0}")]
    MissingActivation(LayerId),
    #[error("layer {layer}: gradient shape {got:?} does not match parameter shape {expected:?}")]
    GradientShape {
        layer: LayerId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {0} has no parameters")]
    NoParams(LayerId),
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
}

/// One entry of `[[layers]]` in the config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Input {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
    Relu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
    Add {
        inputs: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
    Flatten {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
    SoftmaxXent {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<f64>,
    },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            inputs: None,
            cost: None,
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Relu {
            inputs: None,
            cost: None,
        }
    }

    pub fn add(a: usize, b: usize) -> Self {
        LayerSpec::Add {
            inputs: vec![a, b],
            cost: None,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec::Flatten {
            inputs: None,
            cost: None,
        }
    }

    pub fn loss() -> Self {
        LayerSpec::SoftmaxXent {
            inputs: None,
            cost: None,
        }
    }

    fn explicit_inputs(&self) -> Option<&[usize]> {
        match self {
            LayerSpec::Input { .. } => Some(&[]),
            LayerSpec::Add { inputs, .. } => Some(inputs),
            LayerSpec::Dense { inputs, .. }
            | LayerSpec::Relu { inputs, .. }
            | LayerSpec::Flatten { inputs, .. }
            | LayerSpec::SoftmaxXent { inputs, .. } => inputs.as_deref(),
        }
    }

    fn cost(&self) -> Option<f64> {
        match self {
            LayerSpec::Input { cost }
            | LayerSpec::Dense { cost, .. }
            | LayerSpec::Relu { cost, .. }
            | LayerSpec::Add { cost, .. }
            | LayerSpec::Flatten { cost, .. }
            | LayerSpec::SoftmaxXent { cost, .. } => *cost,
        }
    }
}

fn default_rng() -> String {
    "chacha8".to_string()
}

/// The model-config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub format_version: u32,
    #[serde(default = "default_rng")]
    pub rng: String,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(seed: u64, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            rng: default_rng(),
            seed,
            input_shape,
            layers,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec is always serializable")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Dense { units: usize },
    Relu,
    Add,
    Flatten,
    SoftmaxXent,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxXent => "softmax_xent",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[in_features × out_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: LayerId,
    pub kind: LayerKind,
    pub params: Option<DenseParams>,
    pub inputs: Vec<LayerId>,
    /// Per-sample output shape (without the batch axis).
    pub out_shape: Vec<usize>,
    /// Partitioning cost override from the config.
    pub cost: Option<f64>,
}

impl LayerNode {
    pub fn param_count(&self) -> usize {
        self.params
            .as_ref()
            .map_or(0, |p| p.weight.len() + p.bias.len())
    }

    pub fn out_features(&self) -> usize {
        self.out_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerNode>,
    consumers: Vec<Vec<LayerId>>,
    output_id: LayerId,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamGrad {
    pub fn scale(&self, c: f64) -> ParamGrad {
        ParamGrad {
            weight: self.weight.scale(c),
            bias: self.bias.scale(c),
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        self.weight.scale_assign(c);
        self.bias.scale_assign(c);
    }

    pub fn add_scaled_assign(&mut self, other: &ParamGrad, c: f64) -> Result<(), TensorError> {
        self.weight.add_scaled_assign(&other.weight, c)?;
        self.bias.add_scaled_assign(&other.bias, c)
    }

    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<(), TensorError> {
        self.weight.add_assign(&other.weight)?;
        self.bias.add_assign(&other.bias)
    }
}

/// Parameter gradients keyed by layer id; only parameterized layers appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<LayerId, ParamGrad>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerId, grad: ParamGrad) {
        self.grads.insert(layer, grad);
    }

    pub fn get(&self, layer: LayerId) -> Option<&ParamGrad> {
        self.grads.get(&layer)
    }

    pub fn get_mut(&mut self, layer: LayerId) -> Option<&mut ParamGrad> {
        self.grads.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, &ParamGrad)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Largest relative difference over all layers present in `self`.
    pub fn max_rel_diff(&self, other: &GradientSet) -> Result<f64, ModelError> {
        let mut worst: f64 = 0.0;
        for (id, g) in self.iter() {
            let o = other.get(id).ok_or(ModelError::NoParams(id))?;
            worst = worst
                .max(g.weight.max_rel_diff(&o.weight)?)
                .max(g.bias.max_rel_diff(&o.bias)?);
        }
        Ok(worst)
    }
}

pub type ActivationMap = BTreeMap<LayerId, Tensor>;

fn topo_order(spec: &ModelSpec, inputs: &[Vec<usize>]) -> Result<Vec<usize>, ModelError> {
    let n = spec.layers.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, ins) in inputs.iter().enumerate() {
        for &src in ins {
            if src >= n {
                return Err(ModelError::UnknownInput {
                    layer: i,
                    input: src,
                });
            }
            indegree[i] += 1;
            consumers[src].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).filter(|&i| indegree[i] > 0).collect();
        return Err(ModelError::Cycle(stuck));
    }
    Ok(order)
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect()
}

/// Validates the config, sorts it topologically, infers shapes, and
/// initializes weights from the seeded generator.
pub fn build_model_from_spec(spec: &ModelSpec) -> Result<ModelGraph, ModelError> {
    if spec.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Schema(format!(
            "format_version: unsupported version {} (expected {MODEL_FORMAT_VERSION})",
            spec.format_version
        )));
    }
    if spec.rng != "chacha8" {
        return Err(ModelError::Schema(format!(
            "rng: unknown generator `{}` (expected `chacha8`)",
            spec.rng
        )));
    }
    if spec.layers.is_empty() {
        return Err(ModelError::Schema("layers: at least one layer required".into()));
    }
    let inputs: Vec<Vec<usize>> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.explicit_inputs() {
            Some(ins) => ins.to_vec(),
            None if i == 0 => vec![],
            None => vec![i - 1],
        })
        .collect();
    let order = topo_order(spec, &inputs)?;
    let mut new_id = vec![0; order.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_id[old] = pos;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers: Vec<LayerNode> = Vec::with_capacity(order.len());
    for (id, &old) in order.iter().enumerate() {
        let ls = &spec.layers[old];
        let kind = match ls {
            LayerSpec::Input { .. } => LayerKind::Input,
            LayerSpec::Dense { units, .. } => LayerKind::Dense { units: *units },
            LayerSpec::Relu { .. } => LayerKind::Relu,
            LayerSpec::Add { .. } => LayerKind::Add,
            LayerSpec::Flatten { .. } => LayerKind::Flatten,
            LayerSpec::SoftmaxXent { .. } => LayerKind::SoftmaxXent,
        };
        let ins: Vec<LayerId> = inputs[old].iter().map(|&o| new_id[o]).collect();
        if ins.len() != kind.arity() {
            return Err(ModelError::Arity {
                layer: id,
                kind: kind.name(),
                expected: kind.arity(),
                got: ins.len(),
            });
        }
        let in_shapes: Vec<&[usize]> = ins.iter().map(|&i| layers[i].out_shape.as_slice()).collect();
        let shape_err = |detail: String| ModelError::Shape { layer: id, detail };
        let (out_shape, params) = match kind {
            LayerKind::Input => {
                if spec.input_shape.is_empty()
                    || spec.input_shape.len() > 3
                    || spec.input_shape.contains(&0)
                {
                    return Err(shape_err(format!(
                        "input_shape {:?} must have 1..=3 positive dimensions",
                        spec.input_shape
                    )));
                }
                (spec.input_shape.clone(), None)
            }
            LayerKind::Dense { units } => {
                if units == 0 {
                    return Err(shape_err("dense units must be positive".into()));
                }
                let [fan_in] = in_shapes[0] else {
                    return Err(shape_err(format!(
                        "dense expects a flat input, got {:?} (insert a flatten layer)",
                        in_shapes[0]
                    )));
                };
                let weight = Tensor::new(vec![*fan_in, units], glorot(&mut rng, *fan_in, units))?;
                let bias = Tensor::zeros(&[units])?;
                (vec![units], Some(DenseParams { weight, bias }))
            }
            LayerKind::Relu => (in_shapes[0].to_vec(), None),
            LayerKind::Add => {
                if in_shapes[0] != in_shapes[1] {
                    return Err(shape_err(format!(
                        "add inputs have different shapes {:?} and {:?}",
                        in_shapes[0], in_shapes[1]
                    )));
                }
                (in_shapes[0].to_vec(), None)
            }
            LayerKind::Flatten => (vec![in_shapes[0].iter().product()], None),
            LayerKind::SoftmaxXent => {
                if in_shapes[0].len() != 1 {
                    return Err(shape_err(format!(
                        "softmax_xent expects flat logits, got {:?}",
                        in_shapes[0]
                    )));
                }
                (in_shapes[0].to_vec(), None)
            }
        };
        layers.push(LayerNode {
            id,
            kind,
            params,
            inputs: ins,
            out_shape,
            cost: ls.cost(),
        });
    }
    ModelGraph::from_layers(layers, spec.input_shape.clone())
}

impl ModelGraph {
    fn from_layers(layers: Vec<LayerNode>, input_shape: Vec<usize>) -> Result<Self, ModelError> {
        let count = |pred: fn(&LayerKind) -> bool| layers.iter().filter(|l| pred(&l.kind)).count();
        let inputs = count(|k| matches!(k, LayerKind::Input));
        if inputs != 1 {
            return Err(ModelError::LayerCount {
                kind: "input",
                count: inputs,
            });
        }
        let losses = count(|k| matches!(k, LayerKind::SoftmaxXent));
        if losses != 1 {
            return Err(ModelError::LayerCount {
                kind: "softmax_xent",
                count: losses,
            });
        }
        let mut consumers = vec![Vec::new(); layers.len()];
        for l in &layers {
            for &i in &l.inputs {
                consumers[i].push(l.id);
            }
        }
        let output_id = layers
            .iter()
            .position(|l| l.kind == LayerKind::SoftmaxXent)
            .expect("counted above");
        if !consumers[output_id].is_empty() {
            return Err(ModelError::Schema(format!(
                "layers: softmax_xent layer {output_id} must be the sink but has consumers {:?}",
                consumers[output_id]
            )));
        }
        // In a DAG whose only sink is the loss, every layer reaches the loss.
        if let Some(dead) = (0..layers.len()).find(|&i| i != output_id && consumers[i].is_empty()) {
            return Err(ModelError::DeadLayer(dead));
        }
        Ok(Self {
            layers,
            consumers,
            output_id,
            input_shape,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        build_model_from_spec(&ModelSpec::from_toml(text)?)
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &LayerNode {
        &self.layers[id]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn consumers(&self, id: LayerId) -> &[LayerId] {
        &self.consumers[id]
    }

    pub fn output_id(&self) -> LayerId {
        self.output_id
    }

    pub fn input_id(&self) -> LayerId {
        0
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.output_id].out_features()
    }

    pub fn param_layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layers.iter().filter(|l| l.params.is_some()).map(|l| l.id)
    }

    pub fn params(&self, id: LayerId) -> Option<&DenseParams> {
        self.layers[id].params.as_ref()
    }

    pub fn set_params(&mut self, id: LayerId, params: DenseParams) -> Result<(), ModelError> {
        let current = self.layers[id].params.as_ref().ok_or(ModelError::NoParams(id))?;
        if current.weight.shape() != params.weight.shape() || current.bias.shape() != params.bias.shape() {
            return Err(ModelError::GradientShape {
                layer: id,
                expected: current.weight.shape().to_vec(),
                got: params.weight.shape().to_vec(),
            });
        }
        self.layers[id].params = Some(params);
        Ok(())
    }

    /// Checksum over the parameters of the given layers, in ascending id order.
    pub fn param_checksum(&self, layers: impl IntoIterator<Item = LayerId>) -> u64 {
        let mut ids: Vec<LayerId> = layers.into_iter().collect();
        ids.sort_unstable();
        let mut h = 0u64;
        for id in ids {
            if let Some(p) = self.params(id) {
                h = crate::tensor::fnv_mix(h, p.weight.checksum());
                h = crate::tensor::fnv_mix(h, p.bias.checksum());
            }
        }
        h
    }

    /// Largest relative parameter difference against another model of the same shape.
    pub fn max_param_rel_diff(&self, other: &ModelGraph) -> Result<f64, ModelError> {
        let mut worst: f64 = 0.0;
        for id in self.param_layers() {
            let (a, b) = (self.params(id).unwrap(), other.params(id).ok_or(ModelError::NoParams(id))?);
            worst = worst
                .max(a.weight.max_rel_diff(&b.weight)?)
                .max(a.bias.max_rel_diff(&b.bias)?);
        }
        Ok(worst)
    }
}

/// Applies one layer to its (already computed) inputs.
pub fn layer_forward(node: &LayerNode, inputs: &[&Tensor]) -> Result<Tensor, ModelError> {
    if inputs.len() != node.kind.arity() {
        return Err(ModelError::Arity {
            layer: node.id,
            kind: node.kind.name(),
            expected: node.kind.arity(),
            got: inputs.len(),
        });
    }
    let shape_err = |e: TensorError| ModelError::Shape {
        layer: node.id,
        detail: e.to_string(),
    };
    match node.kind {
        LayerKind::Input => Err(ModelError::Shape {
            layer: node.id,
            detail: "input layers take their value from the batch".into(),
        }),
        LayerKind::Dense { .. } => {
            let p = node.params.as_ref().ok_or(ModelError::NoParams(node.id))?;
            inputs[0]
                .matmul(&p.weight)
                .and_then(|z| z.add_row_vector(&p.bias))
                .map_err(shape_err)
        }
        LayerKind::Relu => Ok(inputs[0].relu()),
        LayerKind::Add => inputs[0].add(inputs[1]).map_err(shape_err),
        LayerKind::Flatten => {
            let x = inputs[0];
            x.reshape(&[x.rows(), x.row_len()]).map_err(shape_err)
        }
        LayerKind::SoftmaxXent => Ok(inputs[0].clone()),
    }
}

/// Back-propagates `upstream` (∂L/∂output) through one layer. Returns the
/// errors for each input, in input order, and the parameter gradient if any.
pub fn layer_backward(
    node: &LayerNode,
    inputs: &[&Tensor],
    upstream: &Tensor,
) -> Result<(Vec<Tensor>, Option<ParamGrad>), ModelError> {
    let shape_err = |e: TensorError| ModelError::Shape {
        layer: node.id,
        detail: e.to_string(),
    };
    match node.kind {
        LayerKind::Input => Ok((vec![], None)),
        LayerKind::Dense { .. } => {
            let p = node.params.as_ref().ok_or(ModelError::NoParams(node.id))?;
            let x = inputs[0];
            let weight = x.t_matmul(upstream).map_err(shape_err)?;
            let bias = upstream.sum_rows().map_err(shape_err)?;
            let dx = upstream.matmul_t(&p.weight).map_err(shape_err)?;
            Ok((vec![dx], Some(ParamGrad { weight, bias })))
        }
        LayerKind::Relu => Ok((vec![inputs[0].relu_grad(upstream).map_err(shape_err)?], None)),
        LayerKind::Add => Ok((vec![upstream.clone(), upstream.clone()], None)),
        LayerKind::Flatten => Ok((
            vec![upstream.reshape(inputs[0].shape()).map_err(shape_err)?],
            None,
        )),
        LayerKind::SoftmaxXent => Ok((vec![upstream.clone()], None)),
    }
}

fn check_batch(model: &ModelGraph, batch: &Tensor) -> Result<(), ModelError> {
    if &batch.shape()[1..] != model.input_shape() {
        return Err(ModelError::Shape {
            layer: model.input_id(),
            detail: format!(
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                model.input_shape()
            ),
        });
    }
    Ok(())
}

/// Forward pass only; returns every layer's activation. The loss layer's
/// activation is its logits.
pub fn forward_activations(model: &ModelGraph, batch: &Tensor) -> Result<ActivationMap, ModelError> {
    check_batch(model, batch)?;
    let mut acts = ActivationMap::new();
    for node in model.layers() {
        let out = if node.kind == LayerKind::Input {
            batch.clone()
        } else {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| acts.get(i).ok_or(ModelError::MissingActivation(*i)))
                .collect::<Result<_, _>>()?;
            layer_forward(node, &ins)?
        };
        acts.insert(node.id, out);
    }
    Ok(acts)
}

pub fn forward_seq(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &Tensor,
) -> Result<(f64, ActivationMap), ModelError> {
    let acts = forward_activations(model, batch)?;
    let logits = &acts[&model.output_id()];
    let (loss, _) = softmax_xent(logits, labels).map_err(|e| ModelError::Shape {
        layer: model.output_id(),
        detail: e.to_string(),
    })?;
    Ok((loss, acts))
}

/// Sequential backward pass. Also returns ∂L/∂(output of layer) for every
/// layer, which is what crosses a partition boundary as a partial error.
pub fn backward_seq_full(
    model: &ModelGraph,
    acts: &ActivationMap,
    labels: &Tensor,
) -> Result<(GradientSet, BTreeMap<LayerId, Tensor>), ModelError> {
    let out = model.output_id();
    let logits = acts.get(&out).ok_or(ModelError::MissingActivation(out))?;
    let (_, grad_logits) = softmax_xent(logits, labels).map_err(|e| ModelError::Shape {
        layer: out,
        detail: e.to_string(),
    })?;
    let mut errors: BTreeMap<LayerId, Tensor> = BTreeMap::new();
    errors.insert(out, grad_logits);
    let mut grads = GradientSet::new();
    // Consumers are visited in descending id order, so each layer's error is
    // the sum of its consumers' contributions from highest id to lowest.
    for node in model.layers().iter().rev() {
        if node.kind == LayerKind::Input {
            continue;
        }
        let upstream = errors.get(&node.id).ok_or(ModelError::MissingActivation(node.id))?;
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|i| acts.get(i).ok_or(ModelError::MissingActivation(*i)))
            .collect::<Result<_, _>>()?;
        let (dxs, pgrad) = layer_backward(node, &ins, upstream)?;
        if let Some(g) = pgrad {
            grads.insert(node.id, g);
        }
        for (&src, dx) in node.inputs.iter().zip(dxs) {
            match errors.get_mut(&src) {
                Some(e) => e.add_assign(&dx)?,
                None => {
                    errors.insert(src, dx);
                }
            }
        }
    }
    Ok((grads, errors))
}

pub fn backward_seq(model: &ModelGraph, acts: &ActivationMap, labels: &Tensor) -> Result<GradientSet, ModelError> {
    Ok(backward_seq_full(model, acts, labels)?.0)
}

/// `W ← W − lr·dW` for every layer present in `grads`, ascending id order.
pub fn sgd_apply(model: &mut ModelGraph, grads: &GradientSet, lr: f64) -> Result<(), ModelError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(ModelError::LearningRate(lr));
    }
    for (id, g) in grads.iter() {
        let node = model.layers.get_mut(id).ok_or(ModelError::NoParams(id))?;
        let p = node.params.as_mut().ok_or(ModelError::NoParams(id))?;
        for (param, grad) in [(&mut p.weight, &g.weight), (&mut p.bias, &g.bias)] {
            if param.shape() != grad.shape() {
                return Err(ModelError::GradientShape {
                    layer: id,
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
        }
        for (param, grad) in [(&mut p.weight, &g.weight), (&mut p.bias, &g.bias)] {
            for (w, &d) in param.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * d;
            }
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
    let pred = logits.argmax_rows()?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Sequential evaluation in chunks of `chunk` rows.
pub fn evaluate_seq(model: &ModelGraph, x: &Tensor, labels: &[usize], chunk: usize) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + chunk.max(1)).min(x.rows());
        let acts = forward_activations(model, &x.slice_rows(start, end)?)?;
        let pred = acts[&model.output_id()].argmax_rows()?;
        correct += pred
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / x.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_batch, random_model_spec};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn chain(widths: &[usize], input: usize) -> ModelSpec {
        let mut layers = vec![LayerSpec::Input { cost: None }];
        for &w in widths {
            layers.push(LayerSpec::dense(w));
        }
        layers.push(LayerSpec::loss());
        ModelSpec::new(1, vec![input], layers)
    }

    fn set(model: &mut ModelGraph, id: LayerId, w: Tensor) {
        let units = w.shape()[1];
        model
            .set_params(id, DenseParams { weight: w, bias: Tensor::zeros(&[units]).unwrap() })
            .unwrap();
    }

    #[test]
    fn two_layer_chain_builds_four_nodes() {
        let m = build_model_from_spec(&chain(&[3, 2], 2)).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.output_id(), 3);
        assert_eq!(m.layer(1).inputs, vec![0]);
        assert_eq!(m.params(1).unwrap().weight.shape(), &[2, 3]);
        assert_eq!(m.params(2).unwrap().bias.shape(), &[2]);
    }

    #[test]
    fn identity_weights_reproduce_input() {
        let mut m = build_model_from_spec(&chain(&[3, 3], 3)).unwrap();
        set(&mut m, 1, Tensor::identity(3).unwrap());
        set(&mut m, 2, Tensor::identity(3).unwrap());
        let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]).unwrap();
        let acts = forward_activations(&m, &x).unwrap();
        assert_eq!(acts[&m.output_id()], x);
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let mut m = build_model_from_spec(&chain(&[4, 5], 3)).unwrap();
        set(&mut m, 1, Tensor::zeros(&[3, 4]).unwrap());
        set(&mut m, 2, Tensor::zeros(&[4, 5]).unwrap());
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let y = Tensor::one_hot(&[2], 5).unwrap();
        let (loss, _) = forward_seq(&m, &x, &y).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        // Hand-written three-layer MLP, independent of the graph walker.
        let spec = ModelSpec::new(
            9,
            vec![5],
            vec![
                LayerSpec::Input { cost: None },
                LayerSpec::dense(6),
                LayerSpec::relu(),
                LayerSpec::dense(4),
                LayerSpec::relu(),
                LayerSpec::dense(3),
                LayerSpec::loss(),
            ],
        );
        let m = build_model_from_spec(&spec).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (x, labels) = random_batch(&mut rng, 4, &[5], 3);
        let y = Tensor::one_hot(&labels, 3).unwrap();

        let dense = |x: &[Vec<f64>], id: usize| -> Vec<Vec<f64>> {
            let p = m.params(id).unwrap();
            let (k, n) = (p.weight.shape()[0], p.weight.shape()[1]);
            x.iter()
                .map(|row| {
                    (0..n)
                        .map(|j| {
                            let mut s = 0.0;
                            for (i, v) in row.iter().enumerate().take(k) {
                                s += v * p.weight.data()[i * n + j];
                            }
                            s + p.bias.data()[j]
                        })
                        .collect()
                })
                .collect()
        };
        let relu = |x: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
        };
        let rows: Vec<Vec<f64>> = x.data().chunks(5).map(|r| r.to_vec()).collect();
        let logits = dense(&relu(dense(&relu(dense(&rows, 1)), 3)), 5);
        let mut oracle = 0.0;
        for (row, &l) in logits.iter().zip(&labels) {
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln() + mx;
            oracle += lse - row[l];
        }
        oracle /= 4.0;
        let (loss, _) = forward_seq(&m, &x, &y).unwrap();
        assert!((loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{loss} vs {oracle}");
    }

    #[test]
    fn scalar_chain_rule_with_squared_error() {
        // X=1, W1=2, W2=3, L = ½(Y'−Y)², Y=1. Uses the layer kernels directly.
        let spec = chain(&[1, 1], 1);
        let mut m = build_model_from_spec(&spec).unwrap();
        set(&mut m, 1, Tensor::from_rows(&[&[2.0]]).unwrap());
        set(&mut m, 2, Tensor::from_rows(&[&[3.0]]).unwrap());
        let x = Tensor::from_rows(&[&[1.0]]).unwrap();
        let forward = |m: &ModelGraph| {
            let v = layer_forward(m.layer(1), &[&x]).unwrap();
            let y = layer_forward(m.layer(2), &[&v]).unwrap();
            (v, y)
        };
        let (v, y_pred) = forward(&m);
        let dl_dy = Tensor::from_rows(&[&[y_pred.data()[0] - 1.0]]).unwrap();
        let (dv, g2) = layer_backward(m.layer(2), &[&v], &dl_dy).unwrap();
        let partial_error = &dv[0];
        let (_, g1) = layer_backward(m.layer(1), &[&x], partial_error).unwrap();
        // D2 = ∂L/∂Y'·V ; D1 = partial_error·X ; partial_error = ∂L/∂Y'·W2
        assert_eq!(g2.as_ref().unwrap().weight.data(), &[5.0 * 2.0]);
        assert_eq!(partial_error.data(), &[5.0 * 3.0]);
        assert_eq!(g1.as_ref().unwrap().weight.data(), &[15.0 * 1.0]);

        let loss = |w1: f64, w2: f64| 0.5 * (w2 * w1 * 1.0 - 1.0f64).powi(2);
        let h = 1e-6;
        let fd1 = (loss(2.0 + h, 3.0) - loss(2.0 - h, 3.0)) / (2.0 * h);
        let fd2 = (loss(2.0, 3.0 + h) - loss(2.0, 3.0 - h)) / (2.0 * h);
        assert!((fd1 - 15.0).abs() / 15.0 < 1e-8);
        assert!((fd2 - 10.0).abs() / 10.0 < 1e-8);
    }

    #[test]
    fn saturated_loss_gives_near_zero_gradients() {
        let mut m = build_model_from_spec(&chain(&[2], 2)).unwrap();
        set(&mut m, 1, Tensor::from_rows(&[&[40.0, -40.0], &[0.0, 0.0]]).unwrap());
        let x = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let y = Tensor::one_hot(&[0], 2).unwrap();
        let (_, acts) = forward_seq(&m, &x, &y).unwrap();
        let g = backward_seq(&m, &acts, &y).unwrap();
        assert!(g.get(1).unwrap().weight.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn add_joining_layers_builds_dag() {
        let spec = ModelSpec::new(
            0,
            vec![3],
            vec![
                LayerSpec::Input { cost: None },
                LayerSpec::dense(4),
                LayerSpec::relu(),
                LayerSpec::dense(4),
                LayerSpec::relu(),
                LayerSpec::add(1, 4),
                LayerSpec::dense(2),
                LayerSpec::loss(),
            ],
        );
        let m = build_model_from_spec(&spec).unwrap();
        assert_eq!(m.layer(5).inputs, vec![1, 4]);
        assert_eq!(m.consumers(1), &[2, 5]);
    }

    #[test]
    fn out_of_order_layers_are_sorted() {
        let toml = r#"
            format_version = 1
            seed = 3
            input_shape = [2]
            [[layers]]
            kind = "softmax_xent"
            inputs = [2]
            [[layers]]
            kind = "input"
            [[layers]]
            kind = "dense"
            units = 2
            inputs = [1]
        "#;
        let m = ModelGraph::from_toml(toml).unwrap();
        assert_eq!(m.layer(0).kind, LayerKind::Input);
        assert_eq!(m.layer(1).kind, LayerKind::Dense { units: 2 });
        assert_eq!(m.output_id(), 2);
    }

    #[test]
    fn schema_errors_name_the_problem() {
        let err = ModelSpec::from_toml(
            "format_version = 1\nseed = 1\ninput_shape = [2]\n[[layers]]\nkind = \"conv\"\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("conv") && err.contains("kind"), "{err}");
        let err = ModelSpec::from_toml(
            "format_version = 1\nseed = 1\ninput_shape = [2]\n[[layers]]\nkind = \"dense\"\nunits = 2\nwidth = 3\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn cycles_and_bad_shapes_rejected() {
        let mut spec = chain(&[2, 2], 2);
        spec.layers[1] = LayerSpec::Dense {
            units: 2,
            inputs: Some(vec![2]),
            cost: None,
        };
        assert!(matches!(build_model_from_spec(&spec), Err(ModelError::Cycle(_))));

        let spec = ModelSpec::new(
            0,
            vec![3],
            vec![
                LayerSpec::Input { cost: None },
                LayerSpec::dense(4),
                LayerSpec::dense(5),
                LayerSpec::add(1, 2),
                LayerSpec::loss(),
            ],
        );
        assert!(matches!(build_model_from_spec(&spec), Err(ModelError::Shape { layer: 3, .. })));

        let spec = ModelSpec::new(0, vec![2, 2], vec![LayerSpec::Input { cost: None }, LayerSpec::dense(2), LayerSpec::loss()]);
        assert!(matches!(build_model_from_spec(&spec), Err(ModelError::Shape { layer: 1, .. })));

        let spec = ModelSpec::new(
            0,
            vec![2],
            vec![LayerSpec::Input { cost: None }, LayerSpec::dense(2), LayerSpec::dense(2), LayerSpec::Dense { units: 2, inputs: Some(vec![1]), cost: None }, LayerSpec::loss()],
        );
        assert!(matches!(build_model_from_spec(&spec), Err(ModelError::DeadLayer(2))));
    }

    #[test]
    fn sgd_apply_examples() {
        let mut m = build_model_from_spec(&chain(&[1], 1)).unwrap();
        set(&mut m, 1, Tensor::from_rows(&[&[1.0]]).unwrap());
        let before = m.clone();
        let mut g = GradientSet::new();
        g.insert(1, ParamGrad { weight: Tensor::from_rows(&[&[2.0]]).unwrap(), bias: Tensor::zeros(&[1]).unwrap() });
        sgd_apply(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);
        let mut zero = GradientSet::new();
        zero.insert(1, ParamGrad { weight: Tensor::zeros(&[1, 1]).unwrap(), bias: Tensor::zeros(&[1]).unwrap() });
        sgd_apply(&mut m, &zero, 0.7).unwrap();
        assert_eq!(m, before);
        sgd_apply(&mut m, &g, 0.5).unwrap();
        assert_eq!(m.params(1).unwrap().weight.data(), &[0.0]);
        let mut bad = GradientSet::new();
        bad.insert(1, ParamGrad { weight: Tensor::zeros(&[2, 1]).unwrap(), bias: Tensor::zeros(&[1]).unwrap() });
        assert!(matches!(sgd_apply(&mut m, &bad, 0.1), Err(ModelError::GradientShape { .. })));
    }

    #[test]
    fn identity_skip_with_zero_main_path_matches_plain_model() {
        let with_skip = ModelSpec::new(
            5,
            vec![3],
            vec![
                LayerSpec::Input { cost: None },
                LayerSpec::dense(4),
                LayerSpec::dense(4),
                LayerSpec::add(1, 2),
                LayerSpec::dense(2),
                LayerSpec::loss(),
            ],
        );
        let mut a = build_model_from_spec(&with_skip).unwrap();
        set(&mut a, 2, Tensor::zeros(&[4, 4]).unwrap());
        let plain = ModelSpec::new(5, vec![3], vec![LayerSpec::Input { cost: None }, LayerSpec::dense(4), LayerSpec::dense(2), LayerSpec::loss()]);
        let mut b = build_model_from_spec(&plain).unwrap();
        b.set_params(1, a.params(1).unwrap().clone()).unwrap();
        b.set_params(2, a.params(4).unwrap().clone()).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (x, labels) = random_batch(&mut rng, 5, &[3], 2);
        let y = Tensor::one_hot(&labels, 2).unwrap();
        let (la, acts_a) = forward_seq(&a, &x, &y).unwrap();
        let (lb, acts_b) = forward_seq(&b, &x, &y).unwrap();
        assert_eq!(la, lb);
        let ga = backward_seq(&a, &acts_a, &y).unwrap();
        let gb = backward_seq(&b, &acts_b, &y).unwrap();
        assert_eq!(ga.get(1), gb.get(1));
        assert_eq!(ga.get(4), gb.get(2));
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let spec = ModelSpec::new(
            2,
            vec![2],
            vec![LayerSpec::Input { cost: None }, LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(2), LayerSpec::loss()],
        );
        let mut m = build_model_from_spec(&spec).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            rows.extend([s * (1.0 + 0.05 * i as f64), s * 0.5 + 0.01 * i as f64]);
            labels.push(c);
        }
        let x = Tensor::new(vec![32, 2], rows).unwrap();
        let y = Tensor::one_hot(&labels, 2).unwrap();
        let mut losses = Vec::new();
        for _ in 0..51 {
            let (loss, acts) = forward_seq(&m, &x, &y).unwrap();
            losses.push(loss);
            let g = backward_seq(&m, &acts, &y).unwrap();
            sgd_apply(&mut m, &g, 0.1).unwrap();
        }
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing >= 45, "{decreasing}/50 steps decreased");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn backward_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = random_model_spec(&mut rng, 6, 2, 32);
            let m = build_model_from_spec(&spec).unwrap();
            let (x, labels) = random_batch(&mut rng, 3, m.input_shape(), m.num_classes());
            let y = Tensor::one_hot(&labels, m.num_classes()).unwrap();
            let (_, acts) = forward_seq(&m, &x, &y).unwrap();
            let grads = backward_seq(&m, &acts, &y).unwrap();
            let h = 1e-6;
            for id in m.param_layers().collect::<Vec<_>>() {
                let p = m.params(id).unwrap().clone();
                let g = grads.get(id).unwrap();
                for (which, analytic) in [(0, &g.weight), (1, &g.bias)] {
                    for i in 0..analytic.len() {
                        let perturbed = |delta: f64| {
                            let mut mm = m.clone();
                            let mut q = p.clone();
                            if which == 0 { q.weight.data_mut()[i] += delta } else { q.bias.data_mut()[i] += delta }
                            mm.set_params(id, q).unwrap();
                            forward_seq(&mm, &x, &y).unwrap().0
                        };
                        let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                        let an = analytic.data()[i];
                        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                        prop_assert!(rel <= 1e-5, "layer {} param {} idx {}: fd {} an {}", id, which, i, fd, an);
                    }
                }
            }
        }
    }
}
