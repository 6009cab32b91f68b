//! Sequential model graphs, the two network builders and freeze control.
//!
//! Each layer node carries a *label*: the 1-based layer number used by freeze
//! ranges such as `L1-L16`. For the custom net every node has its own label
//! (L1-L19). For the VGG16-style baseline the numbering is:
//!
//! | label   | nodes                                          |
//! |---------|------------------------------------------------|
//! | L1-L18  | the 13 conv and 5 max-pool layers, in order    |
//! | L19     | flatten, dense-1024, dropout                   |
//! | L20     | dense-2, softmax                               |
//!
//! so `L1-L16` freezes everything up to and including `block5_conv2`, and
//! leaves `block5_conv3` plus the classification head trainable.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{self, pool, DropoutMask, LayerKind, PoolIndices};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::init::glorot_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One layer and its hyperparameters. Conv and dense layers carry an
/// optional fused ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        relu: bool,
    },
    MaxPool2d {
        size: usize,
    },
    Relu,
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    Dropout {
        rate: f32,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::MaxPool2d { .. } => LayerKind::MaxPool2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Conv2d { in_channels, out_channels, kernel, .. }, &[c, h, w]) => {
                if c != *in_channels {
                    return shape_err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if kernel % 2 == 0 {
                    return shape_err("conv kernel must be odd for same padding");
                }
                Ok(vec![*out_channels, h, w])
            }
            (LayerSpec::MaxPool2d { size }, &[c, h, w]) => {
                if *size != 2 {
                    return shape_err(format!("only 2x2 pooling is supported, got {size}"));
                }
                let (oh, ow) = pool::pooled_dims(h, w)?;
                Ok(vec![c, oh, ow])
            }
            (LayerSpec::Relu, s) | (LayerSpec::Dropout { .. }, s) => Ok(s.to_vec()),
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (LayerSpec::Dense { inputs, outputs, .. }, &[n]) => {
                if n != *inputs {
                    return shape_err(format!("dense expects {inputs} inputs, got {n}"));
                }
                Ok(vec![*outputs])
            }
            (LayerSpec::Softmax, &[2]) => Ok(vec![2]),
            (spec, s) => shape_err(format!("{} cannot take input of shape {s:?}", spec.kind())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub label: usize,
    pub spec: LayerSpec,
}

/// Architecture description; serialised verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    /// Per-sample input shape: `[C, H, W]` for images, `[features]` otherwise.
    pub input: Vec<usize>,
    pub layers: Vec<LayerNode>,
}

impl Topology {
    /// Per-sample shapes: entry 0 is the input, entry `i + 1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.clone()];
        for node in &self.layers {
            let next = node
                .spec
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::Shape(format!("layer `{}`: {e}", node.name)))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn max_label(&self) -> usize {
        self.layers.iter().map(|l| l.label).max().unwrap_or(0)
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.spec.kind() == kind).count()
    }

    /// Width of the flatten layer's output, if any.
    pub fn flatten_width(&self) -> Result<Option<usize>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .position(|l| l.spec == LayerSpec::Flatten)
            .map(|i| shapes[i + 1][0]))
    }

    /// Index of the last dense layer before the output dense layer.
    pub fn penultimate_dense(&self) -> Option<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.kind() == LayerKind::Dense)
            .map(|(i, _)| i)
            .collect();
        (dense.len() >= 2).then(|| dense[dense.len() - 2])
    }

    /// A readable table of layers, labels and output shapes.
    pub fn summary(&self) -> Result<String> {
        let shapes = self.shapes()?;
        let mut out = format!("{} (input {:?})\n", self.name, self.input);
        for (i, node) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "L{:<3} {:<16} {:<10} {:?}\n",
                node.label,
                node.name,
                node.spec.kind().name(),
                shapes[i + 1]
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: usize,
    pub value: Tensor,
    pub trainable: bool,
}

/// Which labelled layers to freeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeSpec {
    None,
    All,
    /// Inclusive label range `L{lo}-L{hi}`.
    Range(usize, usize),
}

impl std::str::FromStr for FreezeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<FreezeSpec> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "none" | "" => return Ok(FreezeSpec::None),
            "all" => return Ok(FreezeSpec::All),
            _ => {}
        }
        let bad = || Error::Param(format!("cannot parse freeze range `{s}` (expected e.g. L1-L16)"));
        let (a, b) = t.split_once('-').ok_or_else(bad)?;
        let num = |p: &str| p.trim().trim_start_matches('l').parse::<usize>().map_err(|_| bad());
        Ok(FreezeSpec::Range(num(a)?, num(b)?))
    }
}

impl std::fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FreezeSpec::None => f.write_str("none"),
            FreezeSpec::All => f.write_str("all"),
            FreezeSpec::Range(a, b) => write!(f, "L{a}-L{b}"),
        }
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(PoolIndices),
    Mask(DropoutMask),
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace holds the input")
    }

    /// Input to the final layer (the logits when the net ends in softmax).
    pub fn penultimate(&self) -> &Tensor {
        &self.acts[self.acts.len() - 2]
    }
}

/// Gradients aligned with [`ModelGraph::params`]; `None` for parameters that
/// were not needed (frozen).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    pub input: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    topology: Topology,
    params: Vec<Param>,
    /// Per layer: indices of (weight, bias) in `params`.
    slots: Vec<Option<(usize, usize)>>,
    mode: Mode,
}

impl ModelGraph {
    /// Glorot-initialised weights and zero biases. Each parameter draws from
    /// its own stream derived from `init` and the parameter's position.
    pub fn from_topology(topology: Topology, init: &RngStream) -> Result<ModelGraph> {
        topology.shapes()?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(topology.layers.len());
        for (li, node) in topology.layers.iter().enumerate() {
            let (wshape, fan_in, fan_out, outputs) = match node.spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                    out_channels,
                ),
                LayerSpec::Dense { inputs, outputs, .. } => (vec![inputs, outputs], inputs, outputs, outputs),
                _ => {
                    slots.push(None);
                    continue;
                }
            };
            let w = glorot_uniform(&wshape, fan_in, fan_out, &mut init.derive(params.len() as u64))?;
            params.push(Param {
                name: format!("{}.weight", node.name),
                layer: li,
                value: w,
                trainable: true,
            });
            params.push(Param {
                name: format!("{}.bias", node.name),
                layer: li,
                value: Tensor::zeros(&[outputs])?,
                trainable: true,
            });
            slots.push(Some((params.len() - 2, params.len() - 1)));
        }
        for node in &topology.layers {
            if let LayerSpec::Dropout { rate } = node.spec {
                layers::dropout::check_rate(rate)?;
            }
        }
        Ok(ModelGraph {
            topology,
            params,
            slots,
            mode: Mode::Eval,
        })
    }

    /// Rebuilds a graph from a topology and named parameter values, checking
    /// every name and shape.
    pub fn from_parts(topology: Topology, values: Vec<(String, Tensor)>) -> Result<ModelGraph> {
        let mut model = ModelGraph::from_topology(topology, &RngStream::new(0, 0))?;
        model.load_values(values)?;
        Ok(model)
    }

    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            let missing = self
                .params
                .iter()
                .find(|p| !values.iter().any(|(n, _)| n == &p.name))
                .map(|p| p.name.clone())
                .unwrap_or_else(|| {
                    values
                        .iter()
                        .find(|(n, _)| !self.params.iter().any(|p| &p.name == n))
                        .map(|(n, _)| n.clone())
                        .unwrap_or_default()
                });
            return Err(Error::Load {
                name: missing,
                reason: format!("expected {} parameters, found {}", self.params.len(), values.len()),
            });
        }
        for (name, value) in values {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Load {
                    name: name.clone(),
                    reason: "not present in topology".into(),
                })?;
            if p.value.shape() != value.shape() {
                return Err(Error::Load {
                    name,
                    reason: format!("shape {:?} does not match {:?}", value.shape(), p.value.shape()),
                });
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.topology.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.topology.input
    }

    /// Marks parameters of layers inside the frozen label range as
    /// non-trainable and every other parameter as trainable.
    pub fn set_trainable(&mut self, frozen: FreezeSpec) -> Result<()> {
        let max = self.topology.max_label();
        let (lo, hi) = match frozen {
            FreezeSpec::None => (1, 0),
            FreezeSpec::All => (1, max),
            FreezeSpec::Range(lo, hi) => {
                if lo == 0 || lo > hi || hi > max {
                    return Err(Error::Param(format!(
                        "freeze range L{lo}-L{hi} outside L1-L{max}"
                    )));
                }
                (lo, hi)
            }
        };
        for p in &mut self.params {
            let label = self.topology.layers[p.layer].label;
            p.trainable = !(lo..=hi).contains(&label);
        }
        Ok(())
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.trainable).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.topology.input.len() + 1 || x.shape()[1..] != self.topology.input[..] {
            return shape_err(format!(
                "model `{}` expects (batch, {:?}), got {:?}",
                self.topology.name,
                self.topology.input,
                x.shape()
            ));
        }
        Ok(())
    }

    fn layer_forward(&self, li: usize, x: &Tensor, stream: Option<&mut RngStream>) -> Result<(Tensor, Aux)> {
        let node = &self.topology.layers[li];
        let n = x.shape()[0];
        match &node.spec {
            LayerSpec::Conv2d { relu, .. } => {
                let (wi, bi) = self.slots[li].expect("conv has params");
                let y = layers::conv2d(x, &self.params[wi].value, &self.params[bi].value)?;
                Ok((if *relu { layers::relu(&y) } else { y }, Aux::None))
            }
            LayerSpec::Dense { relu, .. } => {
                let (wi, bi) = self.slots[li].expect("dense has params");
                let y = layers::dense(x, &self.params[wi].value, &self.params[bi].value)?;
                Ok((if *relu { layers::relu(&y) } else { y }, Aux::None))
            }
            LayerSpec::MaxPool2d { .. } => {
                let (y, idx) = layers::maxpool2d(x)?;
                Ok((y, Aux::Pool(idx)))
            }
            LayerSpec::Relu => Ok((layers::relu(x), Aux::None)),
            LayerSpec::Dropout { rate } => match (self.mode, stream) {
                (Mode::Train, Some(s)) => {
                    let mask = layers::dropout::sample_mask(x.len(), *rate, s)?;
                    Ok((mask.apply(x)?, Aux::Mask(mask)))
                }
                (Mode::Train, None) => Err(Error::Param("train-mode dropout needs a random stream".into())),
                (Mode::Eval, _) => Ok((x.clone(), Aux::None)),
            },
            LayerSpec::Flatten => {
                let width = x.len() / n;
                Ok((x.reshaped(&[n, width])?, Aux::None))
            }
            LayerSpec::Softmax => Ok((layers::softmax2(x)?, Aux::None)),
        }
    }

    /// Forward pass retaining activations. Train mode draws dropout masks
    /// from `stream`.
    pub fn forward_trace(&self, x: &Tensor, mut stream: Option<&mut RngStream>) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.topology.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.topology.layers.len());
        acts.push(x.clone());
        for li in 0..self.topology.layers.len() {
            let (y, a) = self.layer_forward(li, acts.last().expect("input"), stream.as_deref_mut())?;
            acts.push(y);
            aux.push(a);
        }
        Ok(Trace { acts, aux })
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_until(x, self.topology.layers.len() - 1)
    }

    /// Eval-mode activations at the output of layer `last` (inclusive).
    pub fn forward_until(&self, x: &Tensor, last: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if last >= self.topology.layers.len() {
            return Err(Error::Param(format!("layer {last} does not exist")));
        }
        let eval = ModelGraphView { graph: self };
        let mut cur = x.clone();
        for li in 0..=last {
            cur = eval.eval_layer(li, &cur)?;
        }
        Ok(cur)
    }

    /// Backward pass from a gradient w.r.t. the network output.
    ///
    /// With `from_logits`, `grad` is taken w.r.t. the input of the final
    /// softmax layer and that layer is skipped. The pass stops below the
    /// lowest layer holding a trainable parameter unless `need_input_grad`.
    pub fn backward(&self, trace: &Trace, grad: &Tensor, from_logits: bool, need_input_grad: bool) -> Result<Gradients> {
        let n_layers = self.topology.layers.len();
        let top = if from_logits {
            if self.topology.layers.last().map(|l| &l.spec) != Some(&LayerSpec::Softmax) {
                return Err(Error::Param("from_logits requires a final softmax layer".into()));
            }
            n_layers - 1
        } else {
            n_layers
        };
        let expected = &trace.acts[top];
        if grad.shape() != expected.shape() {
            return shape_err(format!("gradient shape {:?} vs {:?}", grad.shape(), expected.shape()));
        }
        let stop = if need_input_grad {
            0
        } else {
            self.params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| p.layer)
                .min()
                .unwrap_or(top)
        };

        let mut out: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g = grad.clone();
        for li in (stop..top).rev() {
            let x = &trace.acts[li];
            let y = &trace.acts[li + 1];
            let need_dx = li > stop || need_input_grad;
            let spec = &self.topology.layers[li].spec;
            g = match spec {
                LayerSpec::Conv2d { relu, .. } | LayerSpec::Dense { relu, .. } => {
                    let gy = if *relu { layers::relu_backward(y, &g)? } else { g };
                    let (wi, bi) = self.slots[li].expect("param layer");
                    let w = &self.params[wi].value;
                    let train_here = self.params[wi].trainable || self.params[bi].trainable;
                    if !train_here && !need_dx {
                        return Ok(Gradients { params: out, input: None });
                    }
                    let (dx, dw, db) = if let LayerSpec::Conv2d { .. } = spec {
                        let gr = layers::conv::conv2d_backward_raw(x.data(), x.dims4()?, w.data(), w.dims4()?, gy.data(), need_dx)?;
                        (gr.dx, gr.dw, gr.db)
                    } else {
                        let [b, i] = x.dims2()?;
                        let gr = layers::dense::dense_backward_raw(x.data(), b, i, w.data(), gy.data(), need_dx)?;
                        (gr.dx, gr.dw, gr.db)
                    };
                    if self.params[wi].trainable {
                        out[wi] = Some(Tensor::from_vec(w.shape(), dw)?);
                    }
                    if self.params[bi].trainable {
                        out[bi] = Some(Tensor::from_vec(self.params[bi].value.shape(), db)?);
                    }
                    match dx {
                        Some(dx) => Tensor::from_vec(x.shape(), dx)?,
                        None => return Ok(Gradients { params: out, input: None }),
                    }
                }
                LayerSpec::MaxPool2d { .. } => match &trace.aux[li] {
                    Aux::Pool(idx) => layers::maxpool2d_backward(&g, idx, x.shape())?,
                    _ => unreachable!("pool trace"),
                },
                LayerSpec::Relu => layers::relu_backward(x, &g)?,
                LayerSpec::Dropout { .. } => match &trace.aux[li] {
                    Aux::Mask(m) => m.apply(&g)?,
                    _ => g,
                },
                LayerSpec::Flatten => g.reshape(x.shape())?,
                LayerSpec::Softmax => layers::softmax2_backward(y, &g)?,
            };
        }
        let input = if need_input_grad && stop == 0 { Some(g) } else { None };
        Ok(Gradients { params: out, input })
    }
}

/// Eval-mode helper that never needs a random stream.
struct ModelGraphView<'a> {
    graph: &'a ModelGraph,
}

impl ModelGraphView<'_> {
    fn eval_layer(&self, li: usize, x: &Tensor) -> Result<Tensor> {
        if let LayerSpec::Dropout { .. } = self.graph.topology.layers[li].spec {
            return Ok(x.clone());
        }
        let (y, _) = self.graph.layer_forward(li, x, None)?;
        Ok(y)
    }
}

/// Channel widths and head sizes of the custom network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomNetConfig {
    pub input_size: usize,
    pub conv_widths: [usize; 8],
    pub dense_width: usize,
    pub dropout: f32,
}

impl CustomNetConfig {
    /// The full-size net: 200x200 input, widths doubling per block up to 256.
    pub fn full() -> CustomNetConfig {
        CustomNetConfig {
            input_size: 200,
            conv_widths: [32, 32, 64, 64, 128, 128, 256, 256],
            dense_width: 256,
            dropout: 0.5,
        }
    }

    /// Same 19-layer topology with narrow layers for small inputs.
    pub fn scaled(input_size: usize) -> CustomNetConfig {
        CustomNetConfig {
            input_size,
            conv_widths: [8, 8, 16, 16, 32, 32, 64, 64],
            dense_width: 64,
            dropout: 0.5,
        }
    }

    pub fn topology(&self) -> Topology {
        let mut layers = Vec::with_capacity(19);
        let mut push = |name: String, spec: LayerSpec| {
            let label = layers.len() + 1;
            layers.push(LayerNode { name, label, spec });
        };
        let mut ch = 3;
        for block in 0..4 {
            for j in 0..2 {
                let out = self.conv_widths[block * 2 + j];
                push(
                    format!("conv{}", block * 2 + j + 1),
                    LayerSpec::Conv2d { in_channels: ch, out_channels: out, kernel: 3, relu: true },
                );
                ch = out;
            }
            push(format!("pool{}", block + 1), LayerSpec::MaxPool2d { size: 2 });
        }
        let mut side = self.input_size;
        for _ in 0..4 {
            side /= 2;
        }
        let flat = ch * side * side;
        push("flatten".into(), LayerSpec::Flatten);
        push("dense1".into(), LayerSpec::Dense { inputs: flat, outputs: self.dense_width, relu: true });
        push("dropout1".into(), LayerSpec::Dropout { rate: self.dropout });
        push("dense2".into(), LayerSpec::Dense { inputs: self.dense_width, outputs: self.dense_width, relu: true });
        push("dropout2".into(), LayerSpec::Dropout { rate: self.dropout });
        push("dense3".into(), LayerSpec::Dense { inputs: self.dense_width, outputs: 2, relu: false });
        push("softmax".into(), LayerSpec::Softmax);
        Topology {
            name: "custom".into(),
            input: vec![3, self.input_size, self.input_size],
            layers,
        }
    }
}

/// The VGG16 convolutional base with a dense classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub input_size: usize,
    /// Conv widths per block; blocks 1-2 have two convs, blocks 3-5 three.
    pub block_widths: [usize; 5],
    pub head_width: usize,
    pub dropout: f32,
}

impl VggConfig {
    pub fn full() -> VggConfig {
        VggConfig::with_input(200)
    }

    pub fn with_input(input_size: usize) -> VggConfig {
        VggConfig {
            input_size,
            block_widths: [64, 128, 256, 512, 512],
            head_width: 1024,
            dropout: 0.5,
        }
    }

    pub fn topology(&self) -> Topology {
        let mut layers = Vec::with_capacity(23);
        let mut label = 0;
        let mut ch = 3;
        for (b, &width) in self.block_widths.iter().enumerate() {
            let convs = if b < 2 { 2 } else { 3 };
            for j in 0..convs {
                label += 1;
                layers.push(LayerNode {
                    name: format!("block{}_conv{}", b + 1, j + 1),
                    label,
                    spec: LayerSpec::Conv2d { in_channels: ch, out_channels: width, kernel: 3, relu: true },
                });
                ch = width;
            }
            label += 1;
            layers.push(LayerNode {
                name: format!("block{}_pool", b + 1),
                label,
                spec: LayerSpec::MaxPool2d { size: 2 },
            });
        }
        let mut side = self.input_size;
        for _ in 0..5 {
            side /= 2;
        }
        let flat = ch * side * side;
        let head = [
            ("flatten", label + 1, LayerSpec::Flatten),
            ("fc1", label + 1, LayerSpec::Dense { inputs: flat, outputs: self.head_width, relu: true }),
            ("fc1_dropout", label + 1, LayerSpec::Dropout { rate: self.dropout }),
            ("fc2", label + 2, LayerSpec::Dense { inputs: self.head_width, outputs: 2, relu: false }),
            ("softmax", label + 2, LayerSpec::Softmax),
        ];
        for (name, label, spec) in head {
            layers.push(LayerNode { name: name.into(), label, spec });
        }
        Topology {
            name: "vgg-baseline".into(),
            input: vec![3, self.input_size, self.input_size],
            layers,
        }
    }
}

/// The 19-layer custom network for `input_size` x `input_size` RGB input.
pub fn build_custom_net(input_size: usize, init: &RngStream) -> Result<ModelGraph> {
    let cfg = CustomNetConfig { input_size, ..CustomNetConfig::full() };
    ModelGraph::from_topology(cfg.topology(), init)
}

/// The VGG16-style baseline with a dense-1024 / dropout / dense-2 head.
pub fn build_vgg_baseline(input_size: usize, init: &RngStream) -> Result<ModelGraph> {
    ModelGraph::from_topology(VggConfig::with_input(input_size).topology(), init)
}

/// A small fully connected network on flat feature vectors, used for toy
/// problems and checks: hidden ReLU layers then dense-2 + softmax.
pub fn build_mlp(inputs: usize, hidden: &[usize], init: &RngStream) -> Result<ModelGraph> {
    let mut layers = Vec::new();
    let mut prev = inputs;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(LayerNode {
            name: format!("dense{}", i + 1),
            label: layers.len() + 1,
            spec: LayerSpec::Dense { inputs: prev, outputs: h, relu: true },
        });
        prev = h;
    }
    layers.push(LayerNode {
        name: "out".into(),
        label: layers.len() + 1,
        spec: LayerSpec::Dense { inputs: prev, outputs: 2, relu: false },
    });
    layers.push(LayerNode {
        name: "softmax".into(),
        label: layers.len() + 1,
        spec: LayerSpec::Softmax,
    });
    ModelGraph::from_topology(
        Topology { name: "mlp".into(), input: vec![inputs], layers },
        init,
    )
}

/// Prepends the batch dimension to a per-sample shape.
pub fn batch_shape(per_sample: &[usize], n: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(n);
    s.extend_from_slice(per_sample);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init() -> RngStream {
        RngStream::new(0, 0)
    }

    #[test]
    fn custom_net_anchors() {
        let topo = CustomNetConfig::full().topology();
        assert_eq!(topo.layers.len(), 19);
        assert_eq!(topo.count(LayerKind::Conv2d), 8);
        assert_eq!(topo.count(LayerKind::MaxPool2d), 4);
        assert_eq!(topo.count(LayerKind::Dense), 3);
        assert_eq!(topo.count(LayerKind::Dropout), 2);
        assert_eq!(topo.flatten_width().unwrap(), Some(36864));
        let shapes = topo.shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![2]);
        // Same padding: every conv keeps its input's spatial dims.
        for (i, l) in topo.layers.iter().enumerate() {
            if l.spec.kind() == LayerKind::Conv2d {
                assert_eq!(shapes[i][1..], shapes[i + 1][1..]);
            }
        }
    }

    #[test]
    fn vgg_anchors() {
        let topo = VggConfig::full().topology();
        assert_eq!(topo.count(LayerKind::Conv2d), 13);
        assert_eq!(topo.count(LayerKind::MaxPool2d), 5);
        assert_eq!(topo.flatten_width().unwrap(), Some(18432));
        assert_eq!(topo.max_label(), 20);
        let tail: Vec<_> = topo.layers[topo.layers.len() - 4..].iter().map(|l| l.spec.clone()).collect();
        assert_eq!(
            tail,
            vec![
                LayerSpec::Dense { inputs: 18432, outputs: 1024, relu: true },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { inputs: 1024, outputs: 2, relu: false },
                LayerSpec::Softmax,
            ]
        );
    }

    #[test]
    fn freeze_parse() {
        assert_eq!("L1-L16".parse::<FreezeSpec>().unwrap(), FreezeSpec::Range(1, 16));
        assert_eq!("l1-l8".parse::<FreezeSpec>().unwrap(), FreezeSpec::Range(1, 8));
        assert_eq!("none".parse::<FreezeSpec>().unwrap(), FreezeSpec::None);
        assert_eq!("all".parse::<FreezeSpec>().unwrap(), FreezeSpec::All);
        assert!("L1:L3".parse::<FreezeSpec>().is_err());
        assert_eq!(FreezeSpec::Range(1, 16).to_string(), "L1-L16");
    }

    #[test]
    fn freeze_ranges_validated() {
        let mut m = build_mlp(3, &[4, 4], &init()).unwrap();
        assert!(m.set_trainable(FreezeSpec::Range(0, 1)).is_err());
        assert!(m.set_trainable(FreezeSpec::Range(2, 1)).is_err());
        assert!(m.set_trainable(FreezeSpec::Range(1, 99)).is_err());
        m.set_trainable(FreezeSpec::Range(1, 1)).unwrap();
        assert_eq!(m.trainable_mask(), vec![false, false, true, true, true, true]);
        m.set_trainable(FreezeSpec::None).unwrap();
        assert!(m.trainable_mask().iter().all(|&t| t));
        m.set_trainable(FreezeSpec::All).unwrap();
        assert!(m.trainable_mask().iter().all(|&t| !t));
    }

    #[test]
    fn vgg_l1_l16_leaves_last_conv_and_head() {
        let topo = VggConfig::with_input(32).topology();
        let mut m = ModelGraph::from_topology(topo, &init()).unwrap();
        m.set_trainable(FreezeSpec::Range(1, 16)).unwrap();
        let trainable: Vec<&str> = m.params().iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
        assert_eq!(
            trainable,
            vec!["block5_conv3.weight", "block5_conv3.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
        );
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let m = ModelGraph::from_topology(CustomNetConfig::scaled(32).topology(), &init()).unwrap();
        let mut s = RngStream::new(1, 0);
        let x = Tensor::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut s).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        for row in y.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
        // Eval mode is a pure function of parameters and input.
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn wrong_input_shape() {
        let m = build_mlp(3, &[4], &init()).unwrap();
        assert!(m.predict(&Tensor::zeros(&[2, 5]).unwrap()).is_err());
    }

    #[test]
    fn load_values_names_offender() {
        let mut m = build_mlp(3, &[4], &init()).unwrap();
        let mut vals: Vec<(String, Tensor)> = m.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        vals[0].1 = Tensor::zeros(&[5, 4]).unwrap();
        match m.load_values(vals) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "dense1.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
