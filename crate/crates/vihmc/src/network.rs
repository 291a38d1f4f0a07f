//! Declarative network architectures: dense MLPs and branch-trunk operator
//! networks, evaluated through the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tape::{Matrix, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sin,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation, bias: bool) -> Self {
        LayerSpec { width, activation, bias }
    }
}

/// Network architecture. Parameter identity is defined by the flat layout
/// derived from this spec; see [`NetworkSpec::layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkSpec {
    Mlp {
        input_dim: usize,
        layers: Vec<LayerSpec>,
    },
    Deeponet {
        branch_input: usize,
        branch_layers: Vec<LayerSpec>,
        trunk_input: usize,
        trunk_layers: Vec<LayerSpec>,
        /// Number of branch/trunk output pairs combined by inner product.
        latent_dim: usize,
        /// Single learned scalar added to the inner product.
        #[serde(default = "default_true")]
        combine_bias: bool,
    },
}

/// One contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutRecord {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat, ordered vector of all network parameters plus the layer-index map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutRecord>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector { values: vec![0.0; spec.param_count()], layout: spec.layout() }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self, Error> {
        if values.len() != spec.param_count() {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match spec count {}",
                values.len(),
                spec.param_count()
            )));
        }
        Ok(ParamVector { values, layout: spec.layout() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Structured view: (record, block values) per layout entry.
    pub fn blocks(&self) -> impl Iterator<Item = (&LayoutRecord, &[f64])> {
        self.layout.iter().map(|r| (r, &self.values[r.offset..r.offset + r.len()]))
    }
}

fn layers_layout(prefix: &str, input: usize, layers: &[LayerSpec], offset: &mut usize, out: &mut Vec<LayoutRecord>) {
    let mut fan_in = input;
    for (i, layer) in layers.iter().enumerate() {
        out.push(LayoutRecord {
            name: format!("{prefix}layer{i}.weight"),
            rows: layer.width,
            cols: fan_in,
            offset: *offset,
        });
        *offset += layer.width * fan_in;
        if layer.bias {
            out.push(LayoutRecord {
                name: format!("{prefix}layer{i}.bias"),
                rows: 1,
                cols: layer.width,
                offset: *offset,
            });
            *offset += layer.width;
        }
        fan_in = layer.width;
    }
}

impl NetworkSpec {
    /// Exact count of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayoutRecord::len).sum()
    }

    /// Flat layout mapping parameter indices to layer blocks.
    pub fn layout(&self) -> Vec<LayoutRecord> {
        let mut records = Vec::new();
        let mut offset = 0;
        match self {
            NetworkSpec::Mlp { input_dim, layers } => {
                layers_layout("", *input_dim, layers, &mut offset, &mut records);
            }
            NetworkSpec::Deeponet {
                branch_input,
                branch_layers,
                trunk_input,
                trunk_layers,
                combine_bias,
                ..
            } => {
                layers_layout("branch.", *branch_input, branch_layers, &mut offset, &mut records);
                layers_layout("trunk.", *trunk_input, trunk_layers, &mut offset, &mut records);
                if *combine_bias {
                    records.push(LayoutRecord {
                        name: "combine.bias".to_string(),
                        rows: 1,
                        cols: 1,
                        offset,
                    });
                }
            }
        }
        records
    }

    pub fn output_dim(&self) -> usize {
        match self {
            NetworkSpec::Mlp { layers, .. } => layers.last().map(|l| l.width).unwrap_or(0),
            NetworkSpec::Deeponet { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self {
            NetworkSpec::Mlp { input_dim, layers } => {
                if *input_dim == 0 || layers.is_empty() {
                    return Err(Error::Config("mlp needs input_dim > 0 and at least one layer".into()));
                }
            }
            NetworkSpec::Deeponet {
                branch_input,
                branch_layers,
                trunk_input,
                trunk_layers,
                latent_dim,
                ..
            } => {
                if *branch_input == 0 || *trunk_input == 0 {
                    return Err(Error::Config("deeponet input dimensions must be positive".into()));
                }
                let bw = branch_layers.last().map(|l| l.width);
                let tw = trunk_layers.last().map(|l| l.width);
                if bw != Some(*latent_dim) || tw != Some(*latent_dim) {
                    return Err(Error::Config(format!(
                        "deeponet branch/trunk final widths {:?}/{:?} must equal latent_dim {}",
                        bw, tw, latent_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Result of recording a network forward pass: outputs plus the tape needed
/// for reverse-mode gradients with respect to the parameter node.
pub struct NetForward {
    pub tape: Tape,
    pub params_node: NodeId,
    pub output_node: NodeId,
}

impl NetForward {
    pub fn outputs(&self) -> &Matrix {
        self.tape.value(self.output_node)
    }

    /// Gradient of the selected flat output with respect to every parameter.
    pub fn grad_output(&self, flat_index: usize) -> Result<Vec<f64>, Error> {
        let g = self.tape.grad_seeded(self.output_node, flat_index)?;
        Ok(g.of(self.params_node).to_vec())
    }
}

fn apply_activation(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Sin => tape.sin(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => x,
    }
}

fn layers_forward(
    tape: &mut Tape,
    theta: NodeId,
    prefix: &str,
    input: usize,
    layers: &[LayerSpec],
    mut x: NodeId,
    layout: &[LayoutRecord],
) -> Result<NodeId, Error> {
    let mut fan_in = input;
    for (i, layer) in layers.iter().enumerate() {
        let wname = format!("{prefix}layer{i}.weight");
        let rec = layout
            .iter()
            .find(|r| r.name == wname)
            .ok_or_else(|| Error::Config(format!("missing layout record {wname}")))?;
        if tape.value(x).cols != fan_in {
            return Err(Error::Config(format!(
                "shape mismatch at {wname}: input width {} expected {}",
                tape.value(x).cols,
                fan_in
            )));
        }
        let w = tape.slice(theta, rec.offset, rec.rows, rec.cols);
        let mut y = tape.matmul_nt(x, w);
        if layer.bias {
            let bname = format!("{prefix}layer{i}.bias");
            let brec = layout
                .iter()
                .find(|r| r.name == bname)
                .ok_or_else(|| Error::Config(format!("missing layout record {bname}")))?;
            let b = tape.slice(theta, brec.offset, 1, brec.cols);
            y = tape.add_row(y, b);
        }
        x = apply_activation(tape, y, layer.activation);
        fan_in = layer.width;
    }
    Ok(x)
}

/// Record the network evaluation on an existing tape, given a node that holds
/// the flat parameter vector. Used directly by VI, where the parameter node is
/// itself a function of (mu, rho).
pub fn eval_on_tape(
    spec: &NetworkSpec,
    tape: &mut Tape,
    theta: NodeId,
    inputs: &NetInputs,
) -> Result<NodeId, Error> {
    spec.validate()?;
    let n = tape.value(theta).len();
    if n != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter node length {} does not match spec count {}",
            n,
            spec.param_count()
        )));
    }
    let layout = spec.layout();
    match (spec, inputs) {
        (NetworkSpec::Mlp { input_dim, layers }, NetInputs::Batch(x)) => {
            if tape.value(*x).cols != *input_dim {
                return Err(Error::Config(format!(
                    "input batch width {} does not match mlp input_dim {} (layer0)",
                    tape.value(*x).cols,
                    input_dim
                )));
            }
            layers_forward(tape, theta, "", *input_dim, layers, *x, &layout)
        }
        (
            NetworkSpec::Deeponet {
                branch_input,
                branch_layers,
                trunk_input,
                trunk_layers,
                combine_bias,
                ..
            },
            NetInputs::Operator { fields, queries },
        ) => {
            if tape.value(*fields).cols != *branch_input {
                return Err(Error::Config(format!(
                    "sensor count {} does not match branch input {} (branch.layer0)",
                    tape.value(*fields).cols,
                    branch_input
                )));
            }
            if tape.value(*queries).cols != *trunk_input {
                return Err(Error::Config(format!(
                    "query width {} does not match trunk input {} (trunk.layer0)",
                    tape.value(*queries).cols,
                    trunk_input
                )));
            }
            let b = layers_forward(tape, theta, "branch.", *branch_input, branch_layers, *fields, &layout)?;
            let t = layers_forward(tape, theta, "trunk.", *trunk_input, trunk_layers, *queries, &layout)?;
            // out[f, q] = sum_k branch[f, k] * trunk[q, k] (+ c)
            let mut out = tape.matmul_nt(b, t);
            if *combine_bias {
                let rec = layout.last().expect("combine bias record");
                let c = tape.slice(theta, rec.offset, 1, 1);
                out = tape.add_scalar(out, c);
            }
            Ok(out)
        }
        _ => Err(Error::Config("input kind does not match network kind".into())),
    }
}

/// Network inputs already recorded on the tape.
pub enum NetInputs {
    /// Row-per-example batch for an MLP.
    Batch(NodeId),
    /// Fields (rows = functions sampled at sensors) and query points.
    Operator { fields: NodeId, queries: NodeId },
}

/// Evaluate an MLP batch, recording the tape for later reverse passes.
pub fn forward(spec: &NetworkSpec, theta: &ParamVector, x: &Matrix) -> Result<NetForward, Error> {
    if theta.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector length {} does not match spec count {}",
            theta.len(),
            spec.param_count()
        )));
    }
    let mut tape = Tape::new();
    let params_node = tape.leaf(Matrix::row(&theta.values));
    let xin = tape.leaf(x.clone());
    let output_node = eval_on_tape(spec, &mut tape, params_node, &NetInputs::Batch(xin))?;
    Ok(NetForward { tape, params_node, output_node })
}

/// Evaluate a DeepONet on a batch of fields and query points.
pub fn forward_operator(
    spec: &NetworkSpec,
    theta: &ParamVector,
    fields: &Matrix,
    queries: &Matrix,
) -> Result<NetForward, Error> {
    if theta.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector length {} does not match spec count {}",
            theta.len(),
            spec.param_count()
        )));
    }
    let mut tape = Tape::new();
    let params_node = tape.leaf(Matrix::row(&theta.values));
    let f = tape.leaf(fields.clone());
    let q = tape.leaf(queries.clone());
    let output_node = eval_on_tape(spec, &mut tape, params_node, &NetInputs::Operator { fields: f, queries: q })?;
    Ok(NetForward { tape, params_node, output_node })
}

/// Fan-in scaled uniform initialization of the parameter means.
pub fn init_params(spec: &NetworkSpec, rng: &mut impl rand::Rng, scale: f64) -> ParamVector {
    let layout = spec.layout();
    let mut values = vec![0.0; spec.param_count()];
    for rec in &layout {
        let fan_in = if rec.name.ends_with(".weight") {
            rec.cols
        } else {
            // bias: use the matching weight fan-in
            let wname = rec.name.replace(".bias", ".weight");
            layout.iter().find(|r| r.name == wname).map(|r| r.cols).unwrap_or(1)
        };
        let bound = scale * (1.0 / fan_in as f64).sqrt();
        for v in values[rec.offset..rec.offset + rec.len()].iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    ParamVector { values, layout }
}

/// The two-neuron sine network of the first regression case.
pub fn case1_spec() -> NetworkSpec {
    NetworkSpec::Mlp {
        input_dim: 1,
        layers: vec![
            LayerSpec::new(2, Activation::Sin, true),
            LayerSpec::new(1, Activation::Identity, false),
        ],
    }
}

/// The 1-10-10-1 tanh network of the second regression case.
pub fn case2_spec() -> NetworkSpec {
    NetworkSpec::Mlp {
        input_dim: 1,
        layers: vec![
            LayerSpec::new(10, Activation::Tanh, true),
            LayerSpec::new(10, Activation::Tanh, true),
            LayerSpec::new(1, Activation::Identity, true),
        ],
    }
}

/// Desk-scale DeepONet for the periodic Burgers operator: 64-point initial
/// field into the branch, (x, t, sin 2 pi x, cos 2 pi x) into the trunk,
/// 24 latent pairs.
pub fn burgers_desk_spec() -> NetworkSpec {
    NetworkSpec::Deeponet {
        branch_input: 64,
        branch_layers: vec![
            LayerSpec::new(32, Activation::Tanh, true),
            LayerSpec::new(24, Activation::Identity, true),
        ],
        trunk_input: 4,
        trunk_layers: vec![
            LayerSpec::new(32, Activation::Tanh, true),
            LayerSpec::new(32, Activation::Tanh, true),
            LayerSpec::new(24, Activation::Tanh, true),
        ],
        latent_dim: 24,
        combine_bias: true,
    }
}
