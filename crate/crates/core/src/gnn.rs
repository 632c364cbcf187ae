//! GCN, GraphSAGE and GAT node classifiers on the autodiff tape.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use freekd_tensor::{CsrMatrix, Gradients, Matrix, Parameter, Segments, SparseOperator, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{gcn_normalized, mean_aggregator, Graph};

/// Probability floor applied before taking logarithms of soft labels.
pub const PROB_FLOOR: f64 = 1e-12;

/// GAT attention logits use this LeakyReLU slope.
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gcn,
    Sage,
    Gat,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Gcn => "gcn",
            Architecture::Sage => "sage",
            Architecture::Gat => "gat",
        })
    }
}

impl FromStr for Architecture {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Architecture::Gcn),
            "sage" | "graphsage" => Ok(Architecture::Sage),
            "gat" => Ok(Architecture::Gat),
            other => Err(CoreError::Contract(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    /// Attention heads; GAT only.
    pub heads: usize,
    pub dropout: f64,
    /// Dropout on attention coefficients; GAT only.
    pub attention_dropout: f64,
    pub seed: u64,
}

impl GnnConfig {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        GnnConfig {
            architecture,
            layers: 2,
            hidden: 64,
            heads: 8,
            dropout: 0.5,
            attention_dropout: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(CoreError::Contract(format!("{} layers; at least 2 are needed", self.layers)));
        }
        if self.hidden == 0 || self.heads == 0 {
            return Err(CoreError::Contract("hidden size and heads must be positive".into()));
        }
        if self.architecture == Architecture::Gat && self.hidden % self.heads != 0 {
            return Err(CoreError::Contract(format!(
                "GAT hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        for rate in [self.dropout, self.attention_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(CoreError::Contract(format!("dropout {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Precomputed operators for running any architecture over one graph.
///
/// The first `num_fixed` rows take their features from the graph; any
/// further rows (prompt tokens) are supplied as a tape variable at forward
/// time.
#[derive(Clone, Debug)]
pub struct GraphView {
    num_nodes: usize,
    num_fixed: usize,
    feature_dim: usize,
    features: Rc<SparseOperator>,
    gcn: Rc<SparseOperator>,
    mean: Rc<SparseOperator>,
    gat_src: Rc<Vec<usize>>,
    gat_dst: Rc<Vec<usize>>,
    gat_segments: Rc<Segments>,
}

impl GraphView {
    pub fn new(graph: &Graph) -> Self {
        Self::with_extra_nodes(graph.features(), graph.num_nodes(), graph.edges())
    }

    /// View over `num_nodes` nodes whose first `features.rows()` rows are fixed.
    pub fn with_extra_nodes(features: &Matrix, num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        Self::with_feature_operator(Rc::new(SparseOperator::new(CsrMatrix::from_dense(features))), num_nodes, edges)
    }

    /// Same as [`GraphView::with_extra_nodes`] with features already in sparse form.
    pub fn with_feature_operator(features: Rc<SparseOperator>, num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let (num_fixed, feature_dim) = features.shape();
        let mut src = Vec::with_capacity(num_nodes + 2 * edges.len());
        let mut dst = Vec::with_capacity(num_nodes + 2 * edges.len());
        for i in 0..num_nodes {
            src.push(i);
            dst.push(i);
        }
        for &(u, v) in edges {
            src.push(u);
            dst.push(v);
            src.push(v);
            dst.push(u);
        }
        let segments = Segments::new(dst.clone(), num_nodes).expect("edge endpoints in range");
        GraphView {
            num_nodes,
            num_fixed,
            feature_dim,
            features,
            gcn: Rc::new(SparseOperator::new(gcn_normalized(num_nodes, edges))),
            mean: Rc::new(SparseOperator::new(mean_aggregator(num_nodes, edges))),
            gat_src: Rc::new(src),
            gat_dst: Rc::new(dst),
            gat_segments: Rc::new(segments),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_fixed(&self) -> usize {
        self.num_fixed
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_operator(&self) -> &Rc<SparseOperator> {
        &self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Gcn {
        weight: Parameter,
        bias: Parameter,
    },
    Sage {
        self_weight: Parameter,
        neigh_weight: Parameter,
        bias: Parameter,
    },
    Gat {
        weight: Parameter,
        att_src: Parameter,
        att_dst: Parameter,
        bias: Parameter,
        heads: usize,
        concat: bool,
    },
}

impl Layer {
    fn params(&self) -> Vec<(&'static str, &Parameter)> {
        match self {
            Layer::Gcn { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Layer::Sage {
                self_weight,
                neigh_weight,
                bias,
            } => vec![("self_weight", self_weight), ("neigh_weight", neigh_weight), ("bias", bias)],
            Layer::Gat {
                weight,
                att_src,
                att_dst,
                bias,
                ..
            } => vec![("weight", weight), ("att_src", att_src), ("att_dst", att_dst), ("bias", bias)],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Gcn { weight, bias } => vec![weight, bias],
            Layer::Sage {
                self_weight,
                neigh_weight,
                bias,
            } => vec![self_weight, neigh_weight, bias],
            Layer::Gat {
                weight,
                att_src,
                att_dst,
                bias,
                ..
            } => vec![weight, att_src, att_dst, bias],
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Parameter {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Parameter::new(Matrix::from_vec(rows, cols, data).expect("sized"))
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct GnnOutput {
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Var,
    /// Last hidden layer output, after its activation.
    pub embeddings: Var,
    /// Attention coefficients per GAT layer and head, indexed like the view's edge list.
    pub attention: Vec<Vec<Var>>,
    bound: Vec<Var>,
}

enum LayerInput {
    Features { op: Rc<SparseOperator>, tokens: Option<Var> },
    Hidden(Var),
}

impl LayerInput {
    fn times(&self, tape: &mut Tape, weight: Var) -> Result<Var> {
        Ok(match self {
            LayerInput::Features { op, tokens } => {
                let base = tape.spmm(op.clone(), weight)?;
                match tokens {
                    Some(t) => {
                        let extra = tape.matmul(*t, weight)?;
                        tape.concat_rows(&[base, extra])?
                    }
                    None => base,
                }
            }
            LayerInput::Hidden(h) => tape.matmul(*h, weight)?,
        })
    }
}

fn sparse_dropout(op: &SparseOperator, rate: f64, rng: &mut ChaCha8Rng) -> SparseOperator {
    let mut m = op.matrix().clone();
    let keep = 1.0 / (1.0 - rate);
    for v in m.values_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { *v * keep };
    }
    SparseOperator::new(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    config: GnnConfig,
    input_dim: usize,
    num_classes: usize,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

impl GnnModel {
    /// Glorot-initialized model; the same seed gives the same parameters and
    /// the same dropout stream.
    pub fn new(config: GnnConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layers);
        let mut in_dim = input_dim;
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let out_dim = if last { num_classes } else { config.hidden };
            let layer = match config.architecture {
                Architecture::Gcn => Layer::Gcn {
                    weight: glorot(&mut rng, in_dim, out_dim),
                    bias: Parameter::new(Matrix::zeros(1, out_dim)),
                },
                Architecture::Sage => Layer::Sage {
                    self_weight: glorot(&mut rng, in_dim, out_dim),
                    neigh_weight: glorot(&mut rng, in_dim, out_dim),
                    bias: Parameter::new(Matrix::zeros(1, out_dim)),
                },
                Architecture::Gat => {
                    let heads = config.heads;
                    let per_head = if last { num_classes } else { config.hidden / heads };
                    Layer::Gat {
                        weight: glorot(&mut rng, in_dim, heads * per_head),
                        att_src: glorot(&mut rng, per_head, heads),
                        att_dst: glorot(&mut rng, per_head, heads),
                        bias: Parameter::new(Matrix::zeros(1, out_dim)),
                        heads,
                        concat: !last,
                    }
                }
            };
            layers.push(layer);
            in_dim = out_dim;
        }
        Ok(GnnModel {
            config,
            input_dim,
            num_classes,
            layers,
            rng,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters with stable names such as `layer0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("layer{i}.{n}"), p)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Adds this pass's gradients into the parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients, out: &GnnOutput) {
        for (p, v) in self.params_mut().into_iter().zip(&out.bound) {
            p.accumulate(grads, *v);
        }
    }

    /// Runs the network. `training` enables dropout; `trainable` decides
    /// whether the parameters enter the tape as trainable leaves.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        view: &GraphView,
        tokens: Option<Var>,
        training: bool,
        trainable: bool,
    ) -> Result<GnnOutput> {
        if view.feature_dim != self.input_dim {
            return Err(CoreError::Tensor(freekd_tensor::TensorError::Shape {
                op: "gnn_forward",
                left: (view.num_fixed, view.feature_dim),
                right: (self.input_dim, self.config.hidden),
            }));
        }
        let extra = view.num_nodes - view.num_fixed;
        match tokens {
            Some(t) if tape.value(t).shape() != (extra, self.input_dim) => {
                return Err(CoreError::Contract(format!(
                    "view expects {extra} extra feature rows, got {:?}",
                    tape.value(t).shape()
                )))
            }
            None if extra > 0 => {
                return Err(CoreError::Contract(format!("view needs {extra} extra feature rows")));
            }
            _ => {}
        }
        let dropout = self.config.dropout;
        let att_dropout = self.config.attention_dropout;
        let n = view.num_nodes;
        let mut bound = Vec::new();
        let mut attention = Vec::new();

        let features = if training && dropout > 0.0 {
            Rc::new(sparse_dropout(&view.features, dropout, &mut self.rng))
        } else {
            view.features.clone()
        };
        let tokens = match tokens {
            Some(t) => Some(tape.dropout(t, dropout, training, &mut self.rng)?),
            None => None,
        };
        let mut input = LayerInput::Features { op: features, tokens };
        let mut embeddings = None;
        let depth = self.layers.len();

        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == depth;
            if l > 0 {
                if let LayerInput::Hidden(h) = input {
                    input = LayerInput::Hidden(tape.dropout(h, dropout, training, &mut self.rng)?);
                }
            }
            let out = match layer {
                Layer::Gcn { weight, bias } => {
                    let w = weight.bind(tape, trainable)?;
                    let b = bias.bind(tape, trainable)?;
                    bound.extend([w, b]);
                    let xw = input.times(tape, w)?;
                    let agg = tape.spmm(view.gcn.clone(), xw)?;
                    tape.add_row_vector(agg, b)?
                }
                Layer::Sage {
                    self_weight,
                    neigh_weight,
                    bias,
                } => {
                    let ws = self_weight.bind(tape, trainable)?;
                    let wn = neigh_weight.bind(tape, trainable)?;
                    let b = bias.bind(tape, trainable)?;
                    bound.extend([ws, wn, b]);
                    let own = input.times(tape, ws)?;
                    let neigh = input.times(tape, wn)?;
                    let neigh = tape.spmm(view.mean.clone(), neigh)?;
                    let sum = tape.add(own, neigh)?;
                    tape.add_row_vector(sum, b)?
                }
                Layer::Gat {
                    weight,
                    att_src,
                    att_dst,
                    bias,
                    heads,
                    concat,
                } => {
                    let w = weight.bind(tape, trainable)?;
                    let a_src = att_src.bind(tape, trainable)?;
                    let a_dst = att_dst.bind(tape, trainable)?;
                    let b = bias.bind(tape, trainable)?;
                    bound.extend([w, a_src, a_dst, b]);
                    let projected = input.times(tape, w)?;
                    let per_head = tape.value(a_src).rows();
                    let mut outputs = Vec::with_capacity(*heads);
                    let mut coefficients = Vec::with_capacity(*heads);
                    for h in 0..*heads {
                        let wh = tape.slice_cols(projected, h * per_head, (h + 1) * per_head)?;
                        let vs = tape.slice_cols(a_src, h, h + 1)?;
                        let vd = tape.slice_cols(a_dst, h, h + 1)?;
                        let score_src = tape.matmul(wh, vs)?;
                        let score_dst = tape.matmul(wh, vd)?;
                        let e_src = tape.gather_rows(score_src, view.gat_src.clone())?;
                        let e_dst = tape.gather_rows(score_dst, view.gat_dst.clone())?;
                        let e = tape.add(e_src, e_dst)?;
                        let e = tape.leaky_relu(e, GAT_NEGATIVE_SLOPE)?;
                        let alpha = tape.segment_softmax(e, view.gat_segments.clone())?;
                        coefficients.push(alpha);
                        let alpha = tape.dropout(alpha, att_dropout, training, &mut self.rng)?;
                        let messages = tape.gather_rows(wh, view.gat_src.clone())?;
                        let messages = tape.mul_column(messages, alpha)?;
                        outputs.push(tape.scatter_add_rows(messages, view.gat_dst.clone(), n)?);
                    }
                    attention.push(coefficients);
                    let combined = if *concat {
                        tape.concat_cols(&outputs)?
                    } else {
                        let mut acc = outputs[0];
                        for o in &outputs[1..] {
                            acc = tape.add(acc, *o)?;
                        }
                        tape.scale(acc, 1.0 / *heads as f64)?
                    };
                    tape.add_row_vector(combined, b)?
                }
            };
            if last {
                let log_probs = tape.log_softmax_rows(out)?;
                let probs = tape.softmax_rows(out)?;
                return Ok(GnnOutput {
                    logits: out,
                    log_probs,
                    probs,
                    embeddings: embeddings.expect("at least two layers"),
                    attention,
                    bound,
                });
            }
            let activated = match self.config.architecture {
                Architecture::Gat => tape.elu(out)?,
                _ => tape.relu(out)?,
            };
            embeddings = Some(activated);
            input = LayerInput::Hidden(activated);
        }
        unreachable!("validated layer count")
    }

    /// Evaluation-mode pass returning `(probs, embeddings)` values.
    pub fn predict(&mut self, view: &GraphView, tokens: Option<&Matrix>) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let tokens = tokens.map(|t| tape.constant(t.clone())).transpose()?;
        let out = self.forward(&mut tape, view, tokens, false, false)?;
        Ok((tape.value(out.probs).clone(), tape.value(out.embeddings).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, p)| NamedTensor::new(name, &p.value))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = GnnModel::new(ck.config.clone(), ck.input_dim, ck.num_classes)?;
        if model.params_mut().len() != ck.tensors.len() {
            return Err(CoreError::Validation(format!(
                "checkpoint has {} tensors, model needs {}",
                ck.tensors.len(),
                model.params_mut().len()
            )));
        }
        for (p, t) in model.params_mut().into_iter().zip(&ck.tensors) {
            let value = t.to_matrix()?;
            if value.shape() != p.value.shape() {
                return Err(CoreError::Validation(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    /// Replaces parameter values (e.g. to restore a best-validation snapshot).
    pub fn load_values(&mut self, values: &[Matrix]) {
        for (p, v) in self.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, p)| p.value.clone()))
            .collect()
    }
}

/// A named tensor in a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, m: &Matrix) -> Self {
        NamedTensor {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Ok(Matrix::from_vec(self.rows, self.cols, self.values.clone())?)
    }
}

/// JSON model checkpoint: configuration plus row-major named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: GnnConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-node `-ln p[i, y_i]` for `nodes` and their mean.
pub fn cross_entropy(probs: &Matrix, labels: &[Option<usize>], nodes: &[usize]) -> Result<(f64, Vec<f64>)> {
    if nodes.is_empty() {
        return Err(CoreError::Contract("cross entropy over an empty node set".into()));
    }
    let per_node = nodes
        .iter()
        .map(|&i| {
            let y = labels[i].ok_or_else(|| CoreError::Contract(format!("node {i} has no label")))?;
            Ok(-probs.get(i, y).max(PROB_FLOOR).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_node.iter().sum::<f64>() / nodes.len() as f64;
    Ok((mean, per_node))
}

/// Mean negative log-likelihood over `nodes` as a tape scalar.
pub fn cross_entropy_loss(tape: &mut Tape, log_probs: Var, labels: &[Option<usize>], nodes: &[usize]) -> Result<Var> {
    if nodes.is_empty() {
        return Err(CoreError::Contract("cross entropy over an empty node set".into()));
    }
    let classes = tape.value(log_probs).cols();
    let mut weights = Matrix::zeros(nodes.len(), classes);
    let scale = -1.0 / nodes.len() as f64;
    for (r, &i) in nodes.iter().enumerate() {
        let y = labels[i].ok_or_else(|| CoreError::Contract(format!("node {i} has no label")))?;
        weights.set(r, y, scale);
    }
    let picked = tape.gather_rows(log_probs, Rc::new(nodes.to_vec()))?;
    let w = tape.constant(weights)?;
    let weighted = tape.mul(picked, w)?;
    Ok(tape.sum(weighted)?)
}

/// Micro-averaged F1 over `nodes`; equals accuracy for single-label prediction.
pub fn micro_f1(predictions: &[usize], labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(CoreError::Contract("micro-F1 over an empty node set".into()));
    }
    let correct = nodes
        .iter()
        .filter(|&&i| labels[i] == Some(predictions[i]))
        .count();
    Ok(correct as f64 / nodes.len() as f64)
}
