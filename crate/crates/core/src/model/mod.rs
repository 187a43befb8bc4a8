//! The re-ranking network.
//!
//! For every query row the pipeline pools the strongest matches of the
//! unigram similarity matrix and of each n-gram convolution (max over
//! filters), optionally at several document prefixes (cascade) and
//! optionally paired with the context similarity at each pooled position
//! (disambiguation). Rows get the term's normalized IDF appended, may be
//! shuffled during training, and a small dense stack maps the flattened
//! features to one relevance score.
//!
//! Per-row feature layout, in order: for each n-gram size `g = 1..=max_ngram`,
//! for each cascade segment, `top_k` pooled values followed (when
//! disambiguation is on) by their `top_k` context similarities; the IDF is
//! the last column.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{InputShape, SimInput};
use crate::error::{Error, Result};
use crate::numerics::{check_permutation, Activation, Graph, NodeId, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

/// Which of the three optional components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub cascade: bool,
    pub disamb: bool,
    pub shuffle: bool,
}

impl Components {
    pub const PACRR: Components = Components::new(false, false, false);
    pub const CO_PACRR: Components = Components::new(true, true, true);

    pub const fn new(cascade: bool, disamb: bool, shuffle: bool) -> Self {
        Self {
            cascade,
            disamb,
            shuffle,
        }
    }

    /// All eight variants: PACRR, the single and double combinations, then
    /// Co-PACRR.
    pub fn all_variants() -> [Components; 8] {
        [
            Components::new(false, false, false),
            Components::new(true, false, false),
            Components::new(false, true, false),
            Components::new(false, false, true),
            Components::new(true, true, false),
            Components::new(true, false, true),
            Components::new(false, true, true),
            Components::new(true, true, true),
        ]
    }

    pub fn name(self) -> String {
        if self == Self::CO_PACRR {
            return "Co-PACRR".into();
        }
        let mut prefix = String::new();
        for (on, letter) in [(self.cascade, 'C'), (self.disamb, 'D'), (self.shuffle, 'S')] {
            if on {
                prefix.push(letter);
            }
        }
        if prefix.is_empty() {
            "PACRR".into()
        } else {
            format!("{prefix}-PACRR")
        }
    }

    pub(crate) fn bits(self) -> u8 {
        u8::from(self.cascade) | u8::from(self.disamb) << 1 | u8::from(self.shuffle) << 2
    }

    pub(crate) fn from_bits(bits: u8) -> Option<Self> {
        (bits < 8).then(|| Self::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0))
    }
}

impl Default for Components {
    fn default() -> Self {
        Self::CO_PACRR
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Components {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::all_variants()
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("CDS-PACRR") && *c == Self::CO_PACRR))
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    CrossEntropy,
    MaxMargin,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "max_margin" | "hinge" => Ok(LossKind::MaxMargin),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::MaxMargin => "max_margin",
        })
    }
}

/// Architecture hyper-parameters. Defaults follow the published setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Padded query length.
    pub query_len: usize,
    /// Padded (truncated) document length.
    pub doc_len: usize,
    /// Longest n-gram; sizes `2..=max_ngram` get a convolution.
    pub max_ngram: usize,
    pub filters: usize,
    /// Signals kept per row by k-max pooling.
    pub top_k: usize,
    /// Number of cascade prefixes, at equal fractions ending at 100%.
    pub cascade_positions: usize,
    /// Half-width of the context window.
    pub context_window: usize,
    pub hidden: Vec<usize>,
    pub components: Components,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            query_len: 16,
            doc_len: 800,
            max_ngram: 3,
            filters: 32,
            top_k: 3,
            cascade_positions: 4,
            context_window: 4,
            hidden: vec![16, 16],
            components: Components::CO_PACRR,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("query_len", self.query_len),
            ("doc_len", self.doc_len),
            ("max_ngram", self.max_ngram),
            ("filters", self.filters),
            ("top_k", self.top_k),
            ("cascade_positions", self.cascade_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            query_len: self.query_len,
            doc_len: self.doc_len,
            context_window: self.context_window,
        }
    }

    /// Exclusive end column of each pooled prefix: `ceil(s / n * doc_len)`
    /// for `s = 1..=n`, or just `doc_len` without the cascade.
    pub fn cascade_boundaries(&self) -> Vec<usize> {
        let n = if self.components.cascade {
            self.cascade_positions
        } else {
            1
        };
        (1..=n).map(|s| (s * self.doc_len).div_ceil(n)).collect()
    }

    /// Per-row width of the pooled feature matrix, IDF column included.
    pub fn pooled_feature_width(&self) -> usize {
        let per_segment = if self.components.disamb {
            2 * self.top_k
        } else {
            self.top_k
        };
        let segments = if self.components.cascade {
            self.cascade_positions
        } else {
            1
        };
        self.max_ngram * per_segment * segments + 1
    }

    pub fn dense_input_width(&self) -> usize {
        self.query_len * self.pooled_feature_width()
    }

    /// Layer widths of the dense stack, input first, scalar output last.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.dense_input_width()];
        widths.extend(&self.hidden);
        widths.push(1);
        widths
    }

    pub fn parameter_count(&self) -> usize {
        let conv: usize = (2..=self.max_ngram).map(|g| g * g * self.filters).sum();
        let dense: usize = self.layer_widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        conv + dense
    }
}

pub fn pooled_feature_width(config: &ModelConfig) -> usize {
    config.pooled_feature_width()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[inputs, outputs]`.
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Trainable weights, in declared order: one `[g, g, filters]` kernel per
/// n-gram size `2..=max_ngram`, then each dense layer's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub conv: Vec<Tensor>,
    pub dense: Vec<DenseLayer>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("consistent shape")
        };
        let conv = (2..=config.max_ngram)
            .map(|g| glorot(&[g, g, config.filters], g * g, g * g * config.filters))
            .collect();
        let dense = config
            .layer_widths()
            .windows(2)
            .map(|w| DenseLayer {
                weights: glorot(&[w[0], w[1]], w[0], w[1]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self { conv, dense })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Self {
        let conv = (2..=config.max_ngram)
            .map(|g| Tensor::zeros(&[g, g, config.filters]))
            .collect();
        let dense = config
            .layer_widths()
            .windows(2)
            .map(|w| DenseLayer {
                weights: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { conv, dense }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.conv.iter().collect();
        for layer in &self.dense {
            out.push(&layer.weights);
            out.push(&layer.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.conv.iter_mut().collect();
        for layer in &mut self.dense {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks tensor shapes against a configuration.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::shape(
                "ModelParams",
                format!("{} tensors, configuration needs {}", ours.len(), theirs.len()),
            ));
        }
        for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "ModelParams",
                    format!("tensor {i} has shape {:?}, expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over every value's bit pattern, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter leaves of one graph.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    conv: Vec<NodeId>,
    dense: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn attach(graph: &mut Graph, params: &ModelParams) -> Self {
        Self {
            conv: params.conv.iter().map(|t| graph.param(t.clone())).collect(),
            dense: params
                .dense
                .iter()
                .map(|l| (graph.param(l.weights.clone()), graph.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Gradients after a backward pass, zero where none flowed.
    pub fn gradients(&self, graph: &Graph) -> ModelParams {
        let grad = |id: NodeId| {
            graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
        };
        ModelParams {
            conv: self.conv.iter().map(|&id| grad(id)).collect(),
            dense: self
                .dense
                .iter()
                .map(|&(w, b)| DenseLayer {
                    weights: grad(w),
                    bias: grad(b),
                })
                .collect(),
        }
    }
}

/// Pooled signals of one (row, n-gram, segment) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTrace {
    pub row: usize,
    /// 1 for the raw similarity matrix, `g` for the size-`g` convolution.
    pub ngram: usize,
    pub segment: usize,
    /// Exclusive end column of the pooled prefix.
    pub boundary: usize,
    pub values: Vec<f64>,
    pub positions: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreOutput {
    pub rel: f64,
    pub trace: Option<Vec<PoolTrace>>,
}

fn check_input(input: &SimInput, config: &ModelConfig) -> Result<()> {
    let (lq, ld) = input.shape();
    if (lq, ld) != (config.query_len, config.doc_len) {
        return Err(Error::shape(
            "forward",
            format!(
                "input is {lq}x{ld} but the model expects {}x{}",
                config.query_len, config.doc_len
            ),
        ));
    }
    Ok(())
}

/// Builds the `[query_len, pooled_feature_width]` feature matrix.
pub fn build_features(
    graph: &mut Graph,
    params: &ParamNodes,
    input: &SimInput,
    config: &ModelConfig,
    mut trace: Option<&mut Vec<PoolTrace>>,
) -> Result<NodeId> {
    check_input(input, config)?;
    if params.conv.len() + 1 != config.max_ngram {
        return Err(Error::shape(
            "forward",
            format!(
                "{} convolution kernels for max_ngram {}",
                params.conv.len(),
                config.max_ngram
            ),
        ));
    }
    let rows = config.query_len;
    let k = config.top_k;
    let sim = graph.constant(input.sim.clone());
    let querysim = config
        .components
        .disamb
        .then(|| graph.constant(input.querysim.clone()));

    let mut matrices = vec![sim];
    for &kernels in &params.conv {
        let conv = graph.conv2d_same(sim, kernels)?;
        matrices.push(graph.max_over_filters(conv)?);
    }

    let boundaries = config.cascade_boundaries();
    let mut pieces = Vec::with_capacity(matrices.len() * boundaries.len() * 2 + 1);
    for (g, &c) in matrices.iter().enumerate() {
        for (s, &end) in boundaries.iter().enumerate() {
            let (pooled, positions) = graph.kmax_rows(c, k, end)?;
            if let Some(trace) = trace.as_deref_mut() {
                let values = graph.value(pooled).data();
                for row in 0..rows {
                    trace.push(PoolTrace {
                        row,
                        ngram: g + 1,
                        segment: s,
                        boundary: end,
                        values: values[row * k..(row + 1) * k].to_vec(),
                        positions: positions[row * k..(row + 1) * k].to_vec(),
                    });
                }
            }
            pieces.push(pooled);
            if let Some(qs) = querysim {
                pieces.push(graph.gather(qs, &positions, &[rows, k])?);
            }
        }
    }
    let idf = graph.constant(input.idf.clone().reshape(vec![rows, 1])?);
    pieces.push(idf);
    graph.concat_cols(&pieces)
}

/// Optionally permutes the feature rows, flattens them and applies the dense
/// stack (ReLU hidden layers, linear output).
pub fn build_combination(
    graph: &mut Graph,
    params: &ParamNodes,
    features: NodeId,
    config: &ModelConfig,
    perm: Option<&[usize]>,
) -> Result<NodeId> {
    let shape = graph.value(features).shape().to_vec();
    let expected = [config.query_len, config.pooled_feature_width()];
    if shape != expected {
        return Err(Error::shape(
            "combine",
            format!("features are {shape:?}, expected {expected:?}"),
        ));
    }
    let mut rows = features;
    if let Some(perm) = perm {
        rows = graph.permute_rows(rows, perm)?;
    }
    let mut x = graph.reshape(rows, &[config.dense_input_width()])?;
    let last = params.dense.len().saturating_sub(1);
    for (i, &(w, b)) in params.dense.iter().enumerate() {
        let act = if i == last {
            Activation::Identity
        } else {
            Activation::Relu
        };
        x = graph.dense(x, w, b, act)?;
    }
    Ok(x)
}

/// Adds the full scoring pipeline to `graph` and returns the scalar node.
/// `perm`, when given, reorders the feature rows before combination.
pub fn score_node(
    graph: &mut Graph,
    params: &ParamNodes,
    input: &SimInput,
    config: &ModelConfig,
    perm: Option<&[usize]>,
) -> Result<NodeId> {
    let features = build_features(graph, params, input, config, None)?;
    build_combination(graph, params, features, config, perm)
}

fn run_forward(
    input: &SimInput,
    params: &ModelParams,
    config: &ModelConfig,
    perm: Option<&[usize]>,
    traced: bool,
) -> Result<ScoreOutput> {
    if let Some(p) = perm {
        check_permutation(p, config.query_len)?;
    }
    let mut graph = Graph::new();
    let nodes = ParamNodes::attach(&mut graph, params);
    let mut trace = traced.then(Vec::new);
    let features = build_features(&mut graph, &nodes, input, config, trace.as_mut())?;
    let out = build_combination(&mut graph, &nodes, features, config, perm)?;
    let rel = graph.value(out).item();
    if !rel.is_finite() {
        return Err(Error::Numerical(format!("model produced score {rel}")));
    }
    Ok(ScoreOutput { rel, trace })
}

/// Scores one input. Training passes a fresh row permutation when shuffling
/// is enabled; inference passes `None`.
pub fn forward(
    input: &SimInput,
    params: &ModelParams,
    config: &ModelConfig,
    perm: Option<&[usize]>,
) -> Result<ScoreOutput> {
    run_forward(input, params, config, perm, false)
}

/// [`forward`] that also records every pooled value and position.
pub fn forward_traced(
    input: &SimInput,
    params: &ModelParams,
    config: &ModelConfig,
    perm: Option<&[usize]>,
) -> Result<ScoreOutput> {
    run_forward(input, params, config, perm, true)
}

/// Inference score: identity row order, deterministic.
pub fn score_inference(input: &SimInput, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    Ok(forward(input, params, config, None)?.rel)
}

/// The pooled feature matrix before shuffling and combination.
pub fn pooled_features(
    input: &SimInput,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let nodes = ParamNodes::attach(&mut graph, params);
    let features = build_features(&mut graph, &nodes, input, config, None)?;
    Ok(graph.value(features).clone())
}

/// Applies the dense stack to an already pooled feature matrix.
pub fn combine(features: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let mut graph = Graph::new();
    let nodes = ParamNodes::attach(&mut graph, params);
    let f = graph.constant(features.clone());
    let out = build_combination(&mut graph, &nodes, f, config, None)?;
    Ok(graph.value(out).item())
}

/// Standard deviation of inference scores over random row permutations; a
/// diagnostic of how much a model still depends on query term order.
pub fn permutation_sensitivity(
    input: &SimInput,
    params: &ModelParams,
    config: &ModelConfig,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(samples);
    let mut perm: Vec<usize> = (0..config.query_len).collect();
    for _ in 0..samples {
        perm.shuffle(rng);
        scores.push(forward(input, params, config, Some(&perm))?.rel);
    }
    let n = scores.len().max(1) as f64;
    let mean = scores.iter().sum::<f64>() / n;
    Ok((scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt())
}
