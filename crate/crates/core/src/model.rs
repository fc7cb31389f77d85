//! Encoder-processor-decoder graph network and its TAT-shaped variant.

use std::collections::BTreeMap;

use denoise_tensor::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{FeaturizerSpec, GraphError, RadiusGraph, EMBEDDING_ROWS, N_ELEMENTS};
use crate::tat;

/// Shortcut weight of a GNS-TAT residual block; the branch weight is
/// `sqrt(1 - SHORTCUT^2)`.
pub const TAT_SHORTCUT: f64 = 0.9;

pub fn tat_branch_weight() -> f64 {
    (1.0 - TAT_SHORTCUT * TAT_SHORTCUT).sqrt()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tat(#[from] tat::TatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gns,
    GnsTat,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gns" => Ok(Variant::Gns),
            "gns_tat" => Ok(Variant::GnsTat),
            _ => Err(format!("unknown variant '{s}' (expected gns or gns_tat)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            _ => Err(format!("unknown aggregation '{s}' (expected sum or mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    ShiftedSoftplus,
    /// `scale * leaky_relu(x, alpha)`
    TailoredLrelu { alpha: f64, scale: f64 },
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match *self {
            Activation::ShiftedSoftplus => tape.shifted_softplus(x),
            Activation::TailoredLrelu { alpha, scale } => {
                let y = tape.leaky_relu(x, alpha);
                tape.scale(y, scale)
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::ShiftedSoftplus => denoise_tensor::shifted_softplus(x),
            Activation::TailoredLrelu { alpha, scale } => scale * if x >= 0.0 { x } else { alpha * x },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GNSConfig {
    pub variant: Variant,
    pub n_mp_layers: usize,
    pub n_block_iterations: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    /// Hidden layers of the edge and vertex update MLPs.
    pub mlp_layers: usize,
    /// Hidden layers of the decoder MLPs.
    pub decoder_layers: usize,
    pub decoder_aggregation: Aggregation,
    pub activation: Activation,
    pub featurizer: FeaturizerSpec,
    pub max_edges_per_vertex: usize,
    pub eta: f64,
}

impl GNSConfig {
    /// A small configuration. `GnsTat` uses mean aggregation and a depth at
    /// which the slope solver has a root.
    pub fn new(variant: Variant) -> Result<Self, ModelError> {
        let (n_mp_layers, aggregation) = match variant {
            Variant::Gns => (3, Aggregation::Sum),
            Variant::GnsTat => (10, Aggregation::Mean),
        };
        Self {
            variant,
            n_mp_layers,
            n_block_iterations: 3,
            latent: 32,
            mlp_hidden: 32,
            mlp_layers: 3,
            decoder_layers: 2,
            decoder_aggregation: aggregation,
            activation: Activation::ShiftedSoftplus,
            featurizer: FeaturizerSpec::bessel(8, 3.0),
            max_edges_per_vertex: 20,
            eta: 0.8,
        }
        .finalize()
    }

    /// Validates counts and sets the activation the variant requires,
    /// solving the tailored slope for `GnsTat`.
    pub fn finalize(mut self) -> Result<Self, ModelError> {
        let counts = [
            ("n_mp_layers", self.n_mp_layers),
            ("n_block_iterations", self.n_block_iterations),
            ("latent", self.latent),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_layers", self.mlp_layers),
            ("max_edges_per_vertex", self.max_edges_per_vertex),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        self.featurizer.validate()?;
        self.activation = match self.variant {
            Variant::Gns => Activation::ShiftedSoftplus,
            Variant::GnsTat => {
                let t = tat::solve_tat_slope(&self, self.eta)?;
                Activation::TailoredLrelu {
                    alpha: t.negative_slope,
                    scale: t.output_scale,
                }
            }
        };
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = matches!(
            (self.variant, self.activation),
            (Variant::Gns, Activation::ShiftedSoftplus) | (Variant::GnsTat, Activation::TailoredLrelu { .. })
        );
        if !ok {
            return Err(ModelError::Config(format!(
                "activation {:?} does not match variant {:?}; call finalize()",
                self.activation, self.variant
            )));
        }
        Ok(())
    }

    /// Width of the edge encoder input: radial basis plus scaled displacement.
    pub fn edge_input_dim(&self) -> usize {
        self.featurizer.n_basis + 3
    }

    pub fn total_mp_steps(&self) -> usize {
        self.n_mp_layers * self.n_block_iterations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum InitScheme {
    /// N(0, 1/fan_in)
    FanInGaussian { fan_in: usize },
    /// First edge-MLP layer: the first `edge_rows` rows are N(0, 1/edge_rows),
    /// the vertex rows are zero.
    EdgeDelta { edge_rows: usize },
    StandardNormal,
    Zeros,
    Ones,
}

/// Named parameter tensors with their initialization schemes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    schemes: BTreeMap<String, InitScheme>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, scheme: InitScheme) {
        let name = name.into();
        self.schemes.insert(name.clone(), scheme);
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn scheme(&self, name: &str) -> Option<InitScheme> {
        self.schemes.get(name).copied()
    }

    pub fn set_scheme(&mut self, name: &str, scheme: InitScheme) {
        if self.tensors.contains_key(name) {
            self.schemes.insert(name.to_string(), scheme);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on the tape; `trainable` decides which become
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Same names and shapes as `other`.
    pub fn check_layout(&self, other: &ParamStore) -> Result<(), ModelError> {
        for (name, t) in &other.tensors {
            let mine = self.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if mine.shape() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: mine.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !other.tensors.contains_key(*k)) {
            return Err(ModelError::Config(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

struct Layout {
    entries: Vec<(String, Vec<usize>, InitScheme)>,
}

impl Layout {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.entries.push((
            format!("{prefix}.w"),
            vec![fan_in, fan_out],
            InitScheme::FanInGaussian { fan_in },
        ));
        self.entries.push((format!("{prefix}.b"), vec![fan_out], InitScheme::Zeros));
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, hidden_layers: usize, output: usize) {
        let mut fan_in = input;
        for k in 0..hidden_layers {
            self.linear(&format!("{prefix}.l{k}"), fan_in, hidden);
            fan_in = hidden;
        }
        self.linear(&format!("{prefix}.l{hidden_layers}"), fan_in, output);
    }

    fn norm(&mut self, prefix: &str, width: usize) {
        self.entries.push((format!("{prefix}.g"), vec![width], InitScheme::Ones));
        self.entries.push((format!("{prefix}.b"), vec![width], InitScheme::Zeros));
    }
}

fn mp_prefix(l: usize) -> String {
    format!("processor.mp{l}")
}

/// Name of the first linear layer's weight in the edge MLP of step `l`.
pub fn edge_first_weight(l: usize) -> String {
    format!("{}.edge.mlp.l0.w", mp_prefix(l))
}

/// Parameters whose names start with this prefix form the decoder.
pub const DECODER_PREFIX: &str = "decoder.";
/// Prefix of the graph-level decoder, reinitialized for fine-tuning.
pub const GRAPH_DECODER_PREFIX: &str = "decoder.graph.";

/// The network described by a [`GNSConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: GNSConfig,
}

/// Decoded predictions of one block iteration.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// `|S| x 3` noise prediction.
    pub noise: Var,
    /// `|S| x 118` element logits.
    pub type_logits: Var,
    /// `G x 1` graph prediction.
    pub graph: Var,
}

/// Vertex and edge latents after every message-passing step (index 0 is the
/// encoder output), plus the hidden activations of every edge MLP.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub vertex: Vec<Var>,
    pub edge: Vec<Var>,
    pub edge_hidden: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphState {
    pub vertex: Var,
    pub edge: Var,
}

impl Model {
    pub fn new(config: GNSConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GNSConfig {
        &self.config
    }

    fn layout(&self) -> Layout {
        let c = &self.config;
        let (d, h) = (c.latent, c.mlp_hidden);
        let mut lay = Layout { entries: Vec::new() };
        lay.entries.push((
            "encoder.embedding".into(),
            vec![EMBEDDING_ROWS, d],
            InitScheme::StandardNormal,
        ));
        lay.linear("encoder.edge", c.edge_input_dim(), d);
        lay.norm("encoder.edge.ln", d);
        for l in 0..c.n_mp_layers {
            let p = mp_prefix(l);
            lay.mlp(&format!("{p}.edge.mlp"), 3 * d, h, c.mlp_layers, d);
            lay.mlp(&format!("{p}.vertex.mlp"), 2 * d, h, c.mlp_layers, d);
            match c.variant {
                Variant::Gns => {
                    lay.norm(&format!("{p}.edge.ln"), d);
                    lay.norm(&format!("{p}.vertex.ln"), d);
                }
                Variant::GnsTat => {
                    for part in ["ln_e", "ln_s", "ln_r"] {
                        lay.norm(&format!("{p}.edge.{part}"), d);
                    }
                    for part in ["ln_v", "ln_a"] {
                        lay.norm(&format!("{p}.vertex.{part}"), d);
                    }
                }
            }
        }
        let dh = c.decoder_layers;
        lay.mlp("decoder.noise", d, h, dh, 3);
        lay.mlp("decoder.type", d, h, dh, N_ELEMENTS);
        lay.mlp("decoder.graph.pre", d, h, dh, d);
        lay.mlp("decoder.graph.post", d, h, dh, 1);
        lay
    }

    /// Fresh parameters. GNS-TAT additionally gets Edge-Delta initialization.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, scheme) in self.layout().entries {
            let t = sample_init(&shape, scheme, &mut rng);
            store.insert(name, t, scheme);
        }
        if self.config.variant == Variant::GnsTat {
            tat::edge_delta_init(&mut store, &self.config, &mut rng)
                .expect("layout contains every edge MLP");
        }
        store
    }

    /// Re-samples every parameter whose name starts with `prefix`, using its
    /// recorded scheme.
    pub fn reinit_prefix(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        for name in names {
            let scheme = store.scheme(&name).unwrap_or(InitScheme::Zeros);
            let shape = store.get(&name).expect("listed").shape().to_vec();
            *store.get_mut(&name).expect("listed") = sample_init(&shape, scheme, &mut rng);
        }
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w = p.var(&format!("{prefix}.w"))?;
        let b = p.var(&format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let g = p.var(&format!("{prefix}.g"))?;
        let b = p.var(&format!("{prefix}.b"))?;
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: &str,
        hidden_layers: usize,
        mut x: Var,
        mut hidden_out: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        for k in 0..hidden_layers {
            let z = self.linear(tape, p, &format!("{prefix}.l{k}"), x)?;
            x = self.config.activation.apply(tape, z);
            if let Some(h) = hidden_out.as_deref_mut() {
                h.push(x);
            }
        }
        self.linear(tape, p, &format!("{prefix}.l{hidden_layers}"), x)
    }

    /// Initial latents: embedding rows and the normalized edge encoding.
    /// `types` are embedding-table rows (atomic number minus one, or the mask
    /// token).
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &RadiusGraph,
        types: &[usize],
    ) -> Result<GraphState, ModelError> {
        if types.len() != graph.n_vertices() {
            return Err(ModelError::Config(format!(
                "{} type indices for {} vertices",
                types.len(),
                graph.n_vertices()
            )));
        }
        let vertex = tape.gather_rows(p.var("encoder.embedding")?, types.to_vec())?;
        let feat = tape.constant(graph.edge_feat().clone());
        let disp = tape.constant(graph.scaled_displacement());
        let x = tape.concat(&[feat, disp], 1)?;
        let z = self.linear(tape, p, "encoder.edge", x)?;
        let edge = self.norm(tape, p, "encoder.edge.ln", z)?;
        Ok(GraphState { vertex, edge })
    }

    /// Interaction-network edge function of step `l`, before the shortcut.
    pub fn edge_update(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        graph: &RadiusGraph,
        state: GraphState,
        hidden_out: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let pre = mp_prefix(l);
        let (mut e, mut vs, mut vr) = (state.edge, state.vertex, state.vertex);
        if self.config.variant == Variant::GnsTat {
            e = self.norm(tape, p, &format!("{pre}.edge.ln_e"), e)?;
            vs = self.norm(tape, p, &format!("{pre}.edge.ln_s"), vs)?;
            vr = self.norm(tape, p, &format!("{pre}.edge.ln_r"), vr)?;
        }
        let vs = tape.gather_rows(vs, graph.senders().to_vec())?;
        let vr = tape.gather_rows(vr, graph.receivers().to_vec())?;
        let x = tape.concat(&[e, vs, vr], 1)?;
        let y = self.mlp(tape, p, &format!("{pre}.edge.mlp"), self.config.mlp_layers, x, hidden_out)?;
        match self.config.variant {
            Variant::Gns => self.norm(tape, p, &format!("{pre}.edge.ln"), y),
            Variant::GnsTat => Ok(y),
        }
    }

    /// Interaction-network vertex function of step `l`, given the updated
    /// edges. Incoming edges are summed per receiver.
    pub fn vertex_update(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        graph: &RadiusGraph,
        vertex: Var,
        new_edge: Var,
    ) -> Result<Var, ModelError> {
        let pre = mp_prefix(l);
        let mut agg = tape.segment_sum(new_edge, graph.receivers().to_vec(), graph.n_vertices())?;
        let mut v = vertex;
        if self.config.variant == Variant::GnsTat {
            v = self.norm(tape, p, &format!("{pre}.vertex.ln_v"), v)?;
            agg = self.norm(tape, p, &format!("{pre}.vertex.ln_a"), agg)?;
        }
        let x = tape.concat(&[v, agg], 1)?;
        let y = self.mlp(tape, p, &format!("{pre}.vertex.mlp"), self.config.mlp_layers, x, None)?;
        match self.config.variant {
            Variant::Gns => self.norm(tape, p, &format!("{pre}.vertex.ln"), y),
            Variant::GnsTat => Ok(y),
        }
    }

    /// One message-passing step with its shortcut: `old + IN(old)` for GNS,
    /// `0.9 old + sqrt(0.19) IN(old)` for GNS-TAT.
    pub fn processor_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        graph: &RadiusGraph,
        state: GraphState,
        hidden_out: Option<&mut Vec<Var>>,
    ) -> Result<GraphState, ModelError> {
        let e_new = self.edge_update(tape, p, l, graph, state, hidden_out)?;
        let v_new = self.vertex_update(tape, p, l, graph, state.vertex, e_new)?;
        let combine = |tape: &mut Tape, old: Var, new: Var| -> Result<Var, ModelError> {
            match self.config.variant {
                Variant::Gns => Ok(tape.add(old, new)?),
                Variant::GnsTat => {
                    let a = tape.scale(old, TAT_SHORTCUT);
                    let b = tape.scale(new, tat_branch_weight());
                    Ok(tape.add(a, b)?)
                }
            }
        };
        Ok(GraphState {
            edge: combine(tape, state.edge, e_new)?,
            vertex: combine(tape, state.vertex, v_new)?,
        })
    }

    /// Per-vertex noise (`|S| x 3`) and element logits (`|S| x 118`).
    pub fn decode_vertex(&self, tape: &mut Tape, p: &Bound, vertex: Var) -> Result<(Var, Var), ModelError> {
        let dh = self.config.decoder_layers;
        let noise = self.mlp(tape, p, "decoder.noise", dh, vertex, None)?;
        let logits = self.mlp(tape, p, "decoder.type", dh, vertex, None)?;
        Ok((noise, logits))
    }

    /// One scalar per graph (`G x 1`): vertex MLP, per-graph aggregation,
    /// graph MLP.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &RadiusGraph,
        vertex: Var,
    ) -> Result<Var, ModelError> {
        let dh = self.config.decoder_layers;
        let h = self.mlp(tape, p, "decoder.graph.pre", dh, vertex, None)?;
        let ids = graph.graph_id().to_vec();
        let pooled = match self.config.decoder_aggregation {
            Aggregation::Sum => tape.segment_sum(h, ids, graph.n_graphs())?,
            Aggregation::Mean => tape.segment_mean(h, ids, graph.n_graphs())?,
        };
        self.mlp(tape, p, "decoder.graph.post", dh, pooled, None)
    }

    /// Predictions decoded after every block iteration; the last entry is
    /// the evaluation output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &RadiusGraph,
        types: &[usize],
    ) -> Result<Vec<BlockOutput>, ModelError> {
        self.forward_traced(tape, p, graph, types, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &RadiusGraph,
        types: &[usize],
        mut trace: Option<&mut Trace>,
    ) -> Result<Vec<BlockOutput>, ModelError> {
        let mut state = self.encode(tape, p, graph, types)?;
        if let Some(t) = trace.as_deref_mut() {
            t.vertex.push(state.vertex);
            t.edge.push(state.edge);
        }
        let mut outputs = Vec::with_capacity(self.config.n_block_iterations);
        for _ in 0..self.config.n_block_iterations {
            for l in 0..self.config.n_mp_layers {
                let hidden = trace.as_deref_mut().map(|t| &mut t.edge_hidden);
                state = self.processor_step(tape, p, l, graph, state, hidden)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.vertex.push(state.vertex);
                    t.edge.push(state.edge);
                }
            }
            let (noise, type_logits) = self.decode_vertex(tape, p, state.vertex)?;
            let g = self.decode_graph(tape, p, graph, state.vertex)?;
            outputs.push(BlockOutput {
                noise,
                type_logits,
                graph: g,
            });
        }
        Ok(outputs)
    }
}

pub(crate) fn sample_init(shape: &[usize], scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut normal = |std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect()
    };
    let data = match scheme {
        InitScheme::FanInGaussian { fan_in } => normal(1.0 / (fan_in as f64).sqrt()),
        InitScheme::StandardNormal => normal(1.0),
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Ones => vec![1.0; n],
        InitScheme::EdgeDelta { edge_rows } => {
            let cols = shape.get(1).copied().unwrap_or(1);
            let mut d = normal(1.0 / (edge_rows as f64).sqrt());
            d[edge_rows * cols..].iter_mut().for_each(|v| *v = 0.0);
            d
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Structure;
    use crate::graph::build_graph;

    fn small(variant: Variant) -> GNSConfig {
        let mut c = GNSConfig::new(variant).unwrap();
        c.latent = 8;
        c.mlp_hidden = 8;
        c.finalize().unwrap()
    }

    fn water() -> RadiusGraph {
        let s = Structure::new(vec![8, 1, 1], vec![[0.0; 3], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]).unwrap();
        build_graph(&s, &FeaturizerSpec::bessel(8, 3.0), 20).unwrap()
    }

    #[test]
    fn output_shapes() {
        for v in [Variant::Gns, Variant::GnsTat] {
            let m = Model::new(small(v)).unwrap();
            let params = m.init_params(0);
            let g = water();
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, |_| true);
            let out = m.forward(&mut tape, &b, &g, &g.type_indices()).unwrap();
            assert_eq!(out.len(), m.config().n_block_iterations);
            let last = out.last().unwrap();
            assert_eq!(tape.shape(last.noise), &[3, 3]);
            assert_eq!(tape.shape(last.type_logits), &[3, 118]);
            assert_eq!(tape.shape(last.graph), &[1, 1]);
        }
    }

    #[test]
    fn zero_processor_is_identity_or_shrink() {
        for v in [Variant::Gns, Variant::GnsTat] {
            let mut c = small(v);
            c.n_mp_layers = 1;
            let c = match v {
                Variant::Gns => c.finalize().unwrap(),
                // keep the solved activation; depth does not matter here
                Variant::GnsTat => c,
            };
            let m = Model { config: c };
            let mut params = m.init_params(1);
            let names: Vec<String> = params.names().filter(|n| n.contains(".mlp.")).map(String::from).collect();
            for n in names {
                params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            let g = water();
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, |_| false);
            let s0 = m.encode(&mut tape, &b, &g, &g.type_indices()).unwrap();
            let s1 = m.processor_step(&mut tape, &b, 0, &g, s0, None).unwrap();
            let factor = if v == Variant::Gns { 1.0 } else { 0.9 };
            for (a, b) in [(s0.vertex, s1.vertex), (s0.edge, s1.edge)] {
                let (a, b) = (tape.value(a), tape.value(b));
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| (factor * x - y).abs() < 1e-15));
            }
        }
        assert!((TAT_SHORTCUT.powi(2) + tat_branch_weight().powi(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn processor_parameters_appear_once() {
        let m = Model::new(small(Variant::Gns)).unwrap();
        let p = m.init_params(0);
        let first = p.names().filter(|n| n.starts_with("processor.mp0.edge.mlp.l0")).count();
        assert_eq!(first, 2);
        assert!(p.names().all(|n| !n.contains("block")));
    }

    #[test]
    fn layout_check_catches_mismatch() {
        let m = Model::new(small(Variant::Gns)).unwrap();
        let a = m.init_params(0);
        let mut b = a.clone();
        b.insert("decoder.noise.l0.b", Tensor::zeros(vec![2]), InitScheme::Zeros);
        assert!(a.check_layout(&a.clone()).is_ok());
        assert!(matches!(b.check_layout(&a), Err(ModelError::ParamShape { .. })));
    }
}
