//! Tailored activations, q/c-value propagation, Edge-Delta initialization
//! and oversmoothing diagnostics for the GNS-TAT variant.

use std::f64::consts::PI;

use denoise_tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::RadiusGraph;
use crate::model::{
    edge_first_weight, sample_init, GNSConfig, InitScheme, Model, ModelError, ParamStore, Trace, TAT_SHORTCUT,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TatError {
    #[error("c must lie in [-1, 1], got {0}")]
    CorrelationRange(f64),
    #[error("eta must lie in (0, 1), got {0}")]
    EtaRange(f64),
    #[error(
        "no slope in (0, 1) reaches C_net(0) = {eta}: C_net(0) is {at_zero} at slope 0 and {at_one} at slope 1 \
         (depth {depth}); use a deeper network or a smaller eta"
    )]
    NoRoot {
        eta: f64,
        at_zero: f64,
        at_one: f64,
        depth: usize,
    },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
}

/// Leaky ReLU scaled to preserve `q = 1`: `scale * max(x, alpha x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailoredActivation {
    pub negative_slope: f64,
    pub output_scale: f64,
    pub output_shift: f64,
    pub eta: f64,
}

impl TailoredActivation {
    pub fn new(alpha: f64, eta: f64) -> Self {
        Self {
            negative_slope: alpha,
            output_scale: (2.0 / (1.0 + alpha * alpha)).sqrt(),
            output_shift: 0.0,
            eta,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let y = if x >= 0.0 { x } else { self.negative_slope * x };
        self.output_scale * y + self.output_shift
    }
}

/// Normalized squared norm and cosine similarity of activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QCState {
    pub q: f64,
    pub c: f64,
}

/// Cosine map of the q-preserving leaky ReLU under unit-variance Gaussian
/// inputs with correlation `c`.
pub fn cmap_lrelu(c: f64, alpha: f64) -> Result<f64, TatError> {
    if !(-1.0..=1.0).contains(&c) {
        return Err(TatError::CorrelationRange(c));
    }
    let k = (1.0 - alpha).powi(2) / (1.0 + alpha * alpha);
    let c_out = c + k * ((1.0 - c * c).sqrt() - c * c.acos()) / PI;
    Ok(c_out.clamp(-1.0, 1.0))
}

/// Residual blocks on the deepest edge path: one per message-passing step.
pub fn residual_blocks(config: &GNSConfig) -> usize {
    config.n_mp_layers * config.n_block_iterations
}

/// Number of activation layers on the deepest edge path.
pub fn network_depth(config: &GNSConfig) -> usize {
    config.mlp_layers * residual_blocks(config)
}

/// Composed cosine map of `blocks` residual blocks, each with a branch of
/// `layers` activations and shortcut weights `0.9^2 / (1 - 0.9^2)`.
pub fn residual_cmap(c: f64, alpha: f64, layers: usize, blocks: usize) -> f64 {
    let w = TAT_SHORTCUT * TAT_SHORTCUT;
    let mut c = c.clamp(-1.0, 1.0);
    for _ in 0..blocks {
        let mut branch = c;
        for _ in 0..layers {
            branch = cmap_lrelu(branch, alpha).expect("clamped");
        }
        c = w * c + (1.0 - w) * branch;
    }
    c
}

/// The cosine map of the GNS-TAT edge network.
pub fn network_cmap(config: &GNSConfig, alpha: f64) -> impl Fn(f64) -> f64 {
    let (layers, blocks) = (config.mlp_layers, residual_blocks(config));
    move |c| residual_cmap(c, alpha, layers, blocks)
}

/// Bisects for the slope with `C_net(0) = eta`.
pub fn solve_tat_slope(config: &GNSConfig, eta: f64) -> Result<TailoredActivation, TatError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(TatError::EtaRange(eta));
    }
    let f = network_cmap(config, 0.0);
    let g = |alpha: f64| residual_cmap(0.0, alpha, config.mlp_layers, residual_blocks(config)) - eta;
    let at_zero = f(0.0);
    let at_one = residual_cmap(0.0, 1.0, config.mlp_layers, residual_blocks(config));
    if at_zero < eta {
        return Err(TatError::NoRoot {
            eta,
            at_zero,
            at_one,
            depth: network_depth(config),
        });
    }
    // C_net(0) falls from at_zero to 0 as the slope goes from 0 to 1
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut mid = 0.5;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let r = g(mid);
        if r.abs() < 1e-13 || hi - lo < 1e-16 {
            break;
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(TailoredActivation::new(mid, eta))
}

/// Zeros the vertex-feature rows of every edge MLP's first weight and draws
/// the edge rows from N(0, 1/latent); first-layer biases are zeroed.
pub fn edge_delta_init(store: &mut ParamStore, config: &GNSConfig, rng: &mut ChaCha8Rng) -> Result<(), TatError> {
    let d = config.latent;
    for l in 0..config.n_mp_layers {
        let wname = edge_first_weight(l);
        let shape = store
            .get(&wname)
            .ok_or_else(|| TatError::MissingParam(wname.clone()))?
            .shape()
            .to_vec();
        let scheme = InitScheme::EdgeDelta { edge_rows: d };
        *store.get_mut(&wname).expect("checked") = sample_init(&shape, scheme, rng);
        store.set_scheme(&wname, scheme);
        let bname = wname.trim_end_matches(".w").to_string() + ".b";
        let b = store.get_mut(&bname).ok_or(TatError::MissingParam(bname))?;
        b.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity over distinct row pairs sharing a group id.
/// Groups with fewer than two rows are skipped; `None` if no pair exists.
pub fn mean_pairwise_cosine(x: &Tensor, groups: &[usize]) -> Option<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..x.rows() {
        for j in 0..i {
            if groups[i] == groups[j] {
                total += cosine(x.row(i), x.row(j));
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Mean over rows of `|row|^2 / width`.
pub fn mean_q(x: &Tensor) -> f64 {
    let w = x.cols().max(1) as f64;
    let n = x.rows().max(1) as f64;
    x.data().iter().map(|v| v * v).sum::<f64>() / (w * n)
}

fn traced(model: &Model, params: &ParamStore, graph: &RadiusGraph) -> Result<(Tape, Trace), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let mut trace = Trace::default();
    model.forward_traced(&mut tape, &bound, graph, &graph.type_indices(), Some(&mut trace))?;
    Ok((tape, trace))
}

/// Mean pairwise vertex cosine similarity within each graph after the
/// encoder (entry 0) and after every message-passing step.
pub fn oversmoothing_profile(
    model: &Model,
    params: &ParamStore,
    graph: &RadiusGraph,
) -> Result<Vec<f64>, ModelError> {
    let (tape, trace) = traced(model, params, graph)?;
    Ok(trace
        .vertex
        .iter()
        .map(|&v| mean_pairwise_cosine(tape.value(v), graph.graph_id()).unwrap_or(f64::NAN))
        .collect())
}

/// q and c of the edge latents after the encoder and every step. c is the
/// mean pairwise cosine of edges within the same graph.
pub fn edge_qc_profile(model: &Model, params: &ParamStore, graph: &RadiusGraph) -> Result<Vec<QCState>, ModelError> {
    let (tape, trace) = traced(model, params, graph)?;
    let groups: Vec<usize> = graph.receivers().iter().map(|&r| graph.graph_id()[r]).collect();
    Ok(trace
        .edge
        .iter()
        .map(|&e| {
            let t = tape.value(e);
            QCState {
                q: mean_q(t),
                c: mean_pairwise_cosine(t, &groups).unwrap_or(f64::NAN),
            }
        })
        .collect())
}

/// q of every hidden activation layer of every edge MLP, in forward order.
pub fn edge_hidden_q(model: &Model, params: &ParamStore, graph: &RadiusGraph) -> Result<Vec<f64>, ModelError> {
    let (tape, trace) = traced(model, params, graph)?;
    Ok(trace.edge_hidden.iter().map(|&h| mean_q(tape.value(h))).collect())
}
