#![allow(dead_code)]

use std::collections::BTreeMap;

use denoise_core::data::{make_synthetic_dataset, Structure};
use denoise_core::graph::{build_graph, RadiusGraph};
use denoise_core::model::{GNSConfig, Model, ParamStore, Variant};
use denoise_core::objectives::{block_averaged_loss, corrupt_with, mask_types, LossTargets, LossWeights};
use denoise_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Narrow model of the given variant. GNS-TAT keeps the 10 x 3 depth its
/// slope solver needs.
pub fn small_config(variant: Variant, width: usize) -> GNSConfig {
    let mut c = GNSConfig::new(variant).unwrap();
    c.latent = width;
    c.mlp_hidden = width;
    if variant == Variant::Gns {
        c.n_mp_layers = 2;
        c.n_block_iterations = 2;
    }
    c.finalize().unwrap()
}

pub fn batch_of(structures: &[Structure], config: &GNSConfig) -> RadiusGraph {
    let graphs: Vec<RadiusGraph> = structures
        .iter()
        .map(|s| build_graph(s, &config.featurizer, config.max_edges_per_vertex).unwrap())
        .collect();
    RadiusGraph::batch(&graphs).unwrap()
}

/// A corrupted, partly masked, labelled batch with every loss term active.
pub struct LossCase {
    pub model: Model,
    pub graph: RadiusGraph,
    pub types: Vec<usize>,
    pub targets: LossTargets,
    pub weights: LossWeights,
}

impl LossCase {
    pub fn new(variant: Variant, width: usize, n_structures: usize, seed: u64) -> Self {
        let config = small_config(variant, width);
        let data = make_synthetic_dataset(n_structures, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = Vec::new();
        let mut noise: Vec<f64> = Vec::new();
        let mut types = Vec::new();
        let mut masked = Vec::new();
        let mut masked_types = Vec::new();
        let mut labels = Vec::new();
        for s in &data {
            let (n, eps) = corrupt_with(s, 0.05, true, &mut rng).unwrap();
            let (t, m) = mask_types(s.atomic_numbers(), 0.5, &mut rng);
            for &i in &m {
                masked.push(types.len() + i);
                masked_types.push(s.atomic_numbers()[i] as usize - 1);
            }
            types.extend(t);
            noise.extend(eps.iter().flatten());
            labels.push(s.label("surrogate_energy").unwrap() / 10.0);
            noisy.push(n);
        }
        let graph = batch_of(&noisy, &config);
        let targets = LossTargets {
            noise: Tensor::new(vec![types.len(), 3], noise).unwrap(),
            graph_id: graph.graph_id().to_vec(),
            n_graphs: graph.n_graphs(),
            graph: Some(labels),
            masked,
            masked_types,
        };
        let weights = LossWeights {
            position_coeff: 1.0,
            target_coeff: 1.0,
            atom_type_coeff: 4.0,
            atom_mask_prob: 0.5,
        };
        Self {
            model: Model::new(config).unwrap(),
            graph,
            types,
            targets,
            weights,
        }
    }

    pub fn loss(&self, params: &ParamStore) -> f64 {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let out = self.model.forward(&mut tape, &bound, &self.graph, &self.types).unwrap();
        let terms = block_averaged_loss(&mut tape, &out, &self.targets, &self.weights).unwrap();
        tape.value(terms.total).item()
    }

    pub fn gradients(&self, params: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| true);
        let out = self.model.forward(&mut tape, &bound, &self.graph, &self.types).unwrap();
        let terms = block_averaged_loss(&mut tape, &out, &self.targets, &self.weights).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        bound
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.get(name).unwrap().len()]);
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Fourth-order central difference of `f` at `x` along one coordinate.
pub fn fd4(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let near = f(x + h) - f(x - h);
    let far = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * near - far) / (12.0 * h)
}

/// [`fd4`] at the largest step in `steps` (descending) whose estimate agrees
/// with the next smaller one. `None` when no consecutive pair agrees, as
/// happens when a leaky-ReLU kink sits inside every stencil.
pub fn settled_fd4(mut f: impl FnMut(f64) -> f64, x: f64, steps: &[f64]) -> Option<f64> {
    let est: Vec<f64> = steps.iter().map(|&h| fd4(&mut f, x, h)).collect();
    (0..est.len() - 1).find_map(|i| {
        let scale = est[i].abs().max(est[i + 1].abs());
        // roundoff of a loss of order 10 divided by the smaller step
        let noise = 1e-14 / steps[i + 1];
        ((est[i] - est[i + 1]).abs() <= 1e-5 * scale + noise).then_some(est[i])
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

