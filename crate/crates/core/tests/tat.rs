mod common;

use common::small_config;
use denoise_core::data::{make_synthetic_dataset, Structure};
use denoise_core::graph::build_graph;
use denoise_core::model::{edge_first_weight, GNSConfig, GraphState, Model, Variant};
use denoise_core::tat::{mean_pairwise_cosine, mean_q, oversmoothing_profile, solve_tat_slope};
use denoise_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn two_atoms() -> Structure {
    Structure::new(vec![6, 8], vec![[0.0; 3], [1.2, 0.0, 0.0]]).unwrap()
}

fn wide(variant: Variant, width: usize) -> Model {
    let mut c = GNSConfig::new(variant).unwrap();
    c.latent = width;
    c.mlp_hidden = width;
    c.n_mp_layers = 10;
    c.n_block_iterations = 3;
    Model::new(c.finalize().unwrap()).unwrap()
}

#[test]
fn edge_activations_keep_unit_q_at_init() {
    let model = wide(Variant::GnsTat, 256);
    let params = model.init_params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = two_atoms();
    let g = build_graph(&s, &model.config().featurizer, 20).unwrap();
    let mut per_layer = vec![0.0; model.config().n_mp_layers * model.config().mlp_layers];
    let draws = 64;
    for _ in 0..draws {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let mut k = 0;
        for l in 0..model.config().n_mp_layers {
            let state = GraphState {
                edge: tape.constant(gaussian(g.n_edges(), 256, &mut rng)),
                vertex: tape.constant(gaussian(2, 256, &mut rng)),
            };
            let mut hidden = Vec::new();
            model.edge_update(&mut tape, &bound, l, &g, state, Some(&mut hidden)).unwrap();
            for h in hidden {
                per_layer[k] += mean_q(tape.value(h)) / draws as f64;
                k += 1;
            }
        }
    }
    for (k, q) in per_layer.iter().enumerate() {
        assert!((0.8..=1.2).contains(q), "layer {k}: q = {q}");
    }
}

#[test]
fn edge_delta_columns_have_edge_only_fan_in_variance() {
    let config = small_config(Variant::GnsTat, 16);
    let model = Model::new(config.clone()).unwrap();
    let d = config.latent;
    let mut columns = vec![Vec::new(); config.mlp_hidden];
    let mut seed = 0;
    while columns[0].len() < 10_000 {
        let p = model.init_params(seed);
        seed += 1;
        for l in 0..config.n_mp_layers {
            let w = p.get(&edge_first_weight(l)).unwrap();
            assert_eq!(w.rows(), 3 * d);
            for r in 0..w.rows() {
                for (c, col) in columns.iter_mut().enumerate() {
                    let v = w.row(r)[c];
                    if r < d {
                        col.push(v);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
            let b = p.get(&edge_first_weight(l).replace(".w", ".b")).unwrap();
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }
    for col in &columns {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var * d as f64 - 1.0).abs() < 0.1, "variance {var} vs {}", 1.0 / d as f64);
    }
}

/// Cosine between two random edge latents pushed through the processor of
/// a freshly initialized model, after every step.
fn edge_cosine_through_depth(variant: Variant, width: usize, seed: u64) -> Vec<f64> {
    let model = wide(variant, width);
    let params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let g = build_graph(&two_atoms(), &model.config().featurizer, 20).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let mut state = GraphState {
        edge: tape.constant(gaussian(2, width, &mut rng)),
        vertex: tape.constant(gaussian(2, width, &mut rng)),
    };
    let mut out = vec![mean_pairwise_cosine(tape.value(state.edge), &[0, 0]).unwrap()];
    for _ in 0..model.config().n_block_iterations {
        for l in 0..model.config().n_mp_layers {
            state = model.processor_step(&mut tape, &bound, l, &g, state, None).unwrap();
            out.push(mean_pairwise_cosine(tape.value(state.edge), &[0, 0]).unwrap());
        }
    }
    out
}

#[test]
fn tat_edge_cosine_stays_bounded_through_depth() {
    let eta = solve_tat_slope(&GNSConfig::new(Variant::GnsTat).unwrap(), 0.8).unwrap().eta;
    let seeds = 10;
    let mut mean = vec![0.0; 31];
    for seed in 0..seeds {
        for (m, c) in mean.iter_mut().zip(edge_cosine_through_depth(Variant::GnsTat, 128, seed)) {
            *m += c / seeds as f64;
        }
    }
    let bound = (eta + 0.1).max(mean[0]);
    for (t, c) in mean.iter().enumerate() {
        assert!(*c <= bound, "step {t}: c = {c}, bound {bound}");
    }
}

#[test]
fn baseline_edge_cosine_approaches_one_by_depth_thirty() {
    let seeds = 10;
    let mut last = 0.0;
    for seed in 0..seeds {
        last += edge_cosine_through_depth(Variant::Gns, 128, seed)[30] / seeds as f64;
    }
    assert!(last > 0.95, "GNS edge cosine at step 30: {last}");
}

#[test]
fn identical_atoms_start_fully_similar_and_profiles_stay_in_range() {
    let s = Structure::new(vec![6, 6, 6], vec![[0.0; 3], [1.5, 0.0, 0.0], [0.0, 1.5, 0.0]]).unwrap();
    let data = make_synthetic_dataset(3, 4);
    for variant in [Variant::Gns, Variant::GnsTat] {
        let model = Model::new(small_config(variant, 16)).unwrap();
        let params = model.init_params(5);
        let g = common::batch_of(std::slice::from_ref(&s), model.config());
        let profile = oversmoothing_profile(&model, &params, &g).unwrap();
        assert!((profile[0] - 1.0).abs() < 1e-12);
        let g = common::batch_of(&data, model.config());
        let profile = oversmoothing_profile(&model, &params, &g).unwrap();
        assert_eq!(profile.len(), model.config().total_mp_steps() + 1);
        assert!(profile.iter().all(|c| (-1.0..=1.0).contains(c)));
    }
}
