//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. An optional argument filters criteria by name.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{fd4, max_abs_diff, settled_fd4, small_config, LossCase};
use denoise_core::data::{make_synthetic_dataset, Structure};
use denoise_core::model::{GNSConfig, GraphState, Model, ParamStore, Variant};
use denoise_core::objectives::corrupt_with;
use denoise_core::oracle::{
    j1_j2_gradient_gap, mixture_score, orthonormal_basis, MixtureModel, TinyNet,
};
use denoise_core::tat::{cmap_lrelu, network_cmap, oversmoothing_profile, solve_tat_slope};
use denoise_core::train::{
    dynamic_batch, ema_update, lr_at, run, BatchCaps, Checkpoint, Mode, RunConfig, RunOutput, Schedule, Trainer,
};
use denoise_tensor::{Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

// 1. score matching and denoising give the same gradients

fn score_denoising_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let single = MixtureModel::random(1, 4, 0.1, 1.0, &mut rng).unwrap();
    let net = TinyNet::init(12, 16, &mut rng);
    let one = j1_j2_gradient_gap(&net, &single, 20_000, 1).unwrap();

    let mixture = MixtureModel::random(3, 4, 0.1, 0.1, &mut rng).unwrap();
    let three = j1_j2_gradient_gap(&net, &mixture, 100_000, 2).unwrap();
    let elapsed = start.elapsed();
    let pass = one.gap <= 1e-12 && three.within(3.0) && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "n=1 gap {:.1e}; n=3 gap {:.3e} vs 3 SE {:.3e} ({} params, {} samples); {:.1}s",
            one.gap,
            three.gap,
            3.0 * three.standard_error,
            three.n_params,
            three.n_samples,
            elapsed.as_secs_f64()
        ),
    )
}

// 2. analytic mixture score against finite differences of log q on V

fn mixture_score_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut worst_translation = 0.0f64;
    for _ in 0..20 {
        let n_atoms = rng.random_range(2..=5);
        let n_centers = rng.random_range(1..=10);
        let sigma = rng.random_range(0.2..1.0);
        let m = MixtureModel::random(n_centers, n_atoms, sigma, 1.0, &mut rng).unwrap();
        let (_, x) = m.sample(&mut rng);
        let score = mixture_score(&m, &x).unwrap();
        let basis = orthonormal_basis(n_atoms, &mut rng);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for b in &basis {
            analytic.push(b.iter().zip(&score).map(|(u, s)| u * s).sum::<f64>());
            let along = |t: f64| {
                let y: Vec<f64> = x.iter().zip(b).map(|(xi, bi)| xi + t * bi).collect();
                m.log_density(&y).unwrap()
            };
            numeric.push(fd4(along, 0.0, 1e-3 * sigma));
        }
        let num = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(num / den);
        for k in 0..3 {
            let t: f64 = score.iter().skip(k).step_by(3).sum::<f64>() / (n_atoms as f64).sqrt();
            worst_translation = worst_translation.max(t.abs());
        }
    }
    outcome(
        worst < 1e-6 && worst_translation <= 1e-12,
        format!("worst relative error {worst:.2e}; largest translation component {worst_translation:.1e}"),
    )
}

// 3. end-to-end gradients against central differences

fn model_gradient_fd() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for variant in [Variant::Gns, Variant::GnsTat] {
        let case = LossCase::new(variant, 8, 3, 31);
        let params = case.model.init_params(5);
        let grads = case.gradients(&params);
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut worst = 0.0f64;
        let (mut checked, mut on_kink) = (0, 0);
        while checked < 200 {
            let name = &names[rng.random_range(0..names.len())];
            let len = params.get(name).unwrap().len();
            let idx = rng.random_range(0..len);
            let x0 = params.get(name).unwrap().data()[idx];
            let mut p = params.clone();
            let f = |v: f64| {
                p.get_mut(name).unwrap().data_mut()[idx] = v;
                case.loss(&p)
            };
            let Some(numeric) = settled_fd4(f, x0, &[1e-3, 1e-4, 1e-5, 1e-6, 1e-7]) else {
                on_kink += 1;
                continue;
            };
            let analytic = grads[name][idx];
            worst = worst.max((analytic - numeric).abs() / (analytic.abs() + 1e-8));
            checked += 1;
        }
        pass &= worst < 1e-4;
        details.push(format!(
            "{variant:?}: {checked} params, worst rel {worst:.2e} ({on_kink} draws on a kink skipped)"
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    outcome(pass, format!("{}; {:.1}s", details.join("; "), elapsed.as_secs_f64()))
}

// 4. translation and permutation symmetry, centered noise

struct Outputs {
    vertex: Vec<Tensor>,
    graph: Vec<Tensor>,
}

fn outputs(model: &Model, params: &ParamStore, structures: &[Structure]) -> Outputs {
    let g = common::batch_of(structures, model.config());
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = model.forward(&mut tape, &bound, &g, &g.type_indices()).unwrap();
    let mut vertex = Vec::new();
    let mut graph = Vec::new();
    for o in &out {
        vertex.push(tape.value(o.noise).clone());
        vertex.push(tape.value(o.type_logits).clone());
        graph.push(tape.value(o.graph).clone());
    }
    Outputs { vertex, graph }
}

fn symmetry_suite() -> Outcome {
    let data = make_synthetic_dataset(6, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut trans, mut perm_v, mut perm_g) = (0.0f64, 0.0f64, 0.0f64);
    for variant in [Variant::Gns, Variant::GnsTat] {
        let model = Model::new(small_config(variant, 16)).unwrap();
        let params = model.init_params(7);
        let base = outputs(&model, &params, &data);
        let shifted: Vec<Structure> = data
            .iter()
            .map(|s| s.translated([normal(&mut rng) * 10.0, normal(&mut rng) * 10.0, normal(&mut rng) * 10.0]))
            .collect();
        let moved = outputs(&model, &params, &shifted);
        for (a, b) in base.vertex.iter().chain(&base.graph).zip(moved.vertex.iter().chain(&moved.graph)) {
            trans = trans.max(max_abs_diff(a.data(), b.data()));
        }
        for s in &data {
            let mut order: Vec<usize> = (0..s.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let p = s.permuted(&order);
            let a = outputs(&model, &params, std::slice::from_ref(s));
            let b = outputs(&model, &params, std::slice::from_ref(&p));
            for (ta, tb) in a.vertex.iter().zip(&b.vertex) {
                for (new_row, &old_row) in order.iter().enumerate() {
                    perm_v = perm_v.max(max_abs_diff(ta.row(old_row), tb.row(new_row)));
                }
            }
            for (ta, tb) in a.graph.iter().zip(&b.graph) {
                perm_g = perm_g.max(max_abs_diff(ta.data(), tb.data()));
            }
        }
    }
    let mut centered = 0.0f64;
    for s in make_synthetic_dataset(100, 43) {
        let (_, eps) = corrupt_with(&s, 0.05, true, &mut rng).unwrap();
        let norm = (eps.len() as f64).sqrt();
        for k in 0..3 {
            centered = centered.max((eps.iter().map(|e| e[k]).sum::<f64>() / norm).abs());
        }
    }
    outcome(
        trans <= 1e-10 && perm_v <= 1e-10 && perm_g <= 1e-10 && centered <= 1e-12,
        format!(
            "translation {trans:.1e}; permuted vertices {perm_v:.1e}; permuted graphs {perm_g:.1e}; \
             noise along translations {centered:.1e}"
        ),
    )
}

// 5. tailored slope, cosine map, Edge-Delta

fn tat_construction() -> Outcome {
    let config = GNSConfig::new(Variant::GnsTat).unwrap();
    let act = solve_tat_slope(&config, 0.8).unwrap();
    let residual = (network_cmap(&config, act.negative_slope)(0.0) - 0.8).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst_z = 0.0f64;
    for _ in 0..5 {
        let c: f64 = rng.random_range(-0.95..0.95);
        let alpha: f64 = rng.random_range(0.0..1.0);
        let scale = (2.0 / (1.0 + alpha * alpha)).sqrt();
        let f = |x: f64| scale * if x > 0.0 { x } else { alpha * x };
        let s = (1.0 - c * c).sqrt();
        let n = 10_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let u = normal(&mut rng);
            let v = c * u + s * normal(&mut rng);
            let p = f(u) * f(v);
            sum += p;
            sum_sq += p * p;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        worst_z = worst_z.max((cmap_lrelu(c, alpha).unwrap() - mean).abs() / se);
    }

    let model = Model::new(small_config(Variant::GnsTat, 16)).unwrap();
    let params = model.init_params(3);
    let data = make_synthetic_dataset(4, 52);
    let graph = common::batch_of(&data, model.config());
    let n = graph.n_vertices();
    let d = model.config().latent;
    let random = |rng: &mut ChaCha8Rng, rows: usize| {
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| normal(rng)).collect()).unwrap()
    };
    let edge = random(&mut rng, graph.n_edges());
    let (va, vb) = (random(&mut rng, n), random(&mut rng, n));
    let mut ablation = 0.0f64;
    for l in 0..model.config().n_mp_layers {
        let mut out = Vec::new();
        for v in [&va, &vb] {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false);
            let state = GraphState {
                vertex: tape.constant(v.clone()),
                edge: tape.constant(edge.clone()),
            };
            let e = model.edge_update(&mut tape, &bound, l, &graph, state, None).unwrap();
            out.push(tape.value(e).clone());
        }
        ablation = ablation.max(max_abs_diff(out[0].data(), out[1].data()));
    }
    outcome(
        residual < 1e-10 && worst_z <= 3.0 && ablation <= 1e-12,
        format!(
            "slope {:.6} residual {residual:.1e}; cosine map worst |z| {worst_z:.2} over 5 pairs; \
             Edge-Delta difference {ablation:.1e}",
            act.negative_slope
        ),
    )
}

// 6. GNS-TAT oversmooths less than GNS at depth 30

fn oversmoothing() -> Outcome {
    let start = Instant::now();
    let data = make_synthetic_dataset(8, 61);
    let mut means = Vec::new();
    for variant in [Variant::Gns, Variant::GnsTat] {
        let mut c = GNSConfig::new(variant).unwrap();
        c.n_mp_layers = 10;
        c.n_block_iterations = 3;
        let model = Model::new(c.finalize().unwrap()).unwrap();
        let graph = common::batch_of(&data, model.config());
        let mut total = 0.0;
        for seed in 0..10 {
            let profile = oversmoothing_profile(&model, &model.init_params(seed), &graph).unwrap();
            total += profile[30];
        }
        means.push(total / 10.0);
    }
    let elapsed = start.elapsed();
    outcome(
        means[0] > means[1] && elapsed < Duration::from_secs(120),
        format!(
            "mean cosine at step 30: GNS {:.4}, GNS-TAT {:.4}; {:.1}s",
            means[0],
            means[1],
            elapsed.as_secs_f64()
        ),
    )
}

// 7 and 8. transfer from synthetic pre-training

fn config_file(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::from_file(&path).unwrap()
}

const SEEDS: u64 = 5;

struct Datasets {
    upstream: Vec<Structure>,
    downstream: Vec<Structure>,
}

fn datasets() -> &'static Datasets {
    static D: OnceLock<Datasets> = OnceLock::new();
    D.get_or_init(|| Datasets {
        upstream: make_synthetic_dataset(5000, 1),
        downstream: make_synthetic_dataset(500, 2),
    })
}

fn pretrained() -> &'static Vec<Checkpoint> {
    static P: OnceLock<Vec<Checkpoint>> = OnceLock::new();
    P.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                run(Mode::Pretrain, &datasets().upstream, config_file("desk_pretrain.conf"), seed, None, None)
                    .unwrap()
                    .checkpoint
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn compare_transfer(mode: Mode) -> (f64, f64, Vec<(f64, f64)>) {
    let config = config_file("desk_finetune.conf");
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let mae = |init: Option<&Checkpoint>| -> f64 {
            let out: RunOutput = run(mode, &datasets().downstream, config.clone(), seed, init, None).unwrap();
            out.test_mae.unwrap()
        };
        pairs.push((mae(Some(&pretrained()[seed as usize])), mae(None)));
    }
    let pre = median(pairs.iter().map(|p| p.0).collect());
    let scratch = median(pairs.iter().map(|p| p.1).collect());
    (pre, scratch, pairs)
}

fn fmt_pairs(pairs: &[(f64, f64)]) -> String {
    pairs
        .iter()
        .map(|(a, b)| format!("{a:.3}/{b:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn transfer() -> Outcome {
    let start = Instant::now();
    let (pre, scratch, pairs) = compare_transfer(Mode::Finetune);
    let elapsed = start.elapsed();
    outcome(
        pre <= scratch && elapsed < Duration::from_secs(1800),
        format!(
            "median test MAE pre-trained {pre:.4} vs scratch {scratch:.4} (per seed {}); {:.0}s",
            fmt_pairs(&pairs),
            elapsed.as_secs_f64()
        ),
    )
}

fn frozen_backbone() -> Outcome {
    let (pre, scratch, pairs) = compare_transfer(Mode::FinetuneFrozenBackbone);
    outcome(
        pre < scratch,
        format!(
            "median decoder-only test MAE pre-trained {pre:.4} vs random backbone {scratch:.4} (per seed {})",
            fmt_pairs(&pairs)
        ),
    )
}

// 9. batching, schedule, EMA, checkpoints

fn batcher_property() -> Result<(), String> {
    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let caps_s = (1usize..64, 1usize..512, 1usize..10);
    let sizes_s = prop::collection::vec((1usize..64, 0usize..512), 0..60);
    runner
        .run(&(caps_s, sizes_s), |((mv, me, mg), sizes)| {
            let caps = BatchCaps {
                max_vertices: mv,
                max_edges: me,
                max_graphs: mg,
            };
            match dynamic_batch(&sizes, &caps) {
                Ok(batches) => {
                    let flat: Vec<usize> = batches.iter().flatten().copied().collect();
                    prop_assert_eq!(flat, (0..sizes.len()).collect::<Vec<_>>());
                    for b in &batches {
                        prop_assert!(!b.is_empty());
                        prop_assert!(b.len() <= mg);
                        prop_assert!(b.iter().map(|&i| sizes[i].0).sum::<usize>() <= mv);
                        prop_assert!(b.iter().map(|&i| sizes[i].1).sum::<usize>() <= me);
                    }
                }
                Err(_) => {
                    prop_assert!(sizes.iter().any(|&(v, e)| v > mv || e > me));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn ema_series() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let decay = 0.9999;
    let mut shadow = ParamStore::new();
    let mut params = ParamStore::new();
    shadow.insert("x", Tensor::vector(vec![0.3, -1.2]), denoise_core::model::InitScheme::Zeros);
    params.insert("x", Tensor::vector(vec![0.0, 0.0]), denoise_core::model::InitScheme::Zeros);
    let start = shadow.get("x").unwrap().data().to_vec();
    let mut history = Vec::new();
    for _ in 0..1000 {
        let p = vec![normal(&mut rng), normal(&mut rng)];
        params.get_mut("x").unwrap().data_mut().copy_from_slice(&p);
        ema_update(&mut shadow, &params, decay);
        history.push(p);
    }
    // s_k = d^k s_0 + (1 - d) sum_j d^(k-1-j) p_j
    let k = history.len() as i32;
    let mut worst = 0.0f64;
    for i in 0..2 {
        let mut want = decay.powi(k) * start[i];
        for (j, p) in history.iter().enumerate() {
            want += (1.0 - decay) * decay.powi(k - 1 - j as i32) * p[i];
        }
        worst = worst.max((want - shadow.get("x").unwrap().data()[i]).abs());
    }
    worst
}

fn checkpoint_resume() -> Result<(), String> {
    let mut config = config_file("desk_pretrain.conf");
    config.apply_override("gradient_steps=40").unwrap();
    let data = make_synthetic_dataset(60, 92);
    let (train, valid) = (data[..50].to_vec(), data[50..].to_vec());
    let mut straight = Trainer::new(config.clone(), Mode::Pretrain, train.clone(), valid.clone(), 3, None)
        .map_err(|e| e.to_string())?;
    for _ in 0..40 {
        straight.train_step().map_err(|e| e.to_string())?;
    }
    let mut first = Trainer::new(config, Mode::Pretrain, train.clone(), valid.clone(), 3, None).map_err(|e| e.to_string())?;
    for _ in 0..17 {
        first.train_step().map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let ck = first.checkpoint();
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    if loaded != ck || loaded.to_bytes() != ck.to_bytes() {
        return Err("loaded checkpoint differs from the saved one".into());
    }
    let mut resumed = Trainer::resume(loaded, Mode::Pretrain, train, valid).map_err(|e| e.to_string())?;
    for _ in 17..40 {
        resumed.train_step().map_err(|e| e.to_string())?;
    }
    if resumed.checkpoint().to_bytes() != straight.checkpoint().to_bytes() {
        return Err("resumed run diverged from the uninterrupted run".into());
    }
    Ok(())
}

fn pipeline_mechanics() -> Outcome {
    let batcher = batcher_property();
    let table = RunConfig::default();
    let s = Schedule::from_config(&table);
    let ends = [
        lr_at(0, &s),
        lr_at(table.warm_up_steps, &s),
        lr_at(table.warm_up_steps + table.cosine_cycle_length, &s),
    ];
    let schedule_ok = ends == [1e-5, 1e-4, 1e-7];
    let ema = ema_series();
    let ckpt = checkpoint_resume();
    let pass = batcher.is_ok() && schedule_ok && ema <= 1e-12 && ckpt.is_ok();
    outcome(
        pass,
        format!(
            "batcher over 1000 streams: {}; lr endpoints {:?}; EMA series error {ema:.1e}; checkpoint resume: {}",
            batcher.err().unwrap_or_else(|| "ok".into()),
            ends,
            ckpt.err().unwrap_or_else(|| "bit-exact".into())
        ),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("score_denoising_equivalence", score_denoising_equivalence),
        ("mixture_score_fd", mixture_score_fd),
        ("model_gradient_fd", model_gradient_fd),
        ("symmetry_suite", symmetry_suite),
        ("tat_construction", tat_construction),
        ("oversmoothing", oversmoothing),
        ("transfer", transfer),
        ("frozen_backbone", frozen_backbone),
        ("pipeline_mechanics", pipeline_mechanics),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {} {name}: {} ({:.1}s) {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
