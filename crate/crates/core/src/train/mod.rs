//! Training loop: dynamic batching, Adam with warm-up and cosine decay, EMA,
//! early stopping and checkpoints.

mod batch;
mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use denoise_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use batch::{dynamic_batch, BatchCaps};
pub use checkpoint::{Checkpoint, StreamState, FORMAT_VERSION};
pub use config::{ActivationKind, ConfigError, Featurization, RunConfig};
pub use optim::{adam_step, ema_update, lr_at, AdamConfig, AdamState, Schedule};

use crate::data::{DataError, DatasetSplit, Point, Structure};
use crate::graph::{build_graph, GraphError, RadiusGraph};
use crate::model::{Model, ModelError, ParamStore, DECODER_PREFIX, GRAPH_DECODER_PREFIX};
use crate::objectives::{self, block_averaged_loss, LossTargets, ObjectiveError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("a single graph with {value} exceeds {cap}={limit}")]
    GraphTooLarge {
        cap: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("non-finite gradient for parameter '{0}'; step aborted")]
    NonFiniteGradient(String),
    #[error("incompatible checkpoint or config: {0}")]
    Incompatible(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error("structure {index} has no label '{label}'")]
    MissingLabel { index: usize, label: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Denoising and atom-type recovery on unlabelled structures.
    Pretrain,
    /// Supervised target plus auxiliary denoising; all parameters train.
    Finetune,
    /// As `Finetune`, but only decoder parameters are updated.
    FinetuneFrozenBackbone,
}

impl Mode {
    pub fn is_finetune(self) -> bool {
        !matches!(self, Mode::Pretrain)
    }

    pub fn updates(self, name: &str) -> bool {
        match self {
            Mode::FinetuneFrozenBackbone => name.starts_with(DECODER_PREFIX),
            _ => true,
        }
    }
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_pos,loss_type,loss_target,val_mae";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_pos: f64,
    pub loss_type: f64,
    pub loss_target: f64,
    pub val_mae: Option<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_mae.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_pos, self.loss_type, self.loss_target, val
        )
    }
}

/// One corrupted, graph-encoded training example.
struct Prepared {
    graph: RadiusGraph,
    types: Vec<usize>,
    masked: Vec<usize>,
    noise: Vec<Point>,
    label: Option<f64>,
}

fn item_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | index as u64);
    rng
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const EVAL_STREAM: u64 = u64::MAX;

/// Training state for one run.
pub struct Trainer {
    config: RunConfig,
    mode: Mode,
    model: Model,
    params: ParamStore,
    ema: ParamStore,
    adam: AdamState,
    adam_cfg: AdamConfig,
    schedule: Schedule,
    step: u64,
    stream: StreamState,
    order: Vec<usize>,
    train: Vec<Structure>,
    valid: Vec<Structure>,
    target_norm: Option<(f64, f64)>,
    best: Option<ParamStore>,
    best_val: Option<f64>,
    bad_evals: usize,
}

fn label_of(s: &Structure, index: usize, label: &str) -> Result<f64, TrainError> {
    s.label(label).ok_or_else(|| TrainError::MissingLabel {
        index,
        label: label.to_string(),
    })
}

fn target_stats(train: &[Structure], label: &str) -> Result<(f64, f64), TrainError> {
    let ys = train
        .iter()
        .enumerate()
        .map(|(i, s)| label_of(s, i, label))
        .collect::<Result<Vec<_>, _>>()?;
    let n = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok((mean, std))
}

impl Trainer {
    /// Starts a run. Fine-tuning from `init` takes its evaluation parameters
    /// as the starting point and reinitializes the graph decoder.
    pub fn new(
        config: RunConfig,
        mode: Mode,
        train: Vec<Structure>,
        valid: Vec<Structure>,
        seed: u64,
        init: Option<&Checkpoint>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(DataError::EmptyDataset("training set").into());
        }
        let model = Model::new(config.model_config()?)?;
        let params = match init {
            Some(ck) => {
                if &ck.model != model.config() {
                    return Err(TrainError::Incompatible(format!(
                        "checkpoint model {:?} differs from configured model {:?}",
                        ck.model,
                        model.config()
                    )));
                }
                let mut p = ck.eval_params().clone();
                p.check_layout(&model.init_params(0))?;
                if mode.is_finetune() {
                    model.reinit_prefix(&mut p, GRAPH_DECODER_PREFIX, seed);
                }
                p
            }
            None => model.init_params(seed),
        };
        let target_norm = if mode.is_finetune() && config.target_loss_coefficient > 0.0 {
            Some(target_stats(&train, &config.target)?)
        } else {
            None
        };
        let stream = StreamState {
            seed,
            epoch: 0,
            cursor: 0,
        };
        Ok(Self {
            adam_cfg: AdamConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
            },
            schedule: Schedule::from_config(&config),
            order: epoch_order(seed, 0, train.len()),
            ema: params.clone(),
            params,
            adam: AdamState::default(),
            model,
            config,
            mode,
            step: 0,
            stream,
            train,
            valid,
            target_norm,
            best: None,
            best_val: None,
            bad_evals: 0,
        })
    }

    /// Continues a run from its checkpoint, with the same data.
    pub fn resume(ck: Checkpoint, mode: Mode, train: Vec<Structure>, valid: Vec<Structure>) -> Result<Self, TrainError> {
        let model = Model::new(ck.model.clone())?;
        ck.params.check_layout(&model.init_params(0))?;
        if ck.config.model_config()? != ck.model {
            return Err(TrainError::Incompatible("stored config and model disagree".into()));
        }
        Ok(Self {
            adam_cfg: AdamConfig {
                beta1: ck.config.beta1,
                beta2: ck.config.beta2,
                eps: 1e-8,
            },
            schedule: Schedule::from_config(&ck.config),
            order: epoch_order(ck.stream.seed, ck.stream.epoch, train.len()),
            config: ck.config,
            mode,
            model,
            params: ck.params,
            ema: ck.ema,
            adam: ck.adam,
            step: ck.step,
            stream: ck.stream,
            train,
            valid,
            target_norm: ck.target_norm,
            best: ck.best,
            best_val: ck.best_val,
            bad_evals: ck.bad_evals,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.config().clone(),
            step: self.step,
            stream: self.stream,
            params: self.params.clone(),
            ema: self.ema.clone(),
            best: self.best.clone(),
            best_val: self.best_val,
            bad_evals: self.bad_evals,
            adam: self.adam.clone(),
            target_norm: self.target_norm,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ema(&self) -> &ParamStore {
        &self.ema
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn target_norm(&self) -> Option<(f64, f64)> {
        self.target_norm
    }

    /// Parameters for evaluation: best validation snapshot, else EMA.
    pub fn eval_params(&self) -> &ParamStore {
        self.best.as_ref().unwrap_or(&self.ema)
    }

    fn prepare(&self, s: &Structure, index: usize, rng: &mut ChaCha8Rng, labelled: bool) -> Result<Prepared, TrainError> {
        let c = &self.config;
        let (noisy, noise) = match (c.relaxation_interpolation, s.pair_positions()) {
            (true, Some(relaxed)) => {
                let relaxed = s.with_positions(relaxed.to_vec())?;
                objectives::interpolate_corrupt(s, &relaxed, c.position_noise_sigma, rng)?
            }
            _ => objectives::corrupt_with(s, c.position_noise_sigma, c.mean_center_noise, rng)?,
        };
        let (types, masked) = objectives::mask_types(s.atomic_numbers(), c.atom_type_mask_probability, rng);
        let graph = build_graph(&noisy, &c.featurizer(), c.max_edges_per_vertex)?;
        let label = if labelled {
            Some(label_of(s, index, &c.target)?)
        } else {
            None
        };
        Ok(Prepared {
            graph,
            types,
            masked,
            noise,
            label,
        })
    }

    /// Draws the next batch in stream order, starting a new epoch when the
    /// current one is exhausted.
    fn next_batch(&mut self) -> Result<Vec<Prepared>, TrainError> {
        if self.stream.cursor >= self.train.len() {
            self.stream.epoch += 1;
            self.stream.cursor = 0;
            self.order = epoch_order(self.stream.seed, self.stream.epoch, self.train.len());
        }
        let caps = self.config.caps();
        let labelled = self.target_norm.is_some();
        let mut items = Vec::new();
        let mut used = (0, 0, 0);
        while self.stream.cursor < self.train.len() {
            let idx = self.order[self.stream.cursor];
            let mut rng = item_rng(self.stream.seed, self.stream.epoch, idx);
            let item = self.prepare(&self.train[idx], idx, &mut rng, labelled)?;
            let (v, e) = (item.graph.n_vertices(), item.graph.n_edges());
            caps.check_single(v, e)?;
            if !caps.admits(used, v, e) {
                break;
            }
            used = (used.0 + 1, used.1 + v, used.2 + e);
            items.push(item);
            self.stream.cursor += 1;
        }
        Ok(items)
    }

    fn assemble(&self, items: &[Prepared]) -> Result<(RadiusGraph, Vec<usize>, LossTargets), TrainError> {
        let graphs: Vec<RadiusGraph> = items.iter().map(|i| i.graph.clone()).collect();
        let graph = RadiusGraph::batch(&graphs)?;
        let mut types = Vec::new();
        let mut masked = Vec::new();
        let mut masked_types = Vec::new();
        let mut noise = Vec::new();
        let mut offset = 0;
        for it in items {
            types.extend_from_slice(&it.types);
            for &m in &it.masked {
                masked.push(offset + m);
                masked_types.push(it.graph.atomic_numbers()[m] as usize - 1);
            }
            noise.extend(it.noise.iter().flatten().copied());
            offset += it.graph.n_vertices();
        }
        let labels = match self.target_norm {
            Some((mean, std)) => Some(
                items
                    .iter()
                    .map(|i| (i.label.expect("labelled batch") - mean) / std)
                    .collect(),
            ),
            None => None,
        };
        let targets = LossTargets {
            noise: Tensor::new(vec![offset, 3], noise).map_err(ModelError::from)?,
            graph_id: graph.graph_id().to_vec(),
            n_graphs: graph.n_graphs(),
            graph: labels,
            masked,
            masked_types,
        };
        Ok((graph, types, targets))
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainError> {
        let items = self.next_batch()?;
        let (graph, types, targets) = self.assemble(&items)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| true);
        let outputs = self.model.forward(&mut tape, &bound, &graph, &types)?;
        let terms = block_averaged_loss(&mut tape, &outputs, &targets, &self.config.weights())?;
        let grads = tape.backward(terms.total).map_err(ModelError::from)?;
        let mut update = BTreeMap::new();
        for (name, var) in bound.iter() {
            if !self.mode.updates(name) {
                continue;
            }
            let g = grads
                .get(var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.params.get(name).map_or(0, Tensor::len)]);
            update.insert(name.to_string(), g);
        }
        let lr = lr_at(self.step as usize, &self.schedule);
        adam_step(&mut self.params, &update, &mut self.adam, lr, &self.adam_cfg)?;
        ema_update(&mut self.ema, &self.params, self.config.ema_decay);
        let metrics = StepMetrics {
            step: self.step,
            lr,
            loss_total: tape.value(terms.total).item(),
            loss_pos: tape.value(terms.position).item(),
            loss_type: tape.value(terms.atom_type).item(),
            loss_target: tape.value(terms.target).item(),
            val_mae: None,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Validation MAE with the EMA parameters: target MAE in label units when
    /// fine-tuning, noise-component MAE when pre-training.
    pub fn validate(&self) -> Result<Option<f64>, TrainError> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let mae = match self.target_norm {
            Some(norm) => target_mae(&self.model, &self.ema, &self.valid, &self.config, norm)?,
            None => noise_mae(&self.model, &self.ema, &self.valid, &self.config, self.stream.seed)?,
        };
        Ok(Some(mae))
    }

    /// Validates, tracks the best snapshot, and reports whether patience ran
    /// out.
    fn evaluate_and_track(&mut self) -> Result<(Option<f64>, bool), TrainError> {
        let Some(v) = self.validate()? else {
            return Ok((None, false));
        };
        if self.best_val.is_none_or(|b| v < b) {
            self.best_val = Some(v);
            self.best = Some(self.ema.clone());
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        Ok((Some(v), self.bad_evals >= self.config.patience))
    }

    /// Trains until `gradient_steps` or early stopping. Writes the metrics
    /// CSV (with header when starting from step 0) and, with `out_dir`,
    /// periodic and final checkpoints.
    pub fn run(&mut self, metrics: &mut dyn Write, out_dir: Option<&Path>) -> Result<RunSummary, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(e.to_string());
        if self.step == 0 {
            writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
        }
        let total = self.config.gradient_steps as u64;
        let mut stopped_early = false;
        let mut last = None;
        while self.step < total {
            let mut m = self.train_step()?;
            if self.step % self.config.eval_interval as u64 == 0 || self.step == total {
                let (v, stop) = self.evaluate_and_track()?;
                m.val_mae = v;
                stopped_early = stop && self.step < total;
            }
            writeln!(metrics, "{}", m.csv_row()).map_err(io)?;
            last = Some(m);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_interval as u64;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("step_{}.ckpt", self.step)))?;
                }
            }
            if stopped_early {
                break;
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(RunSummary {
            steps: self.step,
            stopped_early,
            best_val_mae: self.best_val,
            last,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub stopped_early: bool,
    pub best_val_mae: Option<f64>,
    pub last: Option<StepMetrics>,
}

fn clean_batches(structures: &[Structure], config: &RunConfig) -> Result<Vec<RadiusGraph>, TrainError> {
    let graphs = structures
        .iter()
        .map(|s| build_graph(s, &config.featurizer(), config.max_edges_per_vertex))
        .collect::<Result<Vec<_>, _>>()?;
    let sizes: Vec<(usize, usize)> = graphs.iter().map(|g| (g.n_vertices(), g.n_edges())).collect();
    dynamic_batch(&sizes, &config.caps())?
        .into_iter()
        .map(|idx| {
            let part: Vec<RadiusGraph> = idx.iter().map(|&i| graphs[i].clone()).collect();
            RadiusGraph::batch(&part).map_err(TrainError::from)
        })
        .collect()
}

/// Graph-level predictions in label units, one per structure, from the last
/// block iteration on uncorrupted inputs.
pub fn predict_targets(
    model: &Model,
    params: &ParamStore,
    structures: &[Structure],
    config: &RunConfig,
    norm: (f64, f64),
) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(structures.len());
    for g in clean_batches(structures, config)? {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let outputs = model.forward(&mut tape, &bound, &g, &g.type_indices())?;
        let last = outputs.last().expect("at least one block");
        out.extend(tape.value(last.graph).data().iter().map(|y| y * norm.1 + norm.0));
    }
    Ok(out)
}

/// Mean absolute target error in label units.
pub fn target_mae(
    model: &Model,
    params: &ParamStore,
    structures: &[Structure],
    config: &RunConfig,
    norm: (f64, f64),
) -> Result<f64, TrainError> {
    let pred = predict_targets(model, params, structures, config, norm)?;
    let mut total = 0.0;
    for (i, (s, p)) in structures.iter().zip(&pred).enumerate() {
        total += (label_of(s, i, &config.target)? - p).abs();
    }
    Ok(total / structures.len().max(1) as f64)
}

/// Mean absolute error of predicted noise components on inputs corrupted
/// from a fixed evaluation stream.
pub fn noise_mae(
    model: &Model,
    params: &ParamStore,
    structures: &[Structure],
    config: &RunConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut noisy = Vec::with_capacity(structures.len());
    let mut noise = Vec::new();
    for (i, s) in structures.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EVAL_STREAM - i as u64);
        let (n, eps) = objectives::corrupt_with(s, config.position_noise_sigma, config.mean_center_noise, &mut rng)?;
        noisy.push(n);
        noise.extend(eps.into_iter().flatten());
    }
    let mut total = 0.0;
    let mut k = 0;
    for g in clean_batches(&noisy, config)? {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let outputs = model.forward(&mut tape, &bound, &g, &g.type_indices())?;
        let pred = tape.value(outputs.last().expect("at least one block").noise);
        for v in pred.data() {
            total += (v - noise[k]).abs();
            k += 1;
        }
    }
    Ok(total / k.max(1) as f64)
}

/// Outcome of [`run`].
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
    pub split: DatasetSplit,
    /// Test-set target MAE (fine-tuning) or noise MAE (pre-training).
    pub test_mae: Option<f64>,
    pub metrics_csv: String,
}

/// Splits `dataset` by the config fractions, trains, and scores the test
/// split with the best validation snapshot.
pub fn run(
    mode: Mode,
    dataset: &[Structure],
    config: RunConfig,
    seed: u64,
    init: Option<&Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let fr = [1.0 - config.valid_fraction - config.test_fraction, config.valid_fraction, config.test_fraction];
    let split = DatasetSplit::new(dataset.len(), fr, seed)?;
    let pick = |idx: &[usize]| -> Vec<Structure> { idx.iter().map(|&i| dataset[i].clone()).collect() };
    let test = pick(&split.test);
    let mut trainer = Trainer::new(config, mode, pick(&split.train), pick(&split.valid), seed, init)?;
    let mut csv = Vec::new();
    let summary = trainer.run(&mut csv, out_dir)?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), &csv).map_err(|e| TrainError::Io(e.to_string()))?;
    }
    let test_mae = if test.is_empty() {
        None
    } else {
        let params = trainer.eval_params();
        Some(match trainer.target_norm {
            Some(norm) => target_mae(&trainer.model, params, &test, &trainer.config, norm)?,
            None => noise_mae(&trainer.model, params, &test, &trainer.config, seed)?,
        })
    };
    Ok(RunOutput {
        checkpoint: trainer.checkpoint(),
        summary,
        split,
        test_mae,
        metrics_csv: String::from_utf8(csv).expect("utf-8 metrics"),
    })
}
