//! Structure noising, denoising and Noisy Nodes losses, atom-type masking.

use denoise_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Point, Structure};
use crate::graph::MASK_TOKEN;
use crate::model::BlockOutput;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid loss setting: {0}")]
    Invalid(String),
    #[error("paired structures differ: {0}")]
    PairMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub mean_center: bool,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ObjectiveError::Invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub position_coeff: f64,
    pub target_coeff: f64,
    pub atom_type_coeff: f64,
    pub atom_mask_prob: f64,
}

impl LossWeights {
    /// Unlabelled pre-training: denoising plus masked atom-type recovery.
    pub fn pretrain() -> Self {
        Self {
            position_coeff: 1.0,
            target_coeff: 0.0,
            atom_type_coeff: 4.0,
            atom_mask_prob: 0.75,
        }
    }

    /// Supervised fine-tuning with a small auxiliary denoising term.
    pub fn finetune() -> Self {
        Self {
            position_coeff: 0.01,
            target_coeff: 1.0,
            atom_type_coeff: 0.0,
            atom_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let coeffs = [self.position_coeff, self.target_coeff, self.atom_type_coeff];
        if coeffs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(ObjectiveError::Invalid("loss coefficients must be finite and >= 0".into()));
        }
        if coeffs.iter().all(|c| *c == 0.0) {
            return Err(ObjectiveError::Invalid("at least one loss coefficient must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.atom_mask_prob) {
            return Err(ObjectiveError::Invalid(format!(
                "atom_mask_prob must lie in [0, 1], got {}",
                self.atom_mask_prob
            )));
        }
        Ok(())
    }
}

fn normal3(rng: &mut impl Rng) -> Point {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

/// Subtracts the per-axis mean over rows.
pub fn mean_center(v: &mut [Point]) {
    let c = crate::data::centroid(v);
    for p in v.iter_mut() {
        for k in 0..3 {
            p[k] -= c[k];
        }
    }
}

/// `p~ = p + sigma eps`; returns the noisy structure and `eps` (mean-centered
/// when requested, in which case the positions use the centered noise too).
pub fn corrupt_with(
    s: &Structure,
    sigma: f64,
    center: bool,
    rng: &mut impl Rng,
) -> Result<(Structure, Vec<Point>), ObjectiveError> {
    let mut eps: Vec<Point> = (0..s.len()).map(|_| normal3(rng)).collect();
    if center {
        mean_center(&mut eps);
    }
    if sigma == 0.0 {
        return Ok((s.clone(), vec![[0.0; 3]; s.len()]));
    }
    let noisy: Vec<Point> = s
        .positions()
        .iter()
        .zip(&eps)
        .map(|(p, e)| [p[0] + sigma * e[0], p[1] + sigma * e[1], p[2] + sigma * e[2]])
        .collect();
    let mut out = s.with_positions(noisy)?;
    for (k, v) in s.labels() {
        out.set_label(k.clone(), *v);
    }
    Ok((out, eps))
}

/// [`corrupt_with`] drawing from a stream seeded by `spec.seed`.
pub fn corrupt(s: &Structure, spec: &NoiseSpec) -> Result<(Structure, Vec<Point>), ObjectiveError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corrupt_with(s, spec.sigma, spec.mean_center, &mut rng)
}

/// Input positions `(1-u) p_init + u p_relaxed + sigma eps` and the target
/// displacement `p_relaxed - input`.
pub fn interpolate_corrupt_at(
    initial: &Structure,
    relaxed: &Structure,
    u: f64,
    sigma: f64,
    eps: &[Point],
) -> Result<(Structure, Vec<Point>), ObjectiveError> {
    if initial.atomic_numbers() != relaxed.atomic_numbers() {
        return Err(ObjectiveError::PairMismatch("atomic numbers differ".into()));
    }
    if eps.len() != initial.len() {
        return Err(ObjectiveError::PairMismatch(format!(
            "{} noise rows for {} atoms",
            eps.len(),
            initial.len()
        )));
    }
    let input: Vec<Point> = initial
        .positions()
        .iter()
        .zip(relaxed.positions())
        .zip(eps)
        .map(|((a, b), e)| std::array::from_fn(|k| (1.0 - u) * a[k] + u * b[k] + sigma * e[k]))
        .collect();
    let target = relaxed
        .positions()
        .iter()
        .zip(&input)
        .map(|(b, x)| std::array::from_fn(|k| b[k] - x[k]))
        .collect();
    Ok((relaxed.with_positions(input)?, target))
}

/// [`interpolate_corrupt_at`] with `u ~ U[0, 1]` and standard normal noise.
pub fn interpolate_corrupt(
    initial: &Structure,
    relaxed: &Structure,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Structure, Vec<Point>), ObjectiveError> {
    let u: f64 = rng.random();
    let eps: Vec<Point> = (0..initial.len()).map(|_| normal3(rng)).collect();
    interpolate_corrupt_at(initial, relaxed, u, sigma, &eps)
}

/// Embedding rows after masking: each atom is replaced by the mask token
/// with probability `prob`. Returns the rows and the masked atom indices.
pub fn mask_types(atomic_numbers: &[u8], prob: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut types = Vec::with_capacity(atomic_numbers.len());
    let mut masked = Vec::new();
    for (i, &z) in atomic_numbers.iter().enumerate() {
        if prob > 0.0 && rng.random::<f64>() < prob {
            types.push(MASK_TOKEN);
            masked.push(i);
        } else {
            types.push(z as usize - 1);
        }
    }
    (types, masked)
}

/// Squared error summed over coordinates, averaged over the atoms of each
/// structure, then over structures.
pub fn denoising_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    graph_id: &[usize],
    n_graphs: usize,
) -> Result<Var, ObjectiveError> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let per_atom = tape.row_sum(sq)?;
    let per_graph = tape.segment_mean(per_atom, graph_id.to_vec(), n_graphs)?;
    Ok(tape.mean(per_graph))
}

/// Mean squared error between `G x 1` predictions and `G` targets.
pub fn target_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var, ObjectiveError> {
    let t = tape.constant(Tensor::new(vec![target.len(), 1], target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean cross-entropy of the logits at `masked` rows against `true_types`
/// (embedding rows, i.e. atomic number minus one). Zero if nothing is masked.
pub fn atom_type_loss(
    tape: &mut Tape,
    logits: Var,
    masked: &[usize],
    true_types: &[usize],
) -> Result<Var, ObjectiveError> {
    if masked.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows = tape.gather_rows(logits, masked.to_vec())?;
    let logp = tape.log_softmax(rows)?;
    let picked = tape.pick(logp, true_types.to_vec())?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Everything a batch contributes to the loss besides model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    /// `|S| x 3` noise (or displacement) targets.
    pub noise: Tensor,
    pub graph_id: Vec<usize>,
    pub n_graphs: usize,
    /// Per-graph supervised targets, if the batch is labelled.
    pub graph: Option<Vec<f64>>,
    pub masked: Vec<usize>,
    /// True embedding rows of the masked atoms.
    pub masked_types: Vec<usize>,
}

/// Weighted loss and its unweighted parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub position: Var,
    pub atom_type: Var,
    pub target: Var,
}

/// `target_coeff * MSE(graph) + position_coeff * denoising +
/// atom_type_coeff * CE(masked types)`. Terms with a zero coefficient are
/// not evaluated.
pub fn noisy_nodes_loss(
    tape: &mut Tape,
    out: &BlockOutput,
    targets: &LossTargets,
    w: &LossWeights,
) -> Result<LossTerms, ObjectiveError> {
    let zero = tape.constant(Tensor::scalar(0.0));
    let position = if w.position_coeff > 0.0 {
        let t = tape.constant(targets.noise.clone());
        denoising_loss(tape, out.noise, t, &targets.graph_id, targets.n_graphs)?
    } else {
        zero
    };
    let atom_type = if w.atom_type_coeff > 0.0 {
        atom_type_loss(tape, out.type_logits, &targets.masked, &targets.masked_types)?
    } else {
        zero
    };
    let target = match (&targets.graph, w.target_coeff > 0.0) {
        (Some(y), true) => target_loss(tape, out.graph, y)?,
        (None, true) => {
            return Err(ObjectiveError::Invalid("target_coeff > 0 but the batch has no labels".into()));
        }
        _ => zero,
    };
    let a = tape.scale(position, w.position_coeff);
    let b = tape.scale(atom_type, w.atom_type_coeff);
    let c = tape.scale(target, w.target_coeff);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms {
        total,
        position,
        atom_type,
        target,
    })
}

/// Averages [`noisy_nodes_loss`] over the per-block outputs.
pub fn block_averaged_loss(
    tape: &mut Tape,
    outputs: &[BlockOutput],
    targets: &LossTargets,
    w: &LossWeights,
) -> Result<LossTerms, ObjectiveError> {
    let terms = outputs
        .iter()
        .map(|o| noisy_nodes_loss(tape, o, targets, w))
        .collect::<Result<Vec<_>, _>>()?;
    let inv = 1.0 / terms.len().max(1) as f64;
    let mut avg = |pick: fn(&LossTerms) -> Var| -> Result<Var, ObjectiveError> {
        let mut acc = pick(&terms[0]);
        for t in &terms[1..] {
            acc = tape.add(acc, pick(t))?;
        }
        Ok(tape.scale(acc, inv))
    };
    Ok(LossTerms {
        total: avg(|t| t.total)?,
        position: avg(|t| t.position)?,
        atom_type: avg(|t| t.atom_type)?,
        target: avg(|t| t.target)?,
    })
}
