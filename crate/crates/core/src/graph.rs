//! Radius graphs, distance featurization and atom embeddings.

use std::collections::HashMap;
use std::f64::consts::PI;

use denoise_tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::data::{Point, Structure};

/// Number of element rows in an embedding table.
pub const N_ELEMENTS: usize = 118;
/// Row index of the mask token, placed after the element rows.
pub const MASK_TOKEN: usize = N_ELEMENTS;
/// Rows of an embedding table: 118 elements plus the mask token.
pub const EMBEDDING_ROWS: usize = N_ELEMENTS + 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid graph parameter: {0}")]
    InvalidParameter(String),
    #[error("bessel basis needs a positive distance, got {0}")]
    NonPositiveDistance(f64),
    #[error("atomic number {0} outside 1..=118")]
    UnknownElement(u8),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerKind {
    Bessel,
    Gaussian,
}

/// Radial basis on `[0, r_cut]`. `offset` is `r_min` for the Bessel basis and
/// the first center `mu` for the Gaussian basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub kind: FeaturizerKind,
    pub n_basis: usize,
    pub r_cut: f64,
    pub offset: f64,
    pub sigma: f64,
}

impl FeaturizerSpec {
    /// Bessel basis with `r_min = 0`, `sigma = 1`.
    pub fn bessel(n_basis: usize, r_cut: f64) -> Self {
        Self {
            kind: FeaturizerKind::Bessel,
            n_basis,
            r_cut,
            offset: 0.0,
            sigma: 1.0,
        }
    }

    /// Gaussian basis with `mu = 0`, `sigma = 0.5`.
    pub fn gaussian(n_basis: usize, r_cut: f64) -> Self {
        Self {
            kind: FeaturizerKind::Gaussian,
            n_basis,
            r_cut,
            offset: 0.0,
            sigma: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.n_basis == 0 {
            return Err(GraphError::InvalidParameter("n_basis must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(GraphError::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.r_cut > 0.0 && self.r_cut.is_finite()) {
            return Err(GraphError::InvalidParameter(format!("r_cut must be positive, got {}", self.r_cut)));
        }
        if !self.offset.is_finite() {
            return Err(GraphError::InvalidParameter("basis offset must be finite".into()));
        }
        Ok(())
    }

    /// Centers of the Gaussian basis, evenly spaced on `[offset, r_cut]`.
    pub fn gaussian_centers(&self) -> Vec<f64> {
        if self.n_basis == 1 {
            return vec![self.offset];
        }
        let step = (self.r_cut - self.offset) / (self.n_basis - 1) as f64;
        (0..self.n_basis).map(|k| self.offset + step * k as f64).collect()
    }
}

/// Expands a distance into `spec.n_basis` radial features.
///
/// Bessel: `sqrt(2/r_cut) sin(k pi (d - r_min) / r_cut) / d`, `k = 1..n`.
/// Gaussian: `exp(-(d - mu_k)^2 / (2 sigma^2))`.
pub fn featurize_distance(d: f64, spec: &FeaturizerSpec) -> Result<Vec<f64>, GraphError> {
    spec.validate()?;
    match spec.kind {
        FeaturizerKind::Bessel => {
            if !(d > 0.0) {
                return Err(GraphError::NonPositiveDistance(d));
            }
            let pref = (2.0 / spec.r_cut).sqrt();
            Ok((1..=spec.n_basis)
                .map(|k| pref * (k as f64 * PI * (d - spec.offset) / spec.r_cut).sin() / d)
                .collect())
        }
        FeaturizerKind::Gaussian => {
            let two_s2 = 2.0 * spec.sigma * spec.sigma;
            Ok(spec
                .gaussian_centers()
                .into_iter()
                .map(|mu| (-(d - mu) * (d - mu) / two_s2).exp())
                .collect())
        }
    }
}

/// Directed radius graph over one or more structures.
///
/// Edge `k` runs from `senders[k]` to `receivers[k]`; its displacement is
/// `p[receiver] - p[sender]`. Vertex features are looked up from
/// `atomic_numbers` by the model's embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusGraph {
    senders: Vec<usize>,
    receivers: Vec<usize>,
    edge_feat: Tensor,
    displacement: Vec<Point>,
    atomic_numbers: Vec<u8>,
    graph_id: Vec<usize>,
    n_graphs: usize,
    r_cut: f64,
}

impl RadiusGraph {
    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// `E x n_basis` radial features.
    pub fn edge_feat(&self) -> &Tensor {
        &self.edge_feat
    }

    pub fn displacement(&self) -> &[Point] {
        &self.displacement
    }

    pub fn atomic_numbers(&self) -> &[u8] {
        &self.atomic_numbers
    }

    pub fn graph_id(&self) -> &[usize] {
        &self.graph_id
    }

    pub fn n_graphs(&self) -> usize {
        self.n_graphs
    }

    pub fn n_vertices(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    /// Displacements divided by `r_cut`, as an `E x 3` tensor.
    pub fn scaled_displacement(&self) -> Tensor {
        let inv = 1.0 / self.r_cut;
        let data = self
            .displacement
            .iter()
            .flat_map(|d| d.map(|c| c * inv))
            .collect();
        Tensor::new(vec![self.displacement.len(), 3], data).expect("E x 3")
    }

    /// Embedding-table row of every vertex.
    pub fn type_indices(&self) -> Vec<usize> {
        self.atomic_numbers.iter().map(|&z| z as usize - 1).collect()
    }

    /// Disjoint union of graphs, with vertex and edge indices offset and
    /// `graph_id` numbering the parts in order.
    pub fn batch(graphs: &[RadiusGraph]) -> Result<RadiusGraph, GraphError> {
        let first = graphs
            .first()
            .ok_or_else(|| GraphError::InvalidParameter("cannot batch zero graphs".into()))?;
        let width = first.edge_feat.cols();
        let mut out = RadiusGraph {
            senders: Vec::new(),
            receivers: Vec::new(),
            edge_feat: Tensor::zeros(vec![0, width]),
            displacement: Vec::new(),
            atomic_numbers: Vec::new(),
            graph_id: Vec::new(),
            n_graphs: 0,
            r_cut: first.r_cut,
        };
        let mut feat = Vec::new();
        for g in graphs {
            if g.edge_feat.cols() != width || g.r_cut != first.r_cut {
                return Err(GraphError::InvalidParameter(
                    "graphs in a batch must share featurization and r_cut".into(),
                ));
            }
            let offset = out.atomic_numbers.len();
            out.senders.extend(g.senders.iter().map(|s| s + offset));
            out.receivers.extend(g.receivers.iter().map(|r| r + offset));
            feat.extend_from_slice(g.edge_feat.data());
            out.displacement.extend_from_slice(&g.displacement);
            out.atomic_numbers.extend_from_slice(&g.atomic_numbers);
            out.graph_id.extend(g.graph_id.iter().map(|i| i + out.n_graphs));
            out.n_graphs += g.n_graphs;
        }
        out.edge_feat = Tensor::new(vec![out.senders.len(), width], feat)?;
        Ok(out)
    }
}

fn cell_of(p: &Point, size: f64) -> [i64; 3] {
    p.map(|c| (c / size).floor() as i64)
}

/// Candidate `(distance, sender)` lists per receiver, from a cell list with
/// cell edge `r_cut`.
fn neighbours(positions: &[Point], r_cut: f64) -> Vec<Vec<(f64, usize)>> {
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(cell_of(p, r_cut)).or_default().push(i);
    }
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = cell_of(p, r_cut);
            let mut found = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in members {
                            if j == i {
                                continue;
                            }
                            let d = crate::data::distance(p, &positions[j]);
                            if d < r_cut {
                                found.push((d, j));
                            }
                        }
                    }
                }
            }
            found
        })
        .collect()
}

/// Connects every ordered pair closer than `r_cut`. A vertex receiving more
/// than `max_edges_per_vertex` edges keeps the nearest senders, ties going to
/// the lower sender index. Edges are ordered by receiver, then sender.
pub fn build_graph(
    s: &Structure,
    featurizer: &FeaturizerSpec,
    max_edges_per_vertex: usize,
) -> Result<RadiusGraph, GraphError> {
    featurizer.validate()?;
    if max_edges_per_vertex == 0 {
        return Err(GraphError::InvalidParameter("max_edges_per_vertex must be at least 1".into()));
    }
    let r_cut = featurizer.r_cut;
    let pos = s.positions();
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    let mut displacement = Vec::new();
    let mut feat = Vec::new();
    for (i, mut cand) in neighbours(pos, r_cut).into_iter().enumerate() {
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(max_edges_per_vertex);
        cand.sort_by_key(|&(_, j)| j);
        for (d, j) in cand {
            senders.push(j);
            receivers.push(i);
            displacement.push([pos[i][0] - pos[j][0], pos[i][1] - pos[j][1], pos[i][2] - pos[j][2]]);
            feat.extend(featurize_distance(d, featurizer)?);
        }
    }
    let n_edges = senders.len();
    Ok(RadiusGraph {
        senders,
        receivers,
        edge_feat: Tensor::new(vec![n_edges, featurizer.n_basis], feat)?,
        displacement,
        atomic_numbers: s.atomic_numbers().to_vec(),
        graph_id: vec![0; s.len()],
        n_graphs: 1,
        r_cut,
    })
}

/// Looks up one embedding row per atom. The table needs at least 118 rows.
pub fn embed_atoms(tape: &mut Tape, table: Var, atomic_numbers: &[u8]) -> Result<Var, GraphError> {
    if let Some(&z) = atomic_numbers.iter().find(|&&z| !(1..=118).contains(&z)) {
        return Err(GraphError::UnknownElement(z));
    }
    let idx: Vec<usize> = atomic_numbers.iter().map(|&z| z as usize - 1).collect();
    Ok(tape.gather_rows(table, idx)?)
}
