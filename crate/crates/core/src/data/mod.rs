//! Molecular structures, extended-XYZ ingestion, dataset splits and the
//! bundled synthetic dataset.
//!
//! Coordinates are treated as dimensionless: the toolkit never converts
//! units, so cutoffs and noise scales must be given in the dataset's units.

mod elements;
mod synthetic;
mod xyz;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use elements::{atomic_number, element_symbol, ELEMENTS};
pub use synthetic::{
    make_relaxation_pairs, make_synthetic_dataset, Surrogate, SYNTHETIC_ELEMENTS,
};
pub use xyz::{parse_xyz, write_xyz};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// A set of atoms: atomic numbers, positions, optional scalar labels and an
/// optional second frame (the relaxed structure for interpolation training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    atomic_numbers: Vec<u8>,
    positions: Vec<Point>,
    labels: BTreeMap<String, f64>,
    pair_positions: Option<Vec<Point>>,
}

impl Structure {
    pub fn new(atomic_numbers: Vec<u8>, positions: Vec<Point>) -> Result<Self, DataError> {
        Self::with_details(atomic_numbers, positions, BTreeMap::new(), None)
    }

    pub fn with_details(
        atomic_numbers: Vec<u8>,
        positions: Vec<Point>,
        labels: BTreeMap<String, f64>,
        pair_positions: Option<Vec<Point>>,
    ) -> Result<Self, DataError> {
        if atomic_numbers.is_empty() {
            return Err(DataError::InvalidStructure("no atoms".into()));
        }
        if atomic_numbers.len() != positions.len() {
            return Err(DataError::InvalidStructure(format!(
                "{} atomic numbers but {} positions",
                atomic_numbers.len(),
                positions.len()
            )));
        }
        if let Some(&z) = atomic_numbers.iter().find(|&&z| !(1..=118).contains(&z)) {
            return Err(DataError::InvalidStructure(format!(
                "atomic number {z} outside [1, 118]"
            )));
        }
        check_frame(&positions, "positions")?;
        if let Some(pair) = &pair_positions {
            if pair.len() != positions.len() {
                return Err(DataError::InvalidStructure(format!(
                    "paired frame has {} atoms, expected {}",
                    pair.len(),
                    positions.len()
                )));
            }
            check_frame(pair, "paired positions")?;
        }
        Ok(Self {
            atomic_numbers,
            positions,
            labels,
            pair_positions,
        })
    }

    pub fn atomic_numbers(&self) -> &[u8] {
        &self.atomic_numbers
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn labels(&self) -> &BTreeMap<String, f64> {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<f64> {
        self.labels.get(name).copied()
    }

    pub fn pair_positions(&self) -> Option<&[Point]> {
        self.pair_positions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn set_label(&mut self, name: impl Into<String>, value: f64) {
        self.labels.insert(name.into(), value);
    }

    /// Same atoms and labels at new positions. The paired frame is dropped.
    pub fn with_positions(&self, positions: Vec<Point>) -> Result<Self, DataError> {
        Self::with_details(
            self.atomic_numbers.clone(),
            positions,
            self.labels.clone(),
            None,
        )
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.positions)
    }

    pub fn translated(&self, t: Point) -> Self {
        let shift = |ps: &[Point]| -> Vec<Point> {
            ps.iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect()
        };
        Self {
            atomic_numbers: self.atomic_numbers.clone(),
            positions: shift(&self.positions),
            labels: self.labels.clone(),
            pair_positions: self.pair_positions.as_deref().map(shift),
        }
    }

    /// Atom `i` of the result is atom `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            atomic_numbers: perm.iter().map(|&i| self.atomic_numbers[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            labels: self.labels.clone(),
            pair_positions: self
                .pair_positions
                .as_ref()
                .map(|p| perm.iter().map(|&i| p[i]).collect()),
        }
    }

    pub fn elements(&self) -> BTreeSet<u8> {
        self.atomic_numbers.iter().copied().collect()
    }
}

fn check_frame(positions: &[Point], what: &str) -> Result<(), DataError> {
    if positions.iter().flatten().any(|c| !c.is_finite()) {
        return Err(DataError::InvalidStructure(format!(
            "non-finite coordinate in {what}"
        )));
    }
    for i in 0..positions.len() {
        for j in 0..i {
            if positions[i] == positions[j] {
                return Err(DataError::InvalidStructure(format!(
                    "atoms {j} and {i} share coordinates in {what}"
                )));
            }
        }
    }
    Ok(())
}

pub fn centroid(positions: &[Point]) -> Point {
    let n = positions.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn dataset_elements(dataset: &[Structure]) -> BTreeSet<u8> {
    dataset.iter().flat_map(|s| s.atomic_numbers.iter().copied()).collect()
}

/// Fraction of the downstream dataset's elements that also occur upstream.
pub fn element_coverage(upstream: &[Structure], downstream: &[Structure]) -> Result<f64, DataError> {
    if upstream.is_empty() {
        return Err(DataError::EmptyDataset("upstream"));
    }
    let down = dataset_elements(downstream);
    if down.is_empty() {
        return Err(DataError::EmptyDataset("downstream"));
    }
    let up = dataset_elements(upstream);
    let shared = down.intersection(&up).count();
    Ok(shared as f64 / down.len() as f64)
}

/// Atom counts per atomic number.
pub fn element_counts(dataset: &[Structure]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for z in dataset.iter().flat_map(|s| s.atomic_numbers.iter()) {
        *counts.entry(*z).or_insert(0) += 1;
    }
    counts
}

/// `element,count` CSV for a dataset, with an optional coverage summary line
/// against an upstream dataset.
pub fn stats_csv(dataset: &[Structure], upstream: Option<&[Structure]>) -> Result<String, DataError> {
    let mut out = String::from("element,count\n");
    for (z, count) in element_counts(dataset) {
        let sym = element_symbol(z).unwrap_or("?");
        out.push_str(&format!("{sym},{count}\n"));
    }
    if let Some(up) = upstream {
        let cov = element_coverage(up, dataset)?;
        let down = dataset_elements(dataset);
        let shared = down.intersection(&dataset_elements(up)).count();
        out.push_str(&format!(
            "# coverage={cov} ({shared}/{} downstream elements present upstream)\n",
            down.len()
        ));
    }
    Ok(out)
}

/// Disjoint train/valid/test index lists that cover `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl DatasetSplit {
    /// Shuffles `0..n` with `seed` and cuts it by `fractions` (train, valid,
    /// test). Rounding leftovers go to the training set.
    pub fn new(n: usize, fractions: [f64; 3], seed: u64) -> Result<Self, DataError> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::InvalidSplit(format!("fractions {fractions:?}")));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = (fractions[1] * n as f64).round() as usize;
        let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_valid);
        let n_train = n - n_valid - n_test;
        Ok(Self {
            train: order[..n_train].to_vec(),
            valid: order[n_train..n_train + n_valid].to_vec(),
            test: order[n_train + n_valid..].to_vec(),
            seed,
            fractions,
        })
    }

    pub fn select<'a>(&self, dataset: &'a [Structure], part: &[usize]) -> Vec<&'a Structure> {
        part.iter().map(|&i| &dataset[i]).collect()
    }
}
