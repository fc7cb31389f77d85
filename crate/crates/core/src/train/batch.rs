use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCaps {
    pub max_vertices: usize,
    pub max_edges: usize,
    pub max_graphs: usize,
}

impl BatchCaps {
    /// Fails if a single graph of this size breaks a cap.
    pub fn check_single(&self, vertices: usize, edges: usize) -> Result<(), TrainError> {
        let over = |cap: &'static str, value: usize, limit: usize| TrainError::GraphTooLarge { cap, value, limit };
        if vertices > self.max_vertices {
            return Err(over("max_vertices_in_batch", vertices, self.max_vertices));
        }
        if edges > self.max_edges {
            return Err(over("max_edges_in_batch", edges, self.max_edges));
        }
        if self.max_graphs == 0 {
            return Err(over("max_graphs_in_batch", 1, 0));
        }
        Ok(())
    }

    /// Whether a graph fits next to a batch holding `used = (graphs,
    /// vertices, edges)`.
    pub fn admits(&self, used: (usize, usize, usize), vertices: usize, edges: usize) -> bool {
        used.0 < self.max_graphs && used.1 + vertices <= self.max_vertices && used.2 + edges <= self.max_edges
    }
}

/// Greedy batching in stream order over `(vertices, edges)` sizes. A graph
/// that would breach any cap closes the current batch. Returns index groups.
pub fn dynamic_batch(sizes: &[(usize, usize)], caps: &BatchCaps) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = (0, 0, 0);
    for (i, &(v, e)) in sizes.iter().enumerate() {
        caps.check_single(v, e)?;
        if !caps.admits(used, v, e) {
            batches.push(std::mem::take(&mut current));
            used = (0, 0, 0);
        }
        current.push(i);
        used = (used.0 + 1, used.1 + v, used.2 + e);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}
