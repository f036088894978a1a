use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::par;

/// Radius neighborhoods in compressed row form. Each query's list is sorted
/// by point index and includes the query itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborLists {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborLists {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for l in lists {
            indices.extend(l);
            offsets.push(indices.len());
        }
        NeighborLists { offsets, indices }
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.indices[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn total(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.num_queries()).map(|q| self.neighbors(q))
    }
}

type Cell = (i64, i64, i64);

fn cell_of(p: &[f64; 3], size: f64) -> Cell {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact radius search (boundary inclusive) on a voxel grid with cells of
/// side `radius`.
pub fn radius_neighbors(points: &[[f64; 3]], radius: f64) -> Result<NeighborLists> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::argument(format!("radius {radius} must be positive")));
    }
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p, radius)).or_default().push(i);
    }
    let r2 = radius * radius;
    let lists = par::map_range(points.len(), |q| {
        let p = &points[q];
        let (cx, cy, cz) = cell_of(p, radius);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        found.extend(
                            cell.iter()
                                .copied()
                                .filter(|&i| squared_distance(p, &points[i]) <= r2),
                        );
                    }
                }
            }
        }
        found.sort_unstable();
        found
    });
    Ok(NeighborLists::from_lists(lists))
}
