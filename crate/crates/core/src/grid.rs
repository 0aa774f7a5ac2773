//! Common evaluation grid, trapezoid quadrature weights and the maps from
//! subject-specific observation times onto the common grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance under which two time stamps are treated as the same
/// grid point when merging subject grids.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Ordered evaluation grid with cached quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let weights = build_weights(&points)?;
        Ok(Grid { points, weights })
    }

    /// `m` equally spaced points on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {m}")));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let points = (0..m)
            .map(|l| if l == m - 1 { hi } else { lo + step * l as f64 })
            .collect();
        Grid::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Discrete L² inner product `Σ w_l f_l g_l`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        inner_product(f, g, self)
    }

    /// Same as [`Grid::inner`] without the length check; callers guarantee `m`.
    pub(crate) fn inner_unchecked(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * (a * b))
            .sum()
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner_unchecked(f, f).max(0.0).sqrt()
    }
}

/// Subject-to-common-grid gather: `indices[j]` is the common-grid position of
/// the subject's `j`-th observation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectIndexMap {
    indices: Vec<usize>,
}

impl SubjectIndexMap {
    pub fn new(indices: Vec<usize>, grid_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidGrid("subject with no observations".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(
                "subject indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= grid_len {
                return Err(Error::InvalidGrid(format!(
                    "index {last} out of range for grid of size {grid_len}"
                )));
            }
        }
        Ok(SubjectIndexMap { indices })
    }

    pub fn identity(m: usize) -> Self {
        SubjectIndexMap {
            indices: (0..m).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Values of a common-grid function at the subject's observation times.
    pub fn gather(&self, f: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&l| f[l]).collect()
    }

    /// Adds `values[j]` into `target[indices[j]]`.
    pub fn scatter_add(&self, values: &[f64], target: &mut [f64]) {
        for (&l, v) in self.indices.iter().zip(values) {
            target[l] += v;
        }
    }
}

/// Trapezoid-style weights: half the distance to each neighbour.
pub fn build_weights(points: &[f64]) -> Result<Vec<f64>> {
    let m = points.len();
    if m < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 points, got {m}")));
    }
    if points.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("non-finite grid point".into()));
    }
    if let Some(l) = points.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!(
            "points not strictly increasing at position {}",
            l + 1
        )));
    }
    let mut w = Vec::with_capacity(m);
    w.push((points[1] - points[0]) / 2.0);
    for l in 1..m - 1 {
        w.push((points[l + 1] - points[l - 1]) / 2.0);
    }
    w.push((points[m - 1] - points[m - 2]) / 2.0);
    Ok(w)
}

pub fn inner_product(f: &[f64], g: &[f64], grid: &Grid) -> Result<f64> {
    let m = grid.len();
    if f.len() != m || g.len() != m {
        return Err(Error::Dimension(format!(
            "inner product of lengths {} and {} on a grid of size {m}",
            f.len(),
            g.len()
        )));
    }
    Ok(grid.inner_unchecked(f, g))
}

/// Sorted union of all subject time stamps plus each subject's index map.
pub fn merge_grids(subjects: &[Vec<f64>]) -> Result<(Grid, Vec<SubjectIndexMap>)> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, s) in subjects.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::InvalidGrid(format!("subject {i} has no observations")));
        }
        if s.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid(format!("subject {i} has a non-finite time")));
        }
        if s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "subject {i} times are not strictly increasing"
            )));
        }
    }

    let mut all: Vec<f64> = subjects.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = Vec::with_capacity(all.len());
    for t in all {
        match points.last() {
            Some(&last) if (t - last).abs() <= MERGE_TOLERANCE => {}
            _ => points.push(t),
        }
    }
    if points.len() < 2 {
        return Err(Error::InvalidGrid(
            "merged grid has fewer than 2 distinct points".into(),
        ));
    }

    let locate = |t: f64| -> usize {
        let pos = points.partition_point(|&p| p < t - MERGE_TOLERANCE);
        debug_assert!(pos < points.len() && (points[pos] - t).abs() <= MERGE_TOLERANCE);
        pos
    };
    let maps = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let idx: Vec<usize> = s.iter().map(|&t| locate(t)).collect();
            SubjectIndexMap::new(idx, points.len()).map_err(|_| {
                Error::InvalidGrid(format!(
                    "subject {i} has two times within {MERGE_TOLERANCE} of each other"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((Grid::new(points)?, maps))
}
