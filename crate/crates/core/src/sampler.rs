//! Residual-based multi-peak sampling over the initial-condition grid.
//!
//! The per-node training residual is normalized into a discrete PDF over
//! the grid, local maxima are detected on the Moore neighborhood (with
//! one-sided comparisons at the domain boundary, so boundary nodes are
//! eligible peaks), and new sample nodes are chosen near peaks:
//!
//! * variant I takes the `m` highest-PDF unsampled nodes inside a
//!   Chebyshev ball of radius `r` around each of the `n` strongest peaks;
//! * variant II takes the single highest-PDF unsampled node near every
//!   detected peak and needs no count hyperparameters.
//!
//! All tie-breaks go to the lowest node index, so selections are
//! reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::{Error, Result};

/// Uniform lattice over a box: node `i` along dimension `d` sits at
/// `low_d + i (high_d - low_d) / (shape_d - 1)`, endpoints included.
/// Flat node indices are row-major (last dimension fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
}

impl SampleGrid {
    pub fn new(bounds: Vec<[f64; 2]>, shape: Vec<usize>) -> Result<Self> {
        if bounds.len() != shape.len() || bounds.is_empty() {
            return Err(Error::Config("grid bounds and shape must have equal nonzero length".into()));
        }
        for (b, &s) in bounds.iter().zip(shape.iter()) {
            if s < 2 {
                return Err(Error::Config("grid needs at least 2 nodes per dimension".into()));
            }
            if !(b[0] < b[1]) {
                return Err(Error::Config(format!("bad bounds [{}, {}]", b[0], b[1])));
            }
        }
        Ok(Self { bounds, shape })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn total(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.bounds[d][1] - self.bounds[d][0]) / (self.shape[d] - 1) as f64
    }

    /// Volume of one lattice cell (product of spacings).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.spacing(d)).product()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = rem % self.shape[d];
            rem /= self.shape[d];
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for d in 0..self.dim() {
            flat = flat * self.shape[d] + multi[d];
        }
        flat
    }

    /// Coordinates of a node.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.bounds[d][0] + i as f64 * self.spacing(d))
            .collect()
    }

    /// All node coordinates, enumerated in flat-index order.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.total()).map(|i| self.coords(i)).collect()
    }

    /// Flat indices within Chebyshev distance `r` (in grid cells) of
    /// `center`, clipped to the domain, in ascending order.
    pub fn chebyshev_ball(&self, center: usize, r: usize) -> Vec<usize> {
        let c = self.multi_index(center);
        let dim = self.dim();
        let lo: Vec<usize> = (0..dim).map(|d| c[d].saturating_sub(r)).collect();
        let hi: Vec<usize> = (0..dim).map(|d| (c[d] + r).min(self.shape[d] - 1)).collect();
        let mut out = Vec::new();
        let mut cursor = lo.clone();
        loop {
            out.push(self.flat_index(&cursor));
            let mut d = dim;
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                if cursor[d] < hi[d] {
                    cursor[d] += 1;
                    for later in d + 1..dim {
                        cursor[later] = lo[later];
                    }
                    break;
                }
            }
        }
    }

    /// Moore neighborhood: every in-bounds node within Chebyshev distance 1,
    /// excluding the center.
    pub fn moore_neighbors(&self, center: usize) -> Vec<usize> {
        self.chebyshev_ball(center, 1)
            .into_iter()
            .filter(|&i| i != center)
            .collect()
    }
}

/// Scalar residual and its normalized PDF over the grid.
/// `sum(pdf) * cell_volume == 1`; with smoothing off, `pdf` is exactly
/// proportional to `epsilon`.
#[derive(Debug, Clone)]
pub struct ResidualField {
    pub grid: SampleGrid,
    pub epsilon: Vec<f64>,
    pub pdf: Vec<f64>,
    pub smoothing_applied: bool,
    /// Set when every residual was zero and the PDF fell back to uniform.
    pub uniform_fallback: bool,
}

/// Indices sampled so far, with the per-epoch additions recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    indices: BTreeSet<usize>,
    pub history: Vec<Vec<usize>>,
}

impl SampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded uniform draw of `count` distinct nodes (epoch 0).
    pub fn random(grid: &SampleGrid, count: usize, seed: u64) -> Result<Self> {
        if count > grid.total() {
            return Err(Error::Config(format!(
                "cannot draw {count} distinct nodes from a {}-node grid",
                grid.total()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, grid.total(), count).into_vec();
        picked.sort_unstable();
        Ok(Self {
            indices: picked.iter().copied().collect(),
            history: vec![picked],
        })
    }

    pub fn from_indices(iter: impl IntoIterator<Item = usize>) -> Self {
        let indices: BTreeSet<usize> = iter.into_iter().collect();
        let initial: Vec<usize> = indices.iter().copied().collect();
        Self {
            indices,
            history: vec![initial],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.contains(&idx)
    }

    /// Ascending iteration over all sampled indices.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }
}

/// Sampling hyperparameters. Variant I uses all three counts; variant II
/// only the neighborhood radius `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbmsConfig {
    pub variant: RbmsVariant,
    /// Points taken per peak (variant I).
    pub m: usize,
    /// Number of peaks served (variant I).
    pub n: usize,
    /// Chebyshev neighborhood radius in grid cells.
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RbmsVariant {
    I,
    II,
}

impl Default for RbmsConfig {
    fn default() -> Self {
        Self {
            variant: RbmsVariant::II,
            m: 7,
            n: 2,
            r: 5,
        }
    }
}

impl RbmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 || self.r < 1 {
            return Err(Error::Config("RBMS m, n, r must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Normalize per-node residuals into a PDF over the grid. With `smooth`,
/// a separable Gaussian kernel of one grid cell standard deviation
/// (truncated at 4 cells, renormalized at the boundary) is applied before
/// normalizing; `epsilon` always keeps the raw values.
pub fn build_residual_field(grid: &SampleGrid, residuals: &[f64], smooth: bool) -> Result<ResidualField> {
    if residuals.len() != grid.total() {
        return Err(Error::Shape(format!(
            "{} residuals for a {}-node grid",
            residuals.len(),
            grid.total()
        )));
    }
    if residuals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("residuals must be finite and nonnegative".into()));
    }

    let cell = grid.cell_volume();
    let total: f64 = residuals.iter().sum();
    if total == 0.0 {
        let uniform = 1.0 / (grid.total() as f64 * cell);
        return Ok(ResidualField {
            grid: grid.clone(),
            epsilon: residuals.to_vec(),
            pdf: vec![uniform; grid.total()],
            smoothing_applied: false,
            uniform_fallback: true,
        });
    }

    let mut mass = residuals.to_vec();
    if smooth {
        for d in 0..grid.dim() {
            mass = blur_axis(grid, &mass, d);
        }
    }
    let mass_total: f64 = mass.iter().sum();
    let norm = 1.0 / (mass_total * cell);
    let pdf: Vec<f64> = mass.iter().map(|v| v * norm).collect();

    Ok(ResidualField {
        grid: grid.clone(),
        epsilon: residuals.to_vec(),
        pdf,
        smoothing_applied: smooth,
        uniform_fallback: false,
    })
}

/// One-dimensional Gaussian blur along axis `d` (sigma = 1 cell, radius 4),
/// kernel renormalized where it overhangs the boundary so constant fields
/// stay constant.
fn blur_axis(grid: &SampleGrid, values: &[f64], d: usize) -> Vec<f64> {
    const RADIUS: i64 = 4;
    let kernel: Vec<f64> = (-RADIUS..=RADIUS)
        .map(|k| (-(k * k) as f64 / 2.0).exp())
        .collect();
    let size = grid.shape[d] as i64;
    let mut out = vec![0.0; values.len()];
    for flat in 0..values.len() {
        let mut mi = grid.multi_index(flat);
        let center = mi[d] as i64;
        let mut acc = 0.0;
        let mut weight = 0.0;
        for (j, w) in kernel.iter().enumerate() {
            let pos = center + (j as i64 - RADIUS);
            if pos < 0 || pos >= size {
                continue;
            }
            mi[d] = pos as usize;
            acc += w * values[grid.flat_index(&mi)];
            weight += w;
        }
        out[flat] = acc / weight;
    }
    out
}

/// Discrete local maxima of the PDF: a node is a peak iff its value is
/// >= every Moore neighbor and > at least one. Boundary nodes compare
/// one-sided, so monotone fields peak at the boundary. Flat plateaus
/// contribute their lowest-index node; a constant field yields the global
/// argmax (lowest index). The result is ascending in node index and never
/// empty.
pub fn find_peaks(field: &ResidualField) -> Vec<usize> {
    let grid = &field.grid;
    let p = &field.pdf;
    let total = grid.total();

    let mut is_candidate = vec![false; total];
    let mut any = false;
    for i in 0..total {
        let mut ge_all = true;
        let mut gt_any = false;
        for nb in grid.moore_neighbors(i) {
            if p[nb] > p[i] {
                ge_all = false;
                break;
            }
            if p[i] > p[nb] {
                gt_any = true;
            }
        }
        if ge_all && gt_any {
            is_candidate[i] = true;
            any = true;
        }
    }

    if !any {
        let mut best = 0;
        for i in 1..total {
            if p[i] > p[best] {
                best = i;
            }
        }
        return vec![best];
    }

    // Collapse plateaus: flood the equal-value component around each
    // candidate. The component is a peak only if none of its members
    // borders strictly higher ground (otherwise it is a terrace), and it
    // is represented by its lowest node index.
    let mut visited = vec![false; total];
    let mut peaks = Vec::new();
    for i in 0..total {
        if !is_candidate[i] || visited[i] {
            continue;
        }
        let level = p[i];
        let mut stack = vec![i];
        visited[i] = true;
        let mut lowest = i;
        let mut is_max = true;
        while let Some(cur) = stack.pop() {
            lowest = lowest.min(cur);
            for nb in grid.moore_neighbors(cur) {
                if p[nb] > level {
                    is_max = false;
                } else if p[nb] == level && !visited[nb] {
                    visited[nb] = true;
                    stack.push(nb);
                }
            }
        }
        if is_max {
            peaks.push(lowest);
        }
    }
    peaks.sort_unstable();
    peaks
}

/// Peaks ordered for selection: descending PDF value, ties by ascending index.
fn ranked_peaks(field: &ResidualField) -> Vec<usize> {
    let mut peaks = find_peaks(field);
    peaks.sort_by(|&a, &b| {
        field.pdf[b]
            .partial_cmp(&field.pdf[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    peaks
}

/// Unsampled ball members ordered by descending PDF (ties ascending index).
fn available_by_pdf(field: &ResidualField, samples: &SampleSet, center: usize, r: usize) -> Vec<usize> {
    let mut avail: Vec<usize> = field
        .grid
        .chebyshev_ball(center, r)
        .into_iter()
        .filter(|&i| !samples.contains(i))
        .collect();
    avail.sort_by(|&a, &b| {
        field.pdf[b]
            .partial_cmp(&field.pdf[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    avail
}

/// Variant I: around each of the `n` strongest peaks, add the `m`
/// highest-PDF unsampled nodes within Chebyshev radius `r` (all of them
/// if fewer remain). Returns the grown sample set; if no node anywhere
/// was addable the region is saturated.
pub fn rbms_i_sample(field: &ResidualField, samples: &SampleSet, cfg: &RbmsConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let mut next = samples.clone();
    let mut added = Vec::new();
    for &peak in ranked_peaks(field).iter().take(cfg.n) {
        let take: Vec<usize> = available_by_pdf(field, &next, peak, cfg.r)
            .into_iter()
            .take(cfg.m)
            .collect();
        for &idx in &take {
            next.indices.insert(idx);
        }
        added.extend(take);
    }
    if added.is_empty() {
        return Err(Error::SaturatedRegion);
    }
    next.history.push(added);
    Ok(next)
}

/// Variant II: for every detected peak, add the single highest-PDF
/// unsampled node within Chebyshev radius `r` (hyperparameter-free with
/// the default radius 5). Peaks whose whole neighborhood is already
/// sampled are skipped; if that happens for every peak the region is
/// saturated.
pub fn rbms_ii_sample(field: &ResidualField, samples: &SampleSet, r: usize) -> Result<SampleSet> {
    let mut next = samples.clone();
    let mut added = Vec::new();
    for &peak in ranked_peaks(field).iter() {
        match available_by_pdf(field, &next, peak, r).first() {
            Some(&best) => {
                next.indices.insert(best);
                added.push(best);
            }
            None => {
                log::debug!("rbms-ii: neighborhood of peak node {peak} is fully sampled, skipping");
            }
        }
    }
    if added.is_empty() {
        return Err(Error::SaturatedRegion);
    }
    next.history.push(added);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid_1d(n: usize) -> SampleGrid {
        SampleGrid::new(vec![[0.0, 1.0]], vec![n]).unwrap()
    }

    fn grid_2d(nx: usize, ny: usize) -> SampleGrid {
        SampleGrid::new(vec![[0.0, 1.0], [0.0, 1.0]], vec![nx, ny]).unwrap()
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = grid_2d(5, 7);
        for flat in 0..g.total() {
            assert_eq!(g.flat_index(&g.multi_index(flat)), flat);
        }
        assert_eq!(g.total(), 35);
        assert_eq!(g.coords(0), vec![0.0, 0.0]);
        assert_eq!(g.coords(g.total() - 1), vec![1.0, 1.0]);
    }

    #[test]
    fn chebyshev_ball_matches_brute_force() {
        let g = grid_2d(9, 9);
        for center in [0, 40, 80, 13] {
            for r in [1usize, 3, 5] {
                let ball = g.chebyshev_ball(center, r);
                let c = g.multi_index(center);
                let brute: Vec<usize> = (0..g.total())
                    .filter(|&i| {
                        let mi = g.multi_index(i);
                        mi.iter()
                            .zip(c.iter())
                            .all(|(&a, &b)| a.abs_diff(b) <= r)
                    })
                    .collect();
                assert_eq!(ball, brute);
            }
        }
    }

    #[test]
    fn constant_residual_gives_uniform_pdf() {
        let g = grid_1d(11);
        for smooth in [false, true] {
            let f = build_residual_field(&g, &vec![3.0; 11], smooth).unwrap();
            let expect = 1.0 / (11.0 * g.cell_volume());
            for v in &f.pdf {
                assert_relative_eq!(*v, expect, max_relative = 1e-12);
            }
            assert!(!f.uniform_fallback);
        }
    }

    #[test]
    fn single_nonzero_node_is_a_point_mass() {
        let g = grid_1d(11);
        let mut eps = vec![0.0; 11];
        eps[4] = 2.5;
        let f = build_residual_field(&g, &eps, false).unwrap();
        for (i, v) in f.pdf.iter().enumerate() {
            if i == 4 {
                assert_relative_eq!(*v, 1.0 / g.cell_volume(), max_relative = 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn linear_residual_normalizes_by_hand() {
        // eps(x) = x on [0,1] with 11 nodes: pdf_i = x_i / (sum x_j * cell).
        let g = grid_1d(11);
        let eps: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let f = build_residual_field(&g, &eps, false).unwrap();
        let total: f64 = eps.iter().sum();
        for (i, v) in f.pdf.iter().enumerate() {
            assert_relative_eq!(*v, eps[i] / (total * 0.1), max_relative = 1e-12);
        }
        let mass: f64 = f.pdf.iter().map(|p| p * g.cell_volume()).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_residuals_fall_back_to_uniform() {
        let g = grid_1d(5);
        let f = build_residual_field(&g, &vec![0.0; 5], false).unwrap();
        assert!(f.uniform_fallback);
        let mass: f64 = f.pdf.iter().map(|p| p * g.cell_volume()).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
    }

    fn gaussian_bump(g: &SampleGrid, center: f64, width: f64) -> Vec<f64> {
        (0..g.total())
            .map(|i| {
                let x = g.coords(i)[0];
                (-(x - center) * (x - center) / (2.0 * width * width)).exp()
            })
            .collect()
    }

    #[test]
    fn single_gaussian_has_one_peak_at_the_max() {
        let g = grid_1d(41);
        let eps = gaussian_bump(&g, 0.52, 0.08);
        let f = build_residual_field(&g, &eps, false).unwrap();
        let peaks = find_peaks(&f);
        assert_eq!(peaks.len(), 1);
        let argmax = (0..41).max_by(|&a, &b| f.pdf[a].partial_cmp(&f.pdf[b]).unwrap()).unwrap();
        assert_eq!(peaks[0], argmax);
    }

    #[test]
    fn two_separated_gaussians_give_two_peaks() {
        let g = grid_1d(41);
        let a = gaussian_bump(&g, 0.2, 0.05);
        let b = gaussian_bump(&g, 0.8, 0.05);
        let eps: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + 0.7 * y).collect();
        let f = build_residual_field(&g, &eps, false).unwrap();
        let peaks = find_peaks(&f);
        assert_eq!(peaks.len(), 2, "peaks: {peaks:?}");
        let c0 = g.coords(peaks[0])[0];
        let c1 = g.coords(peaks[1])[0];
        assert!((c0 - 0.2).abs() < 0.05);
        assert!((c1 - 0.8).abs() < 0.05);
    }

    #[test]
    fn monotone_pdf_peaks_at_the_boundary() {
        let g = grid_1d(21);
        let eps: Vec<f64> = (0..21).map(|i| 1.0 + i as f64).collect();
        let f = build_residual_field(&g, &eps, false).unwrap();
        assert_eq!(find_peaks(&f), vec![20]);
    }

    #[test]
    fn plateau_yields_its_lowest_index() {
        let g = grid_1d(9);
        let eps = vec![0.1, 0.1, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1];
        let f = build_residual_field(&g, &eps, false).unwrap();
        assert_eq!(find_peaks(&f), vec![2]);
    }

    #[test]
    fn constant_field_returns_single_argmax() {
        let g = grid_1d(7);
        let f = build_residual_field(&g, &vec![1.0; 7], false).unwrap();
        assert_eq!(find_peaks(&f), vec![0]);
    }

    #[test]
    fn rbms_i_point_mass_adds_exactly_that_node() {
        let g = grid_1d(21);
        let mut eps = vec![0.0; 21];
        eps[13] = 1.0;
        let f = build_residual_field(&g, &eps, false).unwrap();
        let samples = SampleSet::from_indices([0, 1]);
        let cfg = RbmsConfig { variant: RbmsVariant::I, m: 1, n: 1, r: 5 };
        let next = rbms_i_sample(&f, &samples, &cfg).unwrap();
        assert_eq!(next.len(), 3);
        assert!(next.contains(13));
        assert_eq!(next.history.last().unwrap(), &vec![13]);
    }

    #[test]
    fn rbms_i_excludes_sampled_peak_and_takes_next_best() {
        let g = grid_1d(21);
        let mut eps = vec![0.0; 21];
        eps[10] = 1.0;
        eps[11] = 0.8;
        eps[9] = 0.6;
        let f = build_residual_field(&g, &eps, false).unwrap();
        let samples = SampleSet::from_indices([10]);
        let cfg = RbmsConfig { variant: RbmsVariant::I, m: 1, n: 1, r: 5 };
        let next = rbms_i_sample(&f, &samples, &cfg).unwrap();
        assert!(next.contains(11), "next-highest neighbor is taken");
        assert_eq!(next.len(), 2);
    }

    /// Brute-force oracle for the two-mode RBMS-I case: enumerate each
    /// peak's ball, drop sampled nodes, sort by pdf, take m.
    #[test]
    fn rbms_i_two_mode_field_matches_brute_force_selection() {
        let g = grid_2d(40, 40);
        let eps: Vec<f64> = (0..g.total())
            .map(|i| {
                let c = g.coords(i);
                let d1 = (c[0] - 0.25).powi(2) + (c[1] - 0.3).powi(2);
                let d2 = (c[0] - 0.75).powi(2) + (c[1] - 0.7).powi(2);
                (-d1 / 0.01).exp() + 0.8 * (-d2 / 0.01).exp()
            })
            .collect();
        let f = build_residual_field(&g, &eps, false).unwrap();
        let samples = SampleSet::random(&g, 20, 99).unwrap();
        let cfg = RbmsConfig { variant: RbmsVariant::I, m: 7, n: 2, r: 5 };
        let next = rbms_i_sample(&f, &samples, &cfg).unwrap();
        let added = next.history.last().unwrap().clone();
        assert_eq!(added.len(), 14, "m = 7 around each of n = 2 peaks");

        // oracle: replay the algorithm with raw scans over the whole grid
        let peaks = find_peaks(&f);
        assert_eq!(peaks.len(), 2);
        let mut ranked = peaks.clone();
        ranked.sort_by(|&a, &b| f.pdf[b].partial_cmp(&f.pdf[a]).unwrap().then(a.cmp(&b)));
        let mut taken: Vec<usize> = Vec::new();
        for &peak in ranked.iter().take(2) {
            let pm = g.multi_index(peak);
            let mut ball: Vec<usize> = (0..g.total())
                .filter(|&i| {
                    let mi = g.multi_index(i);
                    mi.iter().zip(pm.iter()).all(|(&a, &b)| a.abs_diff(b) <= 5)
                })
                .filter(|i| !samples.contains(*i) && !taken.contains(i))
                .collect();
            ball.sort_by(|&a, &b| f.pdf[b].partial_cmp(&f.pdf[a]).unwrap().then(a.cmp(&b)));
            taken.extend(ball.into_iter().take(7));
        }
        let mut got = added.clone();
        got.sort_unstable();
        taken.sort_unstable();
        assert_eq!(got, taken);

        // locality: every added node within Chebyshev radius 5 of some peak
        for &idx in &added {
            let mi = g.multi_index(idx);
            assert!(peaks.iter().any(|&pk| {
                let pm = g.multi_index(pk);
                mi.iter().zip(pm.iter()).all(|(&a, &b)| a.abs_diff(b) <= 5)
            }));
        }
    }

    #[test]
    fn rbms_ii_disjoint_peaks_take_one_argmax_each() {
        let g = grid_1d(41);
        let a = gaussian_bump(&g, 0.15, 0.04);
        let b = gaussian_bump(&g, 0.85, 0.04);
        let eps: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + 0.9 * y).collect();
        let f = build_residual_field(&g, &eps, false).unwrap();
        let samples = SampleSet::new();
        let next = rbms_ii_sample(&f, &samples, 5).unwrap();
        let peaks = find_peaks(&f);
        assert_eq!(peaks.len(), 2);
        assert_eq!(next.len(), 2);
        // with nothing sampled, each peak's argmax is the peak itself
        for pk in peaks {
            assert!(next.contains(pk));
        }
    }

    #[test]
    fn rbms_ii_on_fully_sampled_grid_is_saturated() {
        let g = grid_1d(9);
        let f = build_residual_field(&g, &[1.0, 2.0, 1.0, 3.0, 1.0, 2.0, 1.0, 0.5, 0.2], false).unwrap();
        let samples = SampleSet::from_indices(0..9);
        assert!(matches!(
            rbms_ii_sample(&f, &samples, 5),
            Err(Error::SaturatedRegion)
        ));
    }

    #[test]
    fn rbms_ii_single_peak_adds_exactly_one() {
        let g = grid_1d(31);
        let eps = gaussian_bump(&g, 0.5, 0.1);
        let f = build_residual_field(&g, &eps, false).unwrap();
        let samples = SampleSet::random(&g, 5, 3).unwrap();
        let next = rbms_ii_sample(&f, &samples, 5).unwrap();
        assert_eq!(next.len(), samples.len() + 1);
    }

    #[test]
    fn monotone_growth_and_no_duplicates() {
        let g = grid_1d(41);
        let eps = gaussian_bump(&g, 0.4, 0.1);
        let f = build_residual_field(&g, &eps, false).unwrap();
        let mut samples = SampleSet::random(&g, 4, 17).unwrap();
        for _ in 0..6 {
            let before: Vec<usize> = samples.to_vec();
            let grown = rbms_ii_sample(&f, &samples, 5).unwrap();
            for b in &before {
                assert!(grown.contains(*b), "sample sets only grow");
            }
            let added = grown.history.last().unwrap();
            for a in added {
                assert!(!before.contains(a), "no duplicates added");
            }
            samples = grown;
        }
    }

    proptest! {
        /// Scaling residuals by any positive constant leaves peaks and
        /// selections unchanged (normalization divides the constant out).
        #[test]
        fn selections_are_scale_invariant(
            values in proptest::collection::vec(0.01f64..10.0, 30),
            scale in 0.001f64..1000.0,
        ) {
            let g = grid_1d(30);
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let f1 = build_residual_field(&g, &values, false).unwrap();
            let f2 = build_residual_field(&g, &scaled, false).unwrap();
            prop_assert_eq!(find_peaks(&f1), find_peaks(&f2));
            let samples = SampleSet::from_indices([0, 7, 19]);
            let cfg = RbmsConfig { variant: RbmsVariant::I, m: 3, n: 2, r: 4 };
            let a = rbms_i_sample(&f1, &samples, &cfg).unwrap();
            let b = rbms_i_sample(&f2, &samples, &cfg).unwrap();
            prop_assert_eq!(a.to_vec(), b.to_vec());
            let a2 = rbms_ii_sample(&f1, &samples, 5).unwrap();
            let b2 = rbms_ii_sample(&f2, &samples, 5).unwrap();
            prop_assert_eq!(a2.to_vec(), b2.to_vec());
        }
    }
}
