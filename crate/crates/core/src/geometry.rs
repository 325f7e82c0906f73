//! Point-set geometry: farthest point sampling, k-nearest-neighbor grouping,
//! relative offsets, and inverse-distance interpolation. Everything here is
//! deterministic and index-stable; distances are squared Euclidean and ties
//! break toward the lower index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INTERP_NEIGHBORS: usize = 3;
pub const INTERP_EPS: f64 = 1e-10;

#[inline]
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Grouping result: which source rows each query (centroid) sees.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    /// Source index of each query row; identity when query == source.
    pub centroids: Vec<usize>,
    /// Flat `m * k` neighbor indices into the source set, row-major.
    pub neighbors: Vec<usize>,
    pub k: usize,
    pub source_len: usize,
}

impl NeighborTable {
    pub fn m(&self) -> usize {
        self.centroids.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Greedy farthest point sampling. Starts at `start`, then repeatedly takes
/// the point with the largest min-distance to everything selected so far.
/// Deterministic: the scan takes the first (lowest-index) maximum.
pub fn farthest_point_sample(points: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::shape(
            "farthest_point_sample",
            format!("cannot take {} of {} points", m, n),
        ));
    }
    if start >= n {
        return Err(Error::shape(
            "farthest_point_sample",
            format!("start {} out of range {}", start, n),
        ));
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(start);
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist2(p, points[start])).collect();
    for _ in 1..m {
        let mut best = 0;
        let mut best_d = min_d[0];
        for (i, &d) in min_d.iter().enumerate().skip(1) {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(points[i], points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// k nearest source points for every query point, ordered by (distance,
/// index). When `k` exceeds the source size, rows are padded by repeating
/// the nearest point. Centroid indices default to the identity map, which is
/// correct for resolution-preserving grouping (query == source).
pub fn knn_group(query: &[[f64; 3]], source: &[[f64; 3]], k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::shape("knn_group", "k must be positive".to_string()));
    }
    if source.is_empty() {
        return Err(Error::shape("knn_group", "empty source set".to_string()));
    }
    let n = source.len();
    let take = k.min(n);
    let mut neighbors = Vec::with_capacity(query.len() * k);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &q in query {
        scored.clear();
        scored.extend(source.iter().enumerate().map(|(j, &s)| (dist2(q, s), j)));
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for t in 0..take {
            neighbors.push(scored[t].1);
        }
        for _ in take..k {
            neighbors.push(scored[0].1);
        }
    }
    Ok(NeighborTable {
        centroids: (0..query.len()).collect(),
        neighbors,
        k,
        source_len: n,
    })
}

/// Neighbor positions relative to their query point: `source[j] - query[m]`,
/// shaped `[m, k, 3]`. Subtraction happens coordinate-wise on the raw
/// positions, which is what makes downstream relative encodings insensitive
/// to global translation.
pub fn relative_offsets(
    table: &NeighborTable,
    query: &[[f64; 3]],
    source: &[[f64; 3]],
) -> Result<Tensor> {
    group_coords(table, source, Some(query))
}

/// Absolute neighbor positions, shaped `[m, k, 3]`.
pub fn absolute_neighbor_positions(table: &NeighborTable, source: &[[f64; 3]]) -> Result<Tensor> {
    group_coords(table, source, None)
}

fn group_coords(
    table: &NeighborTable,
    source: &[[f64; 3]],
    query: Option<&[[f64; 3]]>,
) -> Result<Tensor> {
    let m = table.m();
    if let Some(q) = query {
        if q.len() != m {
            return Err(Error::shape(
                "relative_offsets",
                format!("{} query points for {} table rows", q.len(), m),
            ));
        }
    }
    if table.source_len != source.len() {
        return Err(Error::shape(
            "relative_offsets",
            format!("table built over {} points, got {}", table.source_len, source.len()),
        ));
    }
    let mut out = Vec::with_capacity(m * table.k * 3);
    for i in 0..m {
        for &j in table.row(i) {
            let s = source[j];
            match query {
                Some(q) => {
                    let p = q[i];
                    out.extend_from_slice(&[s[0] - p[0], s[1] - p[1], s[2] - p[2]]);
                }
                None => out.extend_from_slice(&s),
            }
        }
    }
    Tensor::new(vec![m, table.k, 3], out)
}

/// Interpolation plan: for each high-resolution point, the `min(3, n_low)`
/// nearest low-resolution points and their inverse-squared-distance weights
/// (normalized; exact coincidence guarded by a 1e-10 epsilon).
pub fn interpolation_weights(
    high: &[[f64; 3]],
    low: &[[f64; 3]],
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if low.is_empty() {
        return Err(Error::shape("interpolation_weights", "empty low-resolution set".to_string()));
    }
    let k = INTERP_NEIGHBORS.min(low.len());
    let table = knn_group(high, low, k)?;
    let mut weights = Vec::with_capacity(high.len() * k);
    for (i, &h) in high.iter().enumerate() {
        let row = table.row(i);
        let mut raw = [0.0; INTERP_NEIGHBORS];
        let mut sum = 0.0;
        for (t, &j) in row.iter().enumerate() {
            let w = 1.0 / (dist2(h, low[j]) + INTERP_EPS);
            raw[t] = w;
            sum += w;
        }
        for r in raw.iter().take(k) {
            weights.push(r / sum);
        }
    }
    Ok((table.neighbors, weights, k))
}

/// Value-level 3-NN inverse-distance upsampling of `low_features` (shape
/// `[n_low, c]`) onto the high-resolution positions. The differentiable path
/// uses the same weights through the tape's `interp_rows`.
pub fn interpolate_upsample(
    low_pos: &[[f64; 3]],
    low_features: &Tensor,
    high_pos: &[[f64; 3]],
) -> Result<Tensor> {
    if low_features.shape().len() != 2 || low_features.shape()[0] != low_pos.len() {
        return Err(Error::shape(
            "interpolate_upsample",
            format!(
                "features {:?} do not match {} low points",
                low_features.shape(),
                low_pos.len()
            ),
        ));
    }
    let c = low_features.shape()[1];
    let (idx, w, k) = interpolation_weights(high_pos, low_pos)?;
    let fd = low_features.data();
    let mut out = vec![0.0; high_pos.len() * c];
    for (slot, (&j, &wv)) in idx.iter().zip(&w).enumerate() {
        let dst = &mut out[(slot / k) * c..(slot / k + 1) * c];
        let src = &fd[j * c..(j + 1) * c];
        for (o, &s) in dst.iter_mut().zip(src) {
            *o += wv * s;
        }
    }
    Tensor::new(vec![high_pos.len(), c], out)
}

/// Comparison-count estimates for the non-FLOP cost bucket.
pub fn fps_comparisons(n: usize, m: usize) -> u64 {
    // Each of the m-1 rounds scans n distances twice (argmax + min update).
    (m.saturating_sub(1) as u64) * (n as u64) * 2
}

pub fn knn_comparisons(n_query: usize, n_source: usize) -> u64 {
    // Distance evaluations plus an n log n ordering pass per query.
    let logn = (usize::BITS - n_source.leading_zeros()) as u64;
    n_query as u64 * (n_source as u64) * (1 + logn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_collinear_picks_extremes_then_middle() {
        let pts = line(5);
        let idx = farthest_point_sample(&pts, 3, 0).unwrap();
        assert_eq!(idx, vec![0, 4, 2]);
    }

    #[test]
    fn fps_full_selection_is_a_permutation() {
        let pts = line(7);
        let mut idx = farthest_point_sample(&pts, 7, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fps_oversampling_is_an_error() {
        assert!(farthest_point_sample(&line(4), 5, 0).is_err());
    }

    #[test]
    fn knn_orders_by_distance() {
        let query = [[0.0, 0.0, 0.0]];
        let source = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let t = knn_group(&query, &source, 2).unwrap();
        assert_eq!(t.row(0), &[0, 1]);
    }

    #[test]
    fn knn_pads_past_source_size_with_nearest() {
        let query = [[0.0, 0.0, 0.0]];
        let source = [[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let t = knn_group(&query, &source, 3).unwrap();
        assert_eq!(t.row(0), &[0, 1, 0]);
    }

    #[test]
    fn knn_self_grouping_starts_with_self() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let t = knn_group(&pts, &pts, 2).unwrap();
        for (i, c) in t.centroids.iter().enumerate() {
            assert_eq!(*c, i);
            assert_eq!(t.row(i)[0], i, "row {} should lead with itself", i);
        }
    }

    #[test]
    fn offsets_are_source_minus_query() {
        let query = [[0.0, 0.0, 0.0]];
        let source = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let t = knn_group(&query, &source, 2).unwrap();
        let off = relative_offsets(&t, &query, &source).unwrap();
        assert_eq!(off.shape(), &[1, 2, 3]);
        assert_eq!(off.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn offsets_of_a_unit_pair_are_plus_minus_one() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let t = knn_group(&pts, &pts, 2).unwrap();
        let off = relative_offsets(&t, &pts, &pts).unwrap();
        // Row 0: self then +1; row 1: self then -1.
        assert_eq!(off.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn interp_single_low_point_copies_features() {
        let low = [[0.5, 0.5, 0.5]];
        let feats = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let high = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let out = interpolate_upsample(&low, &feats, &high).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        for r in 0..2 {
            assert!((out.data()[r * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[r * 2 + 1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_midpoint_averages_two_points() {
        let low = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = Tensor::new(vec![2, 1], vec![1.0, 5.0]).unwrap();
        let high = [[1.0, 0.0, 0.0]];
        let out = interpolate_upsample(&low, &feats, &high).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn interp_coincident_point_dominates() {
        let low = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = Tensor::new(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let high = [[0.0, 0.0, 0.0]];
        let out = interpolate_upsample(&low, &feats, &high).unwrap();
        assert!((out.data()[0] - 10.0).abs() < 1e-6);
    }
}
