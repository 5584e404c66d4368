//! Index structures for the two-level set-abstraction encoder: farthest-point
//! sampling, ball-query neighborhoods and inverse-distance interpolation
//! weights. Computed once per crop from coordinates only.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub centers1: usize,
    pub radius1: f64,
    pub neighbors1: usize,
    pub centers2: usize,
    pub radius2: f64,
    pub neighbors2: usize,
    pub width1: usize,
    pub width2: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            centers1: 256,
            radius1: 0.2,
            neighbors1: 32,
            centers2: 64,
            radius2: 0.4,
            neighbors2: 32,
            width1: 64,
            width2: 128,
        }
    }
}

/// Grouping of one crop. Level-2 indices refer to level-1 centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub n_points: usize,
    pub centers1: Vec<usize>,
    /// `centers1.len() × neighbors1` point indices.
    pub groups1: Vec<usize>,
    pub centers2: Vec<usize>,
    /// `centers2.len() × neighbors2` level-1 center indices.
    pub groups2: Vec<usize>,
    /// Three nearest level-2 centers of each level-1 center, with weights.
    pub up2_idx: Vec<usize>,
    pub up2_w: Vec<f64>,
    /// Three nearest level-1 centers of each input point, with weights.
    pub up1_idx: Vec<usize>,
    pub up1_w: Vec<f64>,
}

fn d2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// Greedy farthest-point sampling starting from index 0.
pub fn farthest_point_sampling(points: &[[f32; 3]], count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    let mut chosen = Vec::with_capacity(count);
    if count == 0 {
        return chosen;
    }
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = 0usize;
    for _ in 0..count {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = d2(p, &c);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

/// First `k` points within `radius` of each center in index order, padded
/// by repeating the first hit (the center itself is always a hit).
pub fn ball_query(points: &[[f32; 3]], centers: &[usize], radius: f64, k: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        let start = out.len();
        for (i, p) in points.iter().enumerate() {
            if d2(p, &points[c]) <= r2 {
                out.push(i);
                if out.len() - start == k {
                    break;
                }
            }
        }
        let first = out[start];
        while out.len() - start < k {
            out.push(first);
        }
    }
    out
}

/// Three nearest `sources` for each target with normalized inverse-distance
/// weights.
pub fn three_nn(targets: &[[f32; 3]], sources: &[[f32; 3]]) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(targets.len() * 3);
    let mut w = Vec::with_capacity(targets.len() * 3);
    for t in targets {
        let mut best = [(f64::INFINITY, 0usize); 3];
        for (i, s) in sources.iter().enumerate() {
            let d = d2(t, s);
            if d < best[2].0 {
                best[2] = (d, i);
                best.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
        }
        let mut ws = [0.0; 3];
        for (k, &(d, i)) in best.iter().enumerate() {
            let i = if d.is_finite() { i } else { best[0].1 };
            idx.push(i);
            ws[k] = if d.is_finite() { 1.0 / (d + 1e-8) } else { 0.0 };
        }
        let total: f64 = ws.iter().sum();
        w.extend(ws.iter().map(|v| v / total));
    }
    (idx, w)
}

pub fn build_hierarchy(points: &[[f32; 3]], cfg: &HierarchyConfig) -> Hierarchy {
    let centers1 = farthest_point_sampling(points, cfg.centers1);
    let groups1 = ball_query(points, &centers1, cfg.radius1, cfg.neighbors1);
    let level1: Vec<[f32; 3]> = centers1.iter().map(|&i| points[i]).collect();
    let centers2 = farthest_point_sampling(&level1, cfg.centers2);
    let groups2 = ball_query(&level1, &centers2, cfg.radius2, cfg.neighbors2);
    let level2: Vec<[f32; 3]> = centers2.iter().map(|&i| level1[i]).collect();
    let (up2_idx, up2_w) = three_nn(&level1, &level2);
    let (up1_idx, up1_w) = three_nn(points, &level1);
    Hierarchy {
        n_points: points.len(),
        centers1,
        groups1,
        centers2,
        groups2,
        up2_idx,
        up2_w,
        up1_idx,
        up1_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_spreads_points() {
        let pts = [[0.0f32, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [2.5, 0.0, 0.0]];
        assert_eq!(farthest_point_sampling(&pts, 3), vec![0, 2, 3]);
    }

    #[test]
    fn ball_query_pads_with_first_hit() {
        let pts = [[0.0f32, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]];
        assert_eq!(ball_query(&pts, &[2, 0], 0.2, 3), vec![2, 2, 2, 0, 1, 0]);
    }

    #[test]
    fn interpolation_weights_sum_to_one() {
        let src = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [3.0, 3.0, 3.0]];
        let (idx, w) = three_nn(&[[0.0, 0.0, 0.0], [0.4, 0.4, 0.0]], &src);
        assert_eq!(&idx[..1], &[0]);
        for k in 0..2 {
            assert!((w[3 * k..3 * k + 3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(w[0] > 0.999);
    }
}
