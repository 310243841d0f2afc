//! Cosine geometry, DBSCAN and silhouette-driven ε selection.

use serde::{Deserialize, Serialize};

pub const NOISE: i32 = -1;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b)
}

/// Mean cosine over unordered pairs; 1.0 for fewer than two vectors.
pub fn pairwise_mean_cosine(vs: &[Vec<f64>]) -> f64 {
    if vs.len() < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            sum += cosine(&vs[i], &vs[j]);
            n += 1;
        }
    }
    sum / n as f64
}

fn distances(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vs.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let x = cosine_distance(&vs[i], &vs[j]);
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    d
}

/// Density-based clustering under cosine distance. A point is core when at
/// least `min_points` points (itself included) lie within `eps`. Clusters are
/// numbered in order of their first core point.
pub fn dbscan(vs: &[Vec<f64>], eps: f64, min_points: usize) -> Vec<i32> {
    dbscan_with(&distances(vs), eps, min_points)
}

fn dbscan_with(d: &[Vec<f64>], eps: f64, min_points: usize) -> Vec<i32> {
    let n = d.len();
    let neighbors = |i: usize| -> Vec<usize> { (0..n).filter(|&j| d[i][j] <= eps).collect() };
    let mut labels = vec![None::<i32>; n];
    let mut next = 0;
    for p in 0..n {
        if labels[p].is_some() {
            continue;
        }
        let nb = neighbors(p);
        if nb.len() < min_points {
            labels[p] = Some(NOISE);
            continue;
        }
        let c = next;
        next += 1;
        labels[p] = Some(c);
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(NOISE) => labels[q] = Some(c),
                Some(_) => continue,
                None => {
                    labels[q] = Some(c);
                    let nq = neighbors(q);
                    if nq.len() >= min_points {
                        queue.extend(nq);
                    }
                }
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

pub fn cluster_count(labels: &[i32]) -> usize {
    labels.iter().filter(|&&l| l >= 0).max().map_or(0, |m| *m as usize + 1)
}

/// Mean silhouette under cosine distance. Noise points are treated as
/// singleton clusters with silhouette 0. `None` with fewer than two clusters.
pub fn silhouette(vs: &[Vec<f64>], labels: &[i32]) -> Option<f64> {
    silhouette_with(&distances(vs), labels)
}

fn silhouette_with(d: &[Vec<f64>], labels: &[i32]) -> Option<f64> {
    if cluster_count(labels) < 2 {
        return None;
    }
    let n = labels.len();
    // each noise point becomes its own group
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); cluster_count(labels)];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            groups[l as usize].push(i);
        } else {
            groups.push(vec![i]);
        }
    }
    let group_of: Vec<usize> = {
        let mut g = vec![0; n];
        for (gi, members) in groups.iter().enumerate() {
            for &m in members {
                g[m] = gi;
            }
        }
        g
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[group_of[i]];
        if own.len() < 2 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| d[i][j]).sum::<f64>() / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .enumerate()
            .filter(|(gi, _)| *gi != group_of[i])
            .map(|(_, g)| g.iter().map(|&j| d[i][j]).sum::<f64>() / g.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonChoice {
    pub eps: f64,
    pub silhouette: Option<f64>,
    /// No ε in range produced two or more clusters.
    pub degenerate: bool,
}

/// Coarse grid over `[lo, hi]` followed by golden-section refinement around
/// the best grid point, maximizing the silhouette.
pub fn select_epsilon(vs: &[Vec<f64>], range: (f64, f64), min_points: usize, grid: usize, refine_iters: usize) -> EpsilonChoice {
    let (lo, hi) = range;
    let mid = EpsilonChoice { eps: 0.5 * (lo + hi), silhouette: None, degenerate: true };
    if vs.len() < 3 || hi <= lo {
        return mid;
    }
    let d = distances(vs);
    let score = |eps: f64| silhouette_with(&d, &dbscan_with(&d, eps, min_points));
    let steps = grid.max(2);
    let points: Vec<f64> = (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect();
    let scores: Vec<Option<f64>> = points.iter().map(|&e| score(e)).collect();
    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        });
    let Some((bi, bs)) = best else { return mid };
    let mut choice = EpsilonChoice { eps: points[bi], silhouette: Some(bs), degenerate: false };
    let (mut a, mut b) = (points[bi.saturating_sub(1)], points[(bi + 1).min(steps - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |e: f64| score(e).unwrap_or(f64::NEG_INFINITY);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..refine_iters {
        for (x, fx) in [(x1, f1), (x2, f2)] {
            if fx > choice.silhouette.unwrap() {
                choice = EpsilonChoice { eps: x, silhouette: Some(fx), degenerate: false };
            }
        }
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    choice
}

/// Member nearest the arithmetic centroid; ties go to the lowest index.
pub fn medoid(vs: &[&Vec<f64>]) -> usize {
    let dim = vs[0].len();
    let mut c = vec![0.0; dim];
    for v in vs {
        for (ci, x) in c.iter_mut().zip(v.iter()) {
            *ci += x;
        }
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, v) in vs.iter().enumerate() {
        let d: f64 = v.iter().zip(&c).map(|(x, y)| (x - y / vs.len() as f64).powi(2)).sum();
        if d < best_d - 1e-12 {
            best = i;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn mean_cosine_cases() {
        assert_eq!(pairwise_mean_cosine(&[e(0, 2), e(0, 2)]), 1.0);
        assert_eq!(pairwise_mean_cosine(&[e(0, 2), e(1, 2)]), 0.0);
        assert!((pairwise_mean_cosine(&[e(0, 2), e(0, 2), e(1, 2)]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(pairwise_mean_cosine(&[e(0, 2)]), 1.0);
    }

    #[test]
    fn identical_vectors_form_one_cluster() {
        let vs = vec![e(0, 3); 4];
        for eps in [0.01, 0.5, 0.9] {
            assert_eq!(dbscan(&vs, eps, 2), vec![0; 4]);
        }
    }

    #[test]
    fn isolated_point_is_noise() {
        let vs = vec![e(0, 3), e(0, 3), e(0, 3), e(2, 3)];
        assert_eq!(dbscan(&vs, 0.2, 2), vec![0, 0, 0, NOISE]);
    }

    #[test]
    fn single_blob_is_degenerate() {
        let vs = vec![e(0, 3); 5];
        let c = select_epsilon(&vs, (0.1, 0.9), 2, 9, 20);
        assert!(c.degenerate);
        assert!((c.eps - 0.5).abs() < 1e-12);
    }
}
