//! k-means with k-means++ seeding, used to place the initial group centres.

use rand::Rng as _;

use crate::rng::Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centre, lowest index on ties.
pub fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut j = 0;
            while j + 1 < d.len() && u >= d[j] {
                u -= d[j];
                j += 1;
            }
            j
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// Lloyd iterations from k-means++ seeds; the best of `restarts` runs by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    assert!(!points.is_empty() && k >= 1);
    let dim = points[0].len();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = seed_plus_plus(points, k, rng);
        let mut labels = vec![usize::MAX; points.len()];
        for _iter in 0..100 {
            let new: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
            if new == labels {
                break;
            }
            labels = new;
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let mut m = vec![0.0; dim];
                for p in &members {
                    for (a, b) in m.iter_mut().zip(p.iter()) {
                        *a += b;
                    }
                }
                m.iter_mut().for_each(|a| *a /= members.len() as f64);
                *center = m;
            }
        }
        let inertia: f64 = points.iter().map(|p| nearest(p, &centers).1).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    best.expect("at least one restart").1
}
