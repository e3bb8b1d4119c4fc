//! K-means over segment mean vectors with k-means++ seeding.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AcousticSegment, GranularityConfig, TokenLabeling, UtteranceLabels};
use crate::error::{Error, Result};
use crate::hmm::Occupancy;

pub const MAX_LLOYD_ITERS: usize = 100;
pub const REL_INERTIA_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &Array2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its current center.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = points.ncols();
    let mut centers = Array2::zeros((k, dim));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(j)));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(&centers, p);
            assignments[i] = j;
            dists[i] = d;
        }
        // re-seed empty clusters from the farthest points
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = j;
                    counts[j] = 1;
                    dists[i] = 0.0;
                    centers.row_mut(j).assign(&points.row(i));
                }
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c: Array1<f64> = &sums.row(j) / counts[j] as f64;
                centers.row_mut(j).assign(&c);
            }
        }
        inertia = points
            .rows()
            .into_iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, centers.row(a)))
            .sum();
        let rel = if prev_inertia.is_finite() && prev_inertia > 0.0 {
            (prev_inertia - inertia).abs() / prev_inertia
        } else if prev_inertia == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if rel < REL_INERTIA_TOL {
            break;
        }
        prev_inertia = inertia;
    }
    Ok(KMeansResult {
        centers,
        assignments,
        inertia,
        iterations,
    })
}

/// Clusters segment means into `n` groups and labels every segment with its
/// cluster index as token id. Segments must be given in utterance order, each
/// utterance's segments tiling it.
pub fn kmeans_initialize(segments: &[AcousticSegment], cfg: &GranularityConfig, seed: u64) -> Result<TokenLabeling> {
    if segments.len() < cfg.n {
        return Err(Error::Config(format!(
            "only {} segments for n = {} tokens; choose a smaller n",
            segments.len(),
            cfg.n
        )));
    }
    let dim = segments[0].mean_vector.len();
    let points = Array2::from_shape_fn((segments.len(), dim), |(i, d)| segments[i].mean_vector[d]);
    let result = kmeans(&points, cfg.n, seed)?;
    let mut utterances: Vec<UtteranceLabels> = Vec::new();
    for (seg, &token) in segments.iter().zip(&result.assignments) {
        let occ = Occupancy {
            token_id: token,
            start: seg.start_frame,
            end: seg.end_frame,
        };
        match utterances.last_mut() {
            Some(u) if u.utterance_id == seg.utterance_id => u.occupancies.push(occ),
            _ => utterances.push(UtteranceLabels {
                utterance_id: seg.utterance_id.clone(),
                occupancies: vec![occ],
                states: None,
            }),
        }
    }
    Ok(TokenLabeling {
        utterances,
        iteration_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seg(utt: &str, start: usize, end: usize, mean: Array1<f64>) -> AcousticSegment {
        AcousticSegment {
            utterance_id: utt.into(),
            start_frame: start,
            end_frame: end,
            mean_vector: mean,
        }
    }

    #[test]
    fn too_few_segments_is_config_error() {
        let segs = vec![seg("a", 0, 3, array![0.0])];
        let err = kmeans_initialize(&segs, &GranularityConfig { m: 1, n: 2 }, 0).unwrap_err();
        assert!(err.to_string().contains("smaller n"));
    }

    #[test]
    fn labels_group_by_utterance_and_preserve_count() {
        let segs = vec![
            seg("a", 0, 3, array![0.0]),
            seg("a", 3, 7, array![5.0]),
            seg("b", 0, 4, array![0.1]),
            seg("b", 4, 6, array![5.1]),
            seg("b", 6, 9, array![-0.1]),
        ];
        let w0 = kmeans_initialize(&segs, &GranularityConfig { m: 1, n: 2 }, 3).unwrap();
        assert_eq!(w0.utterances.len(), 2);
        let total: usize = w0.utterances.iter().map(|u| u.occupancies.len()).sum();
        assert_eq!(total, segs.len());
        let a = &w0.utterances[0].occupancies;
        assert_ne!(a[0].token_id, a[1].token_id);
        assert_eq!(w0, kmeans_initialize(&segs, &GranularityConfig { m: 1, n: 2 }, 3).unwrap());
    }

    #[test]
    fn duplicate_points_still_fill_all_clusters() {
        let pts = Array2::from_shape_fn((6, 1), |(i, _)| if i < 5 { 1.0 } else { 2.0 });
        let r = kmeans(&pts, 3, 1).unwrap();
        let mut seen = [false; 3];
        for &a in &r.assignments {
            seen[a] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
