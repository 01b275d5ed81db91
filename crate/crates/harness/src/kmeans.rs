//! Lloyd's k-means with farthest-point seeding, used as a reference baseline.

use rpim_core::data::{FeatureSet, GcdSplit};
use rpim_core::eval::{gcd_accuracy, EvalReport};
use rpim_core::numerics::{l2_normalize, DenseMatrix, Rng};
use rpim_core::{Result, RpimError};

pub const MAX_ITERS: usize = 50;
pub const TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; the lowest index wins ties.
fn nearest(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the rows of `points` into `k` groups.
///
/// The first centre is a seeded random row; each further centre is the row
/// farthest from the centres chosen so far. A cluster that loses all its
/// members is moved onto the row that lies farthest from its own centre.
pub fn kmeans(points: &DenseMatrix, k: usize, rng: &mut Rng) -> Result<Clustering> {
    let n = points.rows();
    if k < 2 {
        return Err(RpimError::InvalidInput(format!("k-means needs K >= 2, got {k}")));
    }
    if n < k {
        return Err(RpimError::InvalidInput(format!("k-means needs at least K={k} points, got {n}")));
    }
    if let Some(row) = points.first_non_finite_row() {
        return Err(RpimError::NonFinite {
            context: "k-means input".into(),
            row,
        });
    }

    let mut chosen = vec![rng.index(n)];
    let mut min_dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = farthest(&min_dist);
        chosen.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids = points.select_rows(&chosen);

    let mut assignments = vec![0; n];
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            (assignments[i], dists[i]) = nearest(points.row(i), &centroids);
        }
        let mut sums = DenseMatrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = farthest(&dists);
                sums.row_mut(c).copy_from_slice(points.row(far));
                counts[c] = 1;
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(sums.row(c), centroids.row(c)))
            .fold(0.0, f64::max);
        centroids = sums;
        if shift < TOL {
            break;
        }
    }
    for i in 0..n {
        assignments[i] = nearest(points.row(i), &centroids).0;
    }
    Ok(Clustering {
        assignments,
        centroids,
        iterations,
    })
}

fn farthest(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}

/// Clusters every sample into `k` groups and scores the unlabeled ones.
/// With `normalize` the rows are L2-normalized first, matching the input the
/// identity transform hands to the classifier.
pub fn kmeans_baseline(fs: &FeatureSet, split: &GcdSplit, k: usize, normalize: bool, rng: &mut Rng) -> Result<EvalReport> {
    split.validate(fs)?;
    let points = if normalize {
        let rows = fs.features.row_iter().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_rows(&rows, fs.dim())?
    } else {
        fs.features.clone()
    };
    let clustering = kmeans(&points, k, rng)?;
    let y_true: Vec<usize> = split.unlabeled_indices.iter().map(|&i| fs.labels[i]).collect();
    let y_pred: Vec<usize> = split.unlabeled_indices.iter().map(|&i| clustering.assignments[i]).collect();
    gcd_accuracy(&y_true, &y_pred, &split.known_classes, k.max(fs.num_classes))
}
