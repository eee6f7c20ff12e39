//! Subsets of the observed states: the spatially de-clustered subset used by
//! the orthogonality penalty and the potential-thresholded regression subset.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::dynamics::SnapshotDataset;
use crate::rng;
use crate::{Error, Result, Scalar};

/// Points retained by a greedy radius cover.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSubset<T> {
    pub points: Array2<T>,
    pub radius: T,
    pub source_size: usize,
}

impl<T: Scalar> RepresentativeSubset<T> {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

fn dist2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
}

/// Greedy cover over `points` visited in the given order: a point is kept iff
/// it lies at distance `>= r` from every point kept so far.
pub fn greedy_cover<T: Scalar>(points: ArrayView2<T>, order: &[usize], r: T) -> Vec<usize> {
    let r2 = r * r;
    let d = points.ncols();
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_coords: Vec<T> = Vec::new();
    for &i in order {
        let p = points.row(i);
        let p = p.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| p.to_vec());
        let far = kept_coords.chunks_exact(d).all(|q| dist2(&p, q) >= r2);
        // r = 0 keeps distinct points only
        let far = far && (r > T::zero() || !kept_coords.chunks_exact(d).any(|q| q == p.as_slice()));
        if far {
            kept.push(i);
            kept_coords.extend_from_slice(&p);
        }
    }
    kept
}

/// Selects a representative subset with separation radius `r`, visiting the
/// points in a seeded random order.
pub fn select_representative<T: Scalar>(points: ArrayView2<T>, r: T, seed: u64) -> Result<RepresentativeSubset<T>> {
    if !(r >= T::zero()) {
        return Err(Error::Invalid(format!("subset radius must be >= 0, got {r}")));
    }
    let mut order: Vec<usize> = (0..points.nrows()).collect();
    order.shuffle(&mut rng::stream(seed, 0));
    let kept = greedy_cover(points, &order, r);
    Ok(RepresentativeSubset {
        points: points.select(Axis(0), &kept),
        radius: r,
        source_size: points.nrows(),
    })
}

/// States with `V(x) < tau`, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSubset<T> {
    pub states: Array2<T>,
    pub tau: T,
    pub indices: Vec<usize>,
    pub selector: String,
}

/// Keeps the `x0` states whose potential lies strictly below `tau`.
pub fn threshold_subset<T: Scalar>(
    dataset: &SnapshotDataset<T>,
    potential: impl Fn(ArrayView2<T>) -> Vec<T>,
    tau: T,
) -> Result<RegressionSubset<T>> {
    let values = potential(dataset.x0.view());
    let indices: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v < tau)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::Empty(format!(
            "no state has potential below tau = {tau}; the regression would be degenerate"
        )));
    }
    Ok(RegressionSubset {
        states: dataset.x0.select(Axis(0), &indices),
        tau,
        indices,
        selector: format!("V(x0) < {tau}"),
    })
}

/// Minimum of `V` over all `x0` states of the dataset.
pub fn min_potential<T: Scalar>(potential: impl Fn(ArrayView2<T>) -> Vec<T>, dataset: &SnapshotDataset<T>) -> Result<T> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no states".into()));
    }
    potential(dataset.x0.view())
        .into_iter()
        .reduce(T::min)
        .ok_or_else(|| Error::Empty("dataset has no states".into()))
}
