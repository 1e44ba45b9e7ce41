//! Earth mover's distance between equal-size point sets, solved as a
//! minimum-cost perfect matching.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Minimum-cost assignment of a square cost matrix by shortest augmenting
/// paths with row/column potentials, `O(n^3)`. Returns the column assigned
/// to each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise Euclidean distances between the rows of two matrices.
pub fn distance_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| euclidean(a.row(i), b.row(j)))
}

/// Mean matched distance of a row-to-column assignment, summed in row order.
pub fn matching_cost(cost: &Array2<f64>, assignment: &[usize]) -> f64 {
    let n = assignment.len().max(1) as f64;
    assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n
}

/// EMD between two point clouds of equal size and dimension: the minimum
/// over perfect matchings of the mean Euclidean pair distance.
pub fn emd_points(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::contract(format!(
            "EMD needs equal point counts ({} vs {}); resample both sides to the same size",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::contract(format!(
            "EMD needs equal dimensions ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::contract("EMD of empty point sets"));
    }
    let cost = distance_matrix(a, b);
    Ok(matching_cost(&cost, &hungarian(&cost)))
}
