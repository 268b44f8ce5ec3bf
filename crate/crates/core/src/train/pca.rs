use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n × r` projections of the centered rows.
    pub coords: Array,
    /// `r × k` unit components, largest-magnitude loading positive.
    pub components: Array,
    /// Eigenvalues of the sample covariance for each component.
    pub variances: Vec<f64>,
    /// Variance fractions of the total (trace of the covariance).
    pub explained: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Top two principal components.
pub fn pca_top2(x: &Array) -> Result<Pca> {
    pca_top(x, 2)
}

/// Top `r` components by power iteration with deflation on the centered
/// covariance.
pub fn pca_top(x: &Array, r: usize) -> Result<Pca> {
    let (n, k) = x.dims2();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if r == 0 || r > k {
        return Err(Error::invalid(format!("cannot take {r} components of {k} columns")));
    }
    let mean: Vec<f64> = (0..k).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| x.at(i, j) - mean[j])
        .collect();

    let mut cov = vec![0.0; k * k];
    crate::array::gemm(k, n, k, &centered, true, &centered, false, &mut cov, 0.0);
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    let total: f64 = (0..k).map(|j| cov[j * k + j]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut components = Array::zeros(&[r, k]);
    let mut variances = Vec::with_capacity(r);
    for comp in 0..r {
        let start = Array::uniform(&[1, k], 1.0, &mut rng);
        let mut v = start.into_data();
        orthogonalize(&mut v, &components, comp);
        normalize(&mut v);
        let mut next = vec![0.0; k];
        for _ in 0..POWER_MAX_ITER {
            matvec(&cov, &v, &mut next);
            orthogonalize(&mut next, &components, comp);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut v, &mut next);
            if delta < POWER_TOL {
                break;
            }
        }
        let biggest = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if biggest < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        matvec(&cov, &v, &mut next);
        let lambda: f64 = v.iter().zip(&next).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] -= lambda * v[i] * v[j];
            }
        }
        components.data_mut()[comp * k..(comp + 1) * k].copy_from_slice(&v);
        variances.push(lambda);
    }

    let mut coords = vec![0.0; n * r];
    crate::array::gemm(n, k, r, &centered, false, components.data(), true, &mut coords, 0.0);
    let explained = variances
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(Pca {
        coords: Array::matrix(n, r, coords)?,
        components,
        variances,
        explained,
        mean,
    })
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let k = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(k)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Removes the span of the first `count` rows of `basis` (exact zero
/// eigen-directions would otherwise drift back in through rounding).
fn orthogonalize(v: &mut [f64], basis: &Array, count: usize) {
    for c in 0..count {
        let b = basis.row_slice(c);
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}
