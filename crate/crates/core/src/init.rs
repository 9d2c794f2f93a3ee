//! Data-driven initialization: inducing inputs by k-means and linear mean
//! functions by principal directions.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ad::Tensor;

const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` centroids of the rows of `x` by Lloyd's algorithm from a k-means++
/// seeding. With fewer distinct rows than `k`, the extra centres are copies of
/// data rows with a small Gaussian offset.
pub fn kmeans(x: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    assert!(n > 0 && k > 0, "kmeans needs data and at least one centre");
    if k >= n {
        let mut c = Tensor::zeros(k, d);
        for i in 0..k {
            for j in 0..d {
                let jitter = if i < n {
                    0.0
                } else {
                    1e-2 * rng.sample::<f64, _>(StandardNormal)
                };
                c.set(i, j, x.get(i % n, j) + jitter);
            }
        }
        return c;
    }

    let mut centres: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            index::sample(rng, n, 1).index(0)
        };
        let c = x.row(pick).to_vec();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(x.row(i), &c));
        }
        centres.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&p, &q| sq_dist(x.row(i), &centres[p]).total_cmp(&sq_dist(x.row(i), &centres[q])))
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centres[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Tensor::from_rows(&centres).expect("centroid rows")
}

/// `D_in×D_out` projection for a linear mean function: the identity when the
/// widths agree, the leading right singular vectors of the centred data when
/// narrowing, and the identity padded with zero columns when widening.
pub fn linear_mean_weights(x: &Tensor, d_out: usize) -> Tensor {
    let (n, d_in) = (x.rows(), x.cols());
    let mut w = Tensor::zeros(d_in, d_out);
    if d_in <= d_out {
        for i in 0..d_in {
            w.set(i, i, 1.0);
        }
        return w;
    }
    let means: Vec<f64> = (0..d_in)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d_in, |i, j| x.get(i, j) - means[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for (c, &r) in order.iter().take(d_out).enumerate() {
        for i in 0..d_in {
            w.set(i, c, v_t[(r, i)]);
        }
    }
    w
}
