//! Fixtures shared by the benchmarks.

use dtgp::ad::Tensor;
use dtgp::data::{make_split, Dataset};
use dtgp::PreparedSplit;

/// A smooth deterministic regression problem with `n` rows and `d` inputs,
/// sized like the small UCI sets.
pub fn synthetic(n: usize, d: usize) -> Dataset {
    let x: Vec<f64> = (0..n * d)
        .map(|k| ((k * 7919 % 1009) as f64 / 1009.0) * 4.0 - 2.0)
        .collect();
    let y = (0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            row.iter()
                .enumerate()
                .map(|(j, v)| (v * (1.0 + j as f64 * 0.3)).sin())
                .sum::<f64>()
        })
        .collect();
    Dataset {
        x: Tensor::from_vec(n, d, x).expect("consistent shape"),
        y,
        feature_names: None,
        target_name: None,
    }
}

/// Standardized seed-0 split of [`synthetic`].
pub fn split(n: usize, d: usize) -> PreparedSplit {
    let data = synthetic(n, d);
    PreparedSplit::new(&data, &make_split(n, 0).expect("enough rows"))
}
