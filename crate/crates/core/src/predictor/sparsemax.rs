use crate::error::{Error, Result};

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sorts `z` in decreasing order, finds the largest support size `k` with
/// `1 + k·z_(k) > Σ_{j≤k} z_(j)`, and shifts by the threshold
/// `τ = (Σ_{j≤k} z_(j) − 1) / k`.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Config("sparsemax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sparsemax input is not finite".into()));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    Ok(z.iter().map(|&v| (v - tau).max(0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_input_splits_evenly() {
        assert_eq!(sparsemax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn large_margin_gives_one_hot() {
        assert_eq!(sparsemax(&[10.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn three_way_example() {
        // full support: tau = (0.65 - 1) / 3
        let p = sparsemax(&[0.5, 0.1, 0.05]).unwrap();
        let expected = [0.616_666_666_7, 0.216_666_666_7, 0.166_666_666_7];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(sparsemax(&[1.0, f64::INFINITY]).is_err());
        assert!(sparsemax(&[]).is_err());
    }
}
