//! Percentiles, percentile bands, and correlation coefficients.

use crate::error::{Error, Result};

/// Empirical percentile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty; `p` is in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * (p / 100.0).clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("scores"));
    }
    Ok(percentile_sorted(&sorted_copy(values), p))
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

pub(crate) fn check_band(lo: f64, hi: f64) -> Result<()> {
    if !(0.0..100.0).contains(&lo) || !(lo < hi && hi <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile band ({lo}, {hi}) must satisfy 0 <= lo < hi <= 100"
        )));
    }
    Ok(())
}

/// `mask[i] = q(lo) < scores[i] < q(hi)` with strict inequalities.
pub fn band_mask(scores: &[f64], lo: f64, hi: f64) -> Result<Vec<bool>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    check_band(lo, hi)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let sorted = sorted_copy(scores);
    let q_lo = percentile_sorted(&sorted, lo);
    let q_hi = percentile_sorted(&sorted, hi);
    Ok(scores.iter().map(|&s| q_lo < s && s < q_hi).collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    percentile_sorted(&sorted_copy(xs), 50.0)
}

fn check_pairs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 3 observations".into(),
        ));
    }
    Ok(())
}

/// Product-moment correlation, two-pass mean-centred.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 || !(sxx * syy).is_finite() {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Pearson and Spearman coefficients of two aligned samples.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<Correlations> {
    Ok(Correlations {
        pearson: pearson(xs, ys)?,
        spearman: spearman(xs, ys)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0];
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 100.0), 3.0);
        assert!((percentile_sorted(&s, 33.4) - 1.668).abs() < 1e-12);
        assert_eq!(percentile_sorted(&s, 50.0), 2.0);
    }

    #[test]
    fn band_edge_cases() {
        assert_eq!(
            band_mask(&[1.0, 2.0, 3.0], 33.4, 66.6).unwrap(),
            [false, true, false]
        );
        let full = band_mask(&[4.0, 1.0, 3.0, 2.0], 0.0, 100.0).unwrap();
        assert_eq!(full, [false, false, true, true]);
        assert!(band_mask(&[], 0.0, 100.0).is_err());
        assert!(band_mask(&[1.0], 50.0, 50.0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let c = correlations(&xs, &xs).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-15 && (c.spearman - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -2.0 * x).collect();
        let c = correlations(&xs, &neg).unwrap();
        assert!((c.pearson + 1.0).abs() < 1e-15 && (c.spearman + 1.0).abs() < 1e-15);
        let cube: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        let c = correlations(&xs, &cube).unwrap();
        assert!((c.spearman - 1.0).abs() < 1e-15);
        assert!(c.pearson < 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateVariance)
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn correlations_symmetric(xs in prop::collection::vec(-1e3f64..1e3, 3..40), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.3 + ((i as u64 * 7919 + seed) % 101) as f64).collect();
            if let (Ok(a), Ok(b)) = (correlations(&xs, &ys), correlations(&ys, &xs)) {
                prop_assert!((a.pearson - b.pearson).abs() < 1e-12);
                prop_assert!((a.spearman - b.spearman).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a.pearson));
            }
        }

        #[test]
        fn spearman_monotone_invariant(xs in prop::collection::vec(-5f64..5.0, 3..30), ys in prop::collection::vec(-5f64..5.0, 30)) {
            let ys = &ys[..xs.len()];
            let tx: Vec<f64> = xs.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            if let (Ok(a), Ok(b)) = (spearman(&xs, ys), spearman(&tx, ys)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn band_count_bounds(n in 5usize..400, p in 0.0f64..60.0, w in 1.0f64..40.0) {
            let q = (p + w).min(100.0);
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 + 0.5).collect();
            let count = band_mask(&scores, p, q).unwrap().iter().filter(|&&b| b).count() as f64;
            let expect = n as f64 * (q - p) / 100.0;
            prop_assert!(count >= expect.floor() - 2.0 && count <= expect.ceil() + 2.0);
        }

        #[test]
        fn widening_never_deselects(scores in prop::collection::vec(-10f64..10.0, 1..100), lo in 10.0f64..40.0, hi in 60.0f64..90.0, d in 0.0f64..10.0) {
            let narrow = band_mask(&scores, lo, hi).unwrap();
            let wide = band_mask(&scores, lo - d, hi + d).unwrap();
            for (n, w) in narrow.iter().zip(&wide) {
                prop_assert!(!n || *w);
            }
        }
    }
}
