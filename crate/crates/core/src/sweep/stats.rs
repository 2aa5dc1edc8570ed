use super::SweepError;

/// Trailing α-trimmed moving mean. Windows are clipped at the series start;
/// each window of actual length `n` drops `floor(trim·n)` values from each
/// end of its sorted copy before averaging.
pub fn trimmed_mean_filter(
    series: &[f64],
    trim_fraction: f64,
    window: usize,
) -> Result<Vec<f64>, SweepError> {
    if series.is_empty() {
        return Err(SweepError::EmptySeries);
    }
    if window == 0 || !(0.0..0.5).contains(&trim_fraction) {
        return Err(SweepError::InvalidArgument(format!(
            "window {window}, trim {trim_fraction}"
        )));
    }
    let mut buf = Vec::with_capacity(window);
    Ok((0..series.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            buf.clear();
            buf.extend_from_slice(&series[start..=i]);
            buf.sort_by(f64::total_cmp);
            let drop = (trim_fraction * buf.len() as f64).floor() as usize;
            let kept = &buf[drop..buf.len() - drop];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect())
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, SweepError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SweepError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, SweepError> {
    if x.len() != y.len() {
        return Err(SweepError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(SweepError::TooFewPoints(x.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean; zero for a single sample.
pub fn std_error(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64;
    (var / x.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trimmed_window_example() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let out = trimmed_mean_filter(&s, 0.2, 10).unwrap();
        assert!((out[9] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn zero_trim_is_moving_average() {
        let s = [1.0, 3.0, 5.0, 7.0];
        let out = trimmed_mean_filter(&s, 0.0, 2).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_series_unchanged() {
        let s = [2.5; 17];
        assert_eq!(trimmed_mean_filter(&s, 0.2, 10).unwrap(), s.to_vec());
    }

    #[test]
    fn filter_errors() {
        assert!(matches!(trimmed_mean_filter(&[], 0.2, 10), Err(SweepError::EmptySeries)));
        assert!(trimmed_mean_filter(&[1.0], 0.5, 10).is_err());
        assert!(trimmed_mean_filter(&[1.0], 0.2, 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let r = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&x, &r).unwrap() + 1.0).abs() < 1e-12);
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((spearman_rho(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(SweepError::UndefinedCorrelation)
        ));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn std_error_two_points() {
        // sample sd of {1,3} is sqrt(2); se = sqrt(2)/sqrt(2) = 1
        assert!((std_error(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(std_error(&[4.0]), 0.0);
    }

    proptest! {
        #[test]
        fn filter_length_and_window_bounds(
            s in proptest::collection::vec(-50.0f64..50.0, 1..40),
            w in 1usize..12,
            trim in 0.0f64..0.49,
        ) {
            let out = trimmed_mean_filter(&s, trim, w).unwrap();
            prop_assert_eq!(out.len(), s.len());
            for i in 0..s.len() {
                let win = &s[(i + 1).saturating_sub(w)..=i];
                let lo = win.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[i] >= lo - 1e-9 && out[i] <= hi + 1e-9);
            }
        }

        #[test]
        fn spearman_in_unit_interval(
            xy in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Ok(r) = spearman_rho(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
