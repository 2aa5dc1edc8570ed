use serde::{Deserialize, Serialize};

use super::SweepError;

/// Shape of a best-validation-loss-versus-depth curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegimeLabel {
    /// Bigger models hurt.
    Classical,
    /// Bigger hurts, then helps.
    Canonical,
    /// Bigger is better.
    Monotonic,
    /// Small is already enough.
    Saturated,
    /// Too few depths to tell; only emitted by reports, never by
    /// [`classify_regime`].
    Indeterminate,
}

impl RegimeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::Classical => "CLASSICAL",
            RegimeLabel::Canonical => "CANONICAL",
            RegimeLabel::Monotonic => "MONOTONIC",
            RegimeLabel::Saturated => "SATURATED",
            RegimeLabel::Indeterminate => "INDETERMINATE",
        }
    }
}

impl std::fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_SAT_THRESHOLD: f64 = 0.05;

/// Labels a loss-versus-depth curve. Rules apply in order, each with noise
/// tolerance `τ = max(stderr)`:
///
/// 1. relative range below `sat_threshold` → saturated;
/// 2. every step rises by at most `τ` → monotonic;
/// 3. after the minimum of the first descending run, the curve rises above
///    `min + τ` and later falls back below it → canonical;
/// 4. otherwise classical.
pub fn classify_regime(
    best_val: &[f64],
    stderr: &[f64],
    sat_threshold: f64,
) -> Result<RegimeLabel, SweepError> {
    let v = best_val;
    if v.len() < 3 {
        return Err(SweepError::TooFewPoints(v.len()));
    }
    if stderr.len() != v.len() {
        return Err(SweepError::LengthMismatch(v.len(), stderr.len()));
    }
    if v.iter().chain(stderr).any(|x| !x.is_finite()) {
        return Err(SweepError::NonFinite);
    }
    let tau = stderr.iter().fold(0.0f64, |a, &b| a.max(b));
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if (max - min) / min < sat_threshold {
        return Ok(RegimeLabel::Saturated);
    }
    if v.windows(2).all(|w| w[1] <= w[0] + tau) {
        return Ok(RegimeLabel::Monotonic);
    }
    let mut end = 0;
    while end + 1 < v.len() && v[end + 1] <= v[end] + tau {
        end += 1;
    }
    let m = (0..=end)
        .min_by(|&a, &b| v[a].total_cmp(&v[b]))
        .unwrap_or(0);
    let floor = v[m] + tau;
    let mut risen = false;
    for &x in &v[m + 1..] {
        if x > floor {
            risen = true;
        } else if risen && x < floor {
            return Ok(RegimeLabel::Canonical);
        }
    }
    Ok(RegimeLabel::Classical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(v: &[f64]) -> RegimeLabel {
        classify_regime(v, &vec![0.0; v.len()], DEFAULT_SAT_THRESHOLD).unwrap()
    }

    #[test]
    fn fixture_curves() {
        assert_eq!(label(&[3.0, 2.0, 1.0]), RegimeLabel::Monotonic);
        assert_eq!(label(&[2.0, 1.0, 3.0, 4.0]), RegimeLabel::Classical);
        assert_eq!(label(&[3.0, 2.0, 4.0, 1.0]), RegimeLabel::Canonical);
        assert_eq!(label(&[1.00, 1.01, 1.02]), RegimeLabel::Saturated);
    }

    #[test]
    fn too_short_is_error() {
        assert!(matches!(
            classify_regime(&[1.0, 2.0], &[0.0, 0.0], 0.05),
            Err(SweepError::TooFewPoints(2))
        ));
    }

    #[test]
    fn tolerance_absorbs_small_rises() {
        // a 0.05 bump is noise when stderr is 0.1
        let v = [3.0, 2.0, 2.05, 1.0];
        assert_eq!(label(&v), RegimeLabel::Canonical);
        let s = [0.1; 4];
        assert_eq!(classify_regime(&v, &s, 0.05).unwrap(), RegimeLabel::Monotonic);
    }

    #[test]
    fn label_serializes_upper_case() {
        let j = serde_json::to_string(&RegimeLabel::Canonical).unwrap();
        assert_eq!(j, "\"CANONICAL\"");
    }

    proptest! {
        #[test]
        fn scale_invariant(
            v in proptest::collection::vec(0.1f64..10.0, 3..8),
            s in 0.0f64..0.5,
            k in 0.01f64..100.0,
        ) {
            let se = vec![s; v.len()];
            let a = classify_regime(&v, &se, 0.05).unwrap();
            let vk: Vec<f64> = v.iter().map(|x| x * k).collect();
            let sk: Vec<f64> = se.iter().map(|x| x * k).collect();
            let b = classify_regime(&vk, &sk, 0.05).unwrap();
            // scaling can flip comparisons only at exact ties of floating rounding
            let c = classify_regime(&vk, &vec![0.0; v.len()], 0.05).unwrap();
            let d = classify_regime(&v, &vec![0.0; v.len()], 0.05).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(c, d);
        }
    }
}
