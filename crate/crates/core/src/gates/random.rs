use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_guard, GateFamily, GateMask};
use crate::error::{Error, Result};
use crate::model::LayerSizes;

/// Keeps each gate independently with probability `p`.
///
/// Every gate draws `u ~ U(0,1)` and survives when `u < p`; an emptied layer
/// keeps its smallest draw.
pub fn random_gates(sizes: &LayerSizes, p: f64, seed: u64) -> Result<GateMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("bernoulli_p", format!("{p} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = GateMask::default();
    for family in [GateFamily::Attention, GateFamily::FeedForward] {
        let mut values = Vec::new();
        let mut scores = Vec::new();
        for &n in family.sizes(sizes) {
            let draws: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            values.push(draws.iter().map(|&u| if u < p { 1.0 } else { 0.0 }).collect());
            scores.push(draws.iter().map(|&u| (1.0 - u) as f32).collect::<Vec<f32>>());
        }
        let forced = apply_guard(family, &mut values, &scores);
        *mask.family_mut(family) = values;
        mask.forced.extend(forced);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> LayerSizes {
        LayerSizes {
            heads: vec![4, 4, 4],
            ff: vec![16, 16, 16],
        }
    }

    #[test]
    fn extremes() {
        let all = random_gates(&sizes(), 1.0, 3).unwrap();
        assert!(all.is_all_ones());
        assert!(all.forced.is_empty());

        let none = random_gates(&sizes(), 0.0, 3).unwrap();
        let kept = none.kept_sizes();
        assert_eq!(kept.heads, vec![1, 1, 1]);
        assert_eq!(kept.ff, vec![1, 1, 1]);
        assert_eq!(none.forced.len(), 6);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(matches!(random_gates(&sizes(), 1.5, 0), Err(Error::Config { .. })));
        assert!(random_gates(&sizes(), -0.1, 0).is_err());
    }

    #[test]
    fn half_keeps_about_half() {
        // 10,000 gates: binomial sd is 0.005, so ±0.02 is a 4-sigma band.
        let s = LayerSizes {
            heads: vec![100; 10],
            ff: vec![900; 10],
        };
        let m = random_gates(&s, 0.5, 11).unwrap();
        let total: usize = s.heads.iter().chain(&s.ff).sum();
        let kept: usize = m.kept_sizes().heads.iter().chain(&m.kept_sizes().ff).sum();
        assert_eq!(total, 10_000);
        let frac = kept as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn deterministic() {
        assert_eq!(random_gates(&sizes(), 0.3, 9).unwrap(), random_gates(&sizes(), 0.3, 9).unwrap());
    }
}
