//! Rating-based exposure propensities and inverse-propensity weights.
//!
//! The propensity of a cell depends only on its rating: high ratings
//! (at or above a threshold) are exposed with probability `k`, and each
//! rating step below the threshold multiplies that by `alpha`:
//!
//! ```text
//! p(y) = k * alpha^max(0, threshold - y)
//! ```
//!
//! `k` is solved in closed form so that the mean propensity over the full
//! user-item grid equals a target marginal exposure rate, with unobserved
//! cells imputed the observed marginal rating distribution: the grid mean
//! is then `k * E[alpha^max(0, threshold - y)]` under the empirical rating
//! distribution, so `k = target / E[...]`.

use crate::data::{Entry, SparseInteractions};
use crate::error::{Error, Result};

/// Propensity-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityConfig {
    /// Per-rating-step attenuation below the threshold.
    pub alpha: f64,
    /// Desired mean propensity over the full grid.
    pub target_mean: f64,
    /// Ratings at or above this get the base propensity `k`.
    pub high_threshold: f64,
    /// Propensities are clamped to `(floor, 1]` before inversion.
    pub floor: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            target_mean: 0.05,
            high_threshold: 4.0,
            floor: 1e-4,
        }
    }
}

/// Fitted propensity model.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    cfg: PropensityConfig,
    /// Base propensity of a high rating.
    k: f64,
    /// Mean of `alpha^max(0, threshold - y)` over the observed ratings.
    mean_attenuation: f64,
}

impl PropensityModel {
    /// Base propensity assigned to ratings at or above the threshold.
    #[must_use]
    pub fn k(&self) -> f64 {
        self.k
    }

    fn attenuation(&self, rating: f64) -> f64 {
        let steps = (self.cfg.high_threshold - rating).max(0.0);
        self.cfg.alpha.powf(steps)
    }

    /// Propensity for a rating, clamped to `(floor, 1]`.
    #[must_use]
    pub fn propensity(&self, rating: f64) -> f64 {
        (self.k * self.attenuation(rating)).clamp(self.cfg.floor, 1.0)
    }

    /// Inverse-propensity weight for a rating.
    #[must_use]
    pub fn weight(&self, rating: f64) -> f64 {
        1.0 / self.propensity(rating)
    }

    /// Mean propensity over the full grid, with unobserved cells imputed
    /// the observed marginal rating distribution. Equals the configured
    /// target whenever no clamping was necessary.
    #[must_use]
    pub fn estimated_grid_mean(&self) -> f64 {
        self.k * self.mean_attenuation
    }
}

/// Estimates the propensity model from observed ratings.
pub fn fit_propensity(
    ratings: &SparseInteractions,
    cfg: &PropensityConfig,
) -> Result<PropensityModel> {
    if ratings.is_empty() {
        return Err(Error::invalid(
            "cannot fit a propensity model on an empty rating matrix",
        ));
    }
    if !(0.0 < cfg.alpha && cfg.alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "propensity alpha must lie in (0, 1], got {}",
            cfg.alpha
        )));
    }
    if !(0.0 < cfg.target_mean && cfg.target_mean <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "propensity target mean must lie in (0, 1], got {}",
            cfg.target_mean
        )));
    }

    let mut sum = 0.0;
    for e in ratings.entries() {
        let steps = (cfg.high_threshold - e.value).max(0.0);
        sum += cfg.alpha.powf(steps);
    }
    let mean_attenuation = sum / ratings.nnz() as f64;
    let mut k = cfg.target_mean / mean_attenuation;
    if k > 1.0 {
        log::warn!("solved base propensity {k} exceeds 1; clamping to 1");
        k = 1.0;
    }
    Ok(PropensityModel {
        cfg: cfg.clone(),
        k,
        mean_attenuation,
    })
}

/// Inverse-propensity weights for a batch of observed entries, aligned
/// with the input order.
#[must_use]
pub fn ipw_weights(model: &PropensityModel, entries: &[Entry]) -> Vec<f64> {
    entries.iter().map(|e| model.weight(e.value)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn matrix_of_ratings(values: &[f64]) -> SparseInteractions {
        let triplets = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (0u32, i as u32, v));
        SparseInteractions::from_triplets(1, values.len(), triplets).unwrap()
    }

    #[test]
    fn all_top_ratings_take_the_target_mean_directly() {
        let data = matrix_of_ratings(&[5.0; 20]);
        let model = fit_propensity(&data, &PropensityConfig::default()).unwrap();
        assert_relative_eq!(model.k(), 0.05, epsilon = 1e-15);
        assert_relative_eq!(model.propensity(5.0), 0.05, epsilon = 1e-15);
        assert_relative_eq!(model.weight(5.0), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn half_fives_half_ones_solve_matches_closed_form() {
        let mut values = vec![5.0; 10];
        values.extend(vec![1.0; 10]);
        let data = matrix_of_ratings(&values);
        let model = fit_propensity(&data, &PropensityConfig::default()).unwrap();
        // E[alpha^max(0, 4 - y)] = (1 + 0.25^3) / 2 = 65/128, so
        // k = 0.05 * 128 / 65.
        assert_relative_eq!(model.k(), 6.4 / 65.0, epsilon = 1e-12);
        assert_relative_eq!(model.k(), 0.098461538461538, epsilon = 1e-9);
    }

    #[test]
    fn grid_mean_hits_the_target_within_tolerance() {
        let values: Vec<f64> = (0..500).map(|i| f64::from(1 + (i * 7) % 5)).collect();
        let data = matrix_of_ratings(&values);
        let model = fit_propensity(&data, &PropensityConfig::default()).unwrap();
        assert!((model.estimated_grid_mean() - 0.05).abs() < 1e-6);
        // Recompute the mean independently from per-rating propensities.
        let mean: f64 =
            values.iter().map(|&v| model.propensity(v)).sum::<f64>() / values.len() as f64;
        assert!((mean - 0.05).abs() < 1e-6);
    }

    #[test]
    fn weights_match_elementwise_inversion() {
        let values: Vec<f64> = (0..1000).map(|i| f64::from(1 + (i * 13) % 5)).collect();
        let data = matrix_of_ratings(&values);
        let model = fit_propensity(&data, &PropensityConfig::default()).unwrap();
        let weights = ipw_weights(&model, data.entries());
        for (e, w) in data.entries().iter().zip(&weights) {
            let steps = (4.0 - e.value).max(0.0);
            let p = (model.k() * 0.25f64.powf(steps)).clamp(1e-4, 1.0);
            assert_relative_eq!(*w, 1.0 / p, epsilon = 1e-12);
            assert!(*w <= 1e4 + 1e-9);
        }
        // Ratings >= 4 share the base propensity.
        for e in data.entries() {
            if e.value >= 4.0 {
                assert_relative_eq!(model.propensity(e.value), model.k(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn oversized_solution_clamps_to_one() {
        let data = matrix_of_ratings(&[5.0; 5]);
        let cfg = PropensityConfig {
            target_mean: 1.0,
            ..PropensityConfig::default()
        };
        let model = fit_propensity(&data, &cfg).unwrap();
        assert_eq!(model.k(), 1.0);
        assert_eq!(model.propensity(5.0), 1.0);
        assert_eq!(model.weight(5.0), 1.0);
    }

    #[test]
    fn empty_ratings_are_rejected() {
        let data = SparseInteractions::empty(3, 3);
        assert!(fit_propensity(&data, &PropensityConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn propensity_is_monotone_in_rating(
            ratings in proptest::collection::vec(1.0f64..5.0, 2..30),
            lo in 1.0f64..5.0,
            hi in 1.0f64..5.0,
        ) {
            let data = matrix_of_ratings(&ratings);
            let model = fit_propensity(&data, &PropensityConfig::default()).unwrap();
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            prop_assert!(model.propensity(lo) <= model.propensity(hi) + 1e-15);
        }
    }
}
