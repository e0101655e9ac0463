//! Rating-prediction and ranking metrics.
//!
//! Ranking metrics operate per user on that user's evaluation items only:
//! each user's items are ordered by predicted score, a per-user score is
//! computed against the true ratings, and scores are averaged over users.
//! Accuracy metrics (MSE/MAE) pool prediction-rating pairs, with a per-item
//! variant that first averages within each item and then across items so
//! rarely rated items carry the same weight as popular ones.

use std::collections::HashMap;

use crate::data::SparseInteractions;

/// How a true rating is turned into a ranking gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainScheme {
    /// `2^rating - 1`, the common graded-gain convention. Default.
    ExpMinusOne,
    /// `2^(rating - 1)`, an alternative kept for comparability with
    /// results reported under that convention.
    LiteralPaper,
}

impl GainScheme {
    #[must_use]
    #[inline]
    pub fn gain(self, rating: f64) -> f64 {
        match self {
            GainScheme::ExpMinusOne => rating.exp2() - 1.0,
            GainScheme::LiteralPaper => (rating - 1.0).exp2(),
        }
    }
}

/// Sorts `(item, score)` pairs into ranking order: descending score, ties
/// broken by ascending item index. The order is total, so ranking is
/// deterministic and invariant to the input permutation.
pub fn sort_into_ranking_order<T>(items: &mut [(u32, f64, T)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// One user's evaluation items in ranking order.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub user: u32,
    /// `(item, predicted score, true rating)`, descending by score with
    /// ties broken by ascending item index.
    items: Vec<(u32, f64, f64)>,
}

impl RankedList {
    /// Builds a ranked list from unordered `(item, score, rating)` triples.
    #[must_use]
    pub fn from_scored(user: u32, mut items: Vec<(u32, f64, f64)>) -> Self {
        sort_into_ranking_order(&mut items);
        Self { user, items }
    }

    #[must_use]
    pub fn items(&self) -> &[(u32, f64, f64)] {
        &self.items
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.items.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn dcg(&self, gain: GainScheme) -> f64 {
        self.items
            .iter()
            .enumerate()
            .map(|(pos, &(_, _, rating))| gain.gain(rating) / (pos as f64 + 2.0).log2())
            .sum()
    }

    fn ideal_dcg(&self, gain: GainScheme) -> f64 {
        let mut gains: Vec<f64> = self.items.iter().map(|&(_, _, r)| gain.gain(r)).collect();
        gains.sort_by(|a, b| b.total_cmp(a));
        gains
            .iter()
            .enumerate()
            .map(|(pos, g)| g / (pos as f64 + 2.0).log2())
            .sum()
    }

    fn ndcg(&self, gain: GainScheme) -> f64 {
        let ideal = self.ideal_dcg(gain);
        if ideal <= 0.0 {
            // Every gain is zero: any order is ideal.
            1.0
        } else {
            self.dcg(gain) / ideal
        }
    }
}

/// Mean per-user NDCG over the given ranked lists.
///
/// Users whose gains are all zero contribute 1.0 (any order of worthless
/// items is ideal); empty lists are skipped.
#[must_use]
pub fn ndcg(lists: &[RankedList], gain: GainScheme) -> f64 {
    let mut total = 0.0;
    let mut users = 0usize;
    let mut zero_gain = 0usize;
    for list in lists {
        if list.is_empty() {
            continue;
        }
        if list.ideal_dcg(gain) <= 0.0 {
            zero_gain += 1;
        }
        total += list.ndcg(gain);
        users += 1;
    }
    if zero_gain > 0 {
        log::warn!("{zero_gain} users had all-zero gains; scored as 1.0");
    }
    if users == 0 {
        f64::NAN
    } else {
        total / users as f64
    }
}

/// Mean per-user recall at rank `k`.
///
/// An item is relevant when its true rating is at least `relevance_threshold`.
/// The per-user denominator is `min(k, number of relevant items)`, so a
/// short relevant set cannot cap the score below 1. Users with no relevant
/// items are skipped.
#[must_use]
pub fn recall_at_k(lists: &[RankedList], k: usize, relevance_threshold: f64) -> f64 {
    assert!(k >= 1, "recall requires k >= 1");
    let mut total = 0.0;
    let mut users = 0usize;
    let mut skipped = 0usize;
    for list in lists {
        let relevant = list
            .items
            .iter()
            .filter(|&&(_, _, r)| r >= relevance_threshold)
            .count();
        if relevant == 0 {
            if !list.is_empty() {
                skipped += 1;
            }
            continue;
        }
        let hits = list
            .items
            .iter()
            .take(k)
            .filter(|&&(_, _, r)| r >= relevance_threshold)
            .count();
        total += hits as f64 / k.min(relevant) as f64;
        users += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} users had no relevant items and were skipped in recall");
    }
    if users == 0 {
        f64::NAN
    } else {
        total / users as f64
    }
}

/// Mean squared error over aligned prediction/actual slices.
#[must_use]
pub fn mse(predictions: &[f64], actuals: &[f64]) -> f64 {
    assert_eq!(predictions.len(), actuals.len());
    let n = predictions.len();
    let sum: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    sum / n as f64
}

/// Mean absolute error over aligned prediction/actual slices.
#[must_use]
pub fn mae(predictions: &[f64], actuals: &[f64]) -> f64 {
    assert_eq!(predictions.len(), actuals.len());
    let n = predictions.len();
    let sum: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).abs())
        .sum();
    sum / n as f64
}

/// Item-averaged accuracy: per-item MSE/MAE, then an unweighted mean over
/// the items present in `test`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerItemAccuracy {
    pub mse: f64,
    pub mae: f64,
    /// Items that contributed at least one rating.
    pub n_items: usize,
}

/// Computes [`PerItemAccuracy`] for `test` under a prediction accessor.
#[must_use]
pub fn per_item_accuracy(
    test: &SparseInteractions,
    mut predict: impl FnMut(u32, u32) -> f64,
) -> PerItemAccuracy {
    // (squared-error sum, absolute-error sum, count) keyed by item.
    let mut by_item: HashMap<u32, (f64, f64, usize)> = HashMap::new();
    for e in test.entries() {
        let err = predict(e.user, e.item) - e.value;
        let slot = by_item.entry(e.item).or_insert((0.0, 0.0, 0));
        slot.0 += err * err;
        slot.1 += err.abs();
        slot.2 += 1;
    }
    let n_items = by_item.len();
    if n_items == 0 {
        return PerItemAccuracy {
            mse: f64::NAN,
            mae: f64::NAN,
            n_items: 0,
        };
    }
    // Iterate items in index order for a reproducible summation order.
    let mut items: Vec<u32> = by_item.keys().copied().collect();
    items.sort_unstable();
    let (mut mse_sum, mut mae_sum) = (0.0, 0.0);
    for i in items {
        let (sq, ab, n) = by_item[&i];
        mse_sum += sq / n as f64;
        mae_sum += ab / n as f64;
    }
    PerItemAccuracy {
        mse: mse_sum / n_items as f64,
        mae: mae_sum / n_items as f64,
        n_items,
    }
}
