//! Deterministic train/validation/test splitting.
//!
//! Entries are assigned to folds independently and uniformly with a seeded
//! generator, so a fixed `(data, spec)` pair always yields the same folds.
//! Strong generalization removes whole users from training: each held-out
//! user's entries are divided into a fold-in portion (revealed to the model
//! at prediction time) and an evaluation portion.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::sparse::SparseInteractions;
use crate::error::{Error, Result};

/// Which folds a split produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// 80% train / 20% validation; empty test fold.
    TrainVal8020,
    /// 60% train / 20% validation / 20% test.
    TrainValTest602020,
    /// 80% train / 20% validation; the test fold is attached separately
    /// from a randomized-exposure set via [`attach_random_test`].
    ProvidedRandomTest,
}

/// Whether the test fold came from the observational process or from a
/// randomized-exposure collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Regular,
    Randomized,
}

/// Split parameters.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    /// Fraction of the user universe held out entirely from training.
    /// 0 disables strong generalization.
    pub strong_generalization_holdout: f64,
    /// Per held-out user, the fraction of entries revealed for fold-in.
    pub fold_in_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::TrainVal8020,
            seed: 0,
            strong_generalization_holdout: 0.0,
            fold_in_fraction: 0.5,
        }
    }
}

/// A dataset divided into folds, ready for fitting and evaluation.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: SparseInteractions,
    pub validation: SparseInteractions,
    pub test: SparseInteractions,
    /// Held-out users' revealed entries (empty without strong generalization).
    pub fold_in: SparseInteractions,
    pub test_kind: TestKind,
    /// Inclusive rating bounds, derived from the data unless overridden.
    pub rating_scale: (f64, f64),
    /// Users absent from train/validation under strong generalization.
    pub holdout_users: Vec<u32>,
    /// Held-out-user entries that belong to no fold (only possible with a
    /// provided randomized test, where evaluation entries come from the
    /// randomized set instead).
    pub dropped_fold_in_remainder: usize,
    /// Test users that never appear in the base set (randomized test only).
    pub new_test_only_users: Vec<u32>,
}

/// Splits `data` into folds according to `spec`.
///
/// Assignment is per entry, uniform, and deterministic under `spec.seed`.
/// With `strong_generalization_holdout > 0`, `floor(fraction * n_users)`
/// users (among those with at least one entry) are removed from the
/// train/validation assignment entirely and routed to fold-in/test instead.
pub fn split(data: &SparseInteractions, spec: &SplitSpec) -> Result<DatasetBundle> {
    for (name, frac) in [
        ("strong_generalization_holdout", spec.strong_generalization_holdout),
        ("fold_in_fraction", spec.fold_in_fraction),
    ] {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidConfig(format!(
                "{name} must lie in [0, 1], got {frac}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Select held-out users first so the per-entry stream below is stable.
    let holdout: Vec<u32> = if spec.strong_generalization_holdout > 0.0 {
        let candidates: Vec<u32> = (0..data.n_users() as u32)
            .filter(|&u| !data.row(u as usize).is_empty())
            .collect();
        let want = (spec.strong_generalization_holdout * data.n_users() as f64).floor() as usize;
        let take = want.min(candidates.len());
        let mut chosen: Vec<u32> = candidates.choose_multiple(&mut rng, take).copied().collect();
        chosen.sort_unstable();
        chosen
    } else {
        Vec::new()
    };
    let holdout_set: HashSet<u32> = holdout.iter().copied().collect();

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut fold_in = Vec::new();
    let mut dropped = 0usize;

    for e in data.entries() {
        let draw: f64 = rng.gen();
        let triplet = (e.user, e.item, e.value);
        if holdout_set.contains(&e.user) {
            if draw < spec.fold_in_fraction {
                fold_in.push(triplet);
            } else if spec.mode == SplitMode::ProvidedRandomTest {
                // Evaluation entries for held-out users come from the
                // randomized test set; the remainder joins no fold.
                dropped += 1;
            } else {
                test.push(triplet);
            }
            continue;
        }
        match spec.mode {
            SplitMode::TrainVal8020 | SplitMode::ProvidedRandomTest => {
                if draw < 0.8 {
                    train.push(triplet);
                } else {
                    validation.push(triplet);
                }
            }
            SplitMode::TrainValTest602020 => {
                if draw < 0.6 {
                    train.push(triplet);
                } else if draw < 0.8 {
                    validation.push(triplet);
                } else {
                    test.push(triplet);
                }
            }
        }
    }

    let (n_users, n_items) = (data.n_users(), data.n_items());
    let build = |t: Vec<(u32, u32, f64)>| SparseInteractions::from_triplets(n_users, n_items, t);
    let bundle = DatasetBundle {
        train: build(train)?,
        validation: build(validation)?,
        test: build(test)?,
        fold_in: build(fold_in)?,
        test_kind: TestKind::Regular,
        rating_scale: data.value_range().unwrap_or((1.0, 5.0)),
        holdout_users: holdout,
        dropped_fold_in_remainder: dropped,
        new_test_only_users: Vec::new(),
    };
    for (name, fold) in [
        ("train", &bundle.train),
        ("validation", &bundle.validation),
    ] {
        if fold.is_empty() && !data.is_empty() {
            log::warn!("split produced an empty {name} fold");
        }
    }
    Ok(bundle)
}

/// Pairs an observational training matrix with a randomized-exposure test
/// matrix over the same item universe.
///
/// The matrices must be disjoint: a `(user, item)` pair present in both is
/// an error. Test entries for users with no training interactions are
/// allowed; those users are recorded in `new_test_only_users`.
pub fn attach_random_test(
    train: &SparseInteractions,
    test: &SparseInteractions,
) -> Result<DatasetBundle> {
    if train.n_items() != test.n_items() {
        return Err(Error::invalid(format!(
            "item universes differ: train has {}, test has {}",
            train.n_items(),
            test.n_items()
        )));
    }
    let n_users = train.n_users().max(test.n_users());
    let train = train.expand_users(n_users)?;
    let test = test.expand_users(n_users)?;
    for e in test.entries() {
        if train.contains(e.user, e.item) {
            return Err(Error::OverlappingEntry {
                user: e.user,
                item: e.item,
            });
        }
    }
    let mut new_users: Vec<u32> = (0..n_users as u32)
        .filter(|&u| train.row(u as usize).is_empty() && !test.row(u as usize).is_empty())
        .collect();
    new_users.sort_unstable();
    if !new_users.is_empty() {
        log::warn!(
            "{} test users have no training interactions",
            new_users.len()
        );
    }
    let n_items = test.n_items();
    let rating_scale = train.value_range().unwrap_or((1.0, 5.0));
    Ok(DatasetBundle {
        train,
        validation: SparseInteractions::empty(n_users, n_items),
        test,
        fold_in: SparseInteractions::empty(n_users, n_items),
        test_kind: TestKind::Randomized,
        rating_scale,
        holdout_users: Vec::new(),
        dropped_fold_in_remainder: 0,
        new_test_only_users: new_users,
    })
}
