//! Sparse user-item interaction matrix.
//!
//! Interactions are stored as sorted triplets with both a row (CSR-style)
//! and a column (CSC-style) index on top, so user-major and item-major
//! passes are both cheap. The matrix is immutable once built; transforms
//! such as [`SparseInteractions::binarized`] return a new matrix.

use crate::error::{Error, Result};

/// One observed interaction: internal 0-based indices plus a value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

/// Immutable sparse matrix of user-item interactions.
///
/// `n_users` and `n_items` describe the index universe, which may be larger
/// than the set of users/items that actually have entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInteractions {
    n_users: usize,
    n_items: usize,
    /// Sorted by (user, item).
    entries: Vec<Entry>,
    /// `row_ptr[u]..row_ptr[u + 1]` is user `u`'s slice of `entries`.
    row_ptr: Vec<usize>,
    /// Indices into `entries`, sorted by (item, user).
    col_order: Vec<u32>,
    /// `col_ptr[i]..col_ptr[i + 1]` is item `i`'s slice of `col_order`.
    col_ptr: Vec<usize>,
}

impl SparseInteractions {
    /// Builds a matrix from `(user, item, value)` triplets.
    ///
    /// Triplets may arrive in any order. Out-of-range indices, non-finite
    /// values, and duplicate `(user, item)` pairs are errors.
    pub fn from_triplets(
        n_users: usize,
        n_items: usize,
        triplets: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (user, item, value) in triplets {
            if user as usize >= n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: user as usize,
                    bound: n_users,
                });
            }
            if item as usize >= n_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: item as usize,
                    bound: n_items,
                });
            }
            if !value.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value for user {user}, item {item}"
                )));
            }
            entries.push(Entry { user, item, value });
        }
        entries.sort_by_key(|e| (e.user, e.item));
        for pair in entries.windows(2) {
            if pair[0].user == pair[1].user && pair[0].item == pair[1].item {
                return Err(Error::DuplicateEntry {
                    user: pair[0].user.to_string(),
                    item: pair[0].item.to_string(),
                });
            }
        }
        Ok(Self::from_sorted_unique(n_users, n_items, entries))
    }

    /// Matrix with no entries.
    #[must_use]
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self::from_sorted_unique(n_users, n_items, Vec::new())
    }

    fn from_sorted_unique(n_users: usize, n_items: usize, entries: Vec<Entry>) -> Self {
        let mut row_ptr = vec![0usize; n_users + 1];
        for e in &entries {
            row_ptr[e.user as usize + 1] += 1;
        }
        for u in 0..n_users {
            row_ptr[u + 1] += row_ptr[u];
        }

        let mut col_order: Vec<u32> = (0..entries.len() as u32).collect();
        col_order.sort_by_key(|&idx| {
            let e = &entries[idx as usize];
            (e.item, e.user)
        });
        let mut col_ptr = vec![0usize; n_items + 1];
        for e in &entries {
            col_ptr[e.item as usize + 1] += 1;
        }
        for i in 0..n_items {
            col_ptr[i + 1] += col_ptr[i];
        }

        Self {
            n_users,
            n_items,
            entries,
            row_ptr,
            col_order,
            col_ptr,
        }
    }

    #[must_use]
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    #[must_use]
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Number of stored interactions.
    #[must_use]
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in (user, item) order.
    #[must_use]
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// User `u`'s entries, sorted by item.
    #[must_use]
    #[inline]
    pub fn row(&self, u: usize) -> &[Entry] {
        &self.entries[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    /// Item `i`'s entries, sorted by user.
    pub fn col(&self, i: usize) -> impl Iterator<Item = &Entry> {
        self.col_order[self.col_ptr[i]..self.col_ptr[i + 1]]
            .iter()
            .map(move |&idx| &self.entries[idx as usize])
    }

    /// Value at `(u, i)` if an entry is stored there.
    #[must_use]
    pub fn get(&self, u: u32, i: u32) -> Option<f64> {
        let row = self.row(u as usize);
        row.binary_search_by_key(&i, |e| e.item)
            .ok()
            .map(|pos| row[pos].value)
    }

    #[must_use]
    pub fn contains(&self, u: u32, i: u32) -> bool {
        self.get(u, i).is_some()
    }

    /// Same sparsity pattern with every stored value replaced by 1.
    ///
    /// Idempotent: binarizing a binarized matrix is a no-op.
    #[must_use]
    pub fn binarized(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry { value: 1.0, ..*e })
            .collect();
        Self {
            entries,
            ..self.clone()
        }
    }

    /// Verifies that every stored value is a non-negative integer, as
    /// required for count likelihoods.
    pub fn require_counts(&self) -> Result<()> {
        for e in &self.entries {
            if e.value < 0.0 || e.value.fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "value {} for user {}, item {} is not a non-negative integer count",
                    e.value, e.user, e.item
                )));
            }
        }
        Ok(())
    }

    /// Copy of this matrix with the user universe enlarged to `n_users`.
    pub fn expand_users(&self, n_users: usize) -> Result<Self> {
        if n_users < self.n_users {
            return Err(Error::invalid(format!(
                "cannot shrink user universe from {} to {}",
                self.n_users, n_users
            )));
        }
        Ok(Self::from_sorted_unique(
            n_users,
            self.n_items,
            self.entries.clone(),
        ))
    }

    /// Smallest and largest stored value, if any entries exist.
    #[must_use]
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.entries.iter().fold(None, |acc, e| match acc {
            None => Some((e.value, e.value)),
            Some((lo, hi)) => Some((lo.min(e.value), hi.max(e.value))),
        })
    }
}
