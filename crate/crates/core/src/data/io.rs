//! Delimited-file loading and plain-text writers for datasets and splits.
//!
//! Rating files are line-oriented: one interaction per line, fields split by
//! a single-character delimiter. Column positions are configurable so the
//! common public formats (tab-separated `user item rating timestamp`,
//! comma-separated triplets, ...) all load without preprocessing. Raw ids
//! are remapped to contiguous 0-based internal indices; the original ids are
//! kept alongside the matrix so outputs can be written in the caller's id
//! space.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::sparse::SparseInteractions;
use crate::data::split::DatasetBundle;
use crate::error::{Error, Result};

/// How to interpret a delimited rating file.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Field separator, e.g. '\t' or ','.
    pub delimiter: char,
    /// 0-based positions of the user, item, and rating fields.
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: usize,
    /// Smallest legal raw id (0 or 1). Ids below this are errors.
    pub index_base: i64,
    /// Number of leading lines to skip.
    pub header_rows: usize,
    /// Inclusive rating bounds; values outside are errors when set.
    pub rating_scale: Option<(f64, f64)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            rating_col: 2,
            index_base: 0,
            header_rows: 0,
            rating_scale: None,
        }
    }
}

/// A loaded interaction matrix plus the raw-id dictionaries.
///
/// `user_ids[u]` is the raw id of internal user `u`; likewise for items.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub matrix: SparseInteractions,
    pub user_ids: Vec<i64>,
    pub item_ids: Vec<i64>,
    user_index: HashMap<i64, u32>,
    item_index: HashMap<i64, u32>,
}

impl Dataset {
    /// Wraps a matrix whose indices are already their own ids.
    #[must_use]
    pub fn from_matrix(matrix: SparseInteractions) -> Self {
        let user_ids: Vec<i64> = (0..matrix.n_users() as i64).collect();
        let item_ids: Vec<i64> = (0..matrix.n_items() as i64).collect();
        let user_index = user_ids.iter().map(|&id| (id, id as u32)).collect();
        let item_index = item_ids.iter().map(|&id| (id, id as u32)).collect();
        Self {
            matrix,
            user_ids,
            item_ids,
            user_index,
            item_index,
        }
    }

    /// Internal index of a raw user id, if seen.
    #[must_use]
    pub fn user_index(&self, raw: i64) -> Option<u32> {
        self.user_index.get(&raw).copied()
    }

    /// Internal index of a raw item id, if seen.
    #[must_use]
    pub fn item_index(&self, raw: i64) -> Option<u32> {
        self.item_index.get(&raw).copied()
    }

    /// Re-indexes `other` into this dataset's id universe.
    ///
    /// Raw user ids unseen here are appended to the universe (the returned
    /// list holds their new internal indices); unseen item ids are errors,
    /// since nothing can be predicted for an item with no training signal.
    /// On success this dataset's matrix is widened to the merged user
    /// universe and the remapped copy of `other` is returned.
    pub fn align_other(&mut self, other: &Dataset) -> Result<(SparseInteractions, Vec<u32>)> {
        let mut new_users = Vec::new();
        let mut triplets = Vec::with_capacity(other.matrix.nnz());
        for e in other.matrix.entries() {
            let raw_user = other.user_ids[e.user as usize];
            let raw_item = other.item_ids[e.item as usize];
            let item = self.item_index(raw_item).ok_or_else(|| {
                Error::invalid(format!(
                    "item id {raw_item} appears in the attached set but not in the base set"
                ))
            })?;
            let user = match self.user_index(raw_user) {
                Some(u) => u,
                None => {
                    let u = self.user_ids.len() as u32;
                    self.user_ids.push(raw_user);
                    self.user_index.insert(raw_user, u);
                    new_users.push(u);
                    u
                }
            };
            triplets.push((user, item, e.value));
        }
        let n_users = self.user_ids.len();
        if n_users > self.matrix.n_users() {
            self.matrix = self.matrix.expand_users(n_users)?;
        }
        let aligned = SparseInteractions::from_triplets(n_users, self.matrix.n_items(), triplets)?;
        Ok((aligned, new_users))
    }
}

/// Loads a delimited rating file into a [`Dataset`].
///
/// Internal indices are assigned in order of first appearance. Errors carry
/// the offending 1-based line number; duplicate `(user, item)` pairs are
/// reported with their raw ids.
pub fn load_delimited(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);

    let max_col = opts.user_col.max(opts.item_col).max(opts.rating_col);
    let mut user_ids: Vec<i64> = Vec::new();
    let mut item_ids: Vec<i64> = Vec::new();
    let mut user_index: HashMap<i64, u32> = HashMap::new();
    let mut item_index: HashMap<i64, u32> = HashMap::new();
    let mut seen: HashMap<(u32, u32), ()> = HashMap::new();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line_no <= opts.header_rows || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(opts.delimiter).collect();
        if fields.len() <= max_col {
            return Err(Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!(
                    "expected at least {} fields, found {}",
                    max_col + 1,
                    fields.len()
                ),
            });
        }
        let parse_id = |col: usize, what: &str| -> Result<i64> {
            let raw = fields[col].trim();
            let id: i64 = raw.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("{what} id {raw:?} is not an integer"),
            })?;
            if id < opts.index_base {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: format!(
                        "{what} id {id} is below the declared index base {}",
                        opts.index_base
                    ),
                });
            }
            Ok(id)
        };
        let raw_user = parse_id(opts.user_col, "user")?;
        let raw_item = parse_id(opts.item_col, "item")?;
        let raw_rating = fields[opts.rating_col].trim();
        let rating: f64 = raw_rating.parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: line_no,
            message: format!("rating {raw_rating:?} is not a number"),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("rating {rating} is not finite"),
            });
        }
        if let Some((lo, hi)) = opts.rating_scale {
            if rating < lo || rating > hi {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: format!("rating {rating} outside declared scale [{lo}, {hi}]"),
                });
            }
        }

        let next_user = user_ids.len() as u32;
        let user = *user_index.entry(raw_user).or_insert_with(|| {
            user_ids.push(raw_user);
            next_user
        });
        let next_item = item_ids.len() as u32;
        let item = *item_index.entry(raw_item).or_insert_with(|| {
            item_ids.push(raw_item);
            next_item
        });
        if seen.insert((user, item), ()).is_some() {
            return Err(Error::DuplicateEntry {
                user: raw_user.to_string(),
                item: raw_item.to_string(),
            });
        }
        triplets.push((user, item, rating));
    }

    let matrix = SparseInteractions::from_triplets(user_ids.len(), item_ids.len(), triplets)?;
    Ok(Dataset {
        matrix,
        user_ids,
        item_ids,
        user_index,
        item_index,
    })
}

/// Writes `user,item,value` triplets, one per line, with a header.
///
/// Ids are the raw ids when dictionaries are given, internal indices
/// otherwise.
pub fn write_triplets(
    path: impl AsRef<Path>,
    matrix: &SparseInteractions,
    ids: Option<(&[i64], &[i64])>,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out = String::from("user,item,value\n");
    for e in matrix.entries() {
        let (u, i) = match ids {
            Some((users, items)) => (users[e.user as usize], items[e.item as usize]),
            None => (i64::from(e.user), i64::from(e.item)),
        };
        out.push_str(&format!("{u},{i},{}\n", e.value));
    }
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

/// Writes a split manifest: one `fold,user_id,item_id,value` line per entry
/// across the train, validation, test, and fold-in folds.
pub fn write_split_manifest(
    path: impl AsRef<Path>,
    bundle: &DatasetBundle,
    ids: Option<(&[i64], &[i64])>,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = std::io::BufWriter::new(file);
    let folds = [
        ("train", &bundle.train),
        ("validation", &bundle.validation),
        ("test", &bundle.test),
        ("fold_in", &bundle.fold_in),
    ];
    writeln!(out, "fold,user_id,item_id,value").map_err(|e| Error::io(&display, e))?;
    for (name, matrix) in folds {
        for e in matrix.entries() {
            let (u, i) = match ids {
                Some((users, items)) => (users[e.user as usize], items[e.item as usize]),
                None => (i64::from(e.user), i64::from(e.item)),
            };
            writeln!(out, "{name},{u},{i},{}", e.value).map_err(|e| Error::io(&display, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&display, e))
}
