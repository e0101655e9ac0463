//! Interaction data: sparse storage, delimited loading, and fold splitting.

mod io;
mod sparse;
mod split;

pub use io::{load_delimited, write_split_manifest, write_triplets, Dataset, LoadOptions};
pub use sparse::{Entry, SparseInteractions};
pub use split::{attach_random_test, split, DatasetBundle, SplitMode, SplitSpec, TestKind};
