//! Lossless greedy tree decoding: candidate trees from draft distributions,
//! one flattened verification forward per round, and cache compaction to the
//! accepted path.

mod session;
mod stats;
mod tree;

pub use session::{DecodeMode, DecodeOutput, Decoder, Session, VerifyOutcome};
pub use stats::{summary_table, DecodeStats};
pub use tree::{build_candidates, flatten_tree, DraftTree, FlatTree, TreeNode, TreeSpec};
