//! Multi-label evaluation and the significance tests used in result tables.

mod ranking;
mod stats;

pub use ranking::{average_precision, binary_auc, evaluate, hamming_distance, macro_auc, mean_average_precision, EvalResult};
pub use stats::{holm_bonferroni, t_test, HolmResult, TTest};
