//! Synthetic evaluation settings. Each plants a (concept, label) pair that
//! co-occurs at a chosen Cramér's V in the fine-tuning set and is balanced in
//! the evaluation set.

mod suite;
mod validity;
mod world;

pub use suite::{run_suite, MitigationRow, PrecisionRow, SettingResult, SuiteConfig, SuiteReport};
pub use validity::{check_validity, precision_at_k, validity_from_predictions, Precision, ValidityReport};
pub use world::{cramers_v, generate_setting, solve_contingency, EvalSetting, WorldSpec};
