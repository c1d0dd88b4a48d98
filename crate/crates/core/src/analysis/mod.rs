//! Evaluation (mask AP over IoU thresholds, grouped by scenario step) and
//! representation similarity between feature extractors.

pub mod cka;
pub mod eval;

pub use cka::{branch_for_step, cka_per_class, linear_cka, CkaReport, CkaRow};
pub use eval::{evaluate, match_and_ap, ratio, ratio_to_joint, EvalReport, GroupRatios, IouKind, IOU_THRESHOLDS};
