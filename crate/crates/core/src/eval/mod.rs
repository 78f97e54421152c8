//! Evaluation: Dice and depth metrics, leave-one-group-out
//! cross-validation, Wilcoxon comparisons, and report files.

mod loocv;
mod metrics;
mod report;
mod wilcoxon;

pub use loocv::{evaluate_segmentation, fold_seed, groups_of, loocv, run_fold, FoldOutcome, LoocvOutcome};
pub use metrics::{depth_accuracy, dice, disparity_range_px, foreground_dice, mean_sd};
pub use report::{
    emit_report, read_report, ComparisonResult, DiceCell, DiceReport, ImageDice, Report, ReportFiles, Summary, CHART_PALETTE,
    DICE_CONVENTION,
};
pub use wilcoxon::{wilcoxon_signed_rank, Direction, WilcoxonTest, EXACT_MAX_N, MIN_PAIRS};
