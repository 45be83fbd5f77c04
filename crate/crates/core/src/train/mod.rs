//! Training, evaluation and ablation.

mod ablate;
mod config;
mod eval;
mod model;
mod run;
mod schedule;

pub use ablate::{ablate, ablation_csv, radius_csv, radius_sweep, train_and_score, write_text, AblationRow, ABLATION_HEADER};
pub use config::{format_radius, Preset, TrainConfig};
pub use eval::{evaluate, evaluate_noisy, evaluate_with, score_image, EvalReport, EvalRow, EVAL_HEADER};
pub use model::{crop_to, reflect_pad_to, spec_fields, CriticState, TrainState};
pub use run::{train, train_on, train_step, StepStats, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, LOG_HEADER, TIMING_FILE};
pub use schedule::{lr_at, EarlyStopper};

/// Radii covered by the sweep, ending with the whole feature map.
pub const SWEEP_RADII: [usize; 6] = [0, 1, 2, 3, 5, crate::nonlocal::FULL_RADIUS];
