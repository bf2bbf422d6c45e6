//! Training, evaluation, checkpoints, experiment protocol and rendering.

mod checkpoint;
mod config;
mod evaluate;
mod field;
mod heatmap;
mod model;
mod protocol;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Ablations, ModelConfig, TrainConfig, ABLATION_NAMES};
pub use evaluate::{evaluate, evaluate_model, run_baseline, test_steps, Baseline, FieldModel, BASELINE_METHODS};
pub use field::{field_to_csv, read_field_csv, write_field_csv};
pub use heatmap::{colormap, heatmap_pixels, render_heatmap, ColorScale, COLORMAP, MARKER};
pub use model::{Forward, RainSeer, Window};
pub use protocol::{prepare, Experiment};
pub use train::{clip_grad_norm, one_cycle_lr, pseudo_mask, train, train_from, window_loss, AdamW, TrainOutcome, WindowLoss, WindowSample};
