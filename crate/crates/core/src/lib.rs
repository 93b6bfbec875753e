//! Partial-modal adversarial representation learning: generate the feature
//! map of a missing modality from an available one, then classify the fused
//! pair.

pub mod adam;
pub mod checkpoint;
mod codec;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, FormatError, Result};
pub use eval::{ablation_table, evaluate, generalization_eval, AblationTable, EvalOptions, EvalReport, ModalityMode};
pub use fusion::{conv_fuse, deinterleave, interleave, sum_fuse, ClipStack, FeatureMap};
pub use gradcheck::{run_gradcheck, GradCheckOptions, GradCheckReport, Scope};
pub use model::{
    DiscriminatorParams, GeneratorParams, LinearHead, LossWeights, ModelConfig, ModelSet, NoiseSpec, PmGanParams,
};
pub use synth::{load_dataset, save_dataset, synthesize, synthesize_shifted, DatasetSplit, PairedSample, SynthConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{moment_distance, train, train_ablation, EpochRecord, TrainConfig, TrainLog, TrainState};
