//! Reverse-mode differentiable compute substrate: tape, recurrent cells,
//! optimizer, gradient checking, checkpointing.

pub mod cells;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use cells::{gru_step, lstm_step, GruVars, LstmVars};
pub use checkpoint::{CheckpointError, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{check_gradients, finite_difference_check, FdReport};
pub use optim::{adam_step, clip_grad_norm, AdamState};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{GradError, Tape, Var};
