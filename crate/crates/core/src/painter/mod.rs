//! LiDAR-guided one-step painter.

pub mod checkpoint;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use checkpoint::{decode_painter, encode_painter, load_painter, save_painter};
pub use model::{
    fuse_latents, time_embedding, Encoded, Grads, InputMode, PainterConfig, PainterModel, ParamBlock, Skips,
};
pub use schedule::{denoise_step, step_coefficients, DiffusionSchedule, ScheduleConfig};
pub use tensor::Tensor;
pub use train::{evaluate_l2, painter_loss, sample_gradients, train_painter, PainterSample, PainterTrainConfig, PainterTrainReport};
