//! Image-to-sequence task models: a visual encoder and an autoregressive
//! transformer decoder trained with next-token cross-entropy.

pub mod encoder;
mod task;

pub use encoder::{EncoderConfig, EncoderVariant};
pub use task::{
    load_encoder_checkpoint, save_encoder_checkpoint, train_task, Decoded, Init, LoadReport,
    TaskConfig, TaskModel, TaskSample, TeacherBatch,
};
