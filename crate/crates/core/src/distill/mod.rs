//! Knowledge-distillation anomaly scoring: losses, models, training and
//! quantization of the students.

pub mod config;
pub mod losses;
pub mod model;
pub mod quantize;
pub mod train;

pub use config::{Optimizer, OptimizerState, TrainConfig};
pub use losses::{
    anomaly_map, image_score, loss_and_grad, rd_cosine_loss, stfpm_loss, us_regression_loss, us_score_map, AnomalyMap,
    Combine, LossSpec, UsStats, NORM_EPS,
};
pub use model::{
    forward_half, student_def, teacher_def, DistilledModel, Normalization, QuantState, Scheme, StudentNet,
};
pub use quantize::{ptq_quantize_model, qat_finetune, to_fp16};
pub use train::{
    fit_students, pretrain_teacher, train_student, write_loss_csv, LabeledImage, LossRecord, TeacherConfig,
    TrainOutcome,
};
