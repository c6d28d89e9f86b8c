//! Few-shot feature distillation for Vision Transformers with low-rank
//! adapters on a depth-compressed student.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lora;
pub mod optim;
pub mod pnm;
pub mod select;
pub mod tensor;
pub mod vit;

pub use autodiff::{finite_diff_grad, Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{generate_synthetic, Dataset};
pub use distill::{run_distillation, DistillConfig, Mode};
pub use error::{Error, Result};
pub use lora::{attach_enhanced, attach_qv_only, merge_adapters, Placement};
pub use select::Selection;
pub use tensor::Tensor;
pub use vit::{ViTConfig, ViTModel};
