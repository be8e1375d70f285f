//! Binary tensor container and JSON document schemas shared by the rest of
//! the pipeline.

mod docs;
mod eatn;

pub use docs::{
    constraints_from_str, load_constraints, load_report, load_scene, save_constraints,
    save_report, save_scene, scene_dir, DocError, Entity, ReportDoc, RolloutRecord, SceneDoc,
    TraceRow,
};
pub use eatn::{
    load_tensor, read_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor,
    Tensor, TensorError, MAGIC, MAX_NDIM, VERSION,
};
