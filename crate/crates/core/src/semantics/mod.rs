//! Cross-modal alignment, semantic fusion, and the teacher that supplies
//! target features and category masks during training.

mod cache;
mod fusion;
mod teacher;

pub use cache::{cache_path, decode_bundle, encode_bundle, is_complete, load_teacher_cache, precompute_teacher, union_mask, CacheReport};
pub use fusion::{Cfa, CrossAttention, Sff, SffOut, INSTANCE_NORM_EPS};
pub use teacher::{OracleTeacher, TeacherBundle, TeacherConfig, TeacherProvider, TEACHER_SEED};
