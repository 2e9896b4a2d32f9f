//! Psychophysics study service.
//!
//! Participants get sessions of thirty images drawn without replacement
//! from a study pool, label each image GAN / Graphics / Real and may mark
//! the regions that drove their decision. Every image is annotated at most
//! once per study. State lives in an append-only store and survives
//! restarts; ground truth never leaves the server except through the
//! token-protected export.
//!
//! | method | path | body in | body out |
//! |---|---|---|---|
//! | POST | `/studies/{id}/sessions` | `{"participant"}` | session |
//! | GET | `/sessions/{id}/next` | | `{image_id, image_url, index, total, done}` |
//! | GET | `/images/{id}` | | original image bytes |
//! | POST | `/sessions/{id}/annotations` | `{image_id, label, boxes, elapsed_ms}` | ack |
//! | GET | `/studies/{id}/export` | header `x-admin-token` | annotation records |
//!
//! Errors carry `{"error": code, "message"}` with codes such as
//! `study_full`, `duplicate`, `wrong_image` and `invalid_box`.

pub mod error;
pub mod export;
pub mod http;
pub mod study;

pub use error::{Rejection, StudyError};
pub use study::{AnnotationRecord, Session, Study, StudyConfig, Submission};

/// Environment variable holding the export token.
pub const ADMIN_TOKEN_ENV: &str = "PSYCHO_ADMIN_TOKEN";
