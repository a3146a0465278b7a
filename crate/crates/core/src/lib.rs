//! Desk-scale semi-supervised object detection lab.
//!
//! A synthetic lesion-detection task, a tiny two-stage detector with exact
//! gradients, and a configurable teacher-student training loop whose
//! strategies (augmentation, pseudo-label filtering, losses, teacher update)
//! are looked up by name at runtime.

pub mod assign;
pub mod augment;
pub mod detector;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod plg;
pub mod registry;
pub mod rng;
pub mod synthdata;
pub mod targets;
pub mod teacher_student;
