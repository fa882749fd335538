//! Viewpoint-shift benchmark construction from monocular depth and pose, and
//! LoRA-anchored test-time re-centering for recognizers evaluated under that
//! shift.

pub mod config;
pub mod later;
pub mod metrics;
pub mod ovosplit;
pub mod pipeline;
pub mod tensorio;
pub mod viewgeom;
pub mod viewscore;
