//! Generalizable radiance-field renderer, synthetic scene oracle, and targeted
//! adversarial attacks on the renderer's source views.

pub mod ad;
pub mod attack;
pub mod camera;
pub mod error;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
