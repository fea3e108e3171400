//! Cross-view policy learning for goal-driven navigation on a synthetic city.

pub mod nn;
pub mod citygraph;
pub mod env;
pub mod agent;
pub mod losses;
pub mod trajectory;
pub mod trainer;
pub mod eval;
pub mod gradsuite;
pub mod presets;
pub mod plot;
