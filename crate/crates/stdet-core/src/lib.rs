//! Scene text detection at desk scale: a feature-shuffle convolutional
//! backbone, a two-stage transformer contour refiner, the polygon geometry
//! behind training labels and evaluation, and a deterministic synthetic
//! scene generator.

pub mod ablate;
pub mod backbone;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod params;
pub mod pipeline;
pub mod profile;
pub mod refine;
pub mod synth;
pub mod tensor;

pub use tensor::{Elem, Tape, TensorError, Var};
