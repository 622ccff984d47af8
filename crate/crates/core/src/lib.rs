//! Registration engine for pairs of whole-slide images.
//!
//! The pipeline computes a backward transform from the fixed slide to the
//! moving slide in two stages (an orientation-free affine alignment followed
//! by a multi-resolution dense displacement field) and applies it with a
//! memory-bounded tiled warp that streams into a pyramidal TIFF.
//!
//! All coordinates are level-0 pixels, x to the right and y down. A pixel
//! index `i` sits at coordinate `i`; a raster resampled by `scale` maps its
//! pixel `i` to level-0 coordinate `scale * i`.

pub mod annotations;
pub mod error;
pub mod initial_alignment;
pub mod nonrigid;
pub mod pipeline;
pub mod preprocessing;
pub mod pyramid_io;
pub mod similarity;
pub mod warping;

pub use error::{Error, ErrorClass, Result};
pub use initial_alignment::AffineTransform;
pub use pyramid_io::{load_image, PyramidImage, Raster};
pub use warping::DisplacementField;
