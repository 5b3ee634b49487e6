//! Detail-preserving night-to-day image translation for object detection.
//!
//! A kernel prediction network looks at a night image and predicts one small
//! filter kernel per pixel; the translated image is that single per-pixel
//! filtering of the input. Training pairs come from StyleMix, which renders
//! daytime images in several night styles and fuses the results with
//! Dirichlet-distributed convex weights. A frozen daytime detector supplies
//! task losses during training and detects on the translated images.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod filter;
pub mod imaging;
pub mod io;
pub mod kpn;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod stylemix;
pub mod toy;

pub use error::{Error, ErrorKind, Result};
pub use filter::{apply_pixelwise_filter, filter_gradients};
pub use imaging::{clamp_to_unit, psnr, Image, KernelField, PaddingPolicy};
