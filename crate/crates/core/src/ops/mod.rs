//! Tape operations beyond the elementwise/dense basics in [`crate::autograd`].

pub mod attention;
pub mod conv;
pub mod window;

pub use attention::{relative_position_index, window_attention, AttentionOutput};
pub use conv::{pixel_shuffle, pixel_unshuffle};
pub use window::{window_partition, window_reverse, WindowGrid};
