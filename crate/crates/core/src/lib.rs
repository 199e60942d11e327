//! Multimodal sequence classification with optimal-transport cross-modal
//! attention, multi-head self-attention and attention-weighted fusion.

// Negated comparisons are how NaN is rejected in validation code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numeric;
pub mod ot;
pub mod otk;
pub mod train;
