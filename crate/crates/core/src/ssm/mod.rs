//! State space kernels: zero-order-hold discretisation, the time-invariant
//! recurrence and its convolution kernel, the input-dependent selective scan
//! (with an analytic backward pass), and bidirectional scan layers.

mod bidir;
mod lti;
mod selective;

pub use bidir::{bi_ssm_layer, bi_ssm_stack, identity_order, BiSsmLayer, BiSsmStack};
pub use lti::{
    causal_convolve, lti_kernel, lti_scan, zoh_coefficients, zoh_discretize, DiscreteLti, LtiSystem,
    SERIES_THRESHOLD,
};
pub use selective::{
    selective_scan, selective_scan_backward, selective_scan_chunked, selective_scan_macs, SelectiveParams,
    CHUNK,
};
