//! Perspective-aware convolution.
//!
//! Under a ground-plane assumption every pixel has a direction in which it
//! would move if its depth changed. This crate computes that direction from
//! pinhole intrinsics ([`camera`]), shears convolution kernels onto it
//! ([`offsets`]), evaluates the sampled convolution and its gradients
//! ([`conv`]), and stacks several dilations into a multi-branch module
//! ([`module`]). [`io`] holds the file formats; [`gradcheck`] and [`bench`]
//! are the verification and timing harnesses.

pub mod bench;
pub mod camera;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod module;
pub mod offsets;
pub mod rng;
pub mod tensor;

pub use camera::{
    angle_field, angle_field_with_policy, backproject_ground, depth_derivative, perspective_angle,
    project, AboveHorizon, AngleField, CameraIntrinsics, CameraPoint, DepthGradient, GroundPlane,
    PixelCoord, DEFAULT_HORIZON_EPSILON, FALLBACK_ANGLE,
};
pub use conv::{
    bilinear_sample, pac_conv_backward, pac_conv_forward, pac_conv_forward_with,
    standard_conv_backward, standard_conv_forward, ConvGrads, ConvImpl, ConvParams,
};
pub use error::{Error, Result};
pub use module::{
    init_params, pac_module_backward, pac_module_forward, Activation, BranchKind, ModuleGrads,
    PacBranchConfig, PacModuleConfig, PacModuleParams,
};
pub use offsets::{build_offset_field, kernel_offsets, KernelSpec, OffsetField};
pub use tensor::{AnyTensor, DType, Scalar, Tensor};

/// Runs `f` on a dedicated pool of at most `threads` workers. Kernel results
/// do not depend on the pool size.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
