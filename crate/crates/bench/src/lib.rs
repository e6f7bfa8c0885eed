//! Fixtures shared by the criterion benches.

use pac_core::bench::Workload;
use pac_core::rng::SplitMix64;
use pac_core::{
    angle_field, init_params, AngleField, CameraIntrinsics, GroundPlane, PacModuleConfig,
    PacModuleParams, Tensor, DEFAULT_HORIZON_EPSILON,
};

/// Shapes swept by the convolution benches, as `([n, c_in, h, w], c_out)`.
pub const CONV_SHAPES: [([usize; 4], usize); 3] = [
    ([1, 8, 32, 32], 8),
    ([1, 16, 64, 64], 16),
    ([1, 16, 128, 128], 16),
];

pub fn conv_workload(shape: [usize; 4], c_out: usize) -> Workload {
    Workload::new(shape, c_out, 2, 0).expect("benchmark shapes are non-empty")
}

pub struct ModuleFixture {
    pub input: Tensor<f64>,
    pub config: PacModuleConfig,
    pub params: PacModuleParams<f64>,
    pub angles: AngleField,
}

/// Default four-dilation module on a KITTI-like camera scaled to `h x w`.
pub fn module_fixture(shape: [usize; 4]) -> ModuleFixture {
    let [_, c, h, w] = shape;
    let mut rng = SplitMix64::new(1);
    let input = Tensor::from_fn(&shape, |_| rng.symmetric(1.0));
    let config = PacModuleConfig::with_defaults(c, c);
    let params = init_params(&config).expect("default config is valid");
    let scale = w as f64 / 1242.0;
    let k = CameraIntrinsics::new(721.5 * scale, 721.5 * scale, 609.6 * scale, h as f64 * 0.45)
        .expect("positive focal lengths");
    let angles = angle_field(w, h, &k, &GroundPlane::new(1.65).unwrap(), DEFAULT_HORIZON_EPSILON)
        .expect("non-empty field");
    ModuleFixture { input, config, params, angles }
}
