//! Central-difference gradient checks for the convolution and the module.
//!
//! Each check contracts the forward output with a random cotangent `g`,
//! `L(theta) = <g, F(theta)>`, and compares the analytic backward pass with
//! `(L(theta + eps) - L(theta - eps)) / (2 eps)` for every scalar of every
//! parameter group. The error reported per group is
//! `max |a - n| / max(|a|, |n|, 1)`.

use crate::camera::{angle_field, AngleField, CameraIntrinsics, GroundPlane};
use crate::conv::{pac_conv_backward, pac_conv_forward, ConvParams};
use crate::error::Result;
use crate::module::{
    init_params, pac_module_backward, pac_module_forward, Activation, PacModuleConfig,
};
use crate::offsets::{build_offset_field, KernelSpec};
use crate::rng::SplitMix64;
use crate::tensor::{DType, Scalar, Tensor};

/// Batch, channels, height, width of the checked input.
pub const CHECK_SHAPE: [usize; 4] = [2, 3, 8, 8];
pub const CHECK_C_OUT: usize = 4;
pub const CHECK_DILATION: usize = 2;

/// Pass threshold on the maximum relative error.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-6,
        DType::F32 => 1e-2,
    }
}

/// Step used when none is given.
pub fn default_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-6,
        DType::F32 => 1e-2,
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub dtype: DType,
    pub eps: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, |a, b| if b.is_nan() { b } else { a.max(b) })
    }

    /// True when every group is below tolerance. NaN counts as a failure.
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

// Compares the analytic gradient of one tensor against central differences,
// perturbing it in place through `slot`.
fn check_group<T: Scalar>(
    name: String,
    analytic: &Tensor<T>,
    eps: f64,
    len: usize,
    mut perturb: impl FnMut(usize, Option<T>) -> T,
    mut loss: impl FnMut() -> Result<f64>,
) -> Result<GroupResult> {
    let mut worst = 0.0f64;
    for i in 0..len {
        let orig = perturb(i, None);
        perturb(i, Some(T::from_f64(orig.to_f64() + eps)));
        let plus = loss()?;
        perturb(i, Some(T::from_f64(orig.to_f64() - eps)));
        let minus = loss()?;
        perturb(i, Some(orig));
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic.data()[i].to_f64(), numeric);
        if err.is_nan() || err > worst {
            worst = err;
        }
        if worst.is_nan() {
            break;
        }
    }
    Ok(GroupResult { name, checked: len, max_rel_error: worst })
}

fn random<T: Scalar>(dims: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.symmetric(1.0)))
}

/// A real perspective field over `h x w`: principal point inside the grid so
/// that angles span all directions and some rows fall in the horizon band.
pub fn check_angles(h: usize, w: usize) -> Result<AngleField> {
    let k = CameraIntrinsics::new(10.0, 10.0, w as f64 * 0.45, h as f64 * 0.3)?;
    angle_field(w, h, &k, &GroundPlane::new(1.65)?, 1.0)
}

/// Checks `pac_conv_backward` for input, weights and bias.
pub fn check_conv<T: Scalar>(seed: u64, eps: f64) -> Result<Vec<GroupResult>> {
    let mut rng = SplitMix64::new(seed);
    let [n, c_in, h, w] = CHECK_SHAPE;
    let mut input: Tensor<T> = random(&CHECK_SHAPE, &mut rng);
    let mut params = ConvParams::new(
        random(&[CHECK_C_OUT, c_in, 3, 3], &mut rng),
        random(&[CHECK_C_OUT], &mut rng),
    )?;
    let cot: Tensor<T> = random(&[n, CHECK_C_OUT, h, w], &mut rng);
    let offsets = build_offset_field(&check_angles(h, w)?, &KernelSpec::square3(CHECK_DILATION)?)?;

    let grads = pac_conv_backward(&input, &params, &offsets, &cot)?;
    let mut out = Vec::new();

    let len = input.len();
    out.push({
        let input_cell = std::cell::RefCell::new(&mut input);
        check_group(
            "conv.input".into(),
            &grads.input,
            eps,
            len,
            |i, v| swap(&mut input_cell.borrow_mut().data_mut()[i], v),
            || Ok(pac_conv_forward(&input_cell.borrow(), &params, &offsets)?.dot(&cot)),
        )?
    });

    for which in [0, 1] {
        let analytic = if which == 0 { &grads.weights } else { &grads.bias };
        let name = if which == 0 { "conv.weights" } else { "conv.bias" };
        let len = analytic.len();
        let cell = std::cell::RefCell::new(&mut params);
        out.push(check_group(
            name.into(),
            analytic,
            eps,
            len,
            |i, v| {
                let mut p = cell.borrow_mut();
                let t = if which == 0 { &mut p.weights } else { &mut p.bias };
                swap(&mut t.data_mut()[i], v)
            },
            || Ok(pac_conv_forward(&input, &cell.borrow(), &offsets)?.dot(&cot)),
        )?);
    }
    Ok(out)
}

/// Checks `pac_module_backward` with the default branches and no activation.
pub fn check_module<T: Scalar>(seed: u64, eps: f64) -> Result<Vec<GroupResult>> {
    let mut rng = SplitMix64::new(seed ^ 0x6d6f_6475_6c65);
    let [n, c_in, h, w] = CHECK_SHAPE;
    let mut config = PacModuleConfig::with_defaults(c_in, CHECK_C_OUT);
    config.activation = Activation::None;
    config.seed = seed;
    let mut params = init_params::<T>(&config)?;
    // Non-zero biases so their gradients are exercised through every path.
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = T::from_f64(rng.symmetric(0.5));
            }
        }
    }
    let mut input: Tensor<T> = random(&CHECK_SHAPE, &mut rng);
    let cot: Tensor<T> = random(&[n, CHECK_C_OUT, h, w], &mut rng);
    let angles = check_angles(h, w)?;

    let grads = pac_module_backward(&input, &params, &config, &angles, &cot)?;
    let mut out = Vec::new();

    let len = input.len();
    out.push({
        let cell = std::cell::RefCell::new(&mut input);
        check_group(
            "module.input".into(),
            &grads.input,
            eps,
            len,
            |i, v| swap(&mut cell.borrow_mut().data_mut()[i], v),
            || Ok(pac_module_forward(&cell.borrow(), &params, &config, &angles)?.dot(&cot)),
        )?
    });

    let names: Vec<String> = grads.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor<T>> =
        grads.params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (slot, (name, analytic)) in names.into_iter().zip(&analytic).enumerate() {
        let cell = std::cell::RefCell::new(&mut params);
        out.push(check_group(
            format!("module.{name}"),
            analytic,
            eps,
            analytic.len(),
            |i, v| swap(&mut cell.borrow_mut().tensors_mut()[slot].data_mut()[i], v),
            || Ok(pac_module_forward(&input, &cell.borrow(), &config, &angles)?.dot(&cot)),
        )?);
    }
    Ok(out)
}

// Returns the current value and optionally replaces it.
fn swap<T: Scalar>(slot: &mut T, value: Option<T>) -> T {
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Runs both suites at the given element type.
pub fn run_gradcheck<T: Scalar>(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut groups = check_conv::<T>(seed, eps)?;
    groups.extend(check_module::<T>(seed, eps)?);
    Ok(GradcheckReport {
        dtype: T::DTYPE,
        eps,
        tolerance: tolerance(T::DTYPE),
        groups,
    })
}
