//! The multi-branch PAC module.
//!
//! Parallel 3x3 branches (one standard, the rest perspective-aware at
//! increasing dilation) each produce `c_mid` channels. Their activations are
//! concatenated along channels in config order and fused by a 1x1
//! convolution to `c_out` channels.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::camera::AngleField;
use crate::conv::{
    pac_conv_backward, pac_conv_forward, standard_conv_backward, standard_conv_forward, ConvGrads,
    ConvParams,
};
use crate::error::{Error, Result};
use crate::offsets::{build_offset_field, KernelSpec, OffsetField};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Dilations of the perspective branches in the default module.
pub const DEFAULT_DILATIONS: [usize; 4] = [2, 4, 6, 8];

const BRANCH_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Standard,
    Perspective,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Standard => "standard",
            BranchKind::Perspective => "perspective",
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(BranchKind::Standard),
            "perspective" => Ok(BranchKind::Perspective),
            other => Err(Error::InvalidConfig(format!("unknown branch kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PacBranchConfig {
    pub kind: BranchKind,
    pub dilation: usize,
}

impl PacBranchConfig {
    pub fn standard() -> Self {
        Self { kind: BranchKind::Standard, dilation: 1 }
    }

    pub fn perspective(dilation: usize) -> Self {
        Self { kind: BranchKind::Perspective, dilation }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    #[default]
    Relu,
}

impl Activation {
    fn forward<T: Scalar>(self, t: &mut Tensor<T>) {
        if self == Activation::Relu {
            for v in t.data_mut() {
                if *v <= T::ZERO {
                    *v = T::ZERO;
                }
            }
        }
    }

    // Gradient through the activation given its pre-activation input. ReLU
    // passes gradient only where the input is strictly positive.
    fn backward<T: Scalar>(self, grad: &mut Tensor<T>, pre: &Tensor<T>) {
        if self == Activation::Relu {
            for (g, &x) in grad.data_mut().iter_mut().zip(pre.data()) {
                if x <= T::ZERO {
                    *g = T::ZERO;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PacModuleConfig {
    pub branches: Vec<PacBranchConfig>,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl PacModuleConfig {
    /// One standard branch plus perspective branches at 2, 4, 6 and 8, with
    /// `c_mid = c_out` and ReLU.
    pub fn with_defaults(c_in: usize, c_out: usize) -> Self {
        Self::with_dilations(c_in, c_out, &DEFAULT_DILATIONS)
    }

    /// A standard branch followed by one perspective branch per dilation.
    pub fn with_dilations(c_in: usize, c_out: usize, dilations: &[usize]) -> Self {
        let mut branches = vec![PacBranchConfig::standard()];
        branches.extend(dilations.iter().map(|&d| PacBranchConfig::perspective(d)));
        Self {
            branches,
            c_in,
            c_mid: c_out,
            c_out,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::InvalidConfig("module needs at least one branch".into()));
        }
        if self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::InvalidConfig(format!(
                "channel counts must be positive (c_in {}, c_mid {}, c_out {})",
                self.c_in, self.c_mid, self.c_out
            )));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.dilation == 0 {
                return Err(Error::InvalidConfig(format!("branch {i} has dilation 0")));
            }
            if b.kind == BranchKind::Standard && b.dilation != 1 {
                return Err(Error::InvalidConfig(format!(
                    "standard branch {i} must use dilation 1, got {}",
                    b.dilation
                )));
            }
        }
        Ok(())
    }

    fn fused_channels(&self) -> usize {
        self.branches.len() * self.c_mid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PacModuleParams<T> {
    /// One `[c_mid, c_in, 3, 3]` convolution per branch, in config order.
    pub branches: Vec<ConvParams<T>>,
    /// `[c_out, branches * c_mid, 1, 1]`.
    pub fusion: ConvParams<T>,
}

impl<T: Scalar> PacModuleParams<T> {
    pub fn zeros(config: &PacModuleConfig) -> Result<Self> {
        config.validate()?;
        let branches = config
            .branches
            .iter()
            .map(|_| ConvParams::zeros(config.c_mid, config.c_in, BRANCH_KERNEL, BRANCH_KERNEL))
            .collect::<Result<_>>()?;
        let fusion = ConvParams::zeros(config.c_out, config.fused_channels(), 1, 1)?;
        Ok(Self { branches, fusion })
    }

    /// Named parameter tensors in a fixed order: per-branch weight and bias,
    /// then the fusion weight and bias.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.branches.len() + 2);
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.weight"), &b.weights));
            out.push((format!("branch{i}.bias"), &b.bias));
        }
        out.push(("fusion.weight".to_string(), &self.fusion.weights));
        out.push(("fusion.bias".to_string(), &self.fusion.bias));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * self.branches.len() + 2);
        for b in &mut self.branches {
            out.push(&mut b.weights);
            out.push(&mut b.bias);
        }
        out.push(&mut self.fusion.weights);
        out.push(&mut self.fusion.bias);
        out
    }

    fn check(&self, config: &PacModuleConfig) -> Result<()> {
        if self.branches.len() != config.branches.len() {
            return Err(Error::ShapeMismatch(format!(
                "config has {} branches but params have {}",
                config.branches.len(),
                self.branches.len()
            )));
        }
        for (i, b) in self.branches.iter().enumerate() {
            let want = [config.c_mid, config.c_in, BRANCH_KERNEL, BRANCH_KERNEL];
            if b.weights.dims() != want {
                return Err(Error::ShapeMismatch(format!(
                    "branch {i} weights must be {want:?}, got {:?}",
                    b.weights.dims()
                )));
            }
        }
        let want = [config.c_out, config.fused_channels(), 1, 1];
        if self.fusion.weights.dims() != want {
            return Err(Error::ShapeMismatch(format!(
                "fusion weights must be {want:?}, got {:?}",
                self.fusion.weights.dims()
            )));
        }
        Ok(())
    }
}

/// Uniform fan-in initialization from the config's seed.
///
/// A single SplitMix64 stream fills branch weights in config order and then
/// the fusion weights, each row-major, uniform in `[-b, b)` with
/// `b = sqrt(6 / fan_in)`. Biases start at zero.
pub fn init_params<T: Scalar>(config: &PacModuleConfig) -> Result<PacModuleParams<T>> {
    let mut params = PacModuleParams::zeros(config)?;
    let mut rng = SplitMix64::new(config.seed);
    let mut fill = |w: &mut Tensor<T>| {
        let [_, c_in, rows, cols] = w.shape4("weights").expect("conv weights are rank 4");
        let bound = (6.0 / (c_in * rows * cols) as f64).sqrt();
        for v in w.data_mut() {
            *v = T::from_f64(rng.symmetric(bound));
        }
    };
    for b in &mut params.branches {
        fill(&mut b.weights);
    }
    fill(&mut params.fusion.weights);
    Ok(params)
}

/// Gradients of the module with respect to its input and every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGrads<T> {
    pub input: Tensor<T>,
    pub params: PacModuleParams<T>,
}

struct ForwardCache<T> {
    offsets: Vec<Option<OffsetField>>,
    branch_pre: Vec<Tensor<T>>,
    concat: Tensor<T>,
    fused_pre: Tensor<T>,
}

fn branch_offsets(config: &PacModuleConfig, angles: &AngleField) -> Result<Vec<Option<OffsetField>>> {
    config
        .branches
        .iter()
        .map(|b| match b.kind {
            BranchKind::Standard => Ok(None),
            BranchKind::Perspective => {
                let spec = KernelSpec::new(BRANCH_KERNEL, BRANCH_KERNEL, b.dilation)?;
                build_offset_field(angles, &spec).map(Some)
            }
        })
        .collect()
}

fn check_inputs<T: Scalar>(
    input: &Tensor<T>,
    params: &PacModuleParams<T>,
    config: &PacModuleConfig,
    angles: &AngleField,
) -> Result<[usize; 4]> {
    config.validate()?;
    params.check(config)?;
    let shape = input.shape4("input")?;
    let [_, c, h, w] = shape;
    if c != config.c_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, module expects {}",
            config.c_in
        )));
    }
    if angles.height() != h || angles.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "angle field is {}x{} but input is {h}x{w}",
            angles.height(),
            angles.width()
        )));
    }
    Ok(shape)
}

/// Concatenates NCHW tensors with equal n, h, w along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let [n, _, h, w] = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?
        .shape4("concat part")?;
    let plane = h * w;
    let mut total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape4("concat part")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?} with {:?}",
                parts[0].dims(),
                p.dims()
            )));
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for p in parts {
            let chunk = p.dims()[1] * plane;
            data.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Splits an NCHW tensor into consecutive channel blocks of the given sizes.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = t.shape4("split input")?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::ShapeMismatch(format!(
            "channel blocks {sizes:?} do not cover {c} channels"
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let mut start = (b * c) * plane;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&t.data()[start..start + s * plane]);
            start += s * plane;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor::new(vec![n, s, h, w], data))
        .collect()
}

fn forward_cached<T: Scalar>(
    input: &Tensor<T>,
    params: &PacModuleParams<T>,
    config: &PacModuleConfig,
    angles: &AngleField,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_inputs(input, params, config, angles)?;
    let offsets = branch_offsets(config, angles)?;

    let branch_pre = params
        .branches
        .par_iter()
        .zip(&offsets)
        .map(|(p, offs)| match offs {
            None => standard_conv_forward(input, p, 1),
            Some(offs) => pac_conv_forward(input, p, offs),
        })
        .collect::<Result<Vec<_>>>()?;

    let activated: Vec<Tensor<T>> = branch_pre
        .iter()
        .map(|t| {
            let mut a = t.clone();
            config.activation.forward(&mut a);
            a
        })
        .collect();
    let concat = concat_channels(&activated)?;
    let fused_pre = standard_conv_forward(&concat, &params.fusion, 1)?;
    let mut out = fused_pre.clone();
    config.activation.forward(&mut out);
    Ok((out, ForwardCache { offsets, branch_pre, concat, fused_pre }))
}

pub fn pac_module_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &PacModuleParams<T>,
    config: &PacModuleConfig,
    angles: &AngleField,
) -> Result<Tensor<T>> {
    forward_cached(input, params, config, angles).map(|(out, _)| out)
}

pub fn pac_module_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &PacModuleParams<T>,
    config: &PacModuleConfig,
    angles: &AngleField,
    grad_output: &Tensor<T>,
) -> Result<ModuleGrads<T>> {
    let (out, cache) = forward_cached(input, params, config, angles)?;
    if grad_output.dims() != out.dims() {
        return Err(Error::ShapeMismatch(format!(
            "grad_output must be {:?}, got {:?}",
            out.dims(),
            grad_output.dims()
        )));
    }

    let mut g_fused = grad_output.clone();
    config.activation.backward(&mut g_fused, &cache.fused_pre);
    let fusion = standard_conv_backward(&cache.concat, &params.fusion, 1, &g_fused)?;

    let sizes = vec![config.c_mid; config.branches.len()];
    let g_branches = split_channels(&fusion.input, &sizes)?;

    let branch_grads = params
        .branches
        .par_iter()
        .zip(&cache.offsets)
        .zip(g_branches.into_par_iter().zip(&cache.branch_pre))
        .map(|((p, offs), (mut g, pre))| {
            config.activation.backward(&mut g, pre);
            match offs {
                None => standard_conv_backward(input, p, 1, &g),
                Some(offs) => pac_conv_backward(input, p, offs, &g),
            }
        })
        .collect::<Result<Vec<ConvGrads<T>>>>()?;

    let mut grad_input = Tensor::zeros(input.dims());
    for g in &branch_grads {
        grad_input = grad_input.add(&g.input);
    }
    let branches = branch_grads
        .into_iter()
        .map(|g| ConvParams { weights: g.weights, bias: g.bias })
        .collect();
    Ok(ModuleGrads {
        input: grad_input,
        params: PacModuleParams {
            branches,
            fusion: ConvParams { weights: fusion.weights, bias: fusion.bias },
        },
    })
}
