//! Cross-checks against independently written reference computations.

use std::f64::consts::FRAC_PI_2;

use pac_core::gradcheck::run_gradcheck;
use pac_core::rng::SplitMix64;
use pac_core::{
    angle_field, build_offset_field, init_params, pac_conv_backward, pac_conv_forward_with,
    pac_module_forward, standard_conv_forward, Activation, AngleField, CameraIntrinsics, ConvImpl,
    ConvParams, GroundPlane, KernelSpec, PacBranchConfig, PacModuleConfig, PacModuleParams, Tensor,
};
use proptest::prelude::*;

fn random(dims: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.symmetric(1.0))
}

/// Bilinear interpolation as a sum of tent functions over every pixel.
fn tent_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            let wx = (1.0 - (x - xx as f64).abs()).max(0.0);
            let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
            acc += wx * wy * plane[yy * w + xx];
        }
    }
    acc
}

/// Perspective conv straight from the definition, with taps computed from
/// the angles rather than the offset field.
fn brute_force_conv(input: &Tensor<f64>, params: &ConvParams<f64>, phi: &[f64], d: f64) -> Tensor<f64> {
    let [n, c_in, h, w] = input.shape4("input").unwrap();
    let c_out = params.c_out();
    let x = input.data();
    let wt = params.weights.data();
    let mut out = vec![0.0; n * c_out * h * w];
    for b in 0..n {
        for o in 0..c_out {
            for v in 0..h {
                for u in 0..w {
                    let angle = phi[v * w + u];
                    let (ax, ay) = if angle == FRAC_PI_2 { (0.0, 1.0) } else { (angle.cos(), angle.sin()) };
                    let mut acc = params.bias.data()[o];
                    for c in 0..c_in {
                        let plane = &x[(b * c_in + c) * h * w..][..h * w];
                        for i in -1i32..=1 {
                            for j in -1i32..=1 {
                                let k = ((i + 1) * 3 + (j + 1)) as usize;
                                let su = u as f64 + d * (j as f64 + i as f64 * ax);
                                let sv = v as f64 + d * i as f64 * ay;
                                acc += wt[(o * c_in + c) * 9 + k] * tent_sample(plane, h, w, su, sv);
                            }
                        }
                    }
                    out[((b * c_out + o) * h + v) * w + u] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, h, w], out).unwrap()
}

fn camera_field(h: usize, w: usize, rng: &mut SplitMix64) -> AngleField {
    let k = CameraIntrinsics::new(
        rng.range(5.0, 50.0),
        rng.range(5.0, 50.0),
        rng.range(0.0, w as f64),
        rng.range(0.0, h as f64),
    )
    .unwrap();
    angle_field(w, h, &k, &GroundPlane::new(rng.range(0.5, 2.5)).unwrap(), 1.0).unwrap()
}

#[test]
fn forward_matches_brute_force_on_six_by_six() {
    let mut rng = SplitMix64::new(2024);
    let input = random(&[1, 2, 6, 6], &mut rng);
    let params = ConvParams::new(random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)).unwrap();
    let angles = camera_field(6, 6, &mut rng);
    for d in [1usize, 2] {
        let offsets = build_offset_field(&angles, &KernelSpec::square3(d).unwrap()).unwrap();
        let expected = brute_force_conv(&input, &params, angles.phi(), d as f64);
        for which in ConvImpl::ALL {
            let out = pac_conv_forward_with(which, &input, &params, &offsets).unwrap();
            assert!(out.max_abs_diff(&expected) < 1e-12, "{which} d={d}");
        }
    }
}

#[test]
fn gather_and_naive_agree_on_odd_shapes() {
    let mut rng = SplitMix64::new(77);
    for &(n, c, h, w, k) in &[(1, 1, 1, 1, 1), (2, 3, 5, 9, 2), (1, 4, 13, 3, 5)] {
        let input = random(&[n, c, h, w], &mut rng);
        let params = ConvParams::new(random(&[k, c, 3, 3], &mut rng), random(&[k], &mut rng)).unwrap();
        let angles = camera_field(h, w, &mut rng);
        let offsets = build_offset_field(&angles, &KernelSpec::square3(3).unwrap()).unwrap();
        let a = pac_conv_forward_with(ConvImpl::Naive, &input, &params, &offsets).unwrap();
        let b = pac_conv_forward_with(ConvImpl::Gather, &input, &params, &offsets).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn adjoint_identity_holds() {
    let mut rng = SplitMix64::new(31);
    let input = random(&[2, 3, 7, 9], &mut rng);
    let params = ConvParams::without_bias(random(&[4, 3, 3, 3], &mut rng)).unwrap();
    let offsets = build_offset_field(&camera_field(7, 9, &mut rng), &KernelSpec::square3(2).unwrap()).unwrap();
    let g = random(&[2, 4, 7, 9], &mut rng);
    let y = pac_conv_forward_with(ConvImpl::Gather, &input, &params, &offsets).unwrap();
    let grads = pac_conv_backward(&input, &params, &offsets, &g).unwrap();
    // Without bias the forward map is linear in x and in w separately.
    assert!((g.dot(&y) - grads.input.dot(&input)).abs() < 1e-10);
    assert!((g.dot(&y) - grads.weights.dot(&params.weights)).abs() < 1e-10);
}

fn one_by_one(
    input: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &Tensor<f64>,
) -> Tensor<f64> {
    let [n, c_in, h, w] = input.shape4("x").unwrap();
    let c_out = weights.dims()[0];
    Tensor::from_fn(&[n, c_out, h, w], |idx| {
        let p = idx % (h * w);
        let o = (idx / (h * w)) % c_out;
        let b = idx / (h * w * c_out);
        let mut acc = bias.data()[o];
        for c in 0..c_in {
            acc += weights.data()[o * c_in + c] * input.data()[(b * c_in + c) * h * w + p];
        }
        acc
    })
}

#[test]
fn module_matches_composition_oracle() {
    let mut rng = SplitMix64::new(12);
    let input = random(&[1, 4, 12, 12], &mut rng);
    let angles = camera_field(12, 12, &mut rng);
    for act in [Activation::None, Activation::Relu] {
        let mut config = PacModuleConfig::with_defaults(4, 5);
        config.activation = act;
        config.seed = 99;
        let mut params: PacModuleParams<f64> = init_params(&config).unwrap();
        for t in params.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.symmetric(0.3));
            }
        }
        let relu = |t: Tensor<f64>| match act {
            Activation::None => t,
            Activation::Relu => Tensor::from_fn(t.dims(), |i| t.data()[i].max(0.0)),
        };

        let mut concat = Vec::new();
        for (b, p) in config.branches.iter().zip(&params.branches) {
            let phi: Vec<f64> = match b.kind {
                pac_core::BranchKind::Standard => vec![FRAC_PI_2; 144],
                pac_core::BranchKind::Perspective => angles.phi().to_vec(),
            };
            let y = relu(brute_force_conv(&input, p, &phi, b.dilation as f64));
            concat.extend_from_slice(y.data());
        }
        let concat = Tensor::new(vec![1, 25, 12, 12], concat).unwrap();
        let expected = relu(one_by_one(&concat, &params.fusion.weights, &params.fusion.bias));

        let out = pac_module_forward(&input, &params, &config, &angles).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12, "{act:?}");
    }
}

#[test]
fn single_standard_branch_is_plain_conv() {
    let mut rng = SplitMix64::new(8);
    let input = random(&[2, 3, 9, 7], &mut rng);
    let config = PacModuleConfig {
        branches: vec![PacBranchConfig::standard()],
        c_in: 3,
        c_mid: 4,
        c_out: 4,
        activation: Activation::None,
        seed: 1,
    };
    let mut params: PacModuleParams<f64> = init_params(&config).unwrap();
    params.branches[0].bias = random(&[4], &mut rng);
    params.fusion.weights = Tensor::from_fn(&[4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let angles = camera_field(9, 7, &mut rng);
    let out = pac_module_forward(&input, &params, &config, &angles).unwrap();
    let expected = standard_conv_forward(&input, &params.branches[0], 1).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn branch_permutation_is_invariant() {
    let mut rng = SplitMix64::new(4);
    let input = random(&[1, 2, 8, 8], &mut rng);
    let angles = camera_field(8, 8, &mut rng);
    let mut config = PacModuleConfig::with_dilations(2, 3, &[2, 5]);
    config.c_mid = 2;
    config.seed = 6;
    let params: PacModuleParams<f64> = init_params(&config).unwrap();
    let out = pac_module_forward(&input, &params, &config, &angles).unwrap();

    let perm = [2usize, 0, 1];
    let mut pconfig = config.clone();
    pconfig.branches = perm.iter().map(|&i| config.branches[i]).collect();
    let mut pparams = params.clone();
    pparams.branches = perm.iter().map(|&i| params.branches[i].clone()).collect();
    let c_mid = config.c_mid;
    let fused = config.branches.len() * c_mid;
    for o in 0..3 {
        for (slot, &src) in perm.iter().enumerate() {
            for m in 0..c_mid {
                pparams.fusion.weights.data_mut()[o * fused + slot * c_mid + m] =
                    params.fusion.weights.data()[o * fused + src * c_mid + m];
            }
        }
    }
    let pout = pac_module_forward(&input, &pparams, &pconfig, &angles).unwrap();
    assert!(out.max_abs_diff(&pout) < 1e-12);
}

#[test]
fn module_gradients_pass_in_f64() {
    let report = run_gradcheck::<f64>(3, 1e-6).unwrap();
    for g in &report.groups {
        assert!(g.max_rel_error < 1e-6, "{g:?}");
    }
    assert!(report.passed());
}

#[test]
fn module_gradients_pass_in_f32() {
    let report = run_gradcheck::<f32>(3, 1e-2).unwrap();
    assert!(report.passed(), "{report:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vertical_and_upward_fields_reduce_to_standard_conv(
        seed in any::<u64>(),
        d in prop::sample::select(vec![1usize, 2, 4, 6, 8]),
        h in 1usize..10,
        w in 1usize..10,
    ) {
        let mut rng = SplitMix64::new(seed);
        let input = random(&[1, 2, h, w], &mut rng);
        let params = ConvParams::new(random(&[2, 2, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let spec = KernelSpec::square3(d).unwrap();
        let down = build_offset_field(&AngleField::uniform(w, h, FRAC_PI_2).unwrap(), &spec).unwrap();
        let out = pac_conv_forward_with(ConvImpl::Gather, &input, &params, &down).unwrap();
        prop_assert!(out.max_abs_diff(&standard_conv_forward(&input, &params, d).unwrap()) < 1e-12);

        let mut flipped = params.clone();
        for oc in 0..4 {
            for k in 0..9 {
                flipped.weights.data_mut()[oc * 9 + k] = params.weights.data()[oc * 9 + (2 - k / 3) * 3 + k % 3];
            }
        }
        let up = build_offset_field(&AngleField::uniform(w, h, -FRAC_PI_2).unwrap(), &spec).unwrap();
        let out = pac_conv_forward_with(ConvImpl::Naive, &input, &params, &up).unwrap();
        prop_assert!(out.max_abs_diff(&standard_conv_forward(&input, &flipped, d).unwrap()) < 1e-12);
    }

    #[test]
    fn round_trip_through_ground_plane(
        fx in 100.0f64..2000.0,
        fy in 100.0f64..2000.0,
        cx in 0.0f64..1500.0,
        cy in 0.0f64..500.0,
        y0 in 0.3f64..3.0,
        u in -200.0f64..1700.0,
        dv in 1.0001f64..600.0,
    ) {
        let k = CameraIntrinsics::new(fx, fy, cx, cy).unwrap();
        let g = GroundPlane::new(y0).unwrap();
        let p = pac_core::PixelCoord::new(u, cy + dv);
        let back = pac_core::project(pac_core::backproject_ground(p, &k, &g).unwrap(), &k).unwrap();
        prop_assert!((back.u - p.u).abs() < 1e-9);
        prop_assert!((back.v - p.v).abs() < 1e-9);
    }
}
