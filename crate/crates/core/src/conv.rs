//! Sampled convolution over per-pixel tap offsets.
//!
//! Every operator here is a stride-1, zero-padded cross-correlation whose
//! output has the input's spatial size. Output elements are accumulated over
//! input channels (outer) and kernel taps (inner) in a fixed order, and work
//! is split only across independent output elements, so results do not
//! depend on the number of threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::offsets::{KernelSpec, OffsetField};
use crate::tensor::{Scalar, Tensor};

/// Weights `[c_out, c_in, rows, cols]` and bias `[c_out]`. Tap order within a
/// kernel is row-major, matching [`OffsetField`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [c_out, _, rows, cols] = weights.shape4("weights")?;
        if rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0 {
            return Err(Error::InvalidKernel(format!(
                "weights must have odd kernel extent, got {rows}x{cols}"
            )));
        }
        if bias.dims() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "bias must be [{c_out}], got {:?}",
                bias.dims()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn without_bias(weights: Tensor<T>) -> Result<Self> {
        let c_out = weights.shape4("weights")?[0];
        Self::new(weights, Tensor::zeros(&[c_out]))
    }

    pub fn zeros(c_out: usize, c_in: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[c_out, c_in, rows, cols]), Tensor::zeros(&[c_out]))
    }

    pub fn c_out(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn rows(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn cols(&self) -> usize {
        self.weights.dims()[3]
    }

    pub fn taps(&self) -> usize {
        self.rows() * self.cols()
    }

    fn check_finite(&self) -> Result<()> {
        if !self.weights.all_finite() {
            return Err(Error::NonFiniteInput("weights"));
        }
        if !self.bias.all_finite() {
            return Err(Error::NonFiniteInput("bias"));
        }
        Ok(())
    }
}

/// Gradients of a convolution with respect to all of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Forward implementation strategy. Both compute the same function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ConvImpl {
    /// Bilinear sampling evaluated inline for every (output, channel, tap).
    Naive,
    /// Neighbor indices and bilinear weights precomputed once per pixel and
    /// tap, then reused across batch and channels.
    #[default]
    Gather,
}

impl ConvImpl {
    pub const ALL: [ConvImpl; 2] = [ConvImpl::Naive, ConvImpl::Gather];

    pub fn name(self) -> &'static str {
        match self {
            ConvImpl::Naive => "naive",
            ConvImpl::Gather => "gather",
        }
    }
}

impl fmt::Display for ConvImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvImpl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(ConvImpl::Naive),
            "gather" => Ok(ConvImpl::Gather),
            other => Err(format!("unknown conv impl {other:?} (expected naive or gather)")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    taps: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    offsets: &OffsetField,
) -> Result<Geometry> {
    let [n, c_in, h, w] = input.shape4("input")?;
    if params.c_in() != c_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels but weights expect {}",
            params.c_in()
        )));
    }
    if offsets.height() != h || offsets.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "offset field is {}x{} but input is {h}x{w}",
            offsets.height(),
            offsets.width()
        )));
    }
    if offsets.taps() != params.taps() {
        return Err(Error::ShapeMismatch(format!(
            "offset field has {} taps but weights have {}x{}",
            offsets.taps(),
            params.rows(),
            params.cols()
        )));
    }
    Ok(Geometry {
        n,
        c_in,
        c_out: params.c_out(),
        h,
        w,
        taps: offsets.taps(),
    })
}

// Integer corner and bilinear weights for (x, y), corners ordered
// (x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1).
#[inline]
fn corners(x: f64, y: f64) -> (isize, isize, [f64; 4]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = x - x0;
    let ay = y - y0;
    let wts = [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay];
    (x0 as isize, y0 as isize, wts)
}

const CORNER_STEPS: [(isize, isize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

#[inline]
fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let (x0, y0, wts) = corners(x, y);
    let mut acc = T::ZERO;
    for (&(dx, dy), &wt) in CORNER_STEPS.iter().zip(&wts) {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            acc += T::from_f64(wt) * plane[cy as usize * w + cx as usize];
        }
    }
    acc
}

/// Value of a `[h, w]` plane at fractional `(x, y)` = (column, row) by
/// bilinear interpolation. Neighbors outside the plane read as zero.
pub fn bilinear_sample<T: Scalar>(plane: &Tensor<T>, x: f64, y: f64) -> Result<T> {
    let (h, w) = match plane.dims() {
        &[h, w] => (h, w),
        d => {
            return Err(Error::ShapeMismatch(format!(
                "bilinear_sample expects a [h, w] plane, got {d:?}"
            )))
        }
    };
    Ok(sample_plane(plane.data(), h, w, x, y))
}

#[derive(Clone, Copy, Debug)]
struct Corner<T> {
    idx: usize,
    wt: T,
}

/// Precomputed bilinear corners for every (pixel, tap). Out-of-plane corners
/// carry weight zero.
struct SamplingPlan<T> {
    taps: usize,
    plane: usize,
    entries: Vec<[Corner<T>; 4]>,
}

impl<T: Scalar> SamplingPlan<T> {
    fn new(offsets: &OffsetField) -> Self {
        let (h, w, taps) = (offsets.height(), offsets.width(), offsets.taps());
        let empty = Corner { idx: 0, wt: T::ZERO };
        let entries = offsets
            .as_slice()
            .par_chunks(taps * w)
            .enumerate()
            .flat_map_iter(|(v, row)| {
                row.iter().enumerate().map(move |(i, &(du, dv))| {
                    let u = i / taps;
                    let (x0, y0, wts) = corners(u as f64 + du, v as f64 + dv);
                    let mut out = [empty; 4];
                    for ((&(dx, dy), &wt), slot) in CORNER_STEPS.iter().zip(&wts).zip(&mut out) {
                        let (cx, cy) = (x0 + dx, y0 + dy);
                        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
                            *slot = Corner {
                                idx: cy as usize * w + cx as usize,
                                wt: T::from_f64(wt),
                            };
                        }
                    }
                    out
                })
            })
            .collect();
        Self { taps, plane: h * w, entries }
    }

    /// Samples every tap of every pixel of one batch item into a column
    /// matrix `[c_in * taps, h * w]`.
    fn columns(&self, image: &[T], c_in: usize) -> Vec<T> {
        let (taps, plane) = (self.taps, self.plane);
        let mut cols = vec![T::ZERO; c_in * taps * plane];
        cols.par_chunks_mut(taps * plane)
            .zip(image.par_chunks(plane))
            .for_each(|(dst, src)| {
                for p in 0..plane {
                    let entries = &self.entries[p * taps..(p + 1) * taps];
                    for (k, e) in entries.iter().enumerate() {
                        let mut acc = T::ZERO;
                        for c in e {
                            acc += c.wt * src[c.idx];
                        }
                        dst[k * plane + p] = acc;
                    }
                }
            });
        cols
    }
}

fn check_input<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<()> {
    if !input.all_finite() {
        return Err(Error::NonFiniteInput("input"));
    }
    params.check_finite()
}

/// Perspective-aware convolution forward pass with the default implementation.
pub fn pac_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    offsets: &OffsetField,
) -> Result<Tensor<T>> {
    pac_conv_forward_with(ConvImpl::default(), input, params, offsets)
}

/// `out[n][o][v][u] = bias[o] + sum_c sum_k w[o][c][k] * sample(input[n][c], (u, v) + offset_k(u, v))`
pub fn pac_conv_forward_with<T: Scalar>(
    which: ConvImpl,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    offsets: &OffsetField,
) -> Result<Tensor<T>> {
    let g = check_shapes(input, params, offsets)?;
    check_input(input, params)?;
    let data = match which {
        ConvImpl::Naive => forward_naive(&g, input.data(), params, offsets),
        ConvImpl::Gather => forward_gather(&g, input.data(), params, &SamplingPlan::new(offsets)),
    };
    Tensor::new(vec![g.n, g.c_out, g.h, g.w], data)
}

fn forward_naive<T: Scalar>(
    g: &Geometry,
    input: &[T],
    params: &ConvParams<T>,
    offsets: &OffsetField,
) -> Vec<T> {
    let plane = g.plane();
    let weights = params.weights.data();
    let bias = params.bias.data();
    let mut out = vec![T::ZERO; g.n * g.c_out * plane];
    out.par_chunks_mut(g.w).enumerate().for_each(|(row_id, row)| {
        let v = row_id % g.h;
        let o = (row_id / g.h) % g.c_out;
        let n = row_id / (g.h * g.c_out);
        let image = &input[n * g.c_in * plane..(n + 1) * g.c_in * plane];
        for (u, dst) in row.iter_mut().enumerate() {
            let taps = offsets.pixel(u, v);
            let mut acc = T::ZERO;
            for c in 0..g.c_in {
                let src = &image[c * plane..(c + 1) * plane];
                let wrow = &weights[(o * g.c_in + c) * g.taps..][..g.taps];
                for (&wk, &(du, dv)) in wrow.iter().zip(taps) {
                    acc += wk * sample_plane(src, g.h, g.w, u as f64 + du, v as f64 + dv);
                }
            }
            *dst = acc + bias[o];
        }
    });
    out
}

fn forward_gather<T: Scalar>(
    g: &Geometry,
    input: &[T],
    params: &ConvParams<T>,
    plan: &SamplingPlan<T>,
) -> Vec<T> {
    let plane = g.plane();
    let depth = g.c_in * g.taps;
    let weights = params.weights.data();
    let bias = params.bias.data();
    let mut out = vec![T::ZERO; g.n * g.c_out * plane];
    for (n, out_n) in out.chunks_mut(g.c_out * plane).enumerate() {
        let cols = plan.columns(&input[n * g.c_in * plane..(n + 1) * g.c_in * plane], g.c_in);
        out_n.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
            let wrow = &weights[o * depth..(o + 1) * depth];
            for (ck, &wk) in wrow.iter().enumerate() {
                let col = &cols[ck * plane..(ck + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(col) {
                    *d += wk * s;
                }
            }
            for d in dst.iter_mut() {
                *d += bias[o];
            }
        });
    }
    out
}

/// Gradients of `<grad_output, pac_conv_forward(input)>` with respect to the
/// input, weights and bias. Offsets are constants and receive no gradient.
pub fn pac_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    offsets: &OffsetField,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check_shapes(input, params, offsets)?;
    if grad_output.dims() != [g.n, g.c_out, g.h, g.w] {
        return Err(Error::ShapeMismatch(format!(
            "grad_output must be {:?}, got {:?}",
            [g.n, g.c_out, g.h, g.w],
            grad_output.dims()
        )));
    }
    check_input(input, params)?;
    if !grad_output.all_finite() {
        return Err(Error::NonFiniteInput("grad_output"));
    }

    let plan = SamplingPlan::<T>::new(offsets);
    let plane = g.plane();
    let depth = g.c_in * g.taps;
    let weights = params.weights.data();
    let gout = grad_output.data();

    let mut grad_bias = vec![T::ZERO; g.c_out];
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        for n in 0..g.n {
            let src = &gout[(n * g.c_out + o) * plane..][..plane];
            for &v in src {
                *gb += v;
            }
        }
    }

    let mut grad_weights = vec![T::ZERO; g.c_out * depth];
    let mut grad_input = vec![T::ZERO; g.n * g.c_in * plane];
    for n in 0..g.n {
        let image = &input.data()[n * g.c_in * plane..(n + 1) * g.c_in * plane];
        let gout_n = &gout[n * g.c_out * plane..(n + 1) * g.c_out * plane];

        // dL/dw[o][ck] += sum_p gout[o][p] * cols[ck][p]
        let cols = plan.columns(image, g.c_in);
        grad_weights.par_chunks_mut(depth).enumerate().for_each(|(o, gw)| {
            let go = &gout_n[o * plane..(o + 1) * plane];
            for (ck, slot) in gw.iter_mut().enumerate() {
                let col = &cols[ck * plane..(ck + 1) * plane];
                let mut acc = T::ZERO;
                for (&a, &b) in go.iter().zip(col) {
                    acc += a * b;
                }
                *slot += acc;
            }
        });

        // dL/dcols[ck][p] = sum_o w[o][ck] * gout[o][p], then scatter each
        // column entry back through its bilinear corners.
        let gin_n = &mut grad_input[n * g.c_in * plane..(n + 1) * g.c_in * plane];
        gin_n.par_chunks_mut(plane).enumerate().for_each(|(c, gin)| {
            let mut gcol = vec![T::ZERO; g.taps * plane];
            for o in 0..g.c_out {
                let go = &gout_n[o * plane..(o + 1) * plane];
                let wrow = &weights[o * depth + c * g.taps..][..g.taps];
                for (k, &wk) in wrow.iter().enumerate() {
                    let dst = &mut gcol[k * plane..(k + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(go) {
                        *d += wk * v;
                    }
                }
            }
            for p in 0..plane {
                for k in 0..g.taps {
                    let gv = gcol[k * plane + p];
                    for corner in &plan.entries[p * g.taps + k] {
                        gin[corner.idx] += corner.wt * gv;
                    }
                }
            }
        });
    }

    Ok(ConvGrads {
        input: Tensor::new(vec![g.n, g.c_in, g.h, g.w], grad_input)?,
        weights: Tensor::new(params.weights.dims().to_vec(), grad_weights)?,
        bias: Tensor::new(vec![g.c_out], grad_bias)?,
    })
}

/// The regular dilated tap grid at every pixel of an `h x w` map.
pub fn regular_offsets(h: usize, w: usize, spec: &KernelSpec) -> Result<OffsetField> {
    let angles = crate::camera::AngleField::uniform(w, h, crate::camera::FALLBACK_ANGLE)?;
    crate::offsets::build_offset_field(&angles, spec)
}

/// Ordinary zero-padded, stride-1 dilated cross-correlation with "same"
/// output size, computed with integer indexing.
pub fn standard_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = input.shape4("input")?;
    if params.c_in() != c_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels but weights expect {}",
            params.c_in()
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidKernel("dilation must be at least 1".into()));
    }
    check_input(input, params)?;
    let (c_out, rows, cols) = (params.c_out(), params.rows(), params.cols());
    let taps = rows * cols;
    let (pad_r, pad_c) = ((rows / 2 * dilation) as isize, (cols / 2 * dilation) as isize);
    let plane = h * w;
    let weights = params.weights.data();
    let bias = params.bias.data();
    let data = input.data();

    let mut out = vec![T::ZERO; n * c_out * plane];
    out.par_chunks_mut(w).enumerate().for_each(|(row_id, row)| {
        let v = row_id % h;
        let o = (row_id / h) % c_out;
        let b = row_id / (h * c_out);
        for (u, dst) in row.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for c in 0..c_in {
                let src = &data[(b * c_in + c) * plane..][..plane];
                let wrow = &weights[(o * c_in + c) * taps..][..taps];
                for (k, &wk) in wrow.iter().enumerate() {
                    let y = v as isize + (k / cols * dilation) as isize - pad_r;
                    let x = u as isize + (k % cols * dilation) as isize - pad_c;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += wk * src[y as usize * w + x as usize];
                    }
                }
            }
            *dst = acc + bias[o];
        }
    });
    Tensor::new(vec![n, c_out, h, w], out)
}

/// Backward pass of [`standard_conv_forward`].
pub fn standard_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    dilation: usize,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [_, _, h, w] = input.shape4("input")?;
    let spec = KernelSpec::new(params.rows(), params.cols(), dilation)?;
    pac_conv_backward(input, params, &regular_offsets(h, w, &spec)?, grad_output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::AngleField;
    use crate::offsets::build_offset_field;
    use crate::rng::SplitMix64;
    use std::f64::consts::FRAC_PI_2;

    fn random(dims: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.symmetric(1.0))
    }

    #[test]
    fn sample_at_lattice_point_is_exact() {
        let plane = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_sample(&plane, 2.0, 1.0).unwrap(), 6.0);
        assert_eq!(bilinear_sample(&plane, 0.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn sample_far_outside_is_zero() {
        let plane = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&plane, -5.0, -5.0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&plane, 1e9, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn sample_center_of_two_by_two() {
        let plane = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&plane, 0.5, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn sample_half_outside_edge_fades_to_zero() {
        let plane = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        assert_eq!(bilinear_sample(&plane, -0.5, 0.0).unwrap(), 2.0);
        assert_eq!(bilinear_sample(&plane, 0.25, 0.5).unwrap(), 4.0 * 0.75 * 0.5);
    }

    #[test]
    fn sample_requires_rank_two() {
        let t = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(bilinear_sample(&t, 0.0, 0.0).is_err());
    }

    #[test]
    fn ones_box_filter_counts_neighbors() {
        let input = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let params = ConvParams::without_bias(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap()).unwrap();
        let out = standard_conv_forward(&input, &params, 1).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn dilated_impulse_response_spreads_weights() {
        let mut delta = vec![0.0; 25];
        delta[12] = 1.0;
        let input = Tensor::new(vec![1, 1, 5, 5], delta).unwrap();
        let w: Vec<f64> = (1..=9).map(f64::from).collect();
        let params = ConvParams::without_bias(Tensor::new(vec![1, 1, 3, 3], w.clone()).unwrap()).unwrap();
        let out = standard_conv_forward(&input, &params, 2).unwrap();
        let mut expected = vec![0.0; 25];
        // Cross-correlation: output at center - d*(i, j) picks up w[i][j].
        for i in 0..3 {
            for j in 0..3 {
                let (y, x) = (2 + 2 * (1 - i as isize), 2 + 2 * (1 - j as isize));
                expected[y as usize * 5 + x as usize] = w[i * 3 + j];
            }
        }
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn identity_center_tap_passes_input_through() {
        let mut rng = SplitMix64::new(5);
        let input = random(&[2, 3, 5, 7], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let params = ConvParams::without_bias(w).unwrap();
        let phis: Vec<f64> = (0..35).map(|_| rng.range(-3.0, 3.0)).collect();
        let angles = AngleField::from_parts(7, 5, phis, vec![true; 35]).unwrap();
        let offsets = build_offset_field(&angles, &KernelSpec::square3(3).unwrap()).unwrap();
        for which in ConvImpl::ALL {
            let out = pac_conv_forward_with(which, &input, &params, &offsets).unwrap();
            assert_eq!(out.data(), input.data());
        }
    }

    #[test]
    fn vertical_field_matches_standard_conv() {
        let mut rng = SplitMix64::new(11);
        let input = random(&[2, 3, 9, 10], &mut rng);
        let params = ConvParams::new(random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng)).unwrap();
        for d in [1, 2, 4] {
            let offsets = regular_offsets(9, 10, &KernelSpec::square3(d).unwrap()).unwrap();
            let expected = standard_conv_forward(&input, &params, d).unwrap();
            for which in ConvImpl::ALL {
                let out = pac_conv_forward_with(which, &input, &params, &offsets).unwrap();
                assert!(out.max_abs_diff(&expected) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = SplitMix64::new(3);
        let input = random(&[1, 2, 4, 4], &mut rng);
        let params = ConvParams::new(random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)).unwrap();
        let angles = AngleField::uniform(4, 4, -2.2).unwrap();
        let offsets = build_offset_field(&angles, &KernelSpec::square3(2).unwrap()).unwrap();
        let grads = pac_conv_backward(&input, &params, &offsets, &Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaled_cotangent_scales_gradients_exactly() {
        let mut rng = SplitMix64::new(4);
        let input = random(&[1, 2, 5, 6], &mut rng);
        let params = ConvParams::new(random(&[2, 2, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let angles = AngleField::uniform(6, 5, 0.7).unwrap();
        let offsets = build_offset_field(&angles, &KernelSpec::square3(1).unwrap()).unwrap();
        let g = random(&[1, 2, 5, 6], &mut rng);
        let base = pac_conv_backward(&input, &params, &offsets, &g).unwrap();
        // Powers of two keep every product exact.
        let scaled = pac_conv_backward(&input, &params, &offsets, &g.scale(4.0)).unwrap();
        assert_eq!(scaled.input, base.input.scale(4.0));
        assert_eq!(scaled.weights, base.weights.scale(4.0));
        assert_eq!(scaled.bias, base.bias.scale(4.0));
    }

    #[test]
    fn shape_errors() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let params = ConvParams::<f64>::zeros(1, 3, 3, 3).unwrap();
        let offsets = regular_offsets(4, 4, &KernelSpec::default()).unwrap();
        assert!(matches!(pac_conv_forward(&input, &params, &offsets), Err(Error::ShapeMismatch(_))));
        let params = ConvParams::<f64>::zeros(1, 2, 3, 3).unwrap();
        let wrong = regular_offsets(5, 4, &KernelSpec::default()).unwrap();
        assert!(matches!(pac_conv_forward(&input, &params, &wrong), Err(Error::ShapeMismatch(_))));
        let five = regular_offsets(4, 4, &KernelSpec::new(5, 5, 1).unwrap()).unwrap();
        assert!(matches!(pac_conv_forward(&input, &params, &five), Err(Error::ShapeMismatch(_))));
        assert!(pac_conv_backward(&input, &params, &offsets, &Tensor::zeros(&[1, 2, 4, 4])).is_err());
        assert!(ConvParams::new(Tensor::<f64>::zeros(&[1, 1, 2, 3]), Tensor::zeros(&[1])).is_err());
        assert!(ConvParams::new(Tensor::<f64>::zeros(&[2, 1, 3, 3]), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut input = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        input.data_mut()[4] = f64::NAN;
        let params = ConvParams::<f64>::zeros(1, 1, 3, 3).unwrap();
        let offsets = regular_offsets(3, 3, &KernelSpec::default()).unwrap();
        assert!(matches!(pac_conv_forward(&input, &params, &offsets), Err(Error::NonFiniteInput(_))));
        assert!(matches!(standard_conv_forward(&input, &params, 1), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn upward_field_is_row_flipped_standard_conv() {
        let mut rng = SplitMix64::new(8);
        let input = random(&[1, 2, 7, 7], &mut rng);
        let params = ConvParams::new(random(&[2, 2, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let mut flipped = params.clone();
        for oc in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    flipped.weights.data_mut()[oc * 9 + i * 3 + j] = params.weights.data()[oc * 9 + (2 - i) * 3 + j];
                }
            }
        }
        let angles = AngleField::uniform(7, 7, -FRAC_PI_2).unwrap();
        let offsets = build_offset_field(&angles, &KernelSpec::square3(2).unwrap()).unwrap();
        let out = pac_conv_forward(&input, &params, &offsets).unwrap();
        let expected = standard_conv_forward(&input, &flipped, 2).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn impl_names_parse() {
        assert_eq!("naive".parse::<ConvImpl>().unwrap(), ConvImpl::Naive);
        assert_eq!("gather".parse::<ConvImpl>().unwrap(), ConvImpl::Gather);
        assert!("fast".parse::<ConvImpl>().is_err());
    }
}
