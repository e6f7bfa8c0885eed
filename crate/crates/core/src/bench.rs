//! Wall-clock harness comparing forward implementations on one workload.

use std::fmt::Write as _;
use std::time::Instant;

use crate::camera::{angle_field, CameraIntrinsics, GroundPlane, DEFAULT_HORIZON_EPSILON};
use crate::conv::{pac_conv_forward_with, ConvImpl, ConvParams};
use crate::error::{Error, Result};
use crate::offsets::{build_offset_field, KernelSpec, OffsetField};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str =
    "impl,n,c_in,c_out,h,w,taps,reps,ns_min,ns_median,ns_max,checksum";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub impl_name: String,
    /// Input shape `[n, c_in, h, w]`.
    pub shape: [usize; 4],
    pub c_out: usize,
    pub taps: usize,
    pub repetitions: usize,
    pub ns_min: u128,
    pub ns_median: u128,
    pub ns_max: u128,
    /// Sum of all output elements.
    pub checksum: f64,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        let [n, c, h, w] = self.shape;
        format!(
            "{},{n},{c},{},{h},{w},{},{},{},{},{},{:.17e}",
            self.impl_name,
            self.c_out,
            self.taps,
            self.repetitions,
            self.ns_min,
            self.ns_median,
            self.ns_max,
            self.checksum
        )
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Column-aligned text table.
pub fn to_text(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>18} {:>5} {:>4} {:>5} {:>14} {:>14} {:>14} {:>24}",
        "impl", "shape", "c_out", "taps", "reps", "min (ns)", "median (ns)", "max (ns)", "checksum"
    );
    for r in reports {
        let [n, c, h, w] = r.shape;
        let _ = writeln!(
            out,
            "{:<8} {:>18} {:>5} {:>4} {:>5} {:>14} {:>14} {:>14} {:>24.15e}",
            r.impl_name,
            format!("{n}x{c}x{h}x{w}"),
            r.c_out,
            r.taps,
            r.repetitions,
            r.ns_min,
            r.ns_median,
            r.ns_max,
            r.checksum
        );
    }
    out
}

/// Deterministic benchmark inputs: seeded input and weights, and offsets
/// from a camera whose horizon crosses the upper third of the map.
pub struct Workload {
    pub input: Tensor<f64>,
    pub params: ConvParams<f64>,
    pub offsets: OffsetField,
}

impl Workload {
    pub fn new(shape: [usize; 4], c_out: usize, dilation: usize, seed: u64) -> Result<Self> {
        let [_, c_in, h, w] = shape;
        if shape.contains(&0) || c_out == 0 {
            return Err(Error::InvalidDimensions(format!(
                "benchmark shape {shape:?} -> {c_out} must be non-empty"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let input = Tensor::from_fn(&shape, |_| rng.symmetric(1.0));
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        let weights = Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.symmetric(bound));
        let bias = Tensor::from_fn(&[c_out], |_| rng.symmetric(0.1));
        let focal = w.max(h) as f64;
        let k = CameraIntrinsics::new(focal, focal, w as f64 / 2.0, h as f64 / 3.0)?;
        let angles = angle_field(w, h, &k, &GroundPlane::new(1.65)?, DEFAULT_HORIZON_EPSILON)?;
        let offsets = build_offset_field(&angles, &KernelSpec::square3(dilation)?)?;
        Ok(Self { input, params: ConvParams::new(weights, bias)?, offsets })
    }
}

/// Times `repeat` forward passes of `which` and summarizes them.
pub fn run_bench(workload: &Workload, which: ConvImpl, repeat: usize) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::InvalidDimensions("repeat must be at least 1".into()));
    }
    let mut times = Vec::with_capacity(repeat);
    let mut checksum = 0.0;
    for _ in 0..repeat {
        let start = Instant::now();
        let out = pac_conv_forward_with(which, &workload.input, &workload.params, &workload.offsets)?;
        times.push(start.elapsed().as_nanos());
        checksum = out.sum_f64();
    }
    times.sort_unstable();
    let shape = workload.input.shape4("input")?;
    Ok(BenchReport {
        impl_name: which.name().to_string(),
        shape,
        c_out: workload.params.c_out(),
        taps: workload.params.taps(),
        repetitions: repeat,
        ns_min: times[0],
        ns_median: times[(repeat - 1) / 2],
        ns_max: times[repeat - 1],
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_repetition_collapses_stats() {
        let wl = Workload::new([1, 2, 8, 8], 3, 2, 1).unwrap();
        let r = run_bench(&wl, ConvImpl::Naive, 1).unwrap();
        assert_eq!(r.ns_min, r.ns_median);
        assert_eq!(r.ns_median, r.ns_max);
        assert_eq!(r.taps, 9);
    }

    #[test]
    fn impls_agree_on_checksum() {
        let wl = Workload::new([2, 3, 12, 10], 4, 4, 3).unwrap();
        let a = run_bench(&wl, ConvImpl::Naive, 2).unwrap();
        let b = run_bench(&wl, ConvImpl::Gather, 2).unwrap();
        assert!((a.checksum - b.checksum).abs() < 1e-10);
    }

    #[test]
    fn csv_has_header_and_twelve_columns() {
        let wl = Workload::new([1, 1, 4, 4], 1, 1, 0).unwrap();
        let r = run_bench(&wl, ConvImpl::Gather, 3).unwrap();
        let csv = to_csv(&[r]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 12);
        assert!(lines[1].starts_with("gather,1,1,1,4,4,9,3,"));
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(Workload::new([1, 0, 4, 4], 1, 1, 0).is_err());
        let wl = Workload::new([1, 1, 4, 4], 1, 1, 0).unwrap();
        assert!(run_bench(&wl, ConvImpl::Naive, 0).is_err());
    }
}
