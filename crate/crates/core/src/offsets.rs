//! Sheared kernel taps that follow the per-pixel depth axis.
//!
//! Tap `(i, j)` of a kernel with dilation `d` sits at
//! `d * (j * e_u + i * e_phi)`, where `e_u = (1, 0)` and
//! `e_phi = (cos phi, sin phi)`. Kernel rows stay horizontal while the
//! column axis is rotated onto the depth axis, so `phi = pi/2` reproduces
//! the ordinary dilated grid.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::camera::AngleField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    rows: usize,
    cols: usize,
    dilation: usize,
}

impl KernelSpec {
    pub fn new(rows: usize, cols: usize, dilation: usize) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!(
                "kernel must have odd extent, got {rows}x{cols}"
            )));
        }
        if dilation == 0 {
            return Err(Error::InvalidKernel("dilation must be at least 1".into()));
        }
        Ok(Self { rows, cols, dilation })
    }

    /// 3x3 kernel with the given dilation.
    pub fn square3(dilation: usize) -> Result<Self> {
        Self::new(3, 3, dilation)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn taps(&self) -> usize {
        self.rows * self.cols
    }

    /// Row and column indices of tap `k`, centered on zero.
    pub fn tap_index(&self, k: usize) -> (isize, isize) {
        let i = (k / self.cols) as isize - (self.rows / 2) as isize;
        let j = (k % self.cols) as isize - (self.cols / 2) as isize;
        (i, j)
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { rows: 3, cols: 3, dilation: 1 }
    }
}

/// Unit vector along the depth axis. The two vertical angles are returned
/// exactly so that they reproduce integer tap grids.
pub fn depth_axis(phi: f64) -> (f64, f64) {
    if phi == FRAC_PI_2 {
        (0.0, 1.0)
    } else if phi == -FRAC_PI_2 {
        (0.0, -1.0)
    } else {
        let (s, c) = phi.sin_cos();
        (c, s)
    }
}

/// Offsets `(du, dv)` of every tap, row-major (kernel row outer).
pub fn kernel_offsets(phi: f64, spec: &KernelSpec) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(spec.taps());
    push_kernel_offsets(phi, spec, &mut out);
    out
}

fn push_kernel_offsets(phi: f64, spec: &KernelSpec, out: &mut Vec<(f64, f64)>) {
    let (ax, ay) = depth_axis(phi);
    let d = spec.dilation as f64;
    for k in 0..spec.taps() {
        let (i, j) = spec.tap_index(k);
        let (i, j) = (i as f64, j as f64);
        out.push((d * (j + i * ax), d * (i * ay)));
    }
}

/// Per-pixel tap offsets over a `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    width: usize,
    height: usize,
    taps: usize,
    // [height][width][taps] of (du, dv)
    offsets: Vec<(f64, f64)>,
}

impl OffsetField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// All taps of pixel `(u, v)`.
    pub fn pixel(&self, u: usize, v: usize) -> &[(f64, f64)] {
        let start = (v * self.width + u) * self.taps;
        &self.offsets[start..start + self.taps]
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.offsets
    }

    /// Rank-4 tensor `[height, width, taps, 2]`.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let data = self.offsets.iter().flat_map(|&(du, dv)| [du, dv]).collect();
        Tensor::new(vec![self.height, self.width, self.taps, 2], data)
            .expect("offset field dims match storage")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let (height, width, taps) = match t.dims() {
            &[h, w, k, 2] => (h, w, k),
            d => {
                return Err(Error::ShapeMismatch(format!(
                    "offset tensor must be [height, width, taps, 2], got {d:?}"
                )))
            }
        };
        if height == 0 || width == 0 || taps == 0 {
            return Err(Error::InvalidDimensions(format!(
                "offset field must be non-empty, got {height}x{width}x{taps}"
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFiniteInput("offset field"));
        }
        let offsets = t.data().chunks_exact(2).map(|p| (p[0], p[1])).collect();
        Ok(Self { width, height, taps, offsets })
    }
}

pub fn build_offset_field(angles: &AngleField, spec: &KernelSpec) -> Result<OffsetField> {
    let (width, height) = (angles.width(), angles.height());
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions(format!(
            "angle field must be non-empty, got {width}x{height}"
        )));
    }
    let taps = spec.taps();
    let offsets = angles
        .phi()
        .par_chunks(width)
        .flat_map_iter(|row| {
            let mut buf = Vec::with_capacity(row.len() * taps);
            for &phi in row {
                push_kernel_offsets(phi, spec, &mut buf);
            }
            buf
        })
        .collect();
    Ok(OffsetField { width, height, taps, offsets })
}
