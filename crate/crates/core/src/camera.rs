//! Pinhole camera geometry and per-pixel perspective angles.
//!
//! Camera coordinates follow the usual vision convention: X right, Y down,
//! Z forward. Pixel coordinates are `(u, v) = (column, row)` with integer
//! values at pixel centers. All geometry is evaluated in `f64`.

use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default half-width of the band around the horizon row, in pixels.
pub const DEFAULT_HORIZON_EPSILON: f64 = 1.0;

/// Angle stored for pixels where no perspective angle is defined. A vertical
/// depth axis turns the skewed kernel back into a plain dilated grid.
pub const FALLBACK_ANGLE: f64 = FRAC_PI_2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx = {}, cy = {})",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Intrinsics of a feature map sampled every `stride` pixels: all four
    /// parameters are divided by the stride.
    pub fn downscaled(&self, stride: f64) -> Result<Self> {
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::InvalidIntrinsics(format!("stride must be positive, got {stride}")));
        }
        Self::new(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Ground plane `Y = y0` in camera coordinates. With Y pointing down, a
/// positive height puts the ground below the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    y0: f64,
}

impl GroundPlane {
    pub fn new(y0: f64) -> Result<Self> {
        if !y0.is_finite() || y0 == 0.0 {
            return Err(Error::InvalidGroundPlane(y0));
        }
        Ok(Self { y0 })
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }
}

/// Image-plane velocity of a point as its depth changes, in pixels per meter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthGradient {
    pub du_dz: f64,
    pub dv_dz: f64,
}

/// How to treat pixels above the horizon, where the ground-plane
/// backprojection lands behind the camera.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AboveHorizon {
    /// Evaluate the formulas as written. The resulting axis points away from
    /// the principal point.
    #[default]
    Verbatim,
    /// Store the fallback angle and mark the pixel invalid.
    Fallback,
}

pub fn project(point: CameraPoint, k: &CameraIntrinsics) -> Result<PixelCoord> {
    if point.z.is_nan() || point.z <= 0.0 {
        return Err(Error::DepthNotPositive(point.z));
    }
    Ok(PixelCoord {
        u: k.fx * point.x / point.z + k.cx,
        v: k.fy * point.y / point.z + k.cy,
    })
}

/// Intersects the viewing ray of `pixel` with the ground plane.
///
/// Above the horizon (`v < cy` for a ground below the camera) the returned
/// depth is negative; the algebraic result is returned unchanged.
pub fn backproject_ground(
    pixel: PixelCoord,
    k: &CameraIntrinsics,
    g: &GroundPlane,
) -> Result<CameraPoint> {
    let dv = pixel.v - k.cy;
    if dv == 0.0 {
        return Err(Error::HorizonSingularity { v: pixel.v, cy: k.cy });
    }
    let y0 = g.y0;
    Ok(CameraPoint {
        x: (pixel.u - k.cx) * y0 * k.fy / (dv * k.fx),
        y: y0,
        z: y0 * k.fy / dv,
    })
}

pub fn depth_derivative(point: CameraPoint, k: &CameraIntrinsics) -> Result<DepthGradient> {
    if point.z == 0.0 {
        return Err(Error::DepthNotPositive(point.z));
    }
    let z2 = point.z * point.z;
    Ok(DepthGradient {
        du_dz: -point.x * k.fx / z2,
        dv_dz: -point.y * k.fy / z2,
    })
}

/// Direction in which `pixel` moves when its ground-plane point slides along
/// the depth axis, as an angle from the u-axis in `(-pi, pi]`.
pub fn perspective_angle(
    pixel: PixelCoord,
    k: &CameraIntrinsics,
    g: &GroundPlane,
    horizon_epsilon: f64,
) -> Result<f64> {
    if (pixel.v - k.cy).abs() < horizon_epsilon {
        return Err(Error::HorizonSingularity { v: pixel.v, cy: k.cy });
    }
    let ground = backproject_ground(pixel, k, g)?;
    let grad = depth_derivative(ground, k)?;
    Ok(normalize_angle(grad.dv_dz.atan2(grad.du_dz)))
}

// atan2 returns -pi for (-0.0, negative); fold it onto +pi.
fn normalize_angle(phi: f64) -> f64 {
    if phi == -PI {
        PI
    } else {
        phi
    }
}

/// Per-pixel perspective angles over a `height x width` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleField {
    width: usize,
    height: usize,
    phi: Vec<f64>,
    valid: Vec<bool>,
}

impl AngleField {
    /// Builds a field from raw arrays. Invalid entries are overwritten with
    /// the fallback angle.
    pub fn from_parts(width: usize, height: usize, mut phi: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        let n = width * height;
        if phi.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "angle field {height}x{width} needs {n} entries, got phi {} / valid {}",
                phi.len(),
                valid.len()
            )));
        }
        for (p, &ok) in phi.iter_mut().zip(&valid) {
            if !ok {
                *p = FALLBACK_ANGLE;
            } else if !p.is_finite() || *p <= -PI || *p > PI {
                return Err(Error::NonFiniteInput("angle field (valid angle outside (-pi, pi])"));
            }
        }
        Ok(Self { width, height, phi, valid })
    }

    /// A field with the same angle at every pixel, all marked valid.
    pub fn uniform(width: usize, height: usize, phi: f64) -> Result<Self> {
        check_dims(width, height)?;
        let n = width * height;
        Self::from_parts(width, height, vec![phi; n], vec![true; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, u: usize, v: usize) -> (f64, bool) {
        let i = v * self.width + u;
        (self.phi[i], self.valid[i])
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions(format!(
            "grid must be at least 1x1, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Perspective angles at every integer pixel of a `width x height` grid.
/// Rows within `horizon_epsilon` of `cy` fall back to vertical and are
/// marked invalid.
pub fn angle_field(
    width: usize,
    height: usize,
    k: &CameraIntrinsics,
    g: &GroundPlane,
    horizon_epsilon: f64,
) -> Result<AngleField> {
    angle_field_with_policy(width, height, k, g, horizon_epsilon, AboveHorizon::Verbatim)
}

pub fn angle_field_with_policy(
    width: usize,
    height: usize,
    k: &CameraIntrinsics,
    g: &GroundPlane,
    horizon_epsilon: f64,
    above: AboveHorizon,
) -> Result<AngleField> {
    check_dims(width, height)?;
    k.validate()?;
    if !(horizon_epsilon.is_finite() && horizon_epsilon > 0.0) {
        return Err(Error::InvalidDimensions(format!(
            "horizon epsilon must be positive, got {horizon_epsilon}"
        )));
    }
    let n = width * height;
    let mut phi = vec![FALLBACK_ANGLE; n];
    let mut valid = vec![false; n];
    // Ground below the camera means "above the horizon" is v < cy.
    let above_sign = g.y0().signum();

    phi.par_chunks_mut(width)
        .zip(valid.par_chunks_mut(width))
        .enumerate()
        .for_each(|(row, (phi_row, valid_row))| {
            let v = row as f64;
            let is_above = (v - k.cy) * above_sign < 0.0;
            if above == AboveHorizon::Fallback && is_above {
                return;
            }
            for (col, (p, ok)) in phi_row.iter_mut().zip(valid_row.iter_mut()).enumerate() {
                if let Ok(angle) =
                    perspective_angle(PixelCoord::new(col as f64, v), k, g, horizon_epsilon)
                {
                    *p = angle;
                    *ok = true;
                }
            }
        });

    Ok(AngleField { width, height, phi, valid })
}
