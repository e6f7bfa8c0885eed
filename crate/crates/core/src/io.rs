//! File formats: KITTI calibration text, the PACT tensor container, PPM
//! angle visualizations and module parameter directories.
//!
//! # PACT layout
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PACT"
//! 4       1           version (1)
//! 5       1           dtype (1 = f32, 2 = f64)
//! 6       1           rank
//! 7       1           pad (0)
//! 8       8 * rank    dims, u64 little-endian
//! ...     prod(dims) * dtype size   payload, row-major, little-endian
//! ```

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::camera::{AngleField, CameraIntrinsics};
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::module::{BranchKind, PacBranchConfig, PacModuleParams};
use crate::tensor::{AnyTensor, DType, Scalar, Tensor};

pub const PACT_MAGIC: [u8; 4] = *b"PACT";
pub const PACT_VERSION: u8 = 1;
/// Bytes before the dims array.
pub const PACT_PRELUDE_LEN: usize = 8;

/// File listing the branch configs inside a params directory.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Reads fx, fy, cx, cy from the `P2:` projection matrix of a KITTI
/// calibration file. Other lines are ignored.
pub fn parse_kitti_calib(text: &str) -> Result<CameraIntrinsics> {
    let rest = text
        .lines()
        .find_map(|line| line.trim_start().strip_prefix("P2:"))
        .ok_or(Error::MissingP2)?;
    let values = rest
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedNumber(tok.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != 12 {
        return Err(Error::MalformedNumber(format!(
            "P2 needs 12 values, found {}",
            values.len()
        )));
    }
    // Row-major 3x4: P[0][0] = fx, P[0][2] = cx, P[1][1] = fy, P[1][2] = cy.
    let (fx, cx, fy, cy) = (values[0], values[2], values[5], values[6]);
    if !(fx > 0.0 && fy > 0.0) {
        return Err(Error::NonPositiveFocal { fx, fy });
    }
    CameraIntrinsics::new(fx, fy, cx, cy)
}

pub fn read_kitti_calib(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    parse_kitti_calib(&fs::read_to_string(path)?)
}

fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

pub fn write_pact<W: Write>(tensor: &AnyTensor, mut sink: W) -> Result<()> {
    let dims = tensor.dims();
    let rank = u8::try_from(dims.len())
        .map_err(|_| Error::InvalidDimensions(format!("rank {} exceeds 255", dims.len())))?;
    let mut buf = Vec::with_capacity(PACT_PRELUDE_LEN + 8 * dims.len());
    buf.extend_from_slice(&PACT_MAGIC);
    buf.extend_from_slice(&[PACT_VERSION, dtype_code(tensor.dtype()), rank, 0]);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match tensor {
        AnyTensor::F32(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        AnyTensor::F64(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

fn read_header_bytes<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::TruncatedPayload(format!("file ends inside {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_pact<R: Read>(mut source: R) -> Result<AnyTensor> {
    let mut prelude = [0u8; PACT_PRELUDE_LEN];
    read_header_bytes(&mut source, &mut prelude, "header")?;
    let magic = [prelude[0], prelude[1], prelude[2], prelude[3]];
    if magic != PACT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if prelude[4] != PACT_VERSION {
        return Err(Error::UnsupportedVersion(prelude[4]));
    }
    let dtype = match prelude[5] {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(Error::UnknownDtype(other)),
    };
    let rank = prelude[6] as usize;

    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_header_bytes(&mut source, &mut b, "dims")?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::InvalidDimensions("dimension exceeds address space".into()))?;
        dims.push(d);
    }
    let bytes = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidDimensions(format!("payload size of {dims:?} overflows")))?;

    let mut payload = Vec::new();
    source.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::TruncatedPayload(format!(
            "expected {bytes} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::new(dims, data)?)
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::new(dims, data)?)
        }
    })
}

pub fn write_pact_file(path: impl AsRef<Path>, tensor: &AnyTensor) -> Result<()> {
    write_pact(tensor, BufWriter::new(File::create(path)?))
}

pub fn read_pact_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_pact(BufReader::new(File::open(path)?))
}

/// Phi as a `[height, width]` f64 tensor.
pub fn angle_tensor(angles: &AngleField) -> Tensor<f64> {
    Tensor::new(vec![angles.height(), angles.width()], angles.phi().to_vec())
        .expect("angle field dims match storage")
}

/// Validity as a `[height, width]` f64 tensor of 0 / 1.
pub fn mask_tensor(angles: &AngleField) -> Tensor<f64> {
    let data = angles.valid().iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![angles.height(), angles.width()], data).expect("angle field dims match storage")
}

/// Rebuilds an angle field from its phi and mask tensors.
pub fn angle_field_from_tensors(phi: &Tensor<f64>, mask: &Tensor<f64>) -> Result<AngleField> {
    let (h, w) = match phi.dims() {
        &[h, w] => (h, w),
        d => return Err(Error::ShapeMismatch(format!("angle tensor must be [h, w], got {d:?}"))),
    };
    if mask.dims() != phi.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match angles {:?}",
            mask.dims(),
            phi.dims()
        )));
    }
    let valid = mask.data().iter().map(|&m| m != 0.0).collect();
    AngleField::from_parts(w, h, phi.data().to_vec(), valid)
}

/// RGB for hue `h` in degrees at full saturation and value.
pub fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |c: f64| (c * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Binary PPM (P6) of the field: valid pixels colored by hue
/// `(phi + pi) / (2 pi) * 360`, horizon-band pixels black.
pub fn write_angle_ppm<W: Write>(angles: &AngleField, mut sink: W) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", angles.width(), angles.height()).into_bytes();
    buf.reserve(3 * angles.phi().len());
    for (&phi, &ok) in angles.phi().iter().zip(angles.valid()) {
        let rgb = if ok { hue_to_rgb((phi + PI) / (2.0 * PI) * 360.0) } else { [0, 0, 0] };
        buf.extend_from_slice(&rgb);
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

/// Writes params as `<name>.pact` files plus a manifest with one
/// `kind dilation` line per branch.
pub fn save_module_params<T: Scalar>(
    dir: impl AsRef<Path>,
    branches: &[PacBranchConfig],
    params: &PacModuleParams<T>,
) -> Result<()>
where
    AnyTensor: From<Tensor<T>>,
{
    let dir = dir.as_ref();
    if branches.len() != params.branches.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} branch configs for {} branch params",
            branches.len(),
            params.branches.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for b in branches {
        manifest.push_str(&format!("{} {}\n", b.kind, b.dilation));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    for (name, t) in params.named_tensors() {
        write_pact_file(dir.join(format!("{name}.pact")), &AnyTensor::from(t.clone()))?;
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<PacBranchConfig>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(kind), Some(dilation), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::BadManifest(format!("line {}: expected `kind dilation`", n + 1)));
        };
        let kind: BranchKind = kind
            .parse()
            .map_err(|_| Error::BadManifest(format!("line {}: unknown kind {kind:?}", n + 1)))?;
        let dilation = dilation
            .parse()
            .map_err(|_| Error::BadManifest(format!("line {}: bad dilation {dilation:?}", n + 1)))?;
        out.push(PacBranchConfig { kind, dilation });
    }
    if out.is_empty() {
        return Err(Error::BadManifest("no branches listed".into()));
    }
    Ok(out)
}

pub fn load_module_params<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(Vec<PacBranchConfig>, PacModuleParams<T>)> {
    let dir = dir.as_ref();
    let branches = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let load = |name: &str| -> Result<Tensor<T>> {
        Ok(read_pact_file(dir.join(format!("{name}.pact")))?.cast())
    };
    let convs = (0..branches.len())
        .map(|i| ConvParams::new(load(&format!("branch{i}.weight"))?, load(&format!("branch{i}.bias"))?))
        .collect::<Result<Vec<_>>>()?;
    let fusion = ConvParams::new(load("fusion.weight")?, load("fusion.bias")?)?;
    Ok((branches, PacModuleParams { branches: convs, fusion }))
}
