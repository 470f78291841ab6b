//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Reads little-endian uint8 / int16 / float32 volumes with `dim[0]` of 3 (or
//! 4 with a singleton fourth axis). Always writes float32 with a 352-byte
//! data offset and `scl_slope = 0` so that a write/read cycle is bit-exact.

use std::fs;
use std::path::Path;

use super::{Grid3, Volume3D};
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const QOFFSET_X: usize = 268;
    pub const MAGIC: usize = 344;
}

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn i32_at(b: &[u8], o: usize) -> i32 {
    i32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn save_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_nifti(vol)).map_err(|e| Error::io(path, e))
}

/// Parses an in-memory `.nii` file.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let truncated = |what: &str| {
        Error::io(
            "<nifti>",
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
        )
    };
    if bytes.len() < HEADER_SIZE {
        return Err(truncated("header"));
    }
    let sizeof_hdr = i32_at(bytes, offset::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format {
            field: "sizeof_hdr",
            detail: format!("expected 348 (little-endian), got {sizeof_hdr}"),
        });
    }
    let magic = &bytes[offset::MAGIC..offset::MAGIC + 4];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected \"n+1\\0\" or \"ni1\\0\", got {magic:?}"),
        });
    }

    let dim: Vec<i16> = (0..8).map(|i| i16_at(bytes, offset::DIM + 2 * i)).collect();
    match dim[0] {
        3 => {}
        4 if dim[4] == 1 => {}
        4 => {
            return Err(Error::Format {
                field: "dim",
                detail: format!("4D volumes need dim[4] = 1, got {}", dim[4]),
            })
        }
        n => {
            return Err(Error::Format {
                field: "dim",
                detail: format!("dim[0] must be 3 or 4, got {n}"),
            })
        }
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::Format {
            field: "dim",
            detail: format!("spatial dimensions must be >= 1, got {:?}", &dim[1..4]),
        });
    }
    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = i16_at(bytes, offset::DATATYPE);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let bitpix = i16_at(bytes, offset::BITPIX);
    if bitpix as usize != elem * 8 {
        return Err(Error::Format {
            field: "bitpix",
            detail: format!("datatype {datatype} implies {} bits, header says {bitpix}", elem * 8),
        });
    }

    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(bytes, offset::PIXDIM + 4 * (a + 1));
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Format {
                field: "pixdim",
                detail: format!("pixdim[{}] must be positive, got {p}", a + 1),
            });
        }
        *s = f64::from(p);
    }

    let vox_offset = f32_at(bytes, offset::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= 0.0 && vox_offset.fract() == 0.0) {
        return Err(Error::Format {
            field: "vox_offset",
            detail: format!("expected a non-negative integer, got {vox_offset}"),
        });
    }
    let start = (vox_offset as usize).max(HEADER_SIZE);
    let n = shape[0] * shape[1] * shape[2];
    let end = start + n * elem;
    if bytes.len() < end {
        return Err(truncated("data section"));
    }
    let raw = &bytes[start..end];

    let slope = f32_at(bytes, offset::SCL_SLOPE);
    let inter = f32_at(bytes, offset::SCL_INTER);
    let scale = slope != 0.0 && slope.is_finite();

    let value = |i: usize| -> f32 {
        let v = match datatype {
            DT_UINT8 => f32::from(raw[i]),
            DT_INT16 => f32::from(i16_at(raw, 2 * i)),
            _ => f32_at(raw, 4 * i),
        };
        if scale {
            slope * v + inter
        } else {
            v
        }
    };

    // NIfTI stores i fastest; our grids store the third axis fastest.
    let (nx, ny) = (shape[0], shape[1]);
    let grid = Grid3::from_fn(shape, |x, y, z| value(x + nx * (y + ny * z)));

    let origin = if i16_at(bytes, offset::QFORM_CODE) > 0 {
        [0, 1, 2].map(|a| f64::from(f32_at(bytes, offset::QOFFSET_X + 4 * a)))
    } else {
        [0.0; 3]
    };
    Volume3D::new(grid, spacing, origin)
}

/// Serializes a volume as a single-file float32 NIfTI-1 image.
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    let [nx, ny, nz] = vol.shape();
    let mut out = vec![0u8; VOX_OFFSET + 4 * nx * ny * nz];
    let put_i16 = |b: &mut [u8], o: usize, v: i16| b[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut [u8], o: usize, v: f32| b[o..o + 4].copy_from_slice(&v.to_le_bytes());

    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    for (i, d) in [3, nx, ny, nz, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut out, offset::DIM + 2 * i, d as i16);
    }
    put_i16(&mut out, offset::DATATYPE, DT_FLOAT32);
    put_i16(&mut out, offset::BITPIX, 32);
    put_f32(&mut out, offset::PIXDIM, 1.0);
    for a in 0..3 {
        put_f32(&mut out, offset::PIXDIM + 4 * (a + 1), vol.spacing[a] as f32);
    }
    put_f32(&mut out, offset::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut out, offset::SCL_SLOPE, 0.0);
    put_f32(&mut out, offset::SCL_INTER, 0.0);
    out[offset::XYZT_UNITS] = 2; // millimetres
    put_i16(&mut out, offset::QFORM_CODE, 1);
    for a in 0..3 {
        put_f32(&mut out, offset::QOFFSET_X + 4 * a, vol.origin[a] as f32);
    }
    out[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"n+1\0");

    let data = &mut out[VOX_OFFSET..];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let o = 4 * (x + nx * (y + ny * z));
                data[o..o + 4].copy_from_slice(&vol.grid.get(x, y, z).to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(shape: [i16; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
        let vol = Volume3D::new(
            Grid3::filled([shape[0] as usize, shape[1] as usize, shape[2] as usize], 0.0),
            [0.5, 0.75, 3.0],
            [0.0; 3],
        )
        .unwrap();
        let mut b = encode_nifti(&vol);
        b.truncate(VOX_OFFSET);
        b[offset::DATATYPE..offset::DATATYPE + 2].copy_from_slice(&datatype.to_le_bytes());
        b[offset::BITPIX..offset::BITPIX + 2].copy_from_slice(&bitpix.to_le_bytes());
        b
    }

    #[test]
    fn float32_identity_scaling() {
        let mut b = header([4, 4, 2], DT_FLOAT32, 32);
        for i in 0..32 {
            b.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let v = decode_nifti(&b).unwrap();
        assert_eq!(v.shape(), [4, 4, 2]);
        assert_eq!(v.spacing, [0.5, 0.75, 3.0]);
        // voxel (1, 2, 1) sits at NIfTI linear index 1 + 4*(2 + 4*1) = 25
        assert_eq!(v.grid.get(1, 2, 1), 12.5);
    }

    #[test]
    fn int16_affine_rescale() {
        let mut b = header([1, 1, 1], DT_INT16, 16);
        b[offset::SCL_SLOPE..offset::SCL_SLOPE + 4].copy_from_slice(&2.0f32.to_le_bytes());
        b[offset::SCL_INTER..offset::SCL_INTER + 4].copy_from_slice(&1.0f32.to_le_bytes());
        b.extend_from_slice(&3i16.to_le_bytes());
        assert_eq!(decode_nifti(&b).unwrap().grid.get(0, 0, 0), 7.0);
    }

    #[test]
    fn uint8_is_read() {
        let mut b = header([2, 1, 1], DT_UINT8, 8);
        b.extend_from_slice(&[0, 255]);
        assert_eq!(decode_nifti(&b).unwrap().grid.data(), &[0.0, 255.0]);
    }

    #[test]
    fn header_errors_name_the_field() {
        let mut b = header([2, 2, 2], DT_FLOAT32, 32);
        b.extend_from_slice(&[0u8; 32]);

        let mut bad = b.clone();
        bad[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(decode_nifti(&bad), Err(Error::Format { field: "sizeof_hdr", .. })));

        let mut bad = b.clone();
        bad[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"abcd");
        assert!(matches!(decode_nifti(&bad), Err(Error::Format { field: "magic", .. })));

        let mut bad = b.clone();
        bad[offset::DIM..offset::DIM + 2].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode_nifti(&bad), Err(Error::Format { field: "dim", .. })));

        let mut bad = b.clone();
        bad[offset::DIM..offset::DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        bad[offset::DIM + 8..offset::DIM + 10].copy_from_slice(&3i16.to_le_bytes());
        assert!(matches!(decode_nifti(&bad), Err(Error::Format { field: "dim", .. })));

        let mut bad = b.clone();
        bad[offset::DATATYPE..offset::DATATYPE + 2].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode_nifti(&bad), Err(Error::UnsupportedDatatype(64))));

        let mut bad = b.clone();
        bad.truncate(b.len() - 1);
        assert!(matches!(decode_nifti(&bad), Err(Error::Io { .. })));
    }

    #[test]
    fn singleton_fourth_dim_is_accepted() {
        let mut b = header([2, 1, 1], DT_FLOAT32, 32);
        b[offset::DIM..offset::DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        b.extend_from_slice(&[0u8; 8]);
        assert_eq!(decode_nifti(&b).unwrap().shape(), [2, 1, 1]);
    }
}
