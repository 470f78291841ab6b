//! Axial-slice PNGs: grayscale intensity with one-pixel mask contours.

use std::path::Path;

use anyhow::Result;
use gusl_core::volume::{BinaryMask, Volume3D};
use gusl_core::Error;
use image::{Rgb, RgbImage};

pub const GLAND: Rgb<u8> = Rgb([255, 255, 0]);
pub const TZ: Rgb<u8> = Rgb([255, 0, 0]);
pub const PZ: Rgb<u8> = Rgb([0, 255, 0]);

pub struct Masks {
    pub gland: Option<BinaryMask>,
    pub tz: Option<BinaryMask>,
    pub pz: Option<BinaryMask>,
}

pub fn parse_slices(spec: &str, depth: usize) -> Result<Vec<usize>> {
    match spec {
        "all" => Ok((0..depth).collect()),
        "mid" => Ok(vec![depth / 2]),
        list => list
            .split(',')
            .map(|s| {
                let z: usize = s.trim().parse().map_err(|_| Error::Invalid(format!("bad slice index {s:?}")))?;
                if z >= depth {
                    return Err(Error::Invalid(format!("slice {z} outside 0..{depth}")).into());
                }
                Ok(z)
            })
            .collect(),
    }
}

fn on_contour(m: &BinaryMask, x: usize, y: usize, z: usize) -> bool {
    let [h, w, _] = m.shape();
    m.contains(x, y, z)
        && (x == 0
            || y == 0
            || x + 1 == h
            || y + 1 == w
            || !m.contains(x - 1, y, z)
            || !m.contains(x + 1, y, z)
            || !m.contains(x, y - 1, z)
            || !m.contains(x, y + 1, z))
}

/// Rows follow the first axis, columns the second.
pub fn render(vol: &Volume3D, masks: &Masks, z: usize, scale: u32) -> RgbImage {
    let [h, w, _] = vol.shape();
    let (lo, hi) = vol.min_max();
    let range = f64::from(hi) - f64::from(lo);
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for x in 0..h {
        for y in 0..w {
            let v = f64::from(vol.grid.get(x, y, z));
            let g = if range > 0.0 { ((v - f64::from(lo)) / range * 255.0).round() as u8 } else { 0 };
            let mut px = Rgb([g, g, g]);
            for (m, colour) in [(&masks.gland, GLAND), (&masks.tz, TZ), (&masks.pz, PZ)] {
                if m.as_ref().is_some_and(|m| on_contour(m, x, y, z)) {
                    px = colour;
                }
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(y as u32 * scale + dx, x as u32 * scale + dy, px);
                }
            }
        }
    }
    img
}

pub fn write_overlays(vol: &Volume3D, masks: &Masks, slices: &[usize], scale: u32, out: &Path) -> Result<usize> {
    if scale == 0 {
        return Err(Error::Invalid("--scale must be >= 1".into()).into());
    }
    for m in [&masks.gland, &masks.tz, &masks.pz].into_iter().flatten() {
        if m.shape() != vol.shape() {
            return Err(Error::Shape(format!("mask {:?} does not match image {:?}", m.shape(), vol.shape())).into());
        }
    }
    for &z in slices {
        let p = out.join(format!("slice_{z:03}.png"));
        render(vol, masks, z, scale)
            .save(&p)
            .map_err(|e| Error::io(&p, std::io::Error::other(e)))?;
    }
    Ok(slices.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gusl_core::volume::Grid3;

    fn vol() -> Volume3D {
        Volume3D::new(Grid3::from_fn([6, 5, 3], |x, y, _| (x * 5 + y) as f32), [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn empty_masks_give_pure_gray() {
        let img = render(&vol(), &Masks { gland: None, tz: Some(BinaryMask::zeros([6, 5, 3])), pz: None }, 1, 1);
        assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(4, 5)[0], 255);
    }

    #[test]
    fn full_slice_mask_outlines_the_border() {
        let full = BinaryMask::from_fn([6, 5, 3], |_, _, _| true);
        let img = render(&vol(), &Masks { gland: Some(full), tz: None, pz: None }, 1, 1);
        for (c, r, p) in img.enumerate_pixels() {
            let border = c == 0 || r == 0 || c == 4 || r == 5;
            assert_eq!(*p == GLAND, border, "pixel ({c},{r})");
        }
    }

    #[test]
    fn scale_replicates_pixels() {
        let img = render(&vol(), &Masks { gland: None, tz: None, pz: None }, 0, 3);
        assert_eq!(img.dimensions(), (15, 18));
        assert_eq!(img.get_pixel(3, 0), img.get_pixel(5, 2));
    }

    #[test]
    fn slice_lists() {
        assert_eq!(parse_slices("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_slices("mid", 5).unwrap(), vec![2]);
        assert_eq!(parse_slices("0, 2", 3).unwrap(), vec![0, 2]);
        assert!(parse_slices("3", 3).is_err());
        assert!(parse_slices("x", 3).is_err());
    }
}
