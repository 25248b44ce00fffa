//! Mid-slice overlay rendering: grayscale anatomy with the mask boundary
//! colored, one PNG per anatomical plane (axial, coronal, sagittal).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use vseg_core::volume::{Mask, Volume};

use crate::CliError;

const BOUNDARY: Rgb<u8> = Rgb([255, 48, 48]);

/// Which plane a slice cuts. The slice is taken through the mask
/// centroid along the remaining axis.
#[derive(Debug, Clone, Copy)]
enum Plane {
    /// Fixed Z; pixels (x, y). The transverse view.
    Axial,
    /// Fixed Y; pixels (x, z).
    Coronal,
    /// Fixed X; pixels (y, z).
    Sagittal,
}

impl Plane {
    fn file_name(self) -> &'static str {
        match self {
            Plane::Axial => "axial.png",
            Plane::Coronal => "coronal.png",
            Plane::Sagittal => "sagittal.png",
        }
    }
}

/// Integer centroid of the set voxels; volume midpoint for empty masks.
fn centroid(mask: &Mask) -> (usize, usize, usize, bool) {
    let (mut sx, mut sy, mut sz, mut n) = (0usize, 0usize, 0usize, 0usize);
    let (nx, ny, _) = mask.dims;
    for (i, &v) in mask.data.iter().enumerate() {
        if v != 0 {
            sx += i % nx;
            sy += (i / nx) % ny;
            sz += i / (nx * ny);
            n += 1;
        }
    }
    if n == 0 {
        (mask.dims.0 / 2, mask.dims.1 / 2, mask.dims.2 / 2, true)
    } else {
        (sx / n, sy / n, sz / n, false)
    }
}

/// Renders the three mid-centroid plane images. Boundary voxels are mask
/// voxels with at least one unset in-plane 4-neighbor (out-of-bounds
/// counts as unset). Returns the written paths; warns on an empty mask.
pub fn export_overlay(
    volume: &Volume,
    mask: &Mask,
    out_dir: &Path,
) -> Result<[PathBuf; 3], CliError> {
    if volume.dims != mask.dims {
        return Err(CliError::Input(format!(
            "overlay: volume dims {:?} vs mask dims {:?}",
            volume.dims, mask.dims
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Input(format!("overlay: cannot create {}: {e}", out_dir.display())))?;

    let (lo, hi) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = |v: f32| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;

    let (cx, cy, cz, empty) = centroid(mask);
    if empty {
        eprintln!("warning: empty mask, overlays show plain mid-slices");
    }

    let mut written = Vec::with_capacity(3);
    for plane in [Plane::Axial, Plane::Coronal, Plane::Sagittal] {
        let (w, h): (usize, usize) = match plane {
            Plane::Axial => (volume.dims.0, volume.dims.1),
            Plane::Coronal => (volume.dims.0, volume.dims.2),
            Plane::Sagittal => (volume.dims.1, volume.dims.2),
        };
        // Map a pixel to its voxel, and step the plane's two axes.
        let voxel = |a: usize, b: usize| -> (usize, usize, usize) {
            match plane {
                Plane::Axial => (a, b, cz),
                Plane::Coronal => (a, cy, b),
                Plane::Sagittal => (cx, a, b),
            }
        };
        let mut img = RgbImage::new(w as u32, h as u32);
        for b in 0..h {
            for a in 0..w {
                let (x, y, z) = voxel(a, b);
                let g = gray(volume.at(x, y, z));
                let on = mask.at(x, y, z);
                let boundary = on && {
                    let mut exposed = false;
                    let deltas: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
                    for (da, db) in deltas {
                        let (na, nb) = (a as isize + da, b as isize + db);
                        if na < 0 || nb < 0 || na >= w as isize || nb >= h as isize {
                            exposed = true;
                            break;
                        }
                        let (x, y, z) = voxel(na as usize, nb as usize);
                        if !mask.at(x, y, z) {
                            exposed = true;
                            break;
                        }
                    }
                    exposed
                };
                let px = if boundary { BOUNDARY } else { Rgb([g, g, g]) };
                img.put_pixel(a as u32, b as u32, px);
            }
        }
        let path = out_dir.join(plane.file_name());
        img.save(&path)
            .map_err(|e| CliError::Input(format!("overlay: cannot write {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok([
        written[0].clone(),
        written[1].clone(),
        written[2].clone(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use vseg_core::volume::{linear, Mask};

    fn colored_pixels(path: &Path) -> Vec<(u32, u32)> {
        let img = image::open(path).unwrap().to_rgb8();
        let mut out = Vec::new();
        for (x, y, px) in img.enumerate_pixels() {
            if *px == BOUNDARY {
                out.push((x, y));
            }
        }
        out
    }

    fn flat_volume(dims: (usize, usize, usize)) -> Volume {
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n).map(|i| i as f32 / n as f32).collect();
        Volume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn empty_mask_has_no_colored_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let v = flat_volume((6, 6, 6));
        let m = Mask::empty((6, 6, 6)).unwrap();
        let paths = export_overlay(&v, &m, dir.path()).unwrap();
        for p in &paths {
            assert!(colored_pixels(p).is_empty());
        }
    }

    #[test]
    fn single_voxel_mask_colors_one_pixel_per_plane() {
        let dir = tempfile::tempdir().unwrap();
        let dims = (8, 9, 10);
        let v = flat_volume(dims);
        let mut m = Mask::empty(dims).unwrap();
        let (x, y, z) = (3, 4, 5);
        m.data[linear(dims, x, y, z)] = 1;
        let [axial, coronal, sagittal] = export_overlay(&v, &m, dir.path()).unwrap();
        assert_eq!(colored_pixels(&axial), vec![(x as u32, y as u32)]);
        assert_eq!(colored_pixels(&coronal), vec![(x as u32, z as u32)]);
        assert_eq!(colored_pixels(&sagittal), vec![(y as u32, z as u32)]);
    }

    #[test]
    fn full_plane_mask_colors_only_outer_ring() {
        let dir = tempfile::tempdir().unwrap();
        let dims = (6, 6, 6);
        let v = flat_volume(dims);
        let m = Mask::new(dims, vec![1; 216]).unwrap();
        let [axial, _, _] = export_overlay(&v, &m, dir.path()).unwrap();
        let colored = colored_pixels(&axial);
        // Ring of a 6×6 slice: 6·6 − 4·4 = 20 pixels.
        assert_eq!(colored.len(), 20);
        for (x, y) in colored {
            assert!(x == 0 || y == 0 || x == 5 || y == 5);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = flat_volume((4, 4, 4));
        let m = Mask::empty((4, 4, 5)).unwrap();
        assert!(export_overlay(&v, &m, dir.path()).is_err());
    }
}
