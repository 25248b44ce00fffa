//! Synthetic paired-ellipsoid phantoms: hippocampus-like test volumes
//! with exact ground-truth left/right masks, so the whole pipeline can
//! run and be graded without any clinical data.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ioutil::atomic_write;
use crate::tensor::SplitMix64;
use crate::volume::{linear, write_srv_mask, write_srv_volume, Mask, Volume, VolumeError};

/// Parameters of the generator. Axis-aligned ellipsoids only; the two
/// ellipsoids are separated along X by at least `min_gap` voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Cube edge in voxels.
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_std: f64,
    /// Semi-axes are drawn uniformly from this range, per axis.
    pub semi_axis_range: (f64, f64),
    /// Uniform jitter applied to each nominal center coordinate.
    pub center_jitter: f64,
    /// Minimum voxel gap between the two ellipsoids along X.
    pub min_gap: usize,
}

impl PhantomSpec {
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        Self {
            size,
            count,
            seed,
            foreground_mean: 1.0,
            background_mean: 0.0,
            noise_std: 0.1,
            semi_axis_range: (4.0, 7.0),
            center_jitter: 2.0,
            min_gap: 2,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.size == 0 || self.count == 0 {
            return Err(PhantomError::BadSpec(format!(
                "size {} and count {} must be positive",
                self.size, self.count
            )));
        }
        let (lo, hi) = self.semi_axis_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(PhantomError::BadSpec(format!(
                "semi-axis range ({lo}, {hi}) is not an interval"
            )));
        }
        if lo < 2.0 {
            return Err(PhantomError::BadSpec(format!(
                "semi-axes must be >= 2 voxels, range starts at {lo}"
            )));
        }
        if 2.0 * hi + self.min_gap as f64 >= self.size as f64 {
            return Err(PhantomError::BadSpec(format!(
                "two ellipsoids of semi-axis {hi} plus gap {} cannot fit disjointly in size {}",
                self.min_gap, self.size
            )));
        }
        if self.noise_std < 0.0 {
            return Err(PhantomError::BadSpec(format!(
                "noise_std {} must be non-negative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum PhantomError {
    BadSpec(String),
    /// Placement rejection sampling ran out of attempts.
    PlacementFailed {
        sample: usize,
        attempts: usize,
    },
    Volume(VolumeError),
    Io(std::io::Error),
}

impl fmt::Display for PhantomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadSpec(s) => write!(f, "invalid phantom spec: {s}"),
            Self::PlacementFailed { sample, attempts } => write!(
                f,
                "could not place disjoint ellipsoids for sample {sample} after {attempts} attempts"
            ),
            Self::Volume(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for PhantomError {}

impl From<VolumeError> for PhantomError {
    fn from(e: VolumeError) -> Self {
        Self::Volume(e)
    }
}

impl From<std::io::Error> for PhantomError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// One generated sample: the noisy volume and the exact left/right masks.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub volume: Volume,
    pub left: Mask,
    pub right: Mask,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.semi[a];
            q += d * d;
        }
        q <= 1.0
    }
}

/// Rasterizes one axis-aligned ellipsoid interior into a mask.
pub fn ellipsoid_mask(
    dims: (usize, usize, usize),
    center: [f64; 3],
    semi: [f64; 3],
) -> Result<Mask, VolumeError> {
    let e = Ellipsoid { center, semi };
    let mut m = Mask::empty(dims)?;
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if e.contains([x, y, z]) {
                    m.data[linear(dims, x, y, z)] = 1;
                }
            }
        }
    }
    Ok(m)
}

fn place_pair(spec: &PhantomSpec, rng: &mut SplitMix64, sample: usize) -> Result<(Ellipsoid, Ellipsoid), PhantomError> {
    let s = spec.size as f64;
    let (lo, hi) = spec.semi_axis_range;
    let j = spec.center_jitter;
    const MAX_ATTEMPTS: usize = 10_000;
    for _ in 0..MAX_ATTEMPTS {
        let mut draw = |nominal: f64| nominal + rng.uniform(-j, j);
        let c1 = [draw(s / 4.0), draw(s / 2.0), draw(s / 2.0)];
        let c2 = [draw(3.0 * s / 4.0), draw(s / 2.0), draw(s / 2.0)];
        let semi1 = [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)];
        let semi2 = [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)];
        let e1 = Ellipsoid {
            center: c1,
            semi: semi1,
        };
        let e2 = Ellipsoid {
            center: c2,
            semi: semi2,
        };
        // Disjoint along X with the required gap, and fully inside the
        // grid so the interiors are never clipped.
        let gap_ok = (c2[0] - semi2[0]) - (c1[0] + semi1[0]) >= spec.min_gap as f64;
        let inside = |e: &Ellipsoid| {
            (0..3).all(|a| e.center[a] - e.semi[a] >= 0.0 && e.center[a] + e.semi[a] <= s - 1.0)
        };
        if gap_ok && inside(&e1) && inside(&e2) {
            return Ok((e1, e2));
        }
    }
    Err(PhantomError::PlacementFailed {
        sample,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generates `spec.count` samples. Sample `i` depends only on
/// `(spec, seed, i)`, so regeneration is bitwise reproducible.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<PhantomSample>, PhantomError> {
    spec.validate()?;
    let dims = (spec.size, spec.size, spec.size);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = SplitMix64::derive(spec.seed, i as u64);
        let (e1, e2) = place_pair(spec, &mut rng, i)?;
        let left = ellipsoid_mask(dims, e1.center, e1.semi)?;
        let right = ellipsoid_mask(dims, e2.center, e2.semi)?;

        let n = spec.size * spec.size * spec.size;
        let mut data = Vec::with_capacity(n);
        for idx in 0..n {
            let fg = left.data[idx] | right.data[idx];
            let base = if fg != 0 {
                spec.foreground_mean
            } else {
                spec.background_mean
            };
            data.push((base + spec.noise_std * rng.next_normal()) as f32);
        }
        out.push(PhantomSample {
            volume: Volume::new(dims, (1.0, 1.0, 1.0), data)?,
            left,
            right,
        });
    }
    Ok(out)
}

/// Writes `{i}_vol.srv`, `{i}_maskL.srv`, `{i}_maskR.srv` per sample plus
/// a `manifest.json` holding the spec.
pub fn write_phantom_dataset(spec: &PhantomSpec, dir: &Path) -> Result<(), PhantomError> {
    let samples = generate_phantoms(spec)?;
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_srv_volume(&s.volume, &dir.join(format!("{i}_vol.srv")))?;
        write_srv_mask(&s.left, &dir.join(format!("{i}_maskL.srv")))?;
        write_srv_mask(&s.right, &dir.join(format!("{i}_maskR.srv")))?;
    }
    let manifest = serde_json::to_string_pretty(spec).expect("spec serializes");
    atomic_write(&dir.join("manifest.json"), |w| {
        use std::io::Write;
        w.write_all(manifest.as_bytes())
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::bounding_box;

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::new(24, 3, 99);
        let a = generate_phantoms(&spec).unwrap();
        let b = generate_phantoms(&spec).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.volume.data, sb.volume.data);
            assert_eq!(sa.left.data, sb.left.data);
            assert_eq!(sa.right.data, sb.right.data);
        }
    }

    #[test]
    fn zero_noise_gives_two_level_volume() {
        let mut spec = PhantomSpec::new(24, 2, 5);
        spec.noise_std = 0.0;
        for s in generate_phantoms(&spec).unwrap() {
            for (i, &v) in s.volume.data.iter().enumerate() {
                let inside = s.left.data[i] | s.right.data[i];
                if inside != 0 {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn ellipsoid_voxel_count_near_analytic_volume() {
        // (4/3)·π·6·4·4 ≈ 402.1; the lattice count should land within 5%.
        // A generic center keeps the boundary shell from synchronizing
        // with the grid (symmetric centers bias the count several percent).
        let m = ellipsoid_mask((32, 32, 32), [15.3, 16.7, 15.9], [6.0, 4.0, 4.0]).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 6.0 * 4.0 * 4.0;
        let count = m.set_count() as f64;
        assert!(
            (count - analytic).abs() / analytic < 0.05,
            "count {count} vs analytic {analytic}"
        );
    }

    #[test]
    fn masks_disjoint_nonempty_and_boxed() {
        let spec = PhantomSpec::new(32, 8, 1234);
        for s in generate_phantoms(&spec).unwrap() {
            assert!(s.left.set_count() > 0);
            assert!(s.right.set_count() > 0);
            let overlap = s
                .left
                .data
                .iter()
                .zip(&s.right.data)
                .filter(|(&a, &b)| a & b == 1)
                .count();
            assert_eq!(overlap, 0);
            bounding_box(&s.left).unwrap();
            bounding_box(&s.right).unwrap();
        }
    }

    #[test]
    fn foreground_contrast_holds() {
        let spec = PhantomSpec::new(32, 4, 7);
        for s in generate_phantoms(&spec).unwrap() {
            let (mut fg, mut nfg, mut bg, mut nbg) = (0.0f64, 0usize, 0.0f64, 0usize);
            for (i, &v) in s.volume.data.iter().enumerate() {
                if s.left.data[i] | s.right.data[i] != 0 {
                    fg += v as f64;
                    nfg += 1;
                } else {
                    bg += v as f64;
                    nbg += 1;
                }
            }
            let contrast = fg / nfg as f64 - bg / nbg as f64;
            let floor = (spec.foreground_mean - spec.background_mean) - 3.0 * spec.noise_std;
            assert!(contrast >= floor, "contrast {contrast} < {floor}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = PhantomSpec::new(12, 1, 0);
        // 2·7 + 2 >= 12
        assert!(matches!(
            generate_phantoms(&spec),
            Err(PhantomError::BadSpec(_))
        ));
        spec = PhantomSpec::new(32, 1, 0);
        spec.semi_axis_range = (1.0, 3.0);
        assert!(matches!(
            generate_phantoms(&spec),
            Err(PhantomError::BadSpec(_))
        ));
        spec = PhantomSpec::new(32, 0, 0);
        assert!(matches!(
            generate_phantoms(&spec),
            Err(PhantomError::BadSpec(_))
        ));
    }

    #[test]
    fn dataset_layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(24, 2, 3);
        write_phantom_dataset(&spec, dir.path()).unwrap();
        for i in 0..2 {
            assert!(dir.path().join(format!("{i}_vol.srv")).exists());
            assert!(dir.path().join(format!("{i}_maskL.srv")).exists());
            assert!(dir.path().join(format!("{i}_maskR.srv")).exists());
        }
        let manifest: PhantomSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest, spec);
    }
}
