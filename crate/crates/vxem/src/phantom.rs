//! Seeded synthetic phantom volumes with exact degradation ground truth.
//!
//! Real SBEM stacks have no ground truth for alignment or interpolation
//! quality. The phantoms here do: a smooth membrane-like volume is degraded
//! by known per-slice integer jitter, additive noise, and slice removal,
//! and the exact degradation record travels with the data.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VxError};
use crate::rng::seeded_rng;
use crate::volume::{Image, Volume};

#[derive(Debug, Clone, Copy)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Characteristic feature wavelength in voxels.
    pub structure_scale: f64,
    /// Maximum per-slice |offset| in voxels, per axis.
    pub jitter_amplitude: i32,
    /// Additive Gaussian noise std in normalized units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (64, 64, 64),
            structure_scale: 12.0,
            jitter_amplitude: 2,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// A clean volume, its degraded sibling, and the exact degradation record.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub clean: Volume,
    pub degraded: Volume,
    /// Per-slice (dy, dx) integer offsets applied to `clean`.
    pub offsets: Vec<(i32, i32)>,
    pub dropped_slices: Vec<usize>,
}

const HARMONICS: usize = 24;

/// Smooth membrane-like texture: a thresholded sum of seeded random 3d
/// harmonics with wavelengths near `structure_scale`, normalized to zero
/// mean and unit std. No preferred orientation.
fn membrane_volume(cfg: &PhantomConfig) -> Result<Volume> {
    let (zs, ys, xs) = cfg.dims;
    if cfg.structure_scale < 2.0 {
        return Err(VxError::DegenerateVolume(format!(
            "structure scale {} below 2 voxels",
            cfg.structure_scale
        )));
    }
    if (zs.min(ys).min(xs) as f64) < cfg.structure_scale {
        return Err(VxError::DegenerateVolume(format!(
            "dims {:?} smaller than structure scale {}",
            cfg.dims, cfg.structure_scale
        )));
    }
    let mut rng = seeded_rng(cfg.seed ^ 0x7068616e746f6d); // "phantom"
    let mut waves = Vec::with_capacity(HARMONICS);
    for _ in 0..HARMONICS {
        let dir: [f64; 3] = {
            let v: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let wavelength = cfg.structure_scale * rng.random_range(0.7..1.4);
        let k = 2.0 * std::f64::consts::PI / wavelength;
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let amp = rng.random_range(0.5..1.0);
        waves.push(([dir[0] * k, dir[1] * k, dir[2] * k], phase, amp));
    }

    let mut voxels = vec![0.0f64; zs * ys * xs];
    for z in 0..zs {
        for y in 0..ys {
            for x in 0..xs {
                let mut s = 0.0;
                for ([kz, ky, kx], phase, amp) in &waves {
                    s += amp * (kz * z as f64 + ky * y as f64 + kx * x as f64 + phase).cos();
                }
                voxels[(z * ys + y) * xs + x] = s;
            }
        }
    }
    // Soft threshold to carve membrane-ish plateaus, then normalize.
    let v = Volume::new(cfg.dims, voxels)?;
    let (_, std) = v.mean_std();
    let mut v = v;
    for vox in v.voxels_mut() {
        *vox = (1.5 * *vox / std).tanh();
    }
    v.normalize()
}

/// Translates each slice by its (dy, dx) offset with clamp-to-edge fill.
pub fn apply_jitter(v: &Volume, offsets: &[(i32, i32)]) -> Result<Volume> {
    let (zs, ys, xs) = v.dims();
    if offsets.len() != zs {
        return Err(VxError::ShapeMismatch(format!(
            "{} offsets for {} slices",
            offsets.len(),
            zs
        )));
    }
    let mut out = Volume::zeros(v.dims());
    for (z, &(dy, dx)) in offsets.iter().enumerate() {
        for y in 0..ys {
            let sy = (y as i64 - dy as i64).clamp(0, ys as i64 - 1) as usize;
            for x in 0..xs {
                let sx = (x as i64 - dx as i64).clamp(0, xs as i64 - 1) as usize;
                out.set(z, y, x, v.get(z, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Replaces slice k with zeros; returns the held-out true slice.
pub fn drop_slice(v: &Volume, k: usize) -> Result<(Volume, Image)> {
    let (zs, ys, xs) = v.dims();
    if k == 0 || k + 1 >= zs {
        return Err(VxError::IndexOutOfRange(format!(
            "k={k} must be interior to [1, {}]",
            zs.saturating_sub(2)
        )));
    }
    let held_out = v.xy_slice(k)?;
    let mut out = v.clone();
    for y in 0..ys {
        for x in 0..xs {
            out.set(k, y, x, 0.0);
        }
    }
    Ok((out, held_out))
}

/// Builds the full phantom: clean membrane texture, then per-slice jitter
/// drawn uniformly from [−J, J]², then i.i.d. Gaussian noise.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomTruth> {
    let clean = membrane_volume(cfg)?;
    let (zs, _, _) = clean.dims();
    let j = cfg.jitter_amplitude;
    let mut rng = seeded_rng(cfg.seed ^ 0x6a6974746572); // "jitter"
    let offsets: Vec<(i32, i32)> = (0..zs)
        .map(|_| {
            if j == 0 {
                (0, 0)
            } else {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            }
        })
        .collect();
    let mut degraded = apply_jitter(&clean, &offsets)?;
    if cfg.noise_sigma > 0.0 {
        let mut nrng = seeded_rng(cfg.seed ^ 0x6e6f697365); // "noise"
        for v in degraded.voxels_mut() {
            let n: f64 = StandardNormal.sample(&mut nrng);
            *v += cfg.noise_sigma * n;
        }
    }
    Ok(PhantomTruth {
        clean,
        degraded,
        offsets,
        dropped_slices: Vec::new(),
    })
}

/// Learnability oracle for the interpolation trainer: a volume linear in z
/// plus i.i.d. Gaussian noise, so each interior slice equals the mean of its
/// neighbors up to the noise and a perfect predictor reaches
/// MAE = sigma·sqrt(2/π) against the noisy target.
pub fn make_averaging_volume(
    dims: (usize, usize, usize),
    noise_sigma: f64,
    seed: u64,
) -> Result<Volume> {
    let (zs, ys, xs) = dims;
    if zs < 3 {
        return Err(VxError::VolumeTooSmall(format!(
            "averaging volume needs z >= 3, got {zs}"
        )));
    }
    let mut rng = seeded_rng(seed ^ 0x617667); // "avg"
    let plane = ys * xs;
    let intercept: Vec<f64> = (0..plane).map(|_| StandardNormal.sample(&mut rng)).collect();
    let slope: Vec<f64> = (0..plane).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut voxels = vec![0.0f64; zs * plane];
    let mid = (zs as f64 - 1.0) / 2.0;
    for z in 0..zs {
        let t = (z as f64 - mid) / (zs as f64 - 1.0) * 2.0;
        for i in 0..plane {
            voxels[z * plane + i] = intercept[i] + slope[i] * t;
        }
    }
    let base = Volume::new(dims, voxels)?.normalize()?;
    let mut out = base;
    if noise_sigma > 0.0 {
        let mut nrng = seeded_rng(seed ^ 0x61766e); // "avn"
        for v in out.voxels_mut() {
            let n: f64 = StandardNormal.sample(&mut nrng);
            *v += noise_sigma * n;
        }
    }
    Ok(out)
}

/// Mean absolute difference between consecutive slices; the degradation
/// signature jitter leaves on an otherwise smooth volume.
pub fn mean_abs_z_difference(v: &Volume) -> f64 {
    let (zs, ys, xs) = v.dims();
    let plane = ys * xs;
    let mut total = 0.0;
    for z in 0..zs - 1 {
        for i in 0..plane {
            total += (v.voxels()[(z + 1) * plane + i] - v.voxels()[z * plane + i]).abs();
        }
    }
    total / ((zs - 1) * plane) as f64
}

/// Sidecar text file recording offsets and dropped slices.
pub fn truth_sidecar(truth: &PhantomTruth) -> String {
    let mut s = String::new();
    for (z, (dy, dx)) in truth.offsets.iter().enumerate() {
        s.push_str(&format!("{z}\t{dy}\t{dx}\n"));
    }
    s.push_str("dropped:");
    let list: Vec<String> = truth.dropped_slices.iter().map(usize::to_string).collect();
    s.push_str(&list.join(","));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            dims: (16, 24, 24),
            structure_scale: 6.0,
            jitter_amplitude: 2,
            noise_sigma: 0.05,
            seed: 11,
        }
    }

    #[test]
    fn identity_when_undegraded() {
        let cfg = PhantomConfig {
            jitter_amplitude: 0,
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let t = generate_phantom(&cfg).unwrap();
        assert_eq!(t.clean.voxels(), t.degraded.voxels());
        assert!(t.offsets.iter().all(|&o| o == (0, 0)));
    }

    #[test]
    fn offsets_stay_within_amplitude() {
        let t = generate_phantom(&small_cfg()).unwrap();
        assert!(t
            .offsets
            .iter()
            .all(|&(dy, dx)| dy.abs() <= 2 && dx.abs() <= 2));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&small_cfg()).unwrap();
        let b = generate_phantom(&small_cfg()).unwrap();
        assert_eq!(a.clean.voxels(), b.clean.voxels());
        assert_eq!(a.degraded.voxels(), b.degraded.voxels());
        assert_eq!(a.offsets, b.offsets);
    }

    #[test]
    fn clean_phantom_is_normalized() {
        let t = generate_phantom(&small_cfg()).unwrap();
        let (mean, std) = t.clean.mean_std();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_offset_slices_match_clean_without_noise() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let t = generate_phantom(&cfg).unwrap();
        let (_, ys, xs) = t.clean.dims();
        for (z, &(dy, dx)) in t.offsets.iter().enumerate() {
            if (dy, dx) == (0, 0) {
                for y in 0..ys {
                    for x in 0..xs {
                        assert_eq!(t.clean.get(z, y, x), t.degraded.get(z, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn jitter_raises_z_roughness() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let t = generate_phantom(&cfg).unwrap();
        let clean_mad = mean_abs_z_difference(&t.clean);
        let degraded_mad = mean_abs_z_difference(&t.degraded);
        assert!(
            degraded_mad > clean_mad,
            "degraded {degraded_mad} <= clean {clean_mad}"
        );
    }

    #[test]
    fn jitter_inverts_on_the_interior() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let t = generate_phantom(&cfg).unwrap();
        let inverse: Vec<(i32, i32)> = t.offsets.iter().map(|&(dy, dx)| (-dy, -dx)).collect();
        let restored = apply_jitter(&t.degraded, &inverse).unwrap();
        let (zs, ys, xs) = t.clean.dims();
        let j = 2 * 2; // two passes of clamping, amplitude 2 each
        for z in 0..zs {
            for y in j..ys - j {
                for x in j..xs - j {
                    assert_eq!(restored.get(z, y, x), t.clean.get(z, y, x));
                }
            }
        }

        let same = apply_jitter(&t.clean, &vec![(0, 0); zs]).unwrap();
        assert_eq!(same.voxels(), t.clean.voxels());
    }

    #[test]
    fn single_slice_offset_moves_exactly_that_slice() {
        let cfg = PhantomConfig {
            jitter_amplitude: 0,
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let t = generate_phantom(&cfg).unwrap();
        let (zs, _, _) = t.clean.dims();
        let mut offsets = vec![(0, 0); zs];
        offsets[5] = (1, -1);
        let moved = apply_jitter(&t.clean, &offsets).unwrap();
        for z in 0..zs {
            let same = moved.xy_slice(z).unwrap() == t.clean.xy_slice(z).unwrap();
            assert_eq!(same, z != 5);
        }
    }

    #[test]
    fn drop_slice_contract() {
        let t = generate_phantom(&small_cfg()).unwrap();
        let (dropped, held) = drop_slice(&t.clean, 7).unwrap();
        assert_eq!(held.data(), t.clean.xy_slice(7).unwrap().data());
        assert!(dropped.xy_slice(7).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(
            dropped.xy_slice(6).unwrap().data(),
            t.clean.xy_slice(6).unwrap().data()
        );
        assert_eq!(
            dropped.xy_slice(8).unwrap().data(),
            t.clean.xy_slice(8).unwrap().data()
        );

        // Restoring the slice reproduces the original volume.
        let mut restored = dropped.clone();
        let (_, ys, xs) = restored.dims();
        for y in 0..ys {
            for x in 0..xs {
                restored.set(7, y, x, held.get(y, x));
            }
        }
        assert_eq!(restored.voxels(), t.clean.voxels());

        assert!(drop_slice(&t.clean, 0).is_err());
        assert!(drop_slice(&t.clean, 15).is_err());
    }

    #[test]
    fn averaging_volume_midpoint_identity() {
        let v = make_averaging_volume((8, 10, 10), 0.0, 3).unwrap();
        let (zs, ys, xs) = v.dims();
        for z in 1..zs - 1 {
            for y in 0..ys {
                for x in 0..xs {
                    let mid = (v.get(z - 1, y, x) + v.get(z + 1, y, x)) / 2.0;
                    assert!((v.get(z, y, x) - mid).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn averaging_volume_noise_floor_matches_folded_gaussian() {
        // A predictor that outputs the clean slice sees |N(0, sigma^2)|
        // residuals, whose mean is sigma·sqrt(2/π).
        let sigma = 0.05;
        let clean = make_averaging_volume((32, 32, 32), 0.0, 9).unwrap();
        let noisy = make_averaging_volume((32, 32, 32), sigma, 9).unwrap();
        let mae: f64 = clean
            .voxels()
            .iter()
            .zip(noisy.voxels())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / clean.voxels().len() as f64;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mae - expected).abs() < 0.1 * expected,
            "mae {mae} vs expected {expected}"
        );
    }
}
