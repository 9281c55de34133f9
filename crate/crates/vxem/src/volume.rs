//! Volumes, slices, sampling, reslicing, cropping, and the VXV1 file format.
//!
//! Axis order is fixed as (z, y, x) with z-major storage: reslices and
//! slice sampling then read contiguous or simply-strided memory. Paper-style
//! x·y·z dimension quotes are converted at the I/O boundary.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Result, VxError};

/// 2d image, row-major. Reslices use rows = z.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VxError::ShapeMismatch(format!(
                "image {rows}x{cols} vs {} values",
                data.len()
            )));
        }
        Ok(Image { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Image {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Symmetric center crop; odd margins lose the extra element on the
    /// high-index side.
    pub fn center_crop(&self, rows: usize, cols: usize) -> Result<Image> {
        if rows > self.rows || cols > self.cols {
            return Err(VxError::CropTooLarge(format!(
                "{rows}x{cols} from {}x{}",
                self.rows, self.cols
            )));
        }
        let (r0, c0) = ((self.rows - rows) / 2, (self.cols - cols) / 2);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let s = (r + r0) * self.cols + c0;
            data.extend_from_slice(&self.data[s..s + cols]);
        }
        Image::new(rows, cols, data)
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// Reslice planes orthogonal to the imaging (xy) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReslicePlane {
    /// Fixed x; image is Z×Y.
    Yz,
    /// Fixed y; image is Z×X.
    Xz,
}

/// Adjacent slice pair (k−1, k).
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub below: Image,
    pub target: Image,
}

/// Slice triple (k−1, k, k+1) around a sampled section.
#[derive(Debug, Clone)]
pub struct SliceTriple {
    pub below: Image,
    pub target: Image,
    pub above: Image,
    pub source_index: usize,
}

/// 3d scalar grid in (z, y, x) order with optional physical voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    voxels: Vec<f64>,
    pub voxel_size_nm: Option<(f32, f32, f32)>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), voxels: Vec<f64>) -> Result<Self> {
        let (z, y, x) = dims;
        if z * y * x != voxels.len() || z == 0 || y == 0 || x == 0 {
            return Err(VxError::ShapeMismatch(format!(
                "volume {dims:?} vs {} voxels",
                voxels.len()
            )));
        }
        Ok(Volume {
            dims,
            voxels,
            voxel_size_nm: None,
        })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume {
            dims,
            voxels: vec![0.0; dims.0 * dims.1 * dims.2],
            voxel_size_nm: None,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        let (_, ys, xs) = self.dims;
        self.voxels[(z * ys + y) * xs + x]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        let (_, ys, xs) = self.dims;
        self.voxels[(z * ys + y) * xs + x] = v;
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// Zero-mean, unit-std copy (population std). The original is untouched.
    pub fn normalize(&self) -> Result<Volume> {
        let (mean, std) = self.mean_std();
        if std == 0.0 {
            return Err(VxError::DegenerateVolume(
                "constant volume has zero standard deviation".into(),
            ));
        }
        let voxels = self.voxels.iter().map(|v| (v - mean) / std).collect();
        Ok(Volume {
            dims: self.dims,
            voxels,
            voxel_size_nm: self.voxel_size_nm,
        })
    }

    fn patch(&self, z: usize, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let (_, ys, xs) = self.dims;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let s = (z * ys + y0 + y) * xs + x0;
            data.extend_from_slice(&self.voxels[s..s + w]);
        }
        Image {
            rows: h,
            cols: w,
            data,
        }
    }

    /// Uniform random (k−1, k, k+1) patch triple; k ∈ [1, Z−2].
    pub fn sample_triple<R: Rng>(&self, rng: &mut R, patch_hw: (usize, usize)) -> Result<SliceTriple> {
        let (zs, ys, xs) = self.dims;
        let (h, w) = patch_hw;
        if zs < 3 || ys < h || xs < w {
            return Err(VxError::VolumeTooSmall(format!(
                "{:?} cannot supply a {h}x{w} slice triple",
                self.dims
            )));
        }
        let k = rng.random_range(1..=zs - 2);
        let y0 = rng.random_range(0..=ys - h);
        let x0 = rng.random_range(0..=xs - w);
        Ok(SliceTriple {
            below: self.patch(k - 1, y0, x0, h, w),
            target: self.patch(k, y0, x0, h, w),
            above: self.patch(k + 1, y0, x0, h, w),
            source_index: k,
        })
    }

    /// Uniform random adjacent pair (k−1, k); k ∈ [1, Z−1].
    pub fn sample_pair<R: Rng>(&self, rng: &mut R, patch_hw: (usize, usize)) -> Result<SlicePair> {
        let (zs, ys, xs) = self.dims;
        let (h, w) = patch_hw;
        if zs < 2 || ys < h || xs < w {
            return Err(VxError::VolumeTooSmall(format!(
                "{:?} cannot supply a {h}x{w} slice pair",
                self.dims
            )));
        }
        let k = rng.random_range(1..=zs - 1);
        let y0 = rng.random_range(0..=ys - h);
        let x0 = rng.random_range(0..=xs - w);
        Ok(SlicePair {
            below: self.patch(k - 1, y0, x0, h, w),
            target: self.patch(k, y0, x0, h, w),
        })
    }

    /// Uniform random cubic sub-volume with the given edge length.
    pub fn sample_cube<R: Rng>(&self, rng: &mut R, edge: usize) -> Result<Volume> {
        let (zs, ys, xs) = self.dims;
        if zs < edge || ys < edge || xs < edge {
            return Err(VxError::VolumeTooSmall(format!(
                "{:?} cannot supply a {edge}^3 cube",
                self.dims
            )));
        }
        let z0 = rng.random_range(0..=zs - edge);
        let y0 = rng.random_range(0..=ys - edge);
        let x0 = rng.random_range(0..=xs - edge);
        let mut voxels = Vec::with_capacity(edge * edge * edge);
        for z in 0..edge {
            for y in 0..edge {
                let s = ((z0 + z) * ys + y0 + y) * xs + x0;
                voxels.extend_from_slice(&self.voxels[s..s + edge]);
            }
        }
        Volume::new((edge, edge, edge), voxels)
    }

    /// Native imaging-plane slice at height z, as a Y×X image.
    pub fn xy_slice(&self, z: usize) -> Result<Image> {
        let (zs, ys, xs) = self.dims;
        if z >= zs {
            return Err(VxError::IndexOutOfRange(format!("z={z} of {zs}")));
        }
        let s = z * ys * xs;
        Image::new(ys, xs, self.voxels[s..s + ys * xs].to_vec())
    }

    /// Orthogonal reslice: yz at fixed x gives Z×Y, xz at fixed y gives Z×X.
    pub fn reslice(&self, plane: ReslicePlane, index: usize) -> Result<Image> {
        let (zs, ys, xs) = self.dims;
        match plane {
            ReslicePlane::Yz => {
                if index >= xs {
                    return Err(VxError::IndexOutOfRange(format!("x={index} of {xs}")));
                }
                let mut data = Vec::with_capacity(zs * ys);
                for z in 0..zs {
                    for y in 0..ys {
                        data.push(self.voxels[(z * ys + y) * xs + index]);
                    }
                }
                Image::new(zs, ys, data)
            }
            ReslicePlane::Xz => {
                if index >= ys {
                    return Err(VxError::IndexOutOfRange(format!("y={index} of {ys}")));
                }
                let mut data = Vec::with_capacity(zs * xs);
                for z in 0..zs {
                    let s = (z * ys + index) * xs;
                    data.extend_from_slice(&self.voxels[s..s + xs]);
                }
                Image::new(zs, xs, data)
            }
        }
    }

    /// Symmetric center crop to `target` dims (z, y, x); odd margins lose
    /// the extra voxel on the high-index side.
    pub fn center_crop(&self, target: (usize, usize, usize)) -> Result<Volume> {
        let (zs, ys, xs) = self.dims;
        let (tz, ty, tx) = target;
        if tz > zs || ty > ys || tx > xs {
            return Err(VxError::CropTooLarge(format!(
                "{target:?} from {:?}",
                self.dims
            )));
        }
        let (z0, y0, x0) = ((zs - tz) / 2, (ys - ty) / 2, (xs - tx) / 2);
        let mut voxels = Vec::with_capacity(tz * ty * tx);
        for z in 0..tz {
            for y in 0..ty {
                let s = ((z0 + z) * ys + y0 + y) * xs + x0;
                voxels.extend_from_slice(&self.voxels[s..s + tx]);
            }
        }
        let mut out = Volume::new(target, voxels)?;
        out.voxel_size_nm = self.voxel_size_nm;
        Ok(out)
    }
}

/// Even output slice 2i of the 2× super-resolution generator corresponds to
/// input slice i+7 (the pre-upsample stage trims a 7-slice z margin per
/// side). Odd output slices have no input partner.
pub fn sr_slice_correspondence(in_z: usize) -> Result<Vec<(usize, usize)>> {
    if in_z < 15 {
        return Err(VxError::VolumeTooSmall(format!(
            "super-resolution needs z >= 15, got {in_z}"
        )));
    }
    Ok((0..=in_z - 15).map(|i| (2 * i, i + 7)).collect())
}

// ── VXV1 file format ────────────────────────────────────────────────
//
// magic "VXV1", LE u32 Z, Y, X, three LE f32 voxel sizes in nm (zeros if
// unknown), then Z·Y·X voxels as LE f32 in z-major order.

const VXV1_MAGIC: &[u8; 4] = b"VXV1";

pub fn save_vxv(volume: &Volume, path: &Path) -> Result<()> {
    let (z, y, x) = volume.dims;
    let mut buf = Vec::with_capacity(4 + 12 + 12 + volume.voxels.len() * 4);
    buf.extend_from_slice(VXV1_MAGIC);
    for extent in [z, y, x] {
        let e = u32::try_from(extent)
            .map_err(|_| VxError::Format(format!("extent {extent} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    let (sz, sy, sx) = volume.voxel_size_nm.unwrap_or((0.0, 0.0, 0.0));
    for s in [sz, sy, sx] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.voxels {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn load_vxv(path: &Path) -> Result<Volume> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 4 + 12 + 12];
    file.read_exact(&mut header)
        .map_err(|_| VxError::Format("truncated VXV1 header".into()))?;
    if &header[..4] != VXV1_MAGIC {
        return Err(VxError::Format("bad VXV1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (z, y, x) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let fword = |i: usize| f32::from_le_bytes(header[16 + 4 * i..20 + 4 * i].try_into().unwrap());
    let sizes = (fword(0), fword(1), fword(2));

    let n = z
        .checked_mul(y)
        .and_then(|v| v.checked_mul(x))
        .ok_or_else(|| VxError::Format("VXV1 extents overflow".into()))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(VxError::Format(format!(
            "VXV1 expects {} voxel bytes, found {}",
            n * 4,
            raw.len()
        )));
    }
    let voxels = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut vol = Volume::new((z, y, x), voxels)?;
    if sizes != (0.0, 0.0, 0.0) {
        vol.voxel_size_nm = Some(sizes);
    }
    Ok(vol)
}

/// Headerless raw u8 volume (SegEM style), mapped to [0, 1].
pub fn import_raw_u8(bytes: &[u8], dims: (usize, usize, usize)) -> Result<Volume> {
    let (z, y, x) = dims;
    if bytes.len() != z * y * x {
        return Err(VxError::Format(format!(
            "raw volume {dims:?} expects {} bytes, found {}",
            z * y * x,
            bytes.len()
        )));
    }
    let voxels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Volume::new(dims, voxels)
}

/// Inverse of [`import_raw_u8`] for in-range data: values are scaled by 255
/// and rounded, so u8-sourced volumes reproduce their original bytes.
pub fn export_raw_u8(volume: &Volume) -> Vec<u8> {
    volume
        .voxels
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes via a temp file in the same directory, then renames, so partial
/// files are never observed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp_path, path)?;
    Ok(())
}
