//! 3D volumes: storage, resampling, normalization, augmentation, patching,
//! and the SVOL file format.
//!
//! Voxel order is fixed repo-wide: row-major with w fastest, then h, then d,
//! i.e. `data[(z*h + y)*w + x]`. Intensities are f64 in memory; SVOL files
//! store f32 (images) or u8 (labels).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of segmentation classes (background + 8 duct structures).
pub const N_CLASSES: usize = 9;

/// Short names for class ids 0..9, in id order.
pub const CLASS_NAMES: [&str; N_CLASSES] =
    ["BG", "GB", "CD", "CBD", "CHD", "RHD", "RPHD", "RAHD", "LHD"];

/// Classes that are hardest to segment (smallest / most variable).
pub const HARD_CLASSES: [usize; 2] = [2, 5]; // CD, RHD

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3 {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims3 {
    pub fn new(w: usize, h: usize, d: usize) -> Self {
        Dims3 { w, h, d }
    }

    pub fn cube(n: usize) -> Self {
        Dims3 { w: n, h: n, d: n }
    }

    pub fn count(&self) -> usize {
        self.w * self.h * self.d
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// Inverse of `index`.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (x, y, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Spacing { x, y, z }
    }

    pub fn iso(v: f64) -> Self {
        Spacing { x: v, y: v, z: v }
    }

    pub fn is_positive(&self) -> bool {
        self.x > 0.0 && self.y > 0.0 && self.z > 0.0
    }
}

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: Dims3,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims3, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::invalid(format!(
                "volume data length {} != {}x{}x{}",
                data.len(),
                dims.w,
                dims.h,
                dims.d
            )));
        }
        if !spacing.is_positive() {
            return Err(Error::invalid("spacing must be strictly positive"));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn zeros(dims: Dims3, spacing: Spacing) -> Self {
        Volume3D { dims, spacing, data: vec![0.0; dims.count()] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// Integer class grid; same layout as `Volume3D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims3,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims3, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::invalid("label data length mismatch"));
        }
        if data.iter().any(|&v| v as usize >= N_CLASSES) {
            return Err(Error::invalid(format!("label id out of range (C={N_CLASSES})")));
        }
        Ok(LabelVolume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims3, spacing: Spacing) -> Self {
        LabelVolume { dims, spacing, data: vec![0; dims.count()] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Linear indices of all non-background voxels.
    pub fn foreground_voxels(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] != 0).collect()
    }

    /// Linear indices of non-background voxels, bucketed per class value
    /// in ascending class order. Classes with no voxels are dropped, so
    /// every returned bucket is non-empty.
    pub fn foreground_voxels_by_class(&self) -> Vec<Vec<usize>> {
        let max = self.data.iter().copied().max().unwrap_or(0) as usize;
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); max + 1];
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                buckets[v as usize].push(i);
            }
        }
        buckets.retain(|b| !b.is_empty());
        buckets
    }
}

/// Axis-aligned patch request; origin may be negative (padded region).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (i64, i64, i64),
    pub size: Dims3,
}

// ---------------------------------------------------------------------------
// resample
// ---------------------------------------------------------------------------

fn resampled_dims(dims: Dims3, spacing: Spacing, target: Spacing) -> Dims3 {
    let f = |n: usize, s: f64, t: f64| ((n as f64 * s / t).round() as usize).max(1);
    Dims3 {
        w: f(dims.w, spacing.x, target.x),
        h: f(dims.h, spacing.y, target.y),
        d: f(dims.d, spacing.z, target.z),
    }
}

/// Pixel-center-aligned source coordinate for output index `i`.
#[inline]
fn src_coord(i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n == in_n {
        return i as f64;
    }
    (i as f64 + 0.5) * (in_n as f64 / out_n as f64) - 0.5
}

#[derive(Clone, Copy)]
enum Border {
    Clamp,
    Zero,
}

fn sample_trilinear(data: &[f64], dims: Dims3, x: f64, y: f64, z: f64, border: Border) -> f64 {
    let inside = |v: f64, n: usize| v > -1.0 && v < n as f64;
    if let Border::Zero = border {
        if !(inside(x, dims.w) && inside(y, dims.h) && inside(z, dims.d)) {
            return 0.0;
        }
    }
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (x, y, z) = match border {
        Border::Clamp => (clamp(x, dims.w), clamp(y, dims.h), clamp(z, dims.d)),
        Border::Zero => (x, y, z),
    };
    let x0f = x.floor();
    let y0f = y.floor();
    let z0f = z.floor();
    let (fx, fy, fz) = (x - x0f, y - y0f, z - z0f);
    let fetch = |xi: i64, yi: i64, zi: i64| -> f64 {
        let (w, h, d) = (dims.w as i64, dims.h as i64, dims.d as i64);
        match border {
            Border::Clamp => {
                let xi = xi.clamp(0, w - 1) as usize;
                let yi = yi.clamp(0, h - 1) as usize;
                let zi = zi.clamp(0, d - 1) as usize;
                data[dims.index(xi, yi, zi)]
            }
            Border::Zero => {
                if xi < 0 || yi < 0 || zi < 0 || xi >= w || yi >= h || zi >= d {
                    0.0
                } else {
                    data[dims.index(xi as usize, yi as usize, zi as usize)]
                }
            }
        }
    };
    let (x0, y0, z0) = (x0f as i64, y0f as i64, z0f as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * fetch(x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

fn sample_nearest(data: &[u8], dims: Dims3, x: f64, y: f64, z: f64, border: Border) -> u8 {
    let (xi, yi, zi) = (x.round() as i64, y.round() as i64, z.round() as i64);
    let (w, h, d) = (dims.w as i64, dims.h as i64, dims.d as i64);
    match border {
        Border::Clamp => {
            let xi = xi.clamp(0, w - 1) as usize;
            let yi = yi.clamp(0, h - 1) as usize;
            let zi = zi.clamp(0, d - 1) as usize;
            data[dims.index(xi, yi, zi)]
        }
        Border::Zero => {
            if xi < 0 || yi < 0 || zi < 0 || xi >= w || yi >= h || zi >= d {
                0
            } else {
                data[dims.index(xi as usize, yi as usize, zi as usize)]
            }
        }
    }
}

/// Trilinear resample of an intensity volume onto `target` spacing.
pub fn resample(vol: &Volume3D, target: Spacing) -> Result<Volume3D> {
    if !target.is_positive() {
        return Err(Error::invalid("target spacing must be strictly positive"));
    }
    let out_dims = resampled_dims(vol.dims, vol.spacing, target);
    let mut out = Volume3D::zeros(out_dims, target);
    for z in 0..out_dims.d {
        let sz = src_coord(z, out_dims.d, vol.dims.d);
        for y in 0..out_dims.h {
            let sy = src_coord(y, out_dims.h, vol.dims.h);
            for x in 0..out_dims.w {
                let sx = src_coord(x, out_dims.w, vol.dims.w);
                out.data[out_dims.index(x, y, z)] =
                    sample_trilinear(&vol.data, vol.dims, sx, sy, sz, Border::Clamp);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resample of a label volume onto `target` spacing.
pub fn resample_labels(lbl: &LabelVolume, target: Spacing) -> Result<LabelVolume> {
    if !target.is_positive() {
        return Err(Error::invalid("target spacing must be strictly positive"));
    }
    let out_dims = resampled_dims(lbl.dims, lbl.spacing, target);
    let mut out = LabelVolume::zeros(out_dims, target);
    for z in 0..out_dims.d {
        let sz = src_coord(z, out_dims.d, lbl.dims.d);
        for y in 0..out_dims.h {
            let sy = src_coord(y, out_dims.h, lbl.dims.h);
            for x in 0..out_dims.w {
                let sx = src_coord(x, out_dims.w, lbl.dims.w);
                out.data[out_dims.index(x, y, z)] =
                    sample_nearest(&lbl.data, lbl.dims, sx, sy, sz, Border::Clamp);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// z-score normalization
// ---------------------------------------------------------------------------

/// Standardize intensities so the foreground (mask != 0) has mean 0 and
/// population std 1. The transform is applied to every voxel.
pub fn zscore_normalize(vol: &Volume3D, mask: &LabelVolume) -> Result<Volume3D> {
    if vol.dims != mask.dims {
        return Err(Error::invalid("volume/mask dims mismatch"));
    }
    let fg: Vec<f64> = vol
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v)
        .collect();
    if fg.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 foreground voxels, got {}",
            fg.len()
        )));
    }
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let var = fg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 * mean.abs().max(1.0) {
        return Err(Error::DegenerateInput("zero foreground intensity variance".into()));
    }
    let data = vol.data.iter().map(|v| (v - mean) / std).collect();
    Ok(Volume3D { dims: vol.dims, spacing: vol.spacing, data })
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Concrete transform draws for one augmentation; exposed so tests can pin
/// the identity transform or a specific flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraws {
    /// Flip along w, h, d.
    pub flips: [bool; 3],
    /// Principal rotation axis: 0 = w, 1 = h, 2 = d.
    pub rot_axis: usize,
    /// Rotation angle in degrees.
    pub rot_deg: f64,
    /// Isotropic zoom factor.
    pub scale: f64,
}

impl AugmentDraws {
    pub fn identity() -> Self {
        AugmentDraws { flips: [false; 3], rot_axis: 0, rot_deg: 0.0, scale: 1.0 }
    }

    /// Draw order is fixed: three flips, axis, angle, scale.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let flips = [rng.random::<f64>() < 0.5, rng.random::<f64>() < 0.5, rng.random::<f64>() < 0.5];
        let rot_axis = rng.random_range(0..3usize);
        let rot_deg = rng.random_range(-30.0..=30.0);
        let scale = rng.random_range(0.7..=1.4);
        AugmentDraws { flips, rot_axis, rot_deg, scale }
    }
}

fn flip_volume<T: Copy>(data: &[T], dims: Dims3, flips: [bool; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for z in 0..dims.d {
        let sz = if flips[2] { dims.d - 1 - z } else { z };
        for y in 0..dims.h {
            let sy = if flips[1] { dims.h - 1 - y } else { y };
            for x in 0..dims.w {
                let sx = if flips[0] { dims.w - 1 - x } else { x };
                out.push(data[dims.index(sx, sy, sz)]);
            }
        }
    }
    out
}

/// Inverse-map an output voxel through rotation about a principal axis.
#[inline]
fn rotate_coord(p: (f64, f64, f64), c: (f64, f64, f64), axis: usize, cos: f64, sin: f64) -> (f64, f64, f64) {
    let (px, py, pz) = (p.0 - c.0, p.1 - c.1, p.2 - c.2);
    // inverse rotation: R(-angle)
    let (qx, qy, qz) = match axis {
        0 => (px, cos * py + sin * pz, -sin * py + cos * pz),
        1 => (cos * px - sin * pz, py, sin * px + cos * pz),
        _ => (cos * px + sin * py, -sin * px + cos * py, pz),
    };
    (qx + c.0, qy + c.1, qz + c.2)
}

/// Apply flip -> rotate -> scale with explicit draws.
pub fn augment_with_draws(
    vol: &Volume3D,
    labels: &LabelVolume,
    draws: &AugmentDraws,
) -> Result<(Volume3D, LabelVolume)> {
    if vol.dims != labels.dims {
        return Err(Error::invalid("volume/label dims mismatch"));
    }
    let dims = vol.dims;
    let center = (
        (dims.w as f64 - 1.0) / 2.0,
        (dims.h as f64 - 1.0) / 2.0,
        (dims.d as f64 - 1.0) / 2.0,
    );

    let mut vdata = flip_volume(&vol.data, dims, draws.flips);
    let mut ldata = flip_volume(&labels.data, dims, draws.flips);

    let rad = draws.rot_deg.to_radians();
    let (cos, sin) = (rad.cos(), rad.sin());
    if sin != 0.0 || cos != 1.0 {
        let mut rv = vec![0.0; vdata.len()];
        let mut rl = vec![0u8; ldata.len()];
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let p = (x as f64, y as f64, z as f64);
                    let (sx, sy, sz) = rotate_coord(p, center, draws.rot_axis, cos, sin);
                    let i = dims.index(x, y, z);
                    rv[i] = sample_trilinear(&vdata, dims, sx, sy, sz, Border::Zero);
                    rl[i] = sample_nearest(&ldata, dims, sx, sy, sz, Border::Zero);
                }
            }
        }
        vdata = rv;
        ldata = rl;
    }

    if draws.scale != 1.0 {
        let inv = 1.0 / draws.scale;
        let mut sv = vec![0.0; vdata.len()];
        let mut sl = vec![0u8; ldata.len()];
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let sx = center.0 + (x as f64 - center.0) * inv;
                    let sy = center.1 + (y as f64 - center.1) * inv;
                    let sz = center.2 + (z as f64 - center.2) * inv;
                    let i = dims.index(x, y, z);
                    sv[i] = sample_trilinear(&vdata, dims, sx, sy, sz, Border::Zero);
                    sl[i] = sample_nearest(&ldata, dims, sx, sy, sz, Border::Zero);
                }
            }
        }
        vdata = sv;
        ldata = sl;
    }

    Ok((
        Volume3D { dims, spacing: vol.spacing, data: vdata },
        LabelVolume { dims, spacing: labels.spacing, data: ldata },
    ))
}

/// Random flip (p=0.5 per axis), rotation up to 30 degrees about a random
/// principal axis, isotropic scaling in [0.7, 1.4]. Deterministic in `seed`.
pub fn augment(vol: &Volume3D, labels: &LabelVolume, seed: u64) -> Result<(Volume3D, LabelVolume)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = AugmentDraws::sample(&mut rng);
    augment_with_draws(vol, labels, &draws)
}

// ---------------------------------------------------------------------------
// patches
// ---------------------------------------------------------------------------

/// Crop a patch; regions outside the volume read as 0 intensity /
/// background label.
pub fn extract_patch(
    vol: &Volume3D,
    labels: &LabelVolume,
    spec: &PatchSpec,
) -> Result<(Volume3D, LabelVolume)> {
    if spec.size.count() == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if vol.dims != labels.dims {
        return Err(Error::invalid("volume/label dims mismatch"));
    }
    let size = spec.size;
    let mut pv = Volume3D::zeros(size, vol.spacing);
    let mut pl = LabelVolume::zeros(size, labels.spacing);
    let (w, h, d) = (vol.dims.w as i64, vol.dims.h as i64, vol.dims.d as i64);
    for z in 0..size.d {
        let sz = spec.origin.2 + z as i64;
        if sz < 0 || sz >= d {
            continue;
        }
        for y in 0..size.h {
            let sy = spec.origin.1 + y as i64;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..size.w {
                let sx = spec.origin.0 + x as i64;
                if sx < 0 || sx >= w {
                    continue;
                }
                let si = vol.dims.index(sx as usize, sy as usize, sz as usize);
                let pi = size.index(x, y, z);
                pv.data[pi] = vol.data[si];
                pl.data[pi] = labels.data[si];
            }
        }
    }
    Ok((pv, pl))
}

/// Foreground-biased patch origin: with probability `fg_bias` the patch is
/// anchored on a random voxel of a uniformly chosen foreground class
/// (so it always contains foreground, and thin classes anchor patches as
/// often as bulky ones); otherwise the origin is uniform over in-bounds
/// positions.
///
/// Anchored origins are clamped in-bounds where the volume admits a full
/// patch, so training patches carry real context instead of zero padding
/// (evaluation's sliding window never pads either). The anchor voxel
/// always stays inside the patch.
///
/// `classes` holds one non-empty voxel-index bucket per foreground class
/// present in the case; pass an empty slice to force uniform sampling.
pub fn sample_patch_origin(
    dims: Dims3,
    size: Dims3,
    classes: &[Vec<usize>],
    fg_bias: f64,
    rng: &mut ChaCha8Rng,
) -> (i64, i64, i64) {
    let take_fg = !classes.is_empty() && rng.random::<f64>() < fg_bias;
    if take_fg {
        let bucket = &classes[rng.random_range(0..classes.len())];
        let vi = bucket[rng.random_range(0..bucket.len())];
        let (x, y, z) = dims.coords(vi);
        let clamp = |c: usize, n: usize, p: usize| -> i64 {
            let raw = c as i64 - (p / 2) as i64;
            if n >= p {
                raw.clamp(0, (n - p) as i64)
            } else {
                raw
            }
        };
        (
            clamp(x, dims.w, size.w),
            clamp(y, dims.h, size.h),
            clamp(z, dims.d, size.d),
        )
    } else {
        let pick = |n: usize, p: usize, rng: &mut ChaCha8Rng| -> i64 {
            if n > p {
                rng.random_range(0..=(n - p) as i64)
            } else {
                0
            }
        };
        (
            pick(dims.w, size.w, rng),
            pick(dims.h, size.h, rng),
            pick(dims.d, size.d, rng),
        )
    }
}

// ---------------------------------------------------------------------------
// SVOL file format
// ---------------------------------------------------------------------------

const SVOL_MAGIC: &[u8; 4] = b"SVOL";
const SVOL_VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// A decoded SVOL file: either an intensity image or a label map.
#[derive(Debug, Clone, PartialEq)]
pub enum Svol {
    Image(Volume3D),
    Labels(LabelVolume),
}

impl Svol {
    pub fn into_image(self) -> Result<Volume3D> {
        match self {
            Svol::Image(v) => Ok(v),
            Svol::Labels(_) => Err(Error::Format("expected image svol, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Svol::Labels(l) => Ok(l),
            Svol::Image(_) => Err(Error::Format("expected label svol, found image".into())),
        }
    }
}

fn write_header<W: Write>(
    w: &mut W,
    dims: Dims3,
    dtype: u8,
    spacing: Spacing,
) -> std::io::Result<()> {
    w.write_all(SVOL_MAGIC)?;
    w.write_all(&[SVOL_VERSION])?;
    w.write_all(&(dims.w as u32).to_le_bytes())?;
    w.write_all(&(dims.h as u32).to_le_bytes())?;
    w.write_all(&(dims.d as u32).to_le_bytes())?;
    w.write_all(&[dtype])?;
    w.write_all(&(spacing.x as f32).to_le_bytes())?;
    w.write_all(&(spacing.y as f32).to_le_bytes())?;
    w.write_all(&(spacing.z as f32).to_le_bytes())?;
    Ok(())
}

pub fn write_svol_image(path: &Path, vol: &Volume3D) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + vol.data.len() * 4);
    write_header(&mut buf, vol.dims, DTYPE_F32, vol.spacing)?;
    for &v in &vol.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_svol_labels(path: &Path, lbl: &LabelVolume) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + lbl.data.len());
    write_header(&mut buf, lbl.dims, DTYPE_U8, lbl.spacing)?;
    buf.extend_from_slice(&lbl.data);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_svol(path: &Path) -> Result<Svol> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    read_svol_bytes(&bytes)
}

pub fn read_svol_bytes(bytes: &[u8]) -> Result<Svol> {
    if bytes.len() < 30 {
        return Err(Error::Format("truncated svol header".into()));
    }
    if &bytes[0..4] != SVOL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != SVOL_VERSION {
        return Err(Error::Format(format!("unsupported svol version {}", bytes[4])));
    }
    let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = Dims3::new(rd_u32(5), rd_u32(9), rd_u32(13));
    let dtype = bytes[17];
    let rd_f32 = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let spacing = Spacing::new(rd_f32(18), rd_f32(22), rd_f32(26));
    if !spacing.is_positive() {
        return Err(Error::Format("non-positive spacing in svol".into()));
    }
    let payload = &bytes[30..];
    let n = dims.count();
    match dtype {
        DTYPE_F32 => {
            if payload.len() != n * 4 {
                return Err(Error::Format(format!(
                    "payload length {} != expected {}",
                    payload.len(),
                    n * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok(Svol::Image(Volume3D { dims, spacing, data }))
        }
        DTYPE_U8 => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "payload length {} != expected {}",
                    payload.len(),
                    n
                )));
            }
            Ok(Svol::Labels(LabelVolume::new(dims, spacing, payload.to_vec())?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}
