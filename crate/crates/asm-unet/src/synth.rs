//! Procedural generator for labeled branching-duct volumes.
//!
//! Each case is a tree of capsule-swept spline tubes in a box: a trunk
//! duct rising from the bottom, a gallbladder blob joined by a short
//! thin duct, and an upper confluence that splits into left and right
//! subtrees. Seven topology variants cover the common right-side
//! arrangements (variant 0 is "undefined": the full tree with doubled
//! jitter). Voxels take the class of the nearest tube in units of that
//! tube's radius; intensity is a smooth background plus a constant tube
//! contrast plus Gaussian noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Dims3, LabelVolume, Spacing, Volume3D, N_CLASSES};

pub const BACKGROUND_BASE: f64 = 40.0;
pub const TUBE_CONTRAST: f64 = 60.0;
/// Noise sigma as a fraction of the tube contrast.
pub const NOISE_FRACTION: f64 = 0.10;

/// How often each variant appears when planning a dataset. Type-1
/// dominance mirrors its real-world prevalence (~60% of patients).
pub const VARIANT_WEIGHTS: [(u8, f64); 7] = [
    (1, 0.62),
    (2, 0.10),
    (3, 0.07),
    (4, 0.07),
    (5, 0.06),
    (6, 0.05),
    (0, 0.03),
];

#[derive(Debug, Clone)]
pub struct DuctSpec {
    /// 1..=6 are the common topologies; 0 is the heavily jittered
    /// "undefined" variant.
    pub variant: u8,
    pub dims: Dims3,
    /// (thinnest, thickest) tube radius in voxels.
    pub radius_range: (f64, f64),
    pub seed: u64,
}

impl DuctSpec {
    pub fn desk(variant: u8, seed: u64) -> Self {
        // radius floor 1.4: tubes below ~1.4 voxels alias into fragments
        // under the rotation/scale augmentation and are unlearnable at 24^3
        DuctSpec { variant, dims: Dims3::cube(24), radius_range: (1.4, 2.4), seed }
    }

    fn validate(&self) -> Result<()> {
        if self.variant > 6 {
            return Err(Error::Generation(format!("unknown variant {}", self.variant)));
        }
        if self.dims.w < 16 || self.dims.h < 16 || self.dims.d < 16 {
            return Err(Error::Generation(format!(
                "dims {}x{}x{} too small; tubes need at least 16^3",
                self.dims.w, self.dims.h, self.dims.d
            )));
        }
        let (lo, hi) = self.radius_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(Error::Generation(format!("bad radius range ({lo}, {hi}); need 1 <= lo <= hi")));
        }
        Ok(())
    }
}

/// Classes absent from a variant's topology (the right hepatic duct
/// disappears whenever the right posterior duct drains elsewhere).
pub fn absent_classes(variant: u8) -> &'static [u8] {
    match variant {
        2 | 3 | 4 | 5 => &[5],
        _ => &[],
    }
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

type P3 = [f64; 3];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Anchor points of the canonical tree in unit coordinates, jittered
/// per case. Shared junctions are jittered once so segments stay glued.
struct Anchors {
    cbd_in: P3,
    j1: P3,
    j2: P3,
    j3: P3,
    gb_tip: P3,
    gb_neck: P3,
    cd_root: P3,
    cd_mid: P3,
    chd_mid: P3,
    lhd_mid: P3,
    lhd_end: P3,
    rphd_end: P3,
    rahd_end: P3,
}

impl Anchors {
    fn jittered(rng: &mut ChaCha8Rng, variant: u8) -> Anchors {
        let sigma = if variant == 0 { 0.045 } else { 0.018 };
        let mut j = |p: P3| -> P3 {
            let mut out = [0.0; 3];
            for (o, c) in out.iter_mut().zip(p) {
                *o = (c + sigma * gauss(rng)).clamp(0.06, 0.94);
            }
            out
        };
        // a tiny right duct for variant 6, the normal one otherwise
        let j3_base = if variant == 6 { [0.38, 0.295, 0.53] } else { [0.34, 0.26, 0.50] };
        // the trunk drifts -x/+z as it ascends; mirror flips reverse the
        // drift, so handedness stays readable in any local window
        Anchors {
            cbd_in: j([0.58, 0.90, 0.40]),
            j1: j([0.52, 0.60, 0.47]),
            j2: j([0.44, 0.34, 0.56]),
            j3: j(j3_base),
            gb_tip: j([0.16, 0.80, 0.30]),
            gb_neck: j([0.26, 0.72, 0.35]),
            cd_root: j([0.31, 0.69, 0.38]),
            cd_mid: j([0.42, 0.645, 0.43]),
            chd_mid: j([0.48, 0.46, 0.52]),
            lhd_mid: j([0.58, 0.26, 0.62]),
            lhd_end: j([0.72, 0.18, 0.68]),
            rphd_end: j([0.14, 0.12, 0.68]),
            rahd_end: j([0.20, 0.10, 0.28]),
        }
    }
}

struct Tube {
    class: u8,
    control: Vec<P3>,
    radius: f64,
}

/// Catmull-Rom interpolation through the control points, `per_span`
/// samples per span, endpoints clamped.
fn spline_samples(control: &[P3], per_span: usize) -> Vec<P3> {
    assert!(control.len() >= 2);
    let n = control.len();
    let at = |i: isize| -> P3 { control[i.clamp(0, n as isize - 1) as usize] };
    let mut out = Vec::with_capacity((n - 1) * per_span + 1);
    for span in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            at(span as isize - 1),
            at(span as isize),
            at(span as isize + 1),
            at(span as isize + 2),
        );
        for s in 0..per_span {
            let t = s as f64 / per_span as f64;
            let (t2, t3) = (t * t, t * t * t);
            let mut q = [0.0; 3];
            for a in 0..3 {
                q[a] = 0.5
                    * (2.0 * p1[a]
                        + (p2[a] - p0[a]) * t
                        + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
                        + (3.0 * p1[a] - p0[a] - 3.0 * p2[a] + p3[a]) * t3);
            }
            out.push(q);
        }
    }
    out.push(control[n - 1]);
    out
}

fn dist_point_segment(p: P3, a: P3, b: P3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if denom > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut d2 = 0.0;
    for i in 0..3 {
        let diff = p[i] - (a[i] + t * ab[i]);
        d2 += diff * diff;
    }
    d2.sqrt()
}

fn build_tubes(spec: &DuctSpec, rng: &mut ChaCha8Rng) -> Vec<Tube> {
    let a = Anchors::jittered(rng, spec.variant);
    let (r_lo, r_hi) = spec.radius_range;
    // per-class radius wobble; the cystic duct stays pinned at the
    // minimum so the hardest class is always the thinnest. The three
    // hepatic branches sit on a thickness ladder (0.60/0.75/0.90 of the
    // top radius) because relative thickness survives every augmentation
    // (flips, rotation, global scaling) and so stays a reliable identity
    // cue where position does not.
    let mut wobble = |base: f64| base * rng.random_range(0.9..1.1);
    let r_gb = wobble(r_hi * 1.6);
    let r_cd = r_lo;
    let r_cbd = wobble(r_hi);
    let r_chd = wobble(r_hi * 0.95);
    let r_rhd = wobble(r_lo * 1.15);
    let r_rphd = wobble(r_hi * 0.60);
    let r_rahd = wobble(r_hi * 0.90);
    let r_lhd = wobble(r_hi * 0.75);

    let mut tubes = vec![
        Tube { class: 1, control: vec![a.gb_tip, a.gb_neck], radius: r_gb },
        Tube { class: 2, control: vec![a.cd_root, a.cd_mid, a.j1], radius: r_cd },
        Tube { class: 3, control: vec![a.cbd_in, a.j1], radius: r_cbd },
        Tube { class: 4, control: vec![a.j1, a.chd_mid, a.j2], radius: r_chd },
        Tube { class: 8, control: vec![a.j2, a.lhd_mid, a.lhd_end], radius: r_lhd },
    ];
    match spec.variant {
        // full tree: right duct from the confluence, then the split
        1 | 6 | 0 => {
            tubes.push(Tube { class: 5, control: vec![a.j2, a.j3], radius: r_rhd });
            tubes.push(Tube {
                class: 6,
                control: vec![a.j3, [0.27, 0.17, 0.54], a.rphd_end],
                radius: r_rphd,
            });
            tubes.push(Tube {
                class: 7,
                control: vec![a.j3, [0.30, 0.15, 0.38], a.rahd_end],
                radius: r_rahd,
            });
        }
        // trifurcation: both right branches meet the confluence directly
        2 => {
            tubes.push(Tube {
                class: 6,
                control: vec![a.j2, [0.33, 0.22, 0.55], a.rphd_end],
                radius: r_rphd,
            });
            tubes.push(Tube {
                class: 7,
                control: vec![a.j2, [0.36, 0.20, 0.40], a.rahd_end],
                radius: r_rahd,
            });
        }
        // right posterior duct drains into the left duct
        3 => {
            tubes.push(Tube {
                class: 6,
                control: vec![a.lhd_mid, [0.40, 0.16, 0.58], a.rphd_end],
                radius: r_rphd,
            });
            tubes.push(Tube {
                class: 7,
                control: vec![a.j2, [0.36, 0.20, 0.40], a.rahd_end],
                radius: r_rahd,
            });
        }
        // low insertion into the common hepatic duct
        4 => {
            tubes.push(Tube {
                class: 6,
                control: vec![a.chd_mid, [0.30, 0.30, 0.55], a.rphd_end],
                radius: r_rphd,
            });
            tubes.push(Tube {
                class: 7,
                control: vec![a.j2, [0.36, 0.20, 0.40], a.rahd_end],
                radius: r_rahd,
            });
        }
        // drainage into the cystic duct
        5 => {
            tubes.push(Tube {
                class: 6,
                control: vec![a.cd_mid, [0.22, 0.38, 0.56], a.rphd_end],
                radius: r_rphd,
            });
            tubes.push(Tube {
                class: 7,
                control: vec![a.j2, [0.36, 0.20, 0.40], a.rahd_end],
                radius: r_rahd,
            });
        }
        _ => unreachable!("validated variant"),
    }
    tubes
}

// ---------------------------------------------------------------------------
// rasterization
// ---------------------------------------------------------------------------

/// Labels plus the noiseless intensity volume. Kept public so the
/// signal-over-background invariant can be checked without noise.
pub fn generate_parts(spec: &DuctSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tubes = build_tubes(spec, &mut rng);
    let dims = spec.dims;
    let scale = [dims.w as f64, dims.h as f64, dims.d as f64];
    let n = dims.count();

    // nearest tube in units of each tube's radius wins the voxel; the
    // normalization protects thin tubes near their own axis even when a
    // fat neighbor's capsule overlaps them
    let mut best = vec![f64::INFINITY; n];
    let mut label = vec![0u8; n];
    // per tube, the in-capsule voxel it came closest to winning; the
    // fallback claim if competitors take everything else
    let mut fallback: Vec<Option<(f64, usize)>> = vec![None; tubes.len()];
    for (tube_idx, tube) in tubes.iter().enumerate() {
        let samples: Vec<P3> = spline_samples(&tube.control, 48)
            .into_iter()
            .map(|p| [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]])
            .collect();
        let pad = tube.radius + 1.5;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &samples {
            for a in 0..3 {
                lo[a] = lo[a].min(s[a]);
                hi[a] = hi[a].max(s[a]);
            }
        }
        let clamp_box = |v: f64, max: usize| (v.max(0.0) as usize).min(max - 1);
        let (x0, x1) = (clamp_box(lo[0] - pad, dims.w), clamp_box(hi[0] + pad, dims.w));
        let (y0, y1) = (clamp_box(lo[1] - pad, dims.h), clamp_box(hi[1] + pad, dims.h));
        let (z0, z1) = (clamp_box(lo[2] - pad, dims.d), clamp_box(hi[2] + pad, dims.d));
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64, y as f64, z as f64];
                    let mut d = f64::INFINITY;
                    for w in samples.windows(2) {
                        d = d.min(dist_point_segment(p, w[0], w[1]));
                        if d == 0.0 {
                            break;
                        }
                    }
                    let nd = d / tube.radius;
                    let i = dims.index(x, y, z);
                    if nd <= 1.0 && fallback[tube_idx].is_none_or(|(fnd, _)| nd < fnd) {
                        fallback[tube_idx] = Some((nd, i));
                    }
                    if nd < best[i] {
                        best[i] = nd;
                        label[i] = tube.class;
                    }
                }
            }
        }
    }
    for (l, b) in label.iter_mut().zip(&best) {
        if *b > 1.0 {
            *l = 0;
        }
    }
    // a deliberately tiny tube can lose every voxel to its junction
    // partners at coarse grids; give it back its single best voxel
    for (tube, fb) in tubes.iter().zip(&fallback) {
        if !label.contains(&tube.class) {
            let Some((_, i)) = fb else {
                return Err(Error::Generation(format!(
                    "variant {}: class {} tube lies outside the {}x{}x{} grid",
                    spec.variant, tube.class, dims.w, dims.h, dims.d
                )));
            };
            label[*i] = tube.class;
        }
    }
    debug_assert!(
        (1..N_CLASSES as u8).all(|c| label.contains(&c)
            != absent_classes(spec.variant).contains(&c)),
        "class presence must match the variant topology"
    );

    // smooth background: base level plus a gentle linear ramp
    let gx = rng.random_range(-6.0..6.0);
    let gy = rng.random_range(-6.0..6.0);
    let gz = rng.random_range(-6.0..6.0);
    let mut img = vec![0.0; n];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(x, y, z);
                let mut v = BACKGROUND_BASE
                    + gx * (x as f64 / dims.w as f64)
                    + gy * (y as f64 / dims.h as f64)
                    + gz * (z as f64 / dims.d as f64);
                if label[i] != 0 {
                    v += TUBE_CONTRAST;
                }
                img[i] = v;
            }
        }
    }
    let spacing = Spacing::iso(1.0);
    Ok((Volume3D::new(dims, spacing, img)?, LabelVolume::new(dims, spacing, label)?))
}

/// Full case: noiseless parts plus additive Gaussian noise on the image.
pub fn generate(spec: &DuctSpec) -> Result<(Volume3D, LabelVolume)> {
    let (mut img, labels) = generate_parts(spec)?;
    // reseed a separate stream so geometry stays fixed if the noise
    // model changes
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65u64);
    let sigma = NOISE_FRACTION * TUBE_CONTRAST;
    for v in img.data.iter_mut() {
        *v += sigma * gauss(&mut rng);
    }
    Ok((img, labels))
}

// ---------------------------------------------------------------------------
// dataset planning and files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CasePlan {
    pub id: usize,
    pub variant: u8,
    pub split: Split,
    pub seed: u64,
}

/// Deterministic 4:3:3 split with weighted variant draws.
pub fn plan_split(n_cases: usize, master_seed: u64) -> Result<Vec<CasePlan>> {
    if n_cases < 10 {
        return Err(Error::invalid(format!("need at least 10 cases, got {n_cases}")));
    }
    let n_train = (0.4 * n_cases as f64).round() as usize;
    let n_val = (0.3 * n_cases as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut plans = Vec::with_capacity(n_cases);
    for id in 0..n_cases {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut variant = VARIANT_WEIGHTS[VARIANT_WEIGHTS.len() - 1].0;
        for (v, w) in VARIANT_WEIGHTS {
            acc += w;
            if u < acc {
                variant = v;
                break;
            }
        }
        let seed = rng.random::<u64>();
        let split = if id < n_train {
            Split::Train
        } else if id < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        plans.push(CasePlan { id, variant, split, seed });
    }
    Ok(plans)
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("case_{id:03}_img.svol"))
}

pub fn label_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("case_{id:03}_lbl.svol"))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

/// Generate every case into `dir` and write the manifest.
pub fn generate_dataset(
    dir: &Path,
    n_cases: usize,
    master_seed: u64,
    dims: Dims3,
    radius_range: (f64, f64),
) -> Result<Vec<CasePlan>> {
    let plans = plan_split(n_cases, master_seed)?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("case_id,variant,split\n");
    for plan in &plans {
        let spec =
            DuctSpec { variant: plan.variant, dims, radius_range, seed: plan.seed };
        let (img, lbl) = generate(&spec)?;
        crate::volume::write_svol_image(&image_path(dir, plan.id), &img)?;
        crate::volume::write_svol_labels(&label_path(dir, plan.id), &lbl)?;
        let _ = writeln!(manifest, "{},{},{}", plan.id, plan.variant, plan.split.as_str());
    }
    std::fs::write(manifest_path(dir), manifest)?;
    Ok(plans)
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: usize,
    pub variant: u8,
    pub split: Split,
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(manifest_path(dir))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "case_id,variant,split" {
                return Err(Error::Format(format!("bad manifest header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad manifest line: {line}")));
        }
        let id = parts[0]
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad case id: {}", parts[0])))?;
        let variant = parts[1]
            .parse::<u8>()
            .map_err(|_| Error::Format(format!("bad variant: {}", parts[1])))?;
        rows.push(ManifestRow { id, variant, split: Split::parse(parts[2])? });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn class_counts(lbl: &LabelVolume) -> [usize; N_CLASSES] {
        let mut c = [0usize; N_CLASSES];
        for &v in &lbl.data {
            c[v as usize] += 1;
        }
        c
    }

    /// Number of 26-connected components among voxels of one class.
    fn component_count(lbl: &LabelVolume, class: u8) -> usize {
        let dims = lbl.dims;
        let mut seen = vec![false; dims.count()];
        let mut comps = 0;
        for start in 0..dims.count() {
            if lbl.data[start] != class || seen[start] {
                continue;
            }
            comps += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                let (x, y, z) = dims.coords(i);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny, nz) =
                                (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0
                                || ny < 0
                                || nz < 0
                                || nx >= dims.w as i64
                                || ny >= dims.h as i64
                                || nz >= dims.d as i64
                            {
                                continue;
                            }
                            let j = dims.index(nx as usize, ny as usize, nz as usize);
                            if lbl.data[j] == class && !seen[j] {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        comps
    }

    fn touches(lbl: &LabelVolume, a: u8, b: u8) -> bool {
        let dims = lbl.dims;
        for i in 0..dims.count() {
            if lbl.data[i] != a {
                continue;
            }
            let (x, y, z) = dims.coords(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= dims.w as i64
                            || ny >= dims.h as i64
                            || nz >= dims.d as i64
                        {
                            continue;
                        }
                        if lbl.data[dims.index(nx as usize, ny as usize, nz as usize)] == b {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let spec = DuctSpec::desk(1, 42);
        let (img1, lbl1) = generate(&spec).unwrap();
        let (img2, lbl2) = generate(&spec).unwrap();
        assert_eq!(img1.data, img2.data);
        assert_eq!(lbl1.data, lbl2.data);
    }

    #[test]
    fn different_seeds_differ() {
        let (_, a) = generate(&DuctSpec::desk(1, 1)).unwrap();
        let (_, b) = generate(&DuctSpec::desk(1, 2)).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn variant_2_omits_the_right_duct() {
        for seed in 0..4 {
            let (_, lbl) = generate(&DuctSpec::desk(2, seed)).unwrap();
            let counts = class_counts(&lbl);
            assert_eq!(counts[5], 0, "seed {seed}: RHD voxels in a trifurcation");
            for class in [1, 2, 3, 4, 6, 7, 8] {
                assert!(counts[class] > 0, "seed {seed}: class {class} missing");
            }
        }
    }

    #[test]
    fn variant_1_has_all_classes_singly_connected() {
        for seed in [7, 19] {
            let (_, lbl) = generate(&DuctSpec::desk(1, seed)).unwrap();
            for class in 1..N_CLASSES as u8 {
                assert_eq!(
                    component_count(&lbl, class),
                    1,
                    "seed {seed}: class {class} not a single component"
                );
            }
        }
    }

    #[test]
    fn confluence_touches_trunk_and_left_duct_in_every_variant() {
        for variant in 0..=6u8 {
            let (_, lbl) = generate(&DuctSpec::desk(variant, 5)).unwrap();
            assert!(touches(&lbl, 4, 3), "variant {variant}: CHD does not touch CBD");
            assert!(touches(&lbl, 4, 8), "variant {variant}: CHD does not touch LHD");
        }
    }

    #[test]
    fn hard_classes_are_smallest_in_variant_1() {
        for seed in [3, 11, 23] {
            let (_, lbl) = generate(&DuctSpec::desk(1, seed)).unwrap();
            let counts = class_counts(&lbl);
            let mut fg: Vec<(usize, usize)> =
                (1..N_CLASSES).map(|c| (counts[c], c)).collect();
            fg.sort();
            let smallest: Vec<usize> = fg[..2].iter().map(|&(_, c)| c).collect();
            assert!(
                smallest.contains(&2) && smallest.contains(&5),
                "seed {seed}: smallest two are {smallest:?}, counts {counts:?}"
            );
        }
    }

    #[test]
    fn tubes_outshine_background_before_noise() {
        let (img, lbl) = generate_parts(&DuctSpec::desk(1, 9)).unwrap();
        let (mut tube_sum, mut tube_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        for (v, l) in img.data.iter().zip(&lbl.data) {
            if *l == 0 {
                bg_sum += v;
                bg_n += 1;
            } else {
                tube_sum += v;
                tube_n += 1;
            }
        }
        let (tube_mean, bg_mean) = (tube_sum / tube_n as f64, bg_sum / bg_n as f64);
        assert!(
            tube_mean > bg_mean + 0.5 * TUBE_CONTRAST,
            "tube mean {tube_mean} vs background {bg_mean}"
        );
    }

    #[test]
    fn minimum_dims_still_produce_every_class() {
        let spec = DuctSpec {
            variant: 1,
            dims: Dims3::cube(16),
            radius_range: (1.0, 1.6),
            seed: 13,
        };
        let (_, lbl) = generate(&spec).unwrap();
        for class in 1..N_CLASSES as u8 {
            assert!(lbl.data.contains(&class), "class {class} missing at 16^3");
        }
    }

    #[test]
    fn every_variant_survives_both_desk_sizes() {
        // expected classes must appear for any variant and seed, at the
        // minimum size and at the default case size
        for (dim, r_hi) in [(16usize, 1.6), (24usize, 2.0)] {
            for variant in 0..=6u8 {
                for seed in 0..24u64 {
                    let spec = DuctSpec {
                        variant,
                        dims: Dims3::cube(dim),
                        radius_range: (1.0, r_hi),
                        seed,
                    };
                    let (_, lbl) = generate(&spec)
                        .unwrap_or_else(|e| panic!("v{variant} seed {seed} dim {dim}: {e}"));
                    for class in 1..N_CLASSES as u8 {
                        let expected = !absent_classes(variant).contains(&class);
                        assert_eq!(
                            lbl.data.contains(&class),
                            expected,
                            "v{variant} seed {seed} dim {dim} class {class}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut small = DuctSpec::desk(1, 0);
        small.dims = Dims3::cube(12);
        assert!(matches!(generate(&small), Err(Error::Generation(_))));
        let mut thin = DuctSpec::desk(1, 0);
        thin.radius_range = (0.5, 2.0);
        assert!(matches!(generate(&thin), Err(Error::Generation(_))));
        let bad_variant = DuctSpec { variant: 9, ..DuctSpec::desk(1, 0) };
        assert!(generate(&bad_variant).is_err());
    }

    #[test]
    fn split_sizes_follow_four_three_three() {
        let plans = plan_split(10, 1).unwrap();
        let count = |s: Split| plans.iter().filter(|p| p.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (4, 3, 3));
        let plans = plan_split(100, 1).unwrap();
        let count = |s: Split| plans.iter().filter(|p| p.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (40, 30, 30));
        assert!(plan_split(9, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_ids_unique() {
        let a = plan_split(20, 7).unwrap();
        let b = plan_split(20, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.id, x.variant, x.split, x.seed), (y.id, y.variant, y.split, y.seed));
        }
        let mut ids: Vec<usize> = a.iter().map(|p| p.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn variant_draws_cover_the_catalog() {
        let plans = plan_split(200, 3).unwrap();
        let mut seen = [0usize; 7];
        for p in &plans {
            seen[p.variant as usize] += 1;
        }
        assert!(seen[1] > 60, "variant 1 should dominate, got {seen:?}");
        for (v, n) in seen.iter().enumerate() {
            assert!(*n > 0, "variant {v} never drawn in 200 cases");
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plans =
            generate_dataset(dir.path(), 10, 99, Dims3::cube(16), (1.0, 1.6)).unwrap();
        let rows = load_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 10);
        for (plan, row) in plans.iter().zip(&rows) {
            assert_eq!(plan.id, row.id);
            assert_eq!(plan.variant, row.variant);
            assert_eq!(plan.split, row.split);
            let img = crate::volume::read_svol(&image_path(dir.path(), plan.id))
                .unwrap()
                .into_image()
                .unwrap();
            let lbl = crate::volume::read_svol(&label_path(dir.path(), plan.id))
                .unwrap()
                .into_labels()
                .unwrap();
            assert_eq!(img.dims, Dims3::cube(16));
            assert_eq!(lbl.dims, Dims3::cube(16));
        }
    }
}
