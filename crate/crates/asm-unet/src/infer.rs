//! Full-volume inference by sliding a patch-sized window over the
//! volume and averaging logits where windows overlap.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor};
use crate::unet::UNet3d;
use crate::volume::{Dims3, LabelVolume, Volume3D};

/// Window origins along one axis: 0, stride, 2*stride, ... plus a final
/// flush-right window so the whole extent is covered.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch > dim {
        return Err(Error::invalid(format!("patch {patch} exceeds volume dim {dim}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let mut starts = Vec::new();
    let mut v = 0;
    while v + patch < dim {
        starts.push(v);
        v += stride;
    }
    let last = dim - patch;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts)
}

/// Overlap-averaged logits for the whole volume, flattened in canonical
/// voxel order, one row of `n_classes` per voxel.
pub fn sliding_window_logits(
    net: &UNet3d,
    store: &ParamStore,
    vol: &Volume3D,
    patch: Dims3,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    let dims = vol.dims;
    let c = net.cfg.n_classes;
    let xs = window_starts(dims.w, patch.w, stride)?;
    let ys = window_starts(dims.h, patch.h, stride)?;
    let zs = window_starts(dims.d, patch.d, stride)?;
    let mut sum = vec![vec![0.0; c]; dims.count()];
    let mut hits = vec![0u32; dims.count()];
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut data = Vec::with_capacity(patch.count());
                for z in 0..patch.d {
                    for y in 0..patch.h {
                        for x in 0..patch.w {
                            data.push(vol.data[dims.index(x0 + x, y0 + y, z0 + z)]);
                        }
                    }
                }
                let mut tape = Tape::new();
                let leaves = store.leaves(&mut tape);
                let x = tape.leaf(Tensor::new(patch.count(), 1, data));
                let logits = net.forward(&mut tape, &leaves, x, patch)?;
                let lv = tape.value(logits);
                for z in 0..patch.d {
                    for y in 0..patch.h {
                        for x in 0..patch.w {
                            let vi = dims.index(x0 + x, y0 + y, z0 + z);
                            let row = lv.row(patch.index(x, y, z));
                            for (acc, v) in sum[vi].iter_mut().zip(row) {
                                *acc += v;
                            }
                            hits[vi] += 1;
                        }
                    }
                }
            }
        }
    }
    for (row, n) in sum.iter_mut().zip(&hits) {
        debug_assert!(*n > 0, "window layout left a voxel uncovered");
        for v in row.iter_mut() {
            *v /= *n as f64;
        }
    }
    Ok(sum)
}

/// Argmax over averaged logits; ties resolve to the lowest class id.
pub fn predict_labels(
    net: &UNet3d,
    store: &ParamStore,
    vol: &Volume3D,
    patch: Dims3,
    stride: usize,
) -> Result<LabelVolume> {
    let logits = sliding_window_logits(net, store, vol, patch, stride)?;
    let data: Vec<u8> = logits
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(vol.dims, vol.spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{AsmConfig, ScoreMode};
    use crate::unet::{AsmSites, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_net(seed: u64, n_classes: usize) -> (UNet3d, ParamStore) {
        let cfg = NetConfig {
            n_stages: 2,
            strides: vec![1, 2],
            channels: vec![2, 4],
            n_classes,
            asm: AsmConfig {
                n_branches: 1,
                mamba_depth: 1,
                n_group: 4,
                score_mode: ScoreMode::Both,
                residual: true,
                state_n: 2,
                expand: 2,
                conv_k: 4,
            },
            asm_sites: AsmSites::default(),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet3d::new(&mut store, &mut rng, cfg).unwrap();
        (net, store)
    }

    fn random_volume(dims: Dims3, seed: u64) -> Volume3D {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Volume3D::new(dims, crate::volume::Spacing::iso(1.0), data).unwrap()
    }

    #[test]
    fn starts_cover_the_axis_and_end_flush() {
        assert_eq!(window_starts(24, 16, 8).unwrap(), vec![0, 8]);
        assert_eq!(window_starts(16, 16, 8).unwrap(), vec![0]);
        assert_eq!(window_starts(40, 16, 8).unwrap(), vec![0, 8, 16, 24]);
        // uneven tail still lands flush on the right edge
        assert_eq!(window_starts(21, 16, 8).unwrap(), vec![0, 5]);
        assert!(window_starts(8, 16, 8).is_err());
        assert!(window_starts(16, 16, 0).is_err());
    }

    #[test]
    fn starts_leave_no_voxel_uncovered() {
        for dim in 16..40 {
            let starts = window_starts(dim, 16, 8).unwrap();
            let mut covered = vec![false; dim];
            for s in starts {
                for v in covered.iter_mut().skip(s).take(16) {
                    *v = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "gap at dim {dim}");
        }
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let (net, store) = micro_net(3, 2);
        let dims = Dims3::cube(8);
        let vol = random_volume(dims, 4);
        let windowed = sliding_window_logits(&net, &store, &vol, dims, 4).unwrap();
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let x = tape.leaf(Tensor::new(dims.count(), 1, vol.data.clone()));
        let logits = net.forward(&mut tape, &leaves, x, dims).unwrap();
        let direct = tape.value(logits);
        for (i, row) in windowed.iter().enumerate() {
            assert_eq!(row.as_slice(), direct.row(i), "voxel {i}");
        }
    }

    #[test]
    fn overlapping_windows_average_deterministically() {
        let (net, store) = micro_net(5, 3);
        let vol = random_volume(Dims3::cube(12), 6);
        let a = sliding_window_logits(&net, &store, &vol, Dims3::cube(8), 4).unwrap();
        let b = sliding_window_logits(&net, &store, &vol, Dims3::cube(8), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predicted_labels_argmax_the_averaged_logits() {
        let (net, store) = micro_net(7, 3);
        let vol = random_volume(Dims3::cube(12), 8);
        let logits = sliding_window_logits(&net, &store, &vol, Dims3::cube(8), 4).unwrap();
        let labels = predict_labels(&net, &store, &vol, Dims3::cube(8), 4).unwrap();
        for (row, &lab) in logits.iter().zip(&labels.data) {
            for v in row {
                assert!(row[lab as usize] >= *v);
            }
        }
    }
}
