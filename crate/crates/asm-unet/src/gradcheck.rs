//! Central-finite-difference gradient checking.
//!
//! The comparison lives in library code (not test-only) because the CLI
//! exposes a `gradcheck` command that reruns every suite and reports the
//! worst relative error per parameter group.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Vid};

/// Central differences of a scalar function at `x`.
pub fn fd_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        out[i] = (hi - lo) / (2.0 * step);
    }
    out
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-3).
///
/// The floor keeps near-zero gradients from inflating the ratio; central
/// differences in f64 at step 1e-4 resolve magnitudes far below it.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Result of checking one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// Checks a scalar loss built from a `ParamStore` against finite
/// differences over every parameter entry, reporting per-group errors.
///
/// `build` must construct the full forward pass on the provided tape from
/// the parameter leaves and return the scalar loss id. It is re-invoked for
/// every probe, so it has to be deterministic.
pub fn check_params(
    suite: &str,
    store: &ParamStore,
    tolerance: f64,
    step: f64,
    build: impl Fn(&mut Tape, &[Vid]) -> Vid,
) -> SuiteReport {
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let leaves = s.leaves(&mut tape);
        let root = build(&mut tape, &leaves);
        tape.value(root).item()
    };

    // analytic gradients once
    let mut tape = Tape::new();
    let leaves = store.leaves(&mut tape);
    let root = build(&mut tape, &leaves);
    assert_eq!(tape.value(root).len(), 1, "gradcheck loss must be scalar");
    let grads = tape.backward(root);

    let mut probe = store.clone();
    let mut groups = Vec::new();
    for (k, entry) in store.entries().iter().enumerate() {
        let analytic = match &grads[leaves[k]] {
            Some(g) => g.data.clone(),
            None => vec![0.0; entry.value.len()],
        };
        let mut numeric = vec![0.0; entry.value.len()];
        for i in 0..entry.value.len() {
            let orig = entry.value.data[i];
            probe.entry_mut(k).value.data[i] = orig + step;
            let hi = eval(&probe);
            probe.entry_mut(k).value.data[i] = orig - step;
            let lo = eval(&probe);
            probe.entry_mut(k).value.data[i] = orig;
            numeric[i] = (hi - lo) / (2.0 * step);
        }
        groups.push(GroupReport {
            name: entry.name.clone(),
            max_rel_err: max_rel_err(&analytic, &numeric),
            n_checked: entry.value.len(),
        });
    }
    SuiteReport { suite: suite.to_string(), groups, tolerance }
}

/// FD check of gradients with respect to a single flat input vector.
pub fn check_input(
    x: &[f64],
    step: f64,
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let numeric = fd_grad(x, step, f);
    max_rel_err(analytic, &numeric)
}

// ---------------------------------------------------------------------------
// named suites
// ---------------------------------------------------------------------------

/// Shared gate for the canned suites: worst relative error under 1e-3 at
/// probe step 1e-4.
pub const SUITE_TOLERANCE: f64 = 1e-3;
pub const SUITE_STEP: f64 = 1e-4;

pub const SUITE_NAMES: &[&str] = &[
    "selective_scan",
    "mamba_layer",
    "group_score",
    "individual_score",
    "asm_forward",
    "loss",
    "micro_unet",
];

/// CLI module filters mapped to suite names.
pub fn suites_for_module(module: Option<&str>) -> Result<Vec<&'static str>> {
    Ok(match module {
        None => SUITE_NAMES.to_vec(),
        Some("ssm") => vec!["selective_scan", "mamba_layer"],
        Some("asm") => vec!["group_score", "individual_score", "asm_forward"],
        Some("unet") => vec!["micro_unet"],
        Some("loss") => vec!["loss"],
        Some(other) => {
            return Err(Error::invalid(format!(
                "unknown gradcheck module '{other}' (expected ssm, asm, unet or loss)"
            )))
        }
    })
}

/// Runs one canned finite-difference suite by name. Each suite fixes its
/// own seed, so reruns are deterministic.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    use crate::asm::{AsmBlock, AsmConfig, GroupScanEmbedding, IndividualScoreGenerator, ScoreMode};
    use crate::params::init_normal;
    use crate::ssm::{selective_scan_op, MambaLayer};
    use crate::tape::Tensor;
    use crate::unet::{AsmSites, NetConfig, UNet3d};
    use crate::volume::Dims3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // one lean branch: depth 1, tiny state, group table of 4
    fn tiny_asm() -> AsmConfig {
        AsmConfig {
            n_branches: 1,
            mamba_depth: 1,
            n_group: 4,
            score_mode: ScoreMode::Both,
            residual: true,
            state_n: 2,
            expand: 2,
            conv_k: 4,
        }
    }

    let report = match name {
        "selective_scan" => {
            // every scan input registered as a probe group of its own
            let (s, m, n) = (6, 3, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(101);
            let mut store = ParamStore::new();
            store.register("x", init_normal(&mut rng, s, m, 1.0));
            let delta = {
                let mut t = Tensor::zeros(s, m);
                for v in t.data.iter_mut() {
                    *v = rng.random_range(0.05..0.6);
                }
                t
            };
            store.register("delta", delta);
            store.register("b", init_normal(&mut rng, s, n, 1.0));
            store.register("c", init_normal(&mut rng, s, n, 1.0));
            store.register("log_a", init_normal(&mut rng, m, n, 0.5));
            store.register("d_skip", init_normal(&mut rng, 1, m, 1.0));
            let weights = rand_vec(&mut rng, s * m);
            check_params("selective_scan", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let y = selective_scan_op(tape, lv[0], lv[1], lv[2], lv[3], lv[4], lv[5])
                    .expect("finite scan inputs");
                let w = tape.leaf(Tensor::new(s, m, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        "mamba_layer" => {
            let mut rng = ChaCha8Rng::seed_from_u64(102);
            let mut store = ParamStore::new();
            let layer = MambaLayer::new(&mut store, &mut rng, "layer", 3, 4, 2, 4);
            let s = 5;
            let x0 = rand_vec(&mut rng, s * 3);
            let weights = rand_vec(&mut rng, s * 3);
            check_params("mamba_layer", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let x = tape.leaf(Tensor::new(s, 3, x0.clone()));
                let y = layer.forward(tape, lv, x).expect("forward");
                let w = tape.leaf(Tensor::new(s, 3, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        "group_score" => {
            let mut rng = ChaCha8Rng::seed_from_u64(103);
            let mut store = ParamStore::new();
            let emb = GroupScanEmbedding::new(&mut store, &mut rng, "g", 5)?;
            let s = 11;
            let weights = rand_vec(&mut rng, s);
            check_params("group_score", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let y = emb.score(tape, lv, s);
                let w = tape.leaf(Tensor::new(s, 1, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        "individual_score" => {
            let mut rng = ChaCha8Rng::seed_from_u64(104);
            let mut store = ParamStore::new();
            let cfg = tiny_asm();
            let gen = IndividualScoreGenerator::new(&mut store, &mut rng, "i", 2, &cfg);
            let dims = Dims3::new(2, 2, 2);
            let x0 = rand_vec(&mut rng, 8 * 2);
            let weights = rand_vec(&mut rng, 8);
            check_params("individual_score", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let x = tape.leaf(Tensor::new(8, 2, x0.clone()));
                let y = gen.score(tape, lv, x, dims).expect("score");
                let w = tape.leaf(Tensor::new(8, 1, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        "asm_forward" => {
            // one branch, depth 1, (2,2,2) tokens of width 3
            let mut rng = ChaCha8Rng::seed_from_u64(105);
            let mut store = ParamStore::new();
            let block = AsmBlock::new(&mut store, &mut rng, "asm", 3, tiny_asm())?;
            // probe steps must not flip the score sort
            block.separate_scores_for_gradcheck(&mut store);
            let dims = Dims3::new(2, 2, 2);
            let x0 = rand_vec(&mut rng, 8 * 3);
            let weights = rand_vec(&mut rng, 8 * 3);
            check_params("asm_forward", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let x = tape.leaf(Tensor::new(8, 3, x0.clone()));
                let y = block.forward(tape, lv, x, dims).expect("forward");
                let w = tape.leaf(Tensor::new(8, 3, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        "loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(106);
            let mut store = ParamStore::new();
            store.register("logits", init_normal(&mut rng, 8, 3, 1.0));
            let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            check_params("loss", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                crate::train::combined_loss(tape, lv[0], &targets, 1.0, 1.0)
            })
        }
        "micro_unet" => {
            let mut rng = ChaCha8Rng::seed_from_u64(107);
            let mut store = ParamStore::new();
            let cfg = NetConfig {
                n_stages: 2,
                strides: vec![1, 2],
                channels: vec![2, 4],
                n_classes: 2,
                asm: tiny_asm(),
                asm_sites: AsmSites::default(),
            };
            let net = UNet3d::new(&mut store, &mut rng, cfg)?;
            net.asm1.as_ref().expect("site 1").separate_scores_for_gradcheck(&mut store);
            net.asm2.as_ref().expect("site 2").separate_scores_for_gradcheck(&mut store);
            let patch = Dims3::cube(4);
            let x0 = rand_vec(&mut rng, 64);
            let weights = rand_vec(&mut rng, 64 * 2);
            check_params("micro_unet", &store, SUITE_TOLERANCE, SUITE_STEP, |tape, lv| {
                let x = tape.leaf(Tensor::new(64, 1, x0.clone()));
                let y = net.forward(tape, lv, x, patch).expect("forward");
                let w = tape.leaf(Tensor::new(64, 2, weights.clone()));
                let p = tape.mul(y, w);
                tape.sum_all(p)
            })
        }
        other => return Err(Error::invalid(format!("unknown gradcheck suite '{other}'"))),
    };
    Ok(report)
}
