//! Training loop: combined Dice + cross-entropy loss, polynomial
//! learning-rate decay, Adam, foreground-biased patch sampling,
//! periodic sliding-window validation with early stopping, and
//! resumable checkpoints.
//!
//! Determinism contract: every random draw comes from a ChaCha8 stream
//! seeded by hashing (master seed, epoch, iteration, sample), so a
//! resumed run replays exactly the batches the original run would have
//! seen, and results do not depend on worker thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, AdamState, Checkpoint, TrainState};
use crate::config::{RunConfig, TrainParams};
use crate::error::{Error, Result};
use crate::infer;
use crate::metrics::{self, MetricsReport};
use crate::nn;
use crate::params::ParamStore;
use crate::synth::{self, Split};
use crate::tape::{Tape, Tensor, Vid};
use crate::unet::UNet3d;
use crate::volume::{
    self, augment_with_draws, extract_patch, sample_patch_origin, AugmentDraws, Dims3,
    LabelVolume, PatchSpec, Volume3D, CLASS_NAMES, N_CLASSES,
};

pub const DICE_SMOOTH: f64 = 1e-5;
/// Validation Dice must rise by more than this to count as improvement.
pub const IMPROVE_EPS: f64 = 1e-4;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// loss and schedule
// ---------------------------------------------------------------------------

/// Soft Dice loss on softmax probabilities plus voxel-mean cross
/// entropy, with configurable weights.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Vid,
    targets: &[usize],
    dice_weight: f64,
    ce_weight: f64,
) -> Vid {
    let probs = nn::softmax_rows(tape, logits);
    let dl = nn::dice_loss(tape, probs, targets, DICE_SMOOTH);
    let ce = nn::cross_entropy_mean(tape, logits, targets);
    let dl_w = tape.scale(dl, dice_weight);
    let ce_w = tape.scale(ce, ce_weight);
    tape.add(dl_w, ce_w)
}

/// Polynomial decay: lr0 * (1 - epoch/max_epochs)^p.
pub fn lr_schedule(epoch: usize, cfg: &TrainParams) -> f64 {
    assert!(epoch <= cfg.max_epochs, "epoch past schedule end");
    cfg.lr0 * (1.0 - epoch as f64 / cfg.max_epochs as f64).powf(cfg.poly_exp)
}

/// One bias-corrected Adam update over every parameter.
pub fn adam_step(store: &mut ParamStore, adam: &mut AdamState, grads: &[Tensor], lr: f64) {
    assert_eq!(grads.len(), store.len(), "one gradient per parameter");
    adam.t += 1;
    let t = adam.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for id in 0..store.len() {
        let g = &grads[id];
        let m = &mut adam.m[id];
        let v = &mut adam.v[id];
        let p = store.value_mut(id);
        for j in 0..p.data.len() {
            m.data[j] = ADAM_BETA1 * m.data[j] + (1.0 - ADAM_BETA1) * g.data[j];
            v.data[j] = ADAM_BETA2 * v.data[j] + (1.0 - ADAM_BETA2) * g.data[j] * g.data[j];
            let m_hat = m.data[j] / bc1;
            let v_hat = v.data[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// deterministic seed chain
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for one (epoch, iteration, sample) triple.
pub fn sample_seed(master: u64, epoch: u64, iter: u64, sample: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(master) ^ epoch) ^ iter) ^ sample)
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

/// One case ready for sampling: intensities z-scored over the case's
/// own labeled voxels, labels untouched.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub id: usize,
    pub variant: u8,
    pub image: Volume3D,
    pub labels: LabelVolume,
}

impl TrainCase {
    pub fn prepare(id: usize, variant: u8, raw: &Volume3D, labels: &LabelVolume) -> Result<Self> {
        let image = volume::zscore_normalize(raw, labels)?;
        Ok(TrainCase { id, variant, image, labels: labels.clone() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TrainCase>,
    pub val: Vec<TrainCase>,
    pub test: Vec<TrainCase>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TrainCase] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Read every case listed in the manifest and normalize it.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let rows = synth::load_manifest(dir)?;
    let mut ds = Dataset::default();
    for row in rows {
        let img = volume::read_svol(&synth::image_path(dir, row.id))?.into_image()?;
        let lbl = volume::read_svol(&synth::label_path(dir, row.id))?.into_labels()?;
        let case = TrainCase::prepare(row.id, row.variant, &img, &lbl).map_err(|e| {
            Error::invalid(format!("case {} failed normalization: {e}", row.id))
        })?;
        match row.split {
            Split::Train => ds.train.push(case),
            Split::Val => ds.val.push(case),
            Split::Test => ds.test.push(case),
        }
    }
    if ds.train.is_empty() || ds.val.is_empty() || ds.test.is_empty() {
        return Err(Error::invalid("manifest must populate train, val, and test splits"));
    }
    Ok(ds)
}

/// Draw one augmented training patch. All randomness comes from `seed`.
fn sample_training_patch(
    cases: &[TrainCase],
    patch: Dims3,
    fg_bias: f64,
    seed: u64,
) -> Result<(Volume3D, LabelVolume)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = &cases[rng.random_range(0..cases.len())];
    let draws = AugmentDraws::sample(&mut rng);
    let (img, lbl) = augment_with_draws(&case.image, &case.labels, &draws)?;
    let fg = lbl.foreground_voxels_by_class();
    let origin = sample_patch_origin(lbl.dims, patch, &fg, fg_bias, &mut rng);
    extract_patch(&img, &lbl, &PatchSpec { origin, size: patch })
}

// ---------------------------------------------------------------------------
// history
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ValRecord {
    pub mean_report: MetricsReport,
    /// Mean over the 8 foreground classes, averaged per case first.
    pub mean_fg_dice: f64,
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<ValRecord>,
}

pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,lr,train_loss");
    for class in 1..N_CLASSES {
        let _ = write!(out, ",val_{}", CLASS_NAMES[class]);
    }
    out.push_str(",val_mean\n");
    for row in rows {
        let _ = write!(out, "{},{:.8},{:.6}", row.epoch, row.lr, row.train_loss);
        match &row.val {
            Some(v) => {
                for d in &v.mean_report.dice_per_class {
                    let _ = write!(out, ",{d:.6}");
                }
                let _ = write!(out, ",{:.6}", v.mean_fg_dice);
            }
            None => out.push_str(&",".repeat(N_CLASSES)),
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub best_val: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: UNet3d,
    pub store: ParamStore,
    pub adam: AdamState,
    pub state: TrainState,
    /// Worker threads for batch samples; 1 = fully serial. Results are
    /// identical for any value.
    pub n_threads: usize,
    /// Test hook: overrides the schedule when set (e.g. 0.0 freezes the
    /// model to exercise early-stopping counters).
    pub lr_override: Option<f64>,
}

impl Trainer {
    /// Fresh trainer with parameters initialized from the config seed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let net = UNet3d::new(&mut store, &mut rng, cfg.net.clone())?;
        let adam = AdamState::zeros_like(&store);
        let state = TrainState::fresh(cfg.train.seed);
        Ok(Trainer { cfg, net, store, adam, state, n_threads: 1, lr_override: None })
    }

    /// Rebuild a trainer from a checkpoint; the config echo must parse
    /// and match the model's parameter table.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config_text)?;
        let mut out = Trainer::new(cfg)?;
        ckpt.restore_into(&mut out.store)?;
        out.adam = ckpt
            .adam
            .clone()
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
        out.state = ckpt.state.clone();
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.cfg.serialize(),
            &self.state,
            &self.store,
            Some(&self.adam),
        )
    }

    fn patch_dims(&self) -> Dims3 {
        Dims3::cube(self.cfg.train.patch_size)
    }

    /// Forward + backward for one sample; returns (loss, per-param grads).
    fn sample_pass(&self, img: &Volume3D, lbl: &LabelVolume) -> Result<(f64, Vec<Tensor>)> {
        let patch = self.patch_dims();
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape);
        let x = tape.leaf(Tensor::new(patch.count(), 1, img.data.clone()));
        let logits = self.net.forward(&mut tape, &leaves, x, patch)?;
        let targets: Vec<usize> = lbl.data.iter().map(|&v| v as usize).collect();
        let loss = combined_loss(
            &mut tape,
            logits,
            &targets,
            self.cfg.train.dice_weight,
            self.cfg.train.ce_weight,
        );
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss);
        Ok((loss_val, self.store.collect_grads(&leaves, &grads)))
    }

    /// One optimizer step over a freshly sampled batch. Returns the
    /// batch-mean loss.
    pub fn train_iteration(&mut self, data: &[TrainCase], epoch: usize, iter: usize) -> Result<f64> {
        let t = &self.cfg.train;
        let patch = self.patch_dims();
        let batch: Vec<(Volume3D, LabelVolume)> = (0..t.batch_size)
            .map(|k| {
                sample_training_patch(
                    data,
                    patch,
                    t.fg_bias,
                    sample_seed(self.state.master_seed, epoch as u64, iter as u64, k as u64),
                )
            })
            .collect::<Result<_>>()?;

        // per-sample passes, reduced in index order so any thread count
        // produces identical numbers
        let results: Result<Vec<(f64, Vec<Tensor>)>> = if self.n_threads <= 1 || batch.len() <= 1 {
            batch
                .iter()
                .map(|(img, lbl)| self.sample_pass(img, lbl))
                .collect::<Result<_>>()
        } else {
            let mut slots: Vec<Option<Result<(f64, Vec<Tensor>)>>> =
                (0..batch.len()).map(|_| None).collect();
            let this = &*self;
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (chunk_idx, chunk) in slots
                    .chunks_mut(batch.len().div_ceil(self.n_threads))
                    .enumerate()
                {
                    let chunk_start = chunk_idx * batch.len().div_ceil(self.n_threads);
                    let batch_ref = &batch;
                    handles.push(scope.spawn(move || {
                        for (off, slot) in chunk.iter_mut().enumerate() {
                            let (img, lbl) = &batch_ref[chunk_start + off];
                            *slot = Some(this.sample_pass(img, lbl));
                        }
                    }));
                }
                for h in handles {
                    h.join().expect("sample worker panicked");
                }
            });
            slots
                .into_iter()
                .map(|s| s.expect("sample slot filled"))
                .collect::<Result<_>>()
        };
        // pin the abort location onto numeric failures from inside the passes
        // so the diagnostic names where training died
        let results = results.map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("{msg} at epoch {epoch} iteration {iter}; aborting"))
            }
            other => other,
        })?;

        let scale = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = self
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows, e.value.cols))
            .collect();
        for (l, g) in &results {
            loss += l;
            for (acc, t) in grads.iter_mut().zip(g) {
                for (a, v) in acc.data.iter_mut().zip(&t.data) {
                    *a += v;
                }
            }
        }
        loss *= scale;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at epoch {epoch} iteration {iter}; aborting"
            )));
        }
        let lr = self.lr_override.unwrap_or_else(|| lr_schedule(epoch, &self.cfg.train));
        adam_step(&mut self.store, &mut self.adam, &grads, lr);
        self.state.step += 1;
        Ok(loss)
    }

    /// Sliding-window Dice over a case list; per-case reports are
    /// averaged column-wise.
    pub fn evaluate(&self, cases: &[TrainCase]) -> Result<ValRecord> {
        assert!(!cases.is_empty(), "evaluate needs at least one case");
        let patch = self.patch_dims();
        let stride = (self.cfg.train.patch_size / 2).max(1);
        let mut reports = Vec::with_capacity(cases.len());
        for case in cases {
            let pred = infer::predict_labels(&self.net, &self.store, &case.image, patch, stride)?;
            reports.push(metrics::report(&pred, &case.labels)?);
        }
        let mean_report = MetricsReport::mean(&reports);
        let mean_fg_dice =
            reports.iter().map(|r| r.avg_fine_with_hard).sum::<f64>() / reports.len() as f64;
        Ok(ValRecord { mean_report, mean_fg_dice })
    }

    /// Per-case test-split reports for the evaluation table.
    pub fn per_case_reports(&self, cases: &[TrainCase]) -> Result<Vec<(String, MetricsReport)>> {
        let patch = self.patch_dims();
        let stride = (self.cfg.train.patch_size / 2).max(1);
        cases
            .iter()
            .map(|case| {
                let pred =
                    infer::predict_labels(&self.net, &self.store, &case.image, patch, stride)?;
                Ok((format!("case_{:03}", case.id), metrics::report(&pred, &case.labels)?))
            })
            .collect()
    }

    /// Main loop. Saves `latest.ckpt` every epoch and `best.ckpt` on
    /// validation improvement when `out_dir` is set; `log` receives one
    /// line per epoch.
    pub fn run(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        log: &mut dyn FnMut(&str),
    ) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut history = Vec::new();
        let mut stopped_early = false;
        let start_epoch = self.state.epoch as usize;
        for epoch in start_epoch..self.cfg.train.max_epochs {
            let lr = self.lr_override.unwrap_or_else(|| lr_schedule(epoch, &self.cfg.train));
            let mut loss_sum = 0.0;
            for iter in 0..self.cfg.train.iters_per_epoch {
                loss_sum += self.train_iteration(&data.train, epoch, iter)?;
            }
            let train_loss = loss_sum / self.cfg.train.iters_per_epoch as f64;
            self.state.epoch = (epoch + 1) as u32;

            let mut val = None;
            if (epoch + 1) % self.cfg.train.val_every == 0 {
                let record = self.evaluate(&data.val)?;
                if record.mean_fg_dice > self.state.best_metric + IMPROVE_EPS {
                    self.state.best_metric = record.mean_fg_dice;
                    self.state.evals_since_improve = 0;
                    if let Some(dir) = out_dir {
                        checkpoint::save(&dir.join("best.ckpt"), &self.checkpoint())?;
                    }
                } else {
                    self.state.evals_since_improve += 1;
                }
                val = Some(record);
            }

            let row = EpochRow { epoch, lr, train_loss, val };
            match &row.val {
                Some(v) => log(&format!(
                    "epoch {:>3}  lr {:.6}  loss {:.4}  val fg dice {:.4} (best {:.4})",
                    epoch, lr, train_loss, v.mean_fg_dice, self.state.best_metric
                )),
                None => log(&format!("epoch {epoch:>3}  lr {lr:.6}  loss {train_loss:.4}")),
            }
            history.push(row);

            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join("latest.ckpt"), &self.checkpoint())?;
                std::fs::write(dir.join("history.csv"), history_csv(&history))?;
            }
            if self.state.evals_since_improve >= self.cfg.train.patience as u32 {
                stopped_early = true;
                log(&format!(
                    "stopping: no improvement in {} validations",
                    self.state.evals_since_improve
                ));
                break;
            }
        }
        Ok(TrainOutcome {
            history,
            best_val: self.state.best_metric,
            epochs_run: self.state.epoch as usize - start_epoch,
            stopped_early,
        })
    }
}

pub fn latest_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("latest.ckpt")
}

pub fn best_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}
