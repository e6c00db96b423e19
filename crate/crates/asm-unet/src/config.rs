//! Run configuration: a plain key=value file covering network, ASM,
//! training, and data-generation hyperparameters.
//!
//! Parsing starts from the desk defaults and applies overrides; unknown
//! keys are rejected so typos fail loudly. Serialization emits every
//! key in sorted order, so parse -> serialize -> parse is a fixed point.

use std::collections::BTreeMap;

use crate::asm::ScoreMode;
use crate::error::{Error, Result};
use crate::unet::NetConfig;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub batch_size: usize,
    pub lr0: f64,
    pub poly_exp: f64,
    pub max_epochs: usize,
    /// Patch iterations per epoch; an "epoch" is otherwise undefined
    /// for patch-based sampling.
    pub iters_per_epoch: usize,
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Cubic patch edge length in voxels.
    pub patch_size: usize,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// Fraction of sampled patches forced to contain foreground.
    pub fg_bias: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            batch_size: 2,
            lr0: 0.01,
            poly_exp: 0.9,
            max_epochs: 60,
            iters_per_epoch: 25,
            val_every: 5,
            patience: 8,
            seed: 1,
            patch_size: 16,
            dice_weight: 1.0,
            ce_weight: 1.0,
            fg_bias: 0.5,
        }
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    pub n_cases: usize,
    /// Cubic case edge length in voxels.
    pub dim: usize,
    pub radius_lo: f64,
    pub radius_hi: f64,
    pub seed: u64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams { n_cases: 20, dim: 24, radius_lo: 1.4, radius_hi: 2.4, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainParams,
    pub data: DataParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::desk_default(),
            train: TrainParams::default(),
            data: DataParams::default(),
        }
    }
}

/// Ablation presets: branch count and score mode only, everything else
/// stays at the defaults.
pub const PRESETS: [&str; 5] = ["m1", "m2", "m3", "m4", "m5"];

impl RunConfig {
    /// m1 turns the block off; m2 keeps one unscored branch; m3..m5
    /// enable individual, group, then both scores with three branches.
    pub fn apply_preset(&mut self, preset: &str) -> Result<()> {
        let (branches, mode) = match preset {
            "m1" => (0, ScoreMode::None),
            "m2" => (1, ScoreMode::None),
            "m3" => (3, ScoreMode::IndividualOnly),
            "m4" => (3, ScoreMode::GroupOnly),
            "m5" => (3, ScoreMode::Both),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}'; expected one of {PRESETS:?}"
                )))
            }
        };
        self.net.asm.n_branches = branches;
        self.net.asm.score_mode = mode;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let t = &self.train;
        if t.batch_size == 0
            || t.max_epochs == 0
            || t.iters_per_epoch == 0
            || t.val_every == 0
            || t.patch_size == 0
        {
            return Err(Error::Config("train counts must be positive".into()));
        }
        if t.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(t.lr0 > 0.0 && t.poly_exp > 0.0) {
            return Err(Error::Config("lr0 and poly_exp must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.fg_bias) {
            return Err(Error::Config("fg_bias must lie in [0,1]".into()));
        }
        if t.dice_weight < 0.0 || t.ce_weight < 0.0 || t.dice_weight + t.ce_weight == 0.0 {
            return Err(Error::Config("loss weights must be nonnegative, not both zero".into()));
        }
        let d = &self.data;
        if d.n_cases < 10 {
            return Err(Error::Config("data.n_cases must be at least 10".into()));
        }
        if d.dim < 16 {
            return Err(Error::Config("data.dim must be at least 16".into()));
        }
        if !(d.radius_lo >= 1.0 && d.radius_hi >= d.radius_lo) {
            return Err(Error::Config("need 1 <= data.radius_lo <= data.radius_hi".into()));
        }
        if self.train.patch_size > self.data.dim {
            return Err(Error::Config(format!(
                "patch_size {} exceeds volume dim {}",
                self.train.patch_size, self.data.dim
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {key}: {what}"));
        let usize_v = || value.parse::<usize>().map_err(|_| bad("expected integer"));
        let u64_v = || value.parse::<u64>().map_err(|_| bad("expected integer"));
        let f64_v = || value.parse::<f64>().map_err(|_| bad("expected number"));
        let bool_v = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("expected true or false")),
        };
        let list_v = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("expected integer list")))
                .collect()
        };
        match key {
            "net.n_stages" => self.net.n_stages = usize_v()?,
            "net.strides" => self.net.strides = list_v()?,
            "net.channels" => self.net.channels = list_v()?,
            "net.n_classes" => self.net.n_classes = usize_v()?,
            "net.asm_after_encoder_1" => self.net.asm_sites.after_encoder_1 = bool_v()?,
            "net.asm_before_last_decoder" => {
                self.net.asm_sites.before_last_decoder = bool_v()?
            }
            "asm.n_branches" => self.net.asm.n_branches = usize_v()?,
            "asm.mamba_depth" => self.net.asm.mamba_depth = usize_v()?,
            "asm.n_group" => self.net.asm.n_group = usize_v()?,
            "asm.score_mode" => self.net.asm.score_mode = ScoreMode::parse(value)?,
            "asm.residual" => self.net.asm.residual = bool_v()?,
            "asm.state_n" => self.net.asm.state_n = usize_v()?,
            "asm.expand" => self.net.asm.expand = usize_v()?,
            "asm.conv_k" => self.net.asm.conv_k = usize_v()?,
            "train.batch_size" => self.train.batch_size = usize_v()?,
            "train.lr0" => self.train.lr0 = f64_v()?,
            "train.poly_exp" => self.train.poly_exp = f64_v()?,
            "train.max_epochs" => self.train.max_epochs = usize_v()?,
            "train.iters_per_epoch" => self.train.iters_per_epoch = usize_v()?,
            "train.val_every" => self.train.val_every = usize_v()?,
            "train.patience" => self.train.patience = usize_v()?,
            "train.seed" => self.train.seed = u64_v()?,
            "train.patch_size" => self.train.patch_size = usize_v()?,
            "train.dice_weight" => self.train.dice_weight = f64_v()?,
            "train.ce_weight" => self.train.ce_weight = f64_v()?,
            "train.fg_bias" => self.train.fg_bias = f64_v()?,
            "data.n_cases" => self.data.n_cases = usize_v()?,
            "data.dim" => self.data.dim = usize_v()?,
            "data.radius_lo" => self.data.radius_lo = f64_v()?,
            "data.radius_hi" => self.data.radius_hi = f64_v()?,
            "data.seed" => self.data.seed = u64_v()?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("net.n_stages", self.net.n_stages.to_string());
        map.insert("net.strides", join(&self.net.strides));
        map.insert("net.channels", join(&self.net.channels));
        map.insert("net.n_classes", self.net.n_classes.to_string());
        map.insert(
            "net.asm_after_encoder_1",
            self.net.asm_sites.after_encoder_1.to_string(),
        );
        map.insert(
            "net.asm_before_last_decoder",
            self.net.asm_sites.before_last_decoder.to_string(),
        );
        map.insert("asm.n_branches", self.net.asm.n_branches.to_string());
        map.insert("asm.mamba_depth", self.net.asm.mamba_depth.to_string());
        map.insert("asm.n_group", self.net.asm.n_group.to_string());
        map.insert("asm.score_mode", self.net.asm.score_mode.as_str().to_string());
        map.insert("asm.residual", self.net.asm.residual.to_string());
        map.insert("asm.state_n", self.net.asm.state_n.to_string());
        map.insert("asm.expand", self.net.asm.expand.to_string());
        map.insert("asm.conv_k", self.net.asm.conv_k.to_string());
        map.insert("train.batch_size", self.train.batch_size.to_string());
        map.insert("train.lr0", format_f64(self.train.lr0));
        map.insert("train.poly_exp", format_f64(self.train.poly_exp));
        map.insert("train.max_epochs", self.train.max_epochs.to_string());
        map.insert("train.iters_per_epoch", self.train.iters_per_epoch.to_string());
        map.insert("train.val_every", self.train.val_every.to_string());
        map.insert("train.patience", self.train.patience.to_string());
        map.insert("train.seed", self.train.seed.to_string());
        map.insert("train.patch_size", self.train.patch_size.to_string());
        map.insert("train.dice_weight", format_f64(self.train.dice_weight));
        map.insert("train.ce_weight", format_f64(self.train.ce_weight));
        map.insert("train.fg_bias", format_f64(self.train.fg_bias));
        map.insert("data.n_cases", self.data.n_cases.to_string());
        map.insert("data.dim", self.data.dim.to_string());
        map.insert("data.radius_lo", format_f64(self.data.radius_lo));
        map.insert("data.radius_hi", format_f64(self.data.radius_hi));
        map.insert("data.seed", self.data.seed.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Shortest representation that parses back to the same f64.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.serialize() == other.serialize()
    }
}
