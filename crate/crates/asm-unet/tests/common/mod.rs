//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asm-unet"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cli")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small everything: 2-stage net, one lean branch, 16^3 cases.
pub const MICRO_CFG: &str = "\
net.n_stages=2
net.strides=1,2
net.channels=2,4
asm.n_branches=1
asm.mamba_depth=1
asm.n_group=4
asm.state_n=2
train.batch_size=2
train.max_epochs=2
train.iters_per_epoch=2
train.val_every=2
train.patience=2
train.patch_size=8
train.seed=5
data.n_cases=10
data.dim=16
data.radius_lo=1.0
data.radius_hi=1.6
data.seed=3
";

pub fn write_micro_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("micro.cfg");
    std::fs::write(&path, MICRO_CFG).unwrap();
    path
}

pub fn gen_micro_data(dir: &Path, cfg: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    data
}
