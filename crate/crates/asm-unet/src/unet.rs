//! 3D encoder/decoder segmentation network hosting the adaptive scan
//! blocks: one after the first encoder stage, one feeding the last
//! decoder block.
//!
//! Features flow as (voxels, channels) matrices in canonical voxel order
//! with spatial dims carried alongside. Convolutions that feed instance
//! norm carry no bias; a per-channel constant shift is cancelled exactly
//! by the normalization.

use rand_chacha::ChaCha8Rng;

use crate::asm::{AsmBlock, AsmConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{init_he, ParamId, ParamStore};
use crate::tape::{Tape, Tensor, Unary, Vid};
use crate::volume::Dims3;

/// Input volumes carry one intensity channel.
pub const IN_CHANNELS: usize = 1;

/// Which adaptive-scan insertion sites are active.
#[derive(Debug, Clone, Copy)]
pub struct AsmSites {
    pub after_encoder_1: bool,
    pub before_last_decoder: bool,
}

impl Default for AsmSites {
    fn default() -> Self {
        AsmSites { after_encoder_1: true, before_last_decoder: true }
    }
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub n_stages: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub n_classes: usize,
    pub asm: AsmConfig,
    pub asm_sites: AsmSites,
}

impl NetConfig {
    /// Small configuration for fast end-to-end runs.
    pub fn desk_default() -> Self {
        NetConfig {
            n_stages: 4,
            strides: vec![1, 2, 2, 2],
            channels: vec![8, 16, 32, 64],
            n_classes: crate::volume::N_CLASSES,
            asm: AsmConfig::default(),
            asm_sites: AsmSites::default(),
        }
    }

    /// Full-scale configuration; constructible and shape-checked, too slow
    /// to train here.
    pub fn paper_scale() -> Self {
        NetConfig {
            n_stages: 6,
            strides: vec![1, 2, 2, 2, 2, 2],
            channels: vec![32, 64, 128, 256, 320, 320],
            n_classes: crate::volume::N_CLASSES,
            asm: AsmConfig::default(),
            asm_sites: AsmSites::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 {
            return Err(Error::Config("need at least 2 stages".into()));
        }
        if self.strides.len() != self.n_stages || self.channels.len() != self.n_stages {
            return Err(Error::Config(format!(
                "strides ({}) and channels ({}) must both have n_stages = {} entries",
                self.strides.len(),
                self.channels.len(),
                self.n_stages
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("stage strides must be 1 or 2".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Per-stage output spatial dims for a patch, or a configuration error
    /// if the patch does not divide cleanly through the stride pyramid.
    pub fn trace_shapes(&self, patch: Dims3) -> Result<Vec<Dims3>> {
        self.validate()?;
        let period: usize = self.strides.iter().product();
        for (name, n) in [("w", patch.w), ("h", patch.h), ("d", patch.d)] {
            if n == 0 || n % period != 0 {
                return Err(Error::Config(format!(
                    "patch {name} = {n} is not divisible by the stride product {period}"
                )));
            }
        }
        let mut dims = patch;
        let mut out = Vec::with_capacity(self.n_stages);
        for &s in &self.strides {
            dims = Dims3::new(dims.w / s, dims.h / s, dims.d / s);
            out.push(dims);
        }
        Ok(out)
    }
}

/// Two 3x3x3 convolutions with instance norm + ReLU; the first conv
/// carries the stage stride.
#[derive(Debug, Clone)]
struct ConvStage {
    conv_w: [ParamId; 2],
    gamma: [ParamId; 2],
    beta: [ParamId; 2],
    stride: usize,
}

impl ConvStage {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mut conv_w = [0; 2];
        let mut gamma = [0; 2];
        let mut beta = [0; 2];
        for (i, ci) in [cin, cout].into_iter().enumerate() {
            let fan = 27 * ci;
            conv_w[i] =
                store.register(&format!("{prefix}.conv{i}.w"), init_he(rng, cout, fan, fan));
            gamma[i] = store.register(&format!("{prefix}.norm{i}.gamma"), Tensor::full(1, cout, 1.0));
            beta[i] = store.register(&format!("{prefix}.norm{i}.beta"), Tensor::zeros(1, cout));
        }
        ConvStage { conv_w, gamma, beta, stride }
    }

    fn forward(&self, tape: &mut Tape, leaves: &[Vid], x: Vid, dims: Dims3) -> (Vid, Dims3) {
        let mut cur = x;
        let mut d = dims;
        for i in 0..2 {
            let cout = tape.value(leaves[self.conv_w[i]]).rows;
            let zero_b = tape.leaf(Tensor::zeros(1, cout));
            let stride = if i == 0 { self.stride } else { 1 };
            let (y, nd) = nn::conv3d(tape, cur, leaves[self.conv_w[i]], zero_b, d, 3, stride, 1);
            let normed = nn::instance_norm(tape, y, leaves[self.gamma[i]], leaves[self.beta[i]]);
            cur = tape.unary(normed, Unary::Relu);
            d = nd;
        }
        (cur, d)
    }
}

/// Transposed-conv upsample, skip concatenation, then a stride-1 conv
/// stage.
#[derive(Debug, Clone)]
struct DecoderBlock {
    up_w: ParamId,
    up_b: ParamId,
    convs: ConvStage,
    up_k: usize,
}

impl DecoderBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        up_k: usize,
    ) -> Self {
        let kk = up_k * up_k * up_k;
        let up_w = store.register(&format!("{prefix}.up.w"), init_he(rng, cin, kk * cout, cin));
        let up_b = store.register(&format!("{prefix}.up.b"), Tensor::zeros(1, cout));
        let convs = ConvStage::new(store, rng, prefix, 2 * cout, cout, 1);
        DecoderBlock { up_w, up_b, convs, up_k }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[Vid],
        x: Vid,
        dims: Dims3,
        skip: Vid,
    ) -> (Vid, Dims3) {
        let (up, ud) =
            nn::conv_transpose3d(tape, x, leaves[self.up_w], leaves[self.up_b], dims, self.up_k);
        let cat = tape.concat_cols(up, skip);
        self.convs.forward(tape, leaves, cat, ud)
    }
}

pub struct UNet3d {
    pub cfg: NetConfig,
    enc: Vec<ConvStage>,
    /// dec[j] produces stage-j resolution; used in descending j order.
    dec: Vec<DecoderBlock>,
    head_w: ParamId,
    head_b: ParamId,
    pub asm1: Option<AsmBlock>,
    pub asm2: Option<AsmBlock>,
}

impl UNet3d {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_stages;
        let mut enc = Vec::with_capacity(n);
        for j in 0..n {
            let cin = if j == 0 { IN_CHANNELS } else { cfg.channels[j - 1] };
            enc.push(ConvStage::new(
                store,
                rng,
                &format!("enc{j}"),
                cin,
                cfg.channels[j],
                cfg.strides[j],
            ));
        }
        let asm1 = if cfg.asm_sites.after_encoder_1 {
            Some(AsmBlock::new(store, rng, "asm1", cfg.channels[0], cfg.asm.clone())?)
        } else {
            None
        };
        let mut dec = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            dec.push(DecoderBlock::new(
                store,
                rng,
                &format!("dec{j}"),
                cfg.channels[j + 1],
                cfg.channels[j],
                cfg.strides[j + 1],
            ));
        }
        let asm2 = if cfg.asm_sites.before_last_decoder {
            Some(AsmBlock::new(store, rng, "asm2", cfg.channels[1], cfg.asm.clone())?)
        } else {
            None
        };
        let head_w = store.register(
            "head.w",
            init_he(rng, cfg.n_classes, cfg.channels[0], cfg.channels[0]),
        );
        let head_b = store.register("head.b", Tensor::zeros(1, cfg.n_classes));
        Ok(UNet3d { cfg, enc, dec, head_w, head_b, asm1, asm2 })
    }

    /// (voxels, 1) intensity column -> (voxels, C) logits at the same
    /// resolution.
    pub fn forward(&self, tape: &mut Tape, leaves: &[Vid], x: Vid, patch: Dims3) -> Result<Vid> {
        self.cfg.trace_shapes(patch)?;
        {
            let xv = tape.value(x);
            assert_eq!(xv.rows, patch.count(), "unet: rows != voxel count");
            assert_eq!(xv.cols, IN_CHANNELS, "unet: input channels");
        }
        let n = self.cfg.n_stages;
        let mut feats: Vec<(Vid, Dims3)> = Vec::with_capacity(n);
        let mut cur = x;
        let mut dims = patch;
        for j in 0..n {
            let (y, nd) = self.enc[j].forward(tape, leaves, cur, dims);
            cur = y;
            dims = nd;
            if j == 0 {
                if let Some(asm) = &self.asm1 {
                    cur = asm.forward(tape, leaves, cur, dims)?;
                }
            }
            feats.push((cur, dims));
        }
        let (mut y, mut ydims) = feats[n - 1];
        for j in (0..n - 1).rev() {
            if j == 0 {
                if let Some(asm) = &self.asm2 {
                    y = asm.forward(tape, leaves, y, ydims)?;
                }
            }
            let (ny, nd) = self.dec[j].forward(tape, leaves, y, ydims, feats[j].0);
            y = ny;
            ydims = nd;
        }
        assert_eq!(ydims.count(), patch.count(), "decoder must restore input resolution");
        let head_bv = leaves[self.head_b];
        let (logits, _) = nn::conv3d(tape, y, leaves[self.head_w], head_bv, ydims, 1, 1, 0);
        Ok(logits)
    }
}
