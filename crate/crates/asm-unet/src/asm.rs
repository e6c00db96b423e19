//! Adaptive scanning block: learn a per-voxel scan score, sort the
//! flattened volume by it, run Mamba stacks over the sorted sequence,
//! restore the original order, and average across branches.
//!
//! Two score sources per branch. The group score comes from a short
//! learnable vector stretched to the sequence length. The individual
//! score runs the tokens through three fixed scan orders and mixes the
//! results per position. Their sum is the adaptive score. Sorting is
//! treated as non-differentiable; score gradients flow only through the
//! score value appended to the tokens as an extra channel.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{init_normal, ParamId, ParamStore};
use crate::scan_order::{fixed_orders, score_sort_order, Permutation};
use crate::ssm::MambaStack;
use crate::tape::{Tape, Tensor, Unary, Vid};
use crate::volume::Dims3;

/// Which score sources feed the adaptive score. `None` keeps the score
/// channel in place but pins it to zero, so the sort degenerates to the
/// canonical order and the same code path realizes a fixed-scan pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Both,
    GroupOnly,
    IndividualOnly,
    None,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ScoreMode::Both),
            "group_only" => Ok(ScoreMode::GroupOnly),
            "individual_only" => Ok(ScoreMode::IndividualOnly),
            "none" => Ok(ScoreMode::None),
            other => Err(Error::Config(format!(
                "unknown score_mode '{other}' (expected both, group_only, individual_only, none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::Both => "both",
            ScoreMode::GroupOnly => "group_only",
            ScoreMode::IndividualOnly => "individual_only",
            ScoreMode::None => "none",
        }
    }
}

/// Block hyperparameters. `state_n`, `expand`, `conv_k` configure every
/// Mamba layer inside the block.
#[derive(Debug, Clone)]
pub struct AsmConfig {
    pub n_branches: usize,
    pub mamba_depth: usize,
    pub n_group: usize,
    pub score_mode: ScoreMode,
    pub residual: bool,
    pub state_n: usize,
    pub expand: usize,
    pub conv_k: usize,
}

impl Default for AsmConfig {
    fn default() -> Self {
        AsmConfig {
            n_branches: 3,
            mamba_depth: 2,
            n_group: 64,
            score_mode: ScoreMode::Both,
            residual: true,
            state_n: 8,
            expand: 2,
            conv_k: 4,
        }
    }
}

/// Learnable length-n_g vector; stretched to the sequence length by
/// endpoint-aligned linear interpolation, then squashed by sigmoid.
#[derive(Debug, Clone)]
pub struct GroupScanEmbedding {
    pub values: ParamId,
    pub n_group: usize,
}

impl GroupScanEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_group: usize,
    ) -> Result<Self> {
        if n_group < 2 {
            return Err(Error::Config(format!(
                "group embedding length {n_group} < 2; interpolation needs two endpoints"
            )));
        }
        let values =
            store.register(&format!("{prefix}.group_emb"), init_normal(rng, 1, n_group, 0.02));
        Ok(GroupScanEmbedding { values, n_group })
    }

    /// (s, 1) scores in (0, 1), differentiable in the embedding.
    pub fn score(&self, tape: &mut Tape, leaves: &[Vid], s: usize) -> Vid {
        let e = nn::interp_to_len(tape, leaves[self.values], s);
        tape.unary(e, Unary::Sigmoid)
    }
}

/// Per-position score from three fixed-order Mamba passes over the
/// tokens, un-permuted back to canonical order and mixed down to one
/// scalar per position.
#[derive(Debug, Clone)]
pub struct IndividualScoreGenerator {
    pub stacks: Vec<MambaStack>,
    /// (3*width, 1) mix weights plus (1, 1) bias.
    pub w_mix: ParamId,
    pub b_mix: ParamId,
    pub width: usize,
}

impl IndividualScoreGenerator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        cfg: &AsmConfig,
    ) -> Self {
        let stacks = (0..3)
            .map(|i| {
                MambaStack::new(
                    store,
                    rng,
                    &format!("{prefix}.order{i}"),
                    width,
                    1,
                    cfg.state_n,
                    cfg.expand,
                    cfg.conv_k,
                )
            })
            .collect();
        let w_mix = store.register(
            &format!("{prefix}.w_mix"),
            init_normal(rng, 3 * width, 1, (1.0 / (3.0 * width as f64)).sqrt()),
        );
        let b_mix = store.register(&format!("{prefix}.b_mix"), Tensor::zeros(1, 1));
        IndividualScoreGenerator { stacks, w_mix, b_mix, width }
    }

    /// Tokens permuted into fixed order `order_idx`, passed through that
    /// order's stack; output still in the permuted order.
    pub fn pathway_output(
        &self,
        tape: &mut Tape,
        leaves: &[Vid],
        tokens: Vid,
        dims: Dims3,
        order_idx: usize,
    ) -> Result<Vid> {
        let orders = fixed_orders(dims);
        let perm = &orders[order_idx];
        let xp = if perm.is_identity() {
            tokens
        } else {
            nn::gather_rows(tape, tokens, &perm.forward)
        };
        self.stacks[order_idx].forward(tape, leaves, xp)
    }

    /// (s, 1) scores in (0, 1), differentiable in tokens and generator
    /// parameters.
    pub fn score(&self, tape: &mut Tape, leaves: &[Vid], tokens: Vid, dims: Dims3) -> Result<Vid> {
        let orders = fixed_orders(dims);
        let mut cols = Vec::with_capacity(3);
        for (idx, perm) in orders.iter().enumerate() {
            let y = self.pathway_output(tape, leaves, tokens, dims, idx)?;
            let back = if perm.is_identity() {
                y
            } else {
                nn::gather_rows(tape, y, &perm.inverse().forward)
            };
            cols.push(back);
        }
        let cat01 = tape.concat_cols(cols[0], cols[1]);
        let cat = tape.concat_cols(cat01, cols[2]);
        let lin = tape.matmul(cat, leaves[self.w_mix]);
        let mixed = tape.add_bias(lin, leaves[self.b_mix]);
        Ok(tape.unary(mixed, Unary::Sigmoid))
    }
}

/// One adaptive-scan branch: score sources, a Mamba stack at width L+1
/// over the sorted sequence with the score channel appended, and a
/// projection back to width L.
#[derive(Debug, Clone)]
pub struct AsmBranch {
    pub group: GroupScanEmbedding,
    pub individual: IndividualScoreGenerator,
    pub stack: MambaStack,
    /// (width+1, width), no bias.
    pub proj: ParamId,
}

impl AsmBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        cfg: &AsmConfig,
    ) -> Result<Self> {
        let group = GroupScanEmbedding::new(store, rng, &format!("{prefix}.group"), cfg.n_group)?;
        let individual =
            IndividualScoreGenerator::new(store, rng, &format!("{prefix}.indiv"), width, cfg);
        let stack = MambaStack::new(
            store,
            rng,
            &format!("{prefix}.stack"),
            width + 1,
            cfg.mamba_depth,
            cfg.state_n,
            cfg.expand,
            cfg.conv_k,
        );
        let proj = store.register(
            &format!("{prefix}.proj"),
            init_normal(rng, width + 1, width, (1.0 / (width + 1) as f64).sqrt()),
        );
        Ok(AsmBranch { group, individual, stack, proj })
    }
}

/// Per-branch diagnostics from a traced forward: the sort permutation
/// (forward[i] = canonical index scanned at step i) and the adaptive
/// score in canonical order.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub perm: Permutation,
    pub score: Vec<f64>,
}

/// The full block. `score_channel_gain` multiplies only the appended
/// score channel (not the sort key); it stays 1.0 in normal operation
/// and exists so tests can sever the differentiable score pathway.
#[derive(Debug, Clone)]
pub struct AsmBlock {
    pub cfg: AsmConfig,
    pub width: usize,
    pub branches: Vec<AsmBranch>,
    pub score_channel_gain: f64,
}

impl AsmBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        cfg: AsmConfig,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("adaptive scan width must be >= 1".into()));
        }
        if cfg.mamba_depth == 0 {
            return Err(Error::Config("branch depth must be >= 1".into()));
        }
        let branches = (0..cfg.n_branches)
            .map(|b| AsmBranch::new(store, rng, &format!("{prefix}.branch{b}"), width, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(AsmBlock { cfg, width, branches, score_channel_gain: 1.0 })
    }

    /// Move the score landscape away from sort ties: spread each group
    /// embedding into a wide ramp and shrink the individual mix weights.
    /// Finite-difference probes are only meaningful where the sort
    /// permutation is locally constant, and a fresh random init leaves
    /// many near-tied scores on long sequences.
    pub fn separate_scores_for_gradcheck(&self, store: &mut ParamStore) {
        for branch in &self.branches {
            let v = store.value_mut(branch.group.values);
            let n = v.data.len();
            for (i, slot) in v.data.iter_mut().enumerate() {
                *slot = -1.5 + 3.0 * i as f64 / (n - 1) as f64;
            }
            for w in store.value_mut(branch.individual.w_mix).data.iter_mut() {
                *w *= 1e-3;
            }
        }
    }

    /// Adaptive score for one branch as an (s, 1) node, per score mode.
    fn branch_score(
        &self,
        tape: &mut Tape,
        leaves: &[Vid],
        branch: &AsmBranch,
        tokens: Vid,
        dims: Dims3,
    ) -> Result<Vid> {
        let s = dims.count();
        Ok(match self.cfg.score_mode {
            ScoreMode::Both => {
                let g = branch.group.score(tape, leaves, s);
                let i = branch.individual.score(tape, leaves, tokens, dims)?;
                tape.add(g, i)
            }
            ScoreMode::GroupOnly => branch.group.score(tape, leaves, s),
            ScoreMode::IndividualOnly => branch.individual.score(tape, leaves, tokens, dims)?,
            ScoreMode::None => tape.leaf(Tensor::zeros(s, 1)),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[Vid],
        tokens: Vid,
        dims: Dims3,
    ) -> Result<Vid> {
        self.forward_traced(tape, leaves, tokens, dims).map(|(v, _)| v)
    }

    /// Forward pass that also reports each branch's sort permutation and
    /// score values.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        leaves: &[Vid],
        tokens: Vid,
        dims: Dims3,
    ) -> Result<(Vid, Vec<BranchTrace>)> {
        let s = dims.count();
        {
            let tv = tape.value(tokens);
            assert_eq!(tv.rows, s, "asm_forward: token rows != voxel count");
            assert_eq!(tv.cols, self.width, "asm_forward: channel width mismatch");
        }
        if self.branches.is_empty() {
            return Ok((tokens, Vec::new()));
        }
        let canonical: Vec<usize> = (0..s).collect();
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut traces = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let score = self.branch_score(tape, leaves, branch, tokens, dims)?;
            let score_vals = tape.value(score).data.clone();
            let order = score_sort_order(&score_vals, &canonical)?;
            let chan = if self.score_channel_gain == 1.0 {
                score
            } else {
                tape.scale(score, self.score_channel_gain)
            };
            let cat = tape.concat_cols(tokens, chan);
            let sorted = nn::gather_rows(tape, cat, &order);
            let y = branch.stack.forward(tape, leaves, sorted)?;
            let proj = tape.matmul(y, leaves[branch.proj]);
            let inv = Permutation { forward: order.clone() }.inverse();
            let undone = nn::gather_rows(tape, proj, &inv.forward);
            outs.push(undone);
            traces.push(BranchTrace { perm: Permutation { forward: order }, score: score_vals });
        }
        let avg = nn::mean_of(tape, &outs);
        let out = if self.cfg.residual { tape.add(avg, tokens) } else { avg };
        Ok((out, traces))
    }
}
