//! Scan orders: flattening feature maps to token sequences, the three fixed
//! raster orders, and score-guided reordering with exact inversion.
//!
//! Convention: `forward[i]` is the source index of output position i, so
//! applying a permutation computes `out[i] = in[forward[i]]`. Sorting is
//! treated as non-differentiable with respect to the score; the gradient of
//! a reorder is the inverse permutation applied to the output gradient
//! (see `gather_backward`).

use crate::error::{Error, Result};
use crate::tape::Tensor;
use crate::volume::Dims3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Vec<usize>,
}

impl Permutation {
    pub fn identity(s: usize) -> Self {
        Permutation { forward: (0..s).collect() }
    }

    pub fn reverse(s: usize) -> Self {
        Permutation { forward: (0..s).rev().collect() }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// True iff `forward` is a bijection on [0, len).
    pub fn is_bijection(&self) -> bool {
        let s = self.forward.len();
        let mut seen = vec![false; s];
        for &p in &self.forward {
            if p >= s || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.forward.len()];
        for (i, &p) in self.forward.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { forward: inv }
    }

    /// Apply to a token matrix: out[i] = tokens[forward[i]].
    pub fn apply(&self, tokens: &Tensor) -> Tensor {
        assert_eq!(tokens.rows, self.len(), "permutation length mismatch");
        let c = tokens.cols;
        let mut out = Tensor::zeros(tokens.rows, c);
        for (i, &src) in self.forward.iter().enumerate() {
            out.data[i * c..(i + 1) * c].copy_from_slice(tokens.row(src));
        }
        out
    }
}

/// Stage-level feature map: one row of `tokens` per voxel in canonical
/// order (w fastest, then h, then d), channels contiguous per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dims: Dims3,
    pub tokens: Tensor,
}

impl FeatureMap {
    pub fn new(dims: Dims3, tokens: Tensor) -> Result<Self> {
        if tokens.rows != dims.count() {
            return Err(Error::invalid(format!(
                "feature map rows {} != voxel count {}",
                tokens.rows,
                dims.count()
            )));
        }
        Ok(FeatureMap { dims, tokens })
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols
    }
}

/// A token sequence together with the permutation that produced it from
/// canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence {
    pub dims: Dims3,
    pub tokens: Tensor,
    pub perm: Permutation,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }
}

/// Flatten to canonical order; the identity permutation records that no
/// reordering has happened. The in-memory layout already matches, so this
/// is a move plus bookkeeping.
pub fn flatten(fm: FeatureMap) -> ScanSequence {
    let s = fm.dims.count();
    ScanSequence { dims: fm.dims, tokens: fm.tokens, perm: Permutation::identity(s) }
}

/// Inverse of `flatten`; the sequence must be in canonical order (undo any
/// reordering first).
pub fn unflatten(seq: ScanSequence) -> Result<FeatureMap> {
    if !seq.perm.is_identity() {
        return Err(Error::invalid("unflatten requires canonical order; undo reordering first"));
    }
    FeatureMap::new(seq.dims, seq.tokens)
}

/// The three fixed scan orders: A = canonical raster (w fastest), B =
/// reverse of A, C = axis-swapped raster (d fastest, then h, then w).
pub fn fixed_orders(dims: Dims3) -> [Permutation; 3] {
    let s = dims.count();
    let a = Permutation::identity(s);
    let b = Permutation::reverse(s);
    let (w, h, d) = (dims.w, dims.h, dims.d);
    let mut c = Vec::with_capacity(s);
    for j in 0..s {
        let z = j % d;
        let y = (j / d) % h;
        let x = j / (d * h);
        c.push((z * h + y) * w + x);
    }
    [a, b, Permutation { forward: c }]
}

/// Ascending sort order of positions by score; ties break by each
/// position's canonical index so results are deterministic even for
/// saturated scores. Errors on NaN.
pub fn score_sort_order(score: &[f64], canonical: &[usize]) -> Result<Vec<usize>> {
    assert_eq!(score.len(), canonical.len(), "score_sort_order length mismatch");
    if score.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in scan score"));
    }
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&i, &j| {
        score[i].partial_cmp(&score[j]).unwrap().then_with(|| canonical[i].cmp(&canonical[j]))
    });
    Ok(order)
}

/// Stable ascending sort of the sequence by `score` (one value per current
/// position). The recorded permutation maps all the way back to canonical
/// order.
pub fn order_by_score(seq: ScanSequence, score: &[f64]) -> Result<ScanSequence> {
    let s = seq.len();
    if score.len() != s {
        return Err(Error::invalid(format!("score length {} != sequence length {s}", score.len())));
    }
    let order = score_sort_order(score, &seq.perm.forward)?;
    let tokens = {
        let c = seq.tokens.cols;
        let mut out = Tensor::zeros(s, c);
        for (i, &src) in order.iter().enumerate() {
            out.data[i * c..(i + 1) * c].copy_from_slice(seq.tokens.row(src));
        }
        out
    };
    let forward = order.iter().map(|&i| seq.perm.forward[i]).collect();
    Ok(ScanSequence { dims: seq.dims, tokens, perm: Permutation { forward } })
}

/// Compose a further fixed permutation onto the sequence: position i of the
/// result holds the token at current position `perm.forward[i]`.
pub fn apply_permutation(seq: ScanSequence, perm: &Permutation) -> Result<ScanSequence> {
    if perm.len() != seq.len() {
        return Err(Error::invalid("permutation length mismatch"));
    }
    let tokens = perm.apply(&seq.tokens);
    let forward = perm.forward.iter().map(|&i| seq.perm.forward[i]).collect();
    Ok(ScanSequence { dims: seq.dims, tokens, perm: Permutation { forward } })
}

/// Restore canonical order by applying the inverse permutation.
pub fn undo_reorder(seq: ScanSequence) -> ScanSequence {
    let s = seq.len();
    let c = seq.tokens.cols;
    let mut out = Tensor::zeros(s, c);
    for (i, &dst) in seq.perm.forward.iter().enumerate() {
        out.data[dst * c..(dst + 1) * c].copy_from_slice(seq.tokens.row(i));
    }
    ScanSequence { dims: seq.dims, tokens: out, perm: Permutation::identity(s) }
}

/// Gradient contract of a reorder: scatter the output gradient back through
/// the permutation (grad_in[forward[i]] = grad_out[i]). Sorting itself is
/// piecewise constant in the score, so nothing flows to the score here.
pub fn gather_backward(grad_out: &Tensor, perm: &Permutation) -> Tensor {
    assert_eq!(grad_out.rows, perm.len(), "gather_backward length mismatch");
    let c = grad_out.cols;
    let mut grad_in = Tensor::zeros(grad_out.rows, c);
    for (i, &src) in perm.forward.iter().enumerate() {
        for j in 0..c {
            grad_in.data[src * c + j] += grad_out.data[i * c + j];
        }
    }
    grad_in
}
