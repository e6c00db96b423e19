//! Named, stably-keyed parameter storage.
//!
//! Every learnable tensor in a network is registered here at construction
//! time. The registration order is deterministic for a given config, which
//! is what makes the integer keys in checkpoints stable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Tensor, Vid};

/// Index of a parameter inside its store; doubles as the checkpoint key.
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    /// Insert every parameter as a leaf on `tape`; index i of the result
    /// corresponds to ParamId i.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Vid> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    /// Collect per-parameter gradients after a backward sweep (zeros where
    /// no gradient flowed).
    pub fn collect_grads(&self, leaves: &[Vid], grads: &[Option<Tensor>]) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(leaves)
            .map(|(e, &vid)| match &grads[vid] {
                Some(g) => g.clone(),
                None => Tensor::zeros(e.value.rows, e.value.cols),
            })
            .collect()
    }
}

// ---- initializers ----

pub fn init_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| normal_sample(rng) * std).collect();
    Tensor::new(rows, cols, data)
}

/// Kaiming-style scale for a fan-in of `fan`.
pub fn init_he(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan: usize) -> Tensor {
    init_normal(rng, rows, cols, (2.0 / fan as f64).sqrt())
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms in (0,1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_key_order() {
        let mut s = ParamStore::new();
        let a = s.register("a", Tensor::zeros(1, 2));
        let b = s.register("b", Tensor::zeros(2, 2));
        assert_eq!((a, b), (0, 1));
        assert_eq!(s.name(0), "a");
        assert_eq!(s.n_scalars(), 6);
    }

    #[test]
    fn normal_init_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = init_normal(&mut rng, 100, 100, 0.5);
        let mean: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        let var: f64 = t.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
    }
}
