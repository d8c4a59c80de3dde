//! Named parameter groups with per-group Adam state and freeze flags.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::HgcpError;
use crate::numerics::graph::Grads;
use crate::Result;

/// One flat parameter vector plus its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub values: Vec<f64>,
    pub trainable: bool,
    /// First Adam moment.
    pub m: Vec<f64>,
    /// Second Adam moment.
    pub v: Vec<f64>,
    /// Number of Adam steps taken on this group.
    pub t: u64,
}

/// All learnable state of a model, keyed by group name. Iteration order is
/// the lexicographic order of names, which keeps serialization and update
/// sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: BTreeMap<String, ParamGroup>,
}

/// Adam hyperparameters. `lr` is the only field callers usually vary.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a group with explicit initial values. Fails on duplicates.
    pub fn register(&mut self, name: &str, values: Vec<f64>, trainable: bool) -> Result<()> {
        if self.groups.contains_key(name) {
            return Err(HgcpError::Config(format!("duplicate parameter group `{name}`")));
        }
        let n = values.len();
        self.groups.insert(
            name.to_string(),
            ParamGroup {
                values,
                trainable,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        );
        Ok(())
    }

    /// Add a trainable matrix group with scaled-uniform init,
    /// U(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    pub fn register_matrix(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        self.register(name, values, true)
    }

    /// Add a trainable group of zeros (the usual bias init).
    pub fn register_zeros(&mut self, name: &str, n: usize) -> Result<()> {
        self.register(name, vec![0.0; n], true)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamGroup)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.groups.values().map(|g| g.values.len()).sum()
    }

    /// Set the trainable flag on every group whose name starts with `prefix`.
    /// Returns how many groups matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, group) in self.groups.iter_mut() {
            if name.starts_with(prefix) {
                group.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// One Adam step. Only groups that are present in `grads` *and*
    /// trainable move; everything else is untouched bit for bit. Gradients
    /// for unknown or frozen groups are an error: the caller built a graph
    /// against a different store than it is updating.
    pub fn apply_update(&mut self, grads: &Grads, cfg: AdamConfig) -> Result<()> {
        for (name, g) in grads.0.iter() {
            let group = self
                .groups
                .get_mut(name)
                .ok_or_else(|| HgcpError::Config(format!("gradient for unknown group `{name}`")))?;
            if !group.trainable {
                return Err(HgcpError::Config(format!(
                    "gradient supplied for frozen group `{name}`"
                )));
            }
            if g.len() != group.values.len() {
                return Err(HgcpError::Shape(format!(
                    "gradient length {} != group `{name}` length {}",
                    g.len(),
                    group.values.len()
                )));
            }
            group.t += 1;
            let t = group.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..g.len() {
                group.m[i] = cfg.beta1 * group.m[i] + (1.0 - cfg.beta1) * g[i];
                group.v[i] = cfg.beta2 * group.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = group.m[i] / bc1;
                let vhat = group.v[i] / bc2;
                group.values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use rand::SeedableRng;

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::new();
        s.register("a", vec![0.0], true).unwrap();
        assert!(s.register("a", vec![1.0], true).is_err());
    }

    fn bowl_losses(lr: f64, steps: usize) -> Vec<f64> {
        // Minimize Σ (w - t)^2 from w = 0.
        let target = [3.0, -2.0, 0.5, 1.0];
        let mut store = ParamStore::new();
        store.register("w", vec![0.0; 4], true).unwrap();
        let cfg = AdamConfig::with_lr(lr);
        let mut losses = Vec::new();
        for _ in 0..steps {
            let mut g = Graph::new();
            let w = g.param(&store, "w");
            let t = g.constant(1, 4, target.to_vec());
            let d = g.sub(w, t);
            let sq = g.square(d);
            let loss = g.sum_all(sq);
            losses.push(g.scalar(loss).unwrap());
            let grads = g.backward(loss).unwrap();
            store.apply_update(&grads, cfg).unwrap();
        }
        losses
    }

    #[test]
    fn quadratic_bowl_descends_monotonically_after_warmup() {
        let losses = bowl_losses(1e-2, 200);
        for i in 11..losses.len() {
            assert!(
                losses[i] <= losses[i - 1] + 1e-12,
                "loss rose at step {i}: {} -> {}",
                losses[i - 1],
                losses[i]
            );
        }
        assert!(losses[199] < 0.5 * losses[0], "insufficient progress: {}", losses[199]);
    }

    #[test]
    fn quadratic_bowl_converges_given_enough_steps() {
        // Near the minimum the normalized update keeps jittering at the
        // scale of the step size, so only a loose floor is meaningful.
        let losses = bowl_losses(1e-2, 1500);
        assert!(*losses.last().unwrap() < 1e-2, "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn update_locality_frozen_groups_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.register_matrix("hot.w", 3, 3, &mut rng).unwrap();
        store.register_matrix("cold.w", 3, 3, &mut rng).unwrap();
        store.set_trainable_prefix("cold.", false);
        let before: Vec<f64> = store.group("cold.w").unwrap().values.clone();

        let cfg = AdamConfig::with_lr(0.01);
        for _ in 0..5 {
            let mut g = Graph::new();
            let hot = g.param(&store, "hot.w");
            let cold = g.param(&store, "cold.w");
            let s = g.add(hot, cold);
            let sq = g.square(s);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).unwrap();
            // Frozen group contributes to the loss but must receive no grad.
            assert!(grads.get("cold.w").is_none());
            store.apply_update(&grads, cfg).unwrap();
        }
        let after = &store.group("cold.w").unwrap().values;
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(store.group("cold.w").unwrap().t, 0);
    }

    #[test]
    fn gradient_for_frozen_group_is_an_error() {
        let mut store = ParamStore::new();
        store.register("w", vec![1.0], false).unwrap();
        let mut grads = Grads::default();
        grads.0.insert("w".into(), vec![1.0]);
        assert!(store.apply_update(&grads, AdamConfig::with_lr(0.1)).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, the very first Adam step is lr * sign(g)
        // (up to eps), independent of the gradient's magnitude.
        let mut store = ParamStore::new();
        store.register("w", vec![0.0], true).unwrap();
        let mut grads = Grads::default();
        grads.0.insert("w".into(), vec![123.0]);
        store.apply_update(&grads, AdamConfig::with_lr(0.01)).unwrap();
        let w = store.group("w").unwrap().values[0];
        assert!((w + 0.01).abs() < 1e-6, "w = {w}");
    }
}
