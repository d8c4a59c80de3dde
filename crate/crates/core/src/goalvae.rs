//! Categorical goal VAE: compresses deterministic latent states into K
//! one-hot categorical codes of C classes each, and decodes codes back
//! into goal vectors in the same latent space. The manager picks goals in
//! code space; the worker chases the decoded vector. Parameters live
//! under the group prefix `vae.`.

use rand_chacha::ChaCha8Rng;

use crate::error::HgcpError;
use crate::numerics::{AdamConfig, Graph, Mlp, NodeId, ParamStore};
use crate::worldmodel::ModelState;
use crate::Result;

/// Default number of categorical rows.
pub const GOAL_K: usize = 8;
/// Default number of classes per row.
pub const GOAL_C: usize = 16;
/// Default VAE learning rate.
pub const VAE_LR: f64 = 3e-3;
/// Fixed norm of each row of encoder logits. Bounding the scale keeps the
/// row softmax responsive for the straight-through gradient while still
/// allowing near-deterministic codes (max logit gap about `sqrt(2)` times
/// this value).
pub const LOGIT_NORM: f64 = 16.0;

/// A goal code: K rows of C classes, stored row-major as one-hot floats.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalCode {
    pub k: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl GoalCode {
    /// Build a code from one class index per row.
    pub fn from_classes(classes: &[usize], c: usize) -> Result<GoalCode> {
        let mut data = vec![0.0; classes.len() * c];
        for (row, &cls) in classes.iter().enumerate() {
            if cls >= c {
                return Err(HgcpError::Code(format!("class {cls} out of range 0..{c}")));
            }
            data[row * c + cls] = 1.0;
        }
        Ok(GoalCode { k: classes.len(), c, data })
    }

    /// Class index per row; errors if any row is not exactly one-hot.
    pub fn classes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok((0..self.k)
            .map(|r| {
                self.data[r * self.c..(r + 1) * self.c]
                    .iter()
                    .position(|v| *v == 1.0)
                    .unwrap()
            })
            .collect())
    }

    /// Check the one-hot invariant: entries in {0, 1}, each row sums to 1.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.k * self.c {
            return Err(HgcpError::Code(format!(
                "code has {} entries, wanted {}x{}",
                self.data.len(),
                self.k,
                self.c
            )));
        }
        for r in 0..self.k {
            let row = &self.data[r * self.c..(r + 1) * self.c];
            if row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(HgcpError::Code(format!("row {r} has entries outside {{0,1}}")));
            }
            let ones = row.iter().filter(|v| **v == 1.0).count();
            if ones != 1 {
                return Err(HgcpError::Code(format!("row {r} sums to {ones}, wanted exactly 1")));
            }
        }
        Ok(())
    }
}

/// Loss report for one VAE update; `total = recon + kl` with the KL
/// clamped at zero against float noise around the uniform point.
#[derive(Debug, Clone, Copy)]
pub struct VaeLosses {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// The goal VAE: encoder from h-space to K*C logits, decoder from codes
/// back to h-space.
pub struct GoalVae {
    pub h_dim: usize,
    pub k: usize,
    pub c: usize,
    enc: Mlp,
    dec: Mlp,
}

impl GoalVae {
    /// Encoder logits with each C-class row rescaled to `LOGIT_NORM`.
    /// The projection keeps gradients alive at any commitment level,
    /// where unnormalized logits would saturate and freeze the code
    /// assignment.
    fn logits_node(&self, g: &mut Graph, store: &ParamStore, x: crate::numerics::NodeId) -> crate::numerics::NodeId {
        let raw = self.enc.forward(g, store, x);
        let rows = g.rows(raw);
        let one = g.constant(rows, 1, vec![1.0; rows]);
        let mut blocks = Vec::with_capacity(self.k);
        for k in 0..self.k {
            let blk = g.slice_cols(raw, k * self.c, self.c);
            let sq = g.square(blk);
            let n2 = g.sum_cols(sq);
            let n2e = g.affine_scalar(n2, 1.0, 1e-12);
            let n = g.sqrt(n2e);
            let inv = g.div(one, n);
            let unit = g.mul_col_vec(blk, inv);
            blocks.push(g.scale(unit, LOGIT_NORM));
        }
        g.concat(&blocks)
    }

    pub fn register(
        store: &mut ParamStore,
        h_dim: usize,
        k: usize,
        c: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GoalVae> {
        let enc = Mlp::register(store, "vae.enc", &[h_dim, hidden, k * c], rng)?;
        let dec = Mlp::register(store, "vae.dec", &[k * c, hidden, h_dim], rng)?;
        Ok(GoalVae { h_dim, k, c, enc, dec })
    }

    /// Rebuild handles over parameters already in a store.
    pub fn attach(h_dim: usize, k: usize, c: usize, hidden: usize) -> GoalVae {
        GoalVae {
            h_dim,
            k,
            c,
            enc: Mlp::attach("vae.enc", &[h_dim, hidden, k * c]),
            dec: Mlp::attach("vae.dec", &[k * c, hidden, h_dim]),
        }
    }

    /// Encode a state's deterministic latent into a goal code. Greedy mode
    /// takes the per-row argmax (deterministic); otherwise rows are
    /// sampled from the per-row softmax. Also returns the raw logits.
    pub fn encode(
        &self,
        store: &ParamStore,
        state: &ModelState,
        greedy: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(GoalCode, Vec<f64>)> {
        if state.h.len() != self.h_dim {
            return Err(HgcpError::Shape(format!(
                "state h dim {} != vae h dim {}",
                state.h.len(),
                self.h_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(1, self.h_dim, state.h.clone());
        let logits = self.logits_node(&mut g, store, x);
        let code = g.one_hot_st(logits, self.c, greedy, rng);
        Ok((
            GoalCode { k: self.k, c: self.c, data: g.value(code).to_vec() },
            g.value(logits).to_vec(),
        ))
    }

    /// Decode a one-hot code into a goal vector in h-space. Malformed
    /// codes are rejected.
    pub fn decode(&self, store: &ParamStore, code: &GoalCode) -> Result<Vec<f64>> {
        code.validate()?;
        if code.k != self.k || code.c != self.c {
            return Err(HgcpError::Code(format!(
                "code shape {}x{} != vae shape {}x{}",
                code.k, code.c, self.k, self.c
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(1, self.k * self.c, code.data.clone());
        let goal = self.dec.forward(&mut g, store, x);
        Ok(g.value(goal).to_vec())
    }

    /// Decoder forward pass on an in-graph (b x K*C) code node, for use
    /// inside larger graphs (e.g. imagined manager decisions).
    pub fn decode_node(&self, g: &mut Graph, store: &ParamStore, code: NodeId) -> NodeId {
        self.dec.forward(g, store, code)
    }

    /// One update: reconstruct h through the straight-through code, plus
    /// categorical KL to the uniform prior. Touches `vae.` groups only.
    pub fn train_goalvae(
        &self,
        store: &mut ParamStore,
        states: &[ModelState],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<VaeLosses> {
        if states.is_empty() {
            return Err(HgcpError::EmptyBatch);
        }
        let b = states.len();
        let hs: Vec<f64> = states.iter().flat_map(|s| s.h.iter().copied()).collect();
        let mut g = Graph::new();
        let x = g.constant(b, self.h_dim, hs);
        let logits = self.logits_node(&mut g, store, x);
        let code = g.one_hot_st(logits, self.c, false, rng);
        let goal = self.dec.forward(&mut g, store, code);
        let diff = g.sub(goal, x);
        let diff2 = g.square(diff);
        let per_sample = g.sum_cols(diff2);
        let recon = g.mean_all(per_sample);

        // KL(q || uniform) per sample = K log C + sum over all K*C entries
        // of q log q; clamp the batch mean at zero so float noise at the
        // uniform point never reports a negative divergence.
        let p = g.softmax(logits, self.c);
        let logp = g.log_softmax(logits, self.c);
        let plogp = g.mul(p, logp);
        let row = g.sum_cols(plogp);
        let kl_row = g.affine_scalar(row, 1.0, self.k as f64 * libm::log(self.c as f64));
        let kl_mean = g.mean_all(kl_row);
        let zero = g.scalar_const(0.0);
        let kl = g.max(kl_mean, zero);
        let total = g.add(recon, kl);

        let recon_v = g.scalar(recon)?;
        let kl_v = g.scalar(kl)?;
        let total_v = g.scalar(total)?;
        let grads = g.backward(total)?;
        store.apply_update(&grads, AdamConfig::with_lr(lr))?;
        Ok(VaeLosses { recon: recon_v, kl: kl_v, total: total_v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state_with_h(h: Vec<f64>) -> ModelState {
        let z = vec![0.0; 4];
        ModelState { h, z: z.clone(), mean: z.clone(), logstd: z }
    }

    fn small_vae(store: &mut ParamStore, seed: u64) -> GoalVae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GoalVae::register(store, 12, 4, 6, 32, &mut rng).unwrap()
    }

    /// 32 fixed states drawn once from a seeded stream.
    fn fixed_states(n: usize, dim: usize, seed: u64) -> Vec<ModelState> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| state_with_h((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    /// 32 structured states: all sign combinations of five coordinates on
    /// a fixed background, the kind of factored variation a row-factored
    /// code represents naturally.
    fn grid_states() -> Vec<ModelState> {
        (0..32usize)
            .map(|i| {
                let mut h: Vec<f64> = (0..12).map(|d| 0.15 * libm::sin(1.7 * d as f64)).collect();
                for b in 0..5 {
                    h[b] = if (i >> b) & 1 == 1 { 0.8 } else { -0.8 };
                }
                state_with_h(h)
            })
            .collect()
    }

    /// Default-geometry VAE (K=8, C=16) on a small h space.
    fn default_vae(store: &mut ParamStore, seed: u64) -> GoalVae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GoalVae::register(store, 12, GOAL_K, GOAL_C, 64, &mut rng).unwrap()
    }

    #[test]
    fn sampled_codes_are_one_hot_and_shaped() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in fixed_states(16, 12, 2) {
            let (code, logits) = vae.encode(&store, &s, false, &mut rng).unwrap();
            assert_eq!(code.k, 4);
            assert_eq!(code.c, 6);
            assert_eq!(logits.len(), 24);
            code.validate().unwrap();
        }
    }

    #[test]
    fn greedy_encode_is_deterministic() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 2);
        let s = state_with_h((0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
        let (a, _) = vae.encode(&store, &s, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, _) = vae.encode(&store, &s, true, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_code_decodes_to_same_goal() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 3);
        let code = GoalCode::from_classes(&[0, 2, 5, 1], 6).unwrap();
        assert_eq!(vae.decode(&store, &code).unwrap(), vae.decode(&store, &code).unwrap());
    }

    #[test]
    fn malformed_codes_are_rejected() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 4);
        // Row with two ones.
        let mut bad = GoalCode::from_classes(&[0, 0, 0, 0], 6).unwrap();
        bad.data[1] = 1.0;
        assert!(matches!(vae.decode(&store, &bad), Err(HgcpError::Code(_))));
        // Row with a fractional entry.
        let mut soft = GoalCode::from_classes(&[0, 0, 0, 0], 6).unwrap();
        soft.data[0] = 0.5;
        assert!(matches!(vae.decode(&store, &soft), Err(HgcpError::Code(_))));
        // Wrong shape for this model.
        let narrow = GoalCode::from_classes(&[0, 1], 6).unwrap();
        assert!(matches!(vae.decode(&store, &narrow), Err(HgcpError::Code(_))));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            vae.train_goalvae(&mut store, &[], VAE_LR, &mut rng),
            Err(HgcpError::EmptyBatch)
        ));
    }

    #[test]
    fn kl_is_nonnegative_every_step_and_total_composes() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = fixed_states(16, 12, 8);
        for _ in 0..50 {
            let l = vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
            assert!(l.kl >= 0.0, "kl {}", l.kl);
            assert_eq!(l.total, l.recon + l.kl);
        }
    }

    #[test]
    fn overfit_32_states_reconstruction_drops_below_ten_percent() {
        let mut store = ParamStore::new();
        let vae = default_vae(&mut store, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let states = grid_states();
        let first = vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..1000 {
            last = vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        }
        assert!(
            last.recon < 0.1 * first.recon,
            "recon {} -> {}",
            first.recon,
            last.recon
        );
    }

    #[test]
    fn round_trip_after_overfit_is_close_in_relative_norm() {
        let mut store = ParamStore::new();
        let vae = default_vae(&mut store, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let states = grid_states();
        for _ in 0..6000 {
            vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        }
        let mut worst = 0.0f64;
        for s in &states {
            let (code, _) = vae.encode(&store, s, true, &mut rng).unwrap();
            let goal = vae.decode(&store, &code).unwrap();
            let err: f64 = goal
                .iter()
                .zip(s.h.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = s.h.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
        assert!(worst < 0.1, "worst relative round-trip error {worst}");
    }

    #[test]
    fn four_clusters_map_to_distinct_greedy_codes() {
        use rand::Rng;
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        // Four well-separated cluster centers, 8 noisy members each.
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..12).map(|d| if d % 4 == k { 3.0 } else { -3.0 }).collect())
            .collect();
        let states: Vec<ModelState> = centers
            .iter()
            .flat_map(|c| {
                let mut members = Vec::new();
                for _ in 0..8 {
                    members.push(state_with_h(
                        c.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect(),
                    ));
                }
                members
            })
            .collect();
        for _ in 0..3000 {
            vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        }
        let codes: Vec<Vec<usize>> = centers
            .iter()
            .map(|c| {
                let (code, _) = vae
                    .encode(&store, &state_with_h(c.clone()), true, &mut rng)
                    .unwrap();
                code.classes().unwrap()
            })
            .collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(codes[i], codes[j], "clusters {i} and {j} collide on {:?}", codes[i]);
            }
        }
    }

    #[test]
    fn single_row_flips_of_a_trained_code_decode_to_distinct_goals() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let states = fixed_states(32, 12, 19);
        for _ in 0..500 {
            vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        }
        let base = GoalCode::from_classes(&[0, 0, 0, 0], 6).unwrap();
        let base_goal = vae.decode(&store, &base).unwrap();
        for row in 0..4 {
            for cls in 1..6 {
                let mut classes = vec![0usize; 4];
                classes[row] = cls;
                let flipped = GoalCode::from_classes(&classes, 6).unwrap();
                let goal = vae.decode(&store, &flipped).unwrap();
                let dist: f64 = goal
                    .iter()
                    .zip(base_goal.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 1e-6, "flip row {row} class {cls} collides with base");
            }
        }
    }

    #[test]
    fn frozen_vae_stays_bit_identical_and_others_untouched() {
        let mut store = ParamStore::new();
        let vae = small_vae(&mut store, 20);
        store.register("wrk.pi.probe", vec![0.25, -0.75], true).unwrap();
        store.set_trainable_prefix("vae.", false);
        let before: Vec<(String, Vec<u64>)> = store
            .iter()
            .map(|(n, g)| (n.to_string(), g.values.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let states = fixed_states(8, 12, 22);
        vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        for (name, bits) in before {
            let now: Vec<u64> = store.group(&name).unwrap().values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, now, "{name} changed");
        }
        // Unfrozen, training must leave the unrelated group alone too.
        store.set_trainable_prefix("vae.", true);
        vae.train_goalvae(&mut store, &states, VAE_LR, &mut rng).unwrap();
        assert_eq!(store.group("wrk.pi.probe").unwrap().values, vec![0.25, -0.75]);
        assert_eq!(store.group("wrk.pi.probe").unwrap().t, 0);
    }

    #[test]
    fn default_shape_registers_in_h_space() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vae = GoalVae::register(&mut store, 128, GOAL_K, GOAL_C, 128, &mut rng).unwrap();
        assert_eq!(vae.k * vae.c, 128);
        assert!(store.names().all(|n| n.starts_with("vae.")));
        let s = state_with_h(vec![0.3; 128]);
        let (code, _) = vae.encode(&store, &s, true, &mut rng).unwrap();
        assert_eq!(code.k, GOAL_K);
        assert_eq!(code.c, GOAL_C);
        let goal = vae.decode(&store, &code).unwrap();
        assert_eq!(goal.len(), 128);
    }
}
