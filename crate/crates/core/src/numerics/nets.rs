//! Small network building blocks on top of the tape: MLPs and a GRU cell.
//!
//! Blocks own no data; they hold the group names they registered in a
//! [`ParamStore`] and know how to wire themselves into a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::store::ParamStore;
use crate::Result;

/// Feed-forward net with ELU hidden activations and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    /// Layer sizes, input first.
    sizes: Vec<usize>,
}

impl Mlp {
    /// Register parameters for layer sizes `[in, h1, ..., out]` under
    /// `{prefix}.l{i}.w` / `{prefix}.l{i}.b`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Mlp> {
        assert!(sizes.len() >= 2, "mlp needs at least in/out sizes");
        for i in 0..sizes.len() - 1 {
            store.register_matrix(&format!("{prefix}.l{i}.w"), sizes[i + 1], sizes[i], rng)?;
            store.register_zeros(&format!("{prefix}.l{i}.b"), sizes[i + 1])?;
        }
        Ok(Mlp {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
        })
    }

    /// Reattach to groups previously registered under `prefix`.
    pub fn attach(prefix: &str, sizes: &[usize]) -> Mlp {
        Mlp {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Forward pass: batch x in -> batch x out.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for i in 0..self.sizes.len() - 1 {
            let w = g.param_matrix(
                store,
                &format!("{}.l{i}.w", self.prefix),
                self.sizes[i + 1],
                self.sizes[i],
            );
            let b = g.param(store, &format!("{}.l{i}.b", self.prefix));
            h = g.affine(h, w, b);
            if i + 1 < self.sizes.len() - 1 {
                h = g.elu(h);
            }
        }
        h
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    /// Register the three gate affines (`zg`, `rg`, `ng`) over `[x, h]`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GruCell> {
        for gate in ["zg", "rg", "ng"] {
            store.register_matrix(&format!("{prefix}.{gate}.w"), hidden, in_dim + hidden, rng)?;
            store.register_zeros(&format!("{prefix}.{gate}.b"), hidden)?;
        }
        Ok(GruCell {
            prefix: prefix.to_string(),
            in_dim,
            hidden,
        })
    }

    pub fn attach(prefix: &str, in_dim: usize, hidden: usize) -> GruCell {
        GruCell {
            prefix: prefix.to_string(),
            in_dim,
            hidden,
        }
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> NodeId {
        let w = g.param_matrix(
            store,
            &format!("{}.{name}.w", self.prefix),
            self.hidden,
            self.in_dim + self.hidden,
        );
        let b = g.param(store, &format!("{}.{name}.b", self.prefix));
        g.affine(x, w, b)
    }

    /// One step: (batch x in, batch x hidden) -> batch x hidden.
    ///
    /// z = sigmoid(Wz [x,h]), r = sigmoid(Wr [x,h]),
    /// n = tanh(Wn [x, r*h]), h' = (1-z)*h + z*n.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> NodeId {
        let xh = g.concat(&[x, h]);
        let z = self.gate(g, store, "zg", xh);
        let z = g.sigmoid(z);
        let r = self.gate(g, store, "rg", xh);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let xrh = g.concat(&[x, rh]);
        let n = self.gate(g, store, "ng", xrh);
        let n = g.tanh(n);
        // h' = h + z*(n - h)
        let d = g.sub(n, h);
        let zd = g.mul(z, d);
        g.add(h, zd)
    }
}

/// Build a graph with `build`, read the loss, and return its gradients.
pub fn forward_backward<F>(store: &ParamStore, build: F) -> Result<(f64, crate::numerics::graph::Grads)>
where
    F: FnOnce(&mut Graph, &ParamStore) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let value = g.scalar(loss)?;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Compare analytic gradients against central finite differences at step
/// `eps`.
///
/// Returns the largest elementwise error, normalized by
/// `max(|analytic|, |numeric|, 1e-8)`. The builder must be deterministic:
/// it is re-run twice per parameter entry. Networks containing the
/// straight-through sampler report large errors here by design — the
/// estimator is intentionally biased — so exclude them from pass/fail
/// bounds.
pub fn check_gradients<F>(store: &mut ParamStore, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (_, grads) = forward_backward(store, &build)?;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store
        .iter()
        .filter(|(_, g)| g.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = store.group(&name).unwrap().values.len();
        for i in 0..n {
            let orig = store.group(&name).unwrap().values[i];
            store.group_mut(&name).unwrap().values[i] = orig + eps;
            let (up, _) = {
                let mut g = Graph::new();
                let loss = build(&mut g, store);
                (g.scalar(loss)?, ())
            };
            store.group_mut(&name).unwrap().values[i] = orig - eps;
            let down = {
                let mut g = Graph::new();
                let loss = build(&mut g, store);
                g.scalar(loss)?
            };
            store.group_mut(&name).unwrap().values[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(&name).map(|g| g[i]).unwrap_or(0.0);
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
