//! Binary partial observation: per-agent state embedding, a dual-channel
//! projection, Gumbel-Softmax gating and counterfactual gate overrides.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tape::{Graph, Var};

/// Features per agent slot: position, velocity, acceleration.
pub const STATE_DIM: usize = 6;

/// `−log(−log u)` with `u` kept inside the open unit interval.
pub fn gumbel(u: f64) -> f64 {
    let u = u.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

/// Relaxed one-hot sample with explicit Gumbel noise `eps`.
pub fn gumbel_softmax_with_noise(logits: &[f64], eps: &[f64], tau: f64) -> Vec<f64> {
    let y: Vec<f64> = logits.iter().zip(eps).map(|(l, e)| (l + e) / tau).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Draws a relaxed categorical sample; `logits` are unnormalised log
/// probabilities.
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let eps: Vec<f64> = logits.iter().map(|_| gumbel(rng.gen())).collect();
    Ok(gumbel_softmax_with_noise(logits, &eps, tau))
}

/// Differentiable Gumbel-Softmax over the columns of `logits` (`B×n`) with
/// fixed noise `eps` of the same shape.
pub fn gumbel_softmax_graph(g: &Graph, logits: Var, eps: Array2<f64>, tau: f64) -> Var {
    let y = g.scale(g.add(logits, g.constant(eps)), 1.0 / tau);
    g.exp(g.log_softmax(y))
}

/// Relaxed samples during training, straight-through hard samples during
/// evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    Relaxed,
    Hard,
}

/// Replacement gate values for counterfactual rollouts.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationOverride {
    /// The same vector at every step, for every role.
    Fixed(Vec<f64>),
    /// One-hot at the agent with the highest gate probability at each step.
    OneHotMax,
    /// Per-step values indexed `[sample][step][role]`, as logged by a
    /// rollout.
    Recorded(Vec<Vec<Vec<Vec<f64>>>>),
}

impl ObservationOverride {
    /// Checks that every gate vector has `n_agents` entries in `[0, 1]`.
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let check = |b: &Vec<f64>| {
            if b.len() != n_agents {
                Err(Error::arg(format!("override of length {} for {n_agents} agents", b.len())))
            } else if b.iter().any(|x| !(0.0..=1.0).contains(x)) {
                Err(Error::arg("override entries must lie in [0, 1]"))
            } else {
                Ok(())
            }
        };
        match self {
            Self::Fixed(b) => check(b),
            Self::OneHotMax => Ok(()),
            Self::Recorded(log) => log.iter().flatten().flatten().try_for_each(check),
        }
    }
}

/// Embedding and dual-channel maps, one block per agent slot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservationLayer {
    pub embed_weight: ParamId,
    pub embed_bias: ParamId,
    pub dual_weight: ParamId,
    pub dual_bias: ParamId,
    pub n_agents: usize,
    pub embed_dim: usize,
    pub temperature: f64,
}

/// Output of one gating step.
pub struct GateOutput {
    /// Gated observation `o`, `B × (K·d_e)`.
    pub observation: Var,
    /// Gate values `e`, `B × K`.
    pub gate: Var,
    /// Noise-free probability that channel 1 wins, `B × K`.
    pub probability: Array2<f64>,
}

impl ObservationLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_agents: usize,
        embed_dim: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (STATE_DIM as f64).sqrt();
        let mut init = |rows, cols| Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
        let embed_weight = store.add(format!("{name}.embed.w"), init(n_agents * STATE_DIM, embed_dim));
        let embed_bias = store.add(format!("{name}.embed.b"), init(1, n_agents * embed_dim));
        let dual_weight = store.add(format!("{name}.dual.w"), init(n_agents * STATE_DIM, 2));
        let dual_bias = store.add(format!("{name}.dual.b"), init(1, n_agents * 2));
        Self { embed_weight, embed_bias, dual_weight, dual_bias, n_agents, embed_dim, temperature }
    }

    pub fn output_dim(&self) -> usize {
        self.n_agents * self.embed_dim
    }

    /// Per-slot embeddings `f`, `B × (K·d_e)`.
    pub fn embed(&self, cx: &Ctx, state: Var) -> Var {
        let g = cx.g;
        let f = g.block_linear(state, cx.param(self.embed_weight), self.n_agents);
        g.add_row(f, cx.param(self.embed_bias))
    }

    /// Dual-channel logits `f′`, `B × 2K` with channels interleaved per slot.
    pub fn dual_channel(&self, cx: &Ctx, state: Var) -> Var {
        let g = cx.g;
        let f = g.block_linear(state, cx.param(self.dual_weight), self.n_agents);
        g.add_row(f, cx.param(self.dual_bias))
    }

    /// Channel-1 minus channel-2 logit per slot, `B × K`.
    fn channel_difference(&self, cx: &Ctx, state: Var) -> Var {
        let g = cx.g;
        let k = self.n_agents;
        let diff = Array2::from_shape_fn((2 * k, 1), |(r, _)| if r % 2 == 0 { 1.0 } else { -1.0 });
        g.block_linear(self.dual_channel(cx, state), g.constant(diff), k)
    }

    /// Gate values for every slot. The 2-channel Gumbel-Softmax, read at
    /// channel 1, equals `σ((f′₁ + ε₁ − f′₂ − ε₂)/τ)`. In hard mode the
    /// forward value is the argmax indicator and the gradient is the relaxed
    /// one. `forced` replaces the gate values after the noise is drawn, so
    /// the random streams advance identically with or without an override.
    pub fn gate(&self, cx: &mut Ctx, state: Var, mode: GateMode, forced: Option<Array2<f64>>) -> (Var, Array2<f64>) {
        let g = cx.g;
        let k = self.n_agents;
        let diff = self.channel_difference(cx, state);
        let u1 = cx.noise.uniform(k);
        let u2 = cx.noise.uniform(k);
        let eps = &u1.mapv(gumbel) - &u2.mapv(gumbel);
        let tau = self.temperature;
        let probability = g.value(diff).mapv(|d| 1.0 / (1.0 + (-d / tau).exp()));
        let noisy = g.add(diff, g.constant(eps));
        let relaxed = g.sigmoid(g.scale(noisy, 1.0 / tau));
        let gate = match (forced, mode) {
            (Some(b), _) => g.constant(b),
            (None, GateMode::Relaxed) => relaxed,
            (None, GateMode::Hard) => {
                let hard = g.value(noisy).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                g.pass_through(relaxed, hard)
            }
        };
        (gate, probability)
    }

    /// `o = [e₁·f₁, …, e_K·f_K]`.
    pub fn observe(&self, g: &Graph, gate: Var, embedded: Var) -> Var {
        let spread = g.constant(Array2::ones((self.n_agents, self.embed_dim)));
        g.mul(embedded, g.block_linear(gate, spread, self.n_agents))
    }

    pub fn forward(&self, cx: &mut Ctx, state: Var, mode: GateMode, forced: Option<Array2<f64>>) -> GateOutput {
        let (gate, probability) = self.gate(cx, state, mode, forced);
        let embedded = self.embed(cx, state);
        GateOutput { observation: self.observe(cx.g, gate, embedded), gate, probability }
    }
}

/// One-hot rows at the argmax of each row of `probability`, first index on
/// ties.
pub fn one_hot_max(probability: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probability.dim());
    for (i, row) in probability.rows().into_iter().enumerate() {
        let j = row.iter().enumerate().fold(0, |best, (j, &p)| if p > row[best] { j } else { best });
        out[[i, j]] = 1.0;
    }
    out
}

/// Empirical argmax frequencies of hard Gumbel samples.
pub fn gumbel_max_frequencies(logits: &[f64], samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..samples {
        let best = logits
            .iter()
            .map(|l| l + gumbel(rng.gen()))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
            .0;
        counts[best] += 1;
    }
    counts.into_iter().map(|c| c as f64 / samples as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Buffers, RowNoise};
    use ndarray::{array, s};

    fn layer(k: usize, d: usize) -> (ParamStore, ObservationLayer) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ObservationLayer::new(&mut store, "obs", k, d, 1.0, &mut rng);
        (store, layer)
    }

    fn run(
        store: &ParamStore,
        layer: &ObservationLayer,
        state: Array2<f64>,
        mode: GateMode,
        forced: Option<Array2<f64>>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let g = Graph::new();
        let p = store.bind(&g);
        let mut buffers = Buffers::default();
        let mut noise = RowNoise::from_keys(1, &(0..state.nrows() as u64).collect::<Vec<_>>());
        let mut cx = Ctx { g: &g, p: &p, train: false, dropout: 0.0, buffers: &mut buffers, noise: &mut noise };
        let s = g.constant(state);
        let out = layer.forward(&mut cx, s, mode, forced);
        let f = layer.embed(&cx, s);
        (g.value(out.observation), g.value(out.gate), g.value(f))
    }

    #[test]
    fn sample_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = gumbel_softmax_sample(&[0.3, -1.0, 2.0], 0.7, &mut rng).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gumbel_softmax_sample(&[0.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn low_temperature_is_one_hot() {
        let s = gumbel_softmax_with_noise(&[0.0, 0.5, 0.2], &[0.3, -0.1, 0.0], 1e-4);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!(s[0] < 1e-12 && s[2] < 1e-12);
    }

    #[test]
    fn graph_version_matches_plain() {
        let g = Graph::new();
        let logits = g.leaf(array![[0.2, -0.4]]);
        let out = g.value(gumbel_softmax_graph(&g, logits, array![[0.1, 0.5]], 0.5));
        let plain = gumbel_softmax_with_noise(&[0.2, -0.4], &[0.1, 0.5], 0.5);
        assert!((out[[0, 0]] - plain[0]).abs() < 1e-15);
        assert!((out[[0, 1]] - plain[1]).abs() < 1e-15);
    }

    #[test]
    fn gumbel_softmax_gradient_matches_differences() {
        let eps = array![[0.3, -0.7]];
        let weights = array![[1.5], [-0.5]];
        let f = |l: &Array2<f64>| {
            let g = Graph::new();
            let logits = g.leaf(l.clone());
            let y = gumbel_softmax_graph(&g, logits, eps.clone(), 0.8);
            let loss = g.sum(g.matmul(y, g.constant(weights.clone())));
            (g.scalar(loss), g.backward(loss).get(logits).unwrap().clone())
        };
        let base = array![[0.4, 0.1]];
        let (_, grad) = f(&base);
        for j in 0..2 {
            let h = 1e-6;
            let mut up = base.clone();
            up[[0, j]] += h;
            let mut dn = base.clone();
            dn[[0, j]] -= h;
            let numeric = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert!((numeric - grad[[0, j]]).abs() / grad[[0, j]].abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn hard_gates_are_binary() {
        let (store, layer) = layer(4, 3);
        let state = Array2::from_shape_fn((5, 4 * STATE_DIM), |(i, j)| ((i * 7 + j) as f64).sin());
        let (_, gate, _) = run(&store, &layer, state, GateMode::Hard, None);
        assert!(gate.iter().all(|&e| e == 0.0 || e == 1.0));
    }

    #[test]
    fn dominant_channel_saturates() {
        let (mut store, layer) = layer(2, 2);
        store.values[layer.dual_bias] = array![[40.0, -40.0, -40.0, 40.0]];
        store.values[layer.dual_weight].fill(0.0);
        let (_, gate, _) = run(&store, &layer, Array2::zeros((3, 12)), GateMode::Relaxed, None);
        for r in 0..3 {
            assert!(gate[[r, 0]] > 1.0 - 1e-9);
            assert!(gate[[r, 1]] < 1e-9);
        }
    }

    #[test]
    fn gate_is_local_to_its_slot() {
        let (store, layer) = layer(3, 2);
        let state = Array2::from_shape_fn((1, 18), |(_, j)| j as f64 * 0.1 - 0.5);
        let mut swapped = state.clone();
        let (a, b) = (state.slice(s![.., 6..12]).to_owned(), state.slice(s![.., 12..18]).to_owned());
        swapped.slice_mut(s![.., 6..12]).assign(&b);
        swapped.slice_mut(s![.., 12..18]).assign(&a);
        let (_, g1, _) = run(&store, &layer, state, GateMode::Relaxed, None);
        let (_, g2, _) = run(&store, &layer, swapped, GateMode::Relaxed, None);
        assert_eq!(g1[[0, 0]], g2[[0, 0]]);
    }

    #[test]
    fn observe_masks_blocks() {
        let (store, layer) = layer(3, 2);
        let state = Array2::from_shape_fn((2, 18), |(i, j)| (i + j) as f64 * 0.05);
        let (o, _, f) = run(&store, &layer, state.clone(), GateMode::Hard, Some(Array2::ones((2, 3))));
        assert_eq!(o, f);
        let (o, _, _) = run(&store, &layer, state.clone(), GateMode::Hard, Some(Array2::zeros((2, 3))));
        assert!(o.iter().all(|&x| x == 0.0));
        let (o, _, f) = run(&store, &layer, state, GateMode::Hard, Some(array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]));
        for r in 0..2 {
            for c in 0..6 {
                let expect = if (2..4).contains(&c) { f[[r, c]] } else { 0.0 };
                assert_eq!(o[[r, c]], expect);
            }
        }
    }

    #[test]
    fn override_validation() {
        assert!(ObservationOverride::Fixed(vec![1.0, 0.0]).validate(3).is_err());
        assert!(ObservationOverride::Fixed(vec![1.0, 0.0, 2.0]).validate(3).is_err());
        assert!(ObservationOverride::Fixed(vec![1.0, 0.0, 0.0]).validate(3).is_ok());
    }

    #[test]
    fn one_hot_max_picks_first_maximum() {
        let out = one_hot_max(&array![[0.2, 0.9, 0.9], [0.5, 0.1, 0.0]]);
        assert_eq!(out, array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
    }
}
