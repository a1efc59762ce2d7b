//! Parameter storage, layers and the Adam optimizer used by the policy
//! networks.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Graph, Var};

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    /// Registers every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.leaf(v.clone())).collect()
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_frozen(&self, g: &Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.constant(v.clone())).collect()
    }

    pub fn grads(&self, bound: &[Var], grads: &Gradients) -> Vec<Array2<f64>> {
        bound
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
            .collect()
    }

    /// Flattened view of all parameters, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[at];
                at += 1;
            }
        }
    }
}

/// Running statistics of the batch-normalization layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub mean: Vec<Array1<f64>>,
    pub var: Vec<Array1<f64>>,
}

impl Buffers {
    fn add(&mut self, dim: usize) -> usize {
        self.mean.push(Array1::zeros(dim));
        self.var.push(Array1::ones(dim));
        self.mean.len() - 1
    }
}

/// Per-row random streams. Row `i` of a batch draws all of its noise from
/// stream `i`, so a window's noise does not depend on its batch position.
pub struct RowNoise {
    streams: Vec<ChaCha8Rng>,
}

impl RowNoise {
    pub fn new(streams: Vec<ChaCha8Rng>) -> Self {
        Self { streams }
    }

    pub fn from_keys(seed: u64, keys: &[u64]) -> Self {
        Self::new(keys.iter().map(|&k| ChaCha8Rng::seed_from_u64(mix_seed(seed, k))).collect())
    }

    pub fn rows(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&mut self, row: usize) -> &mut ChaCha8Rng {
        &mut self.streams[row]
    }

    pub fn normal(&mut self, cols: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.streams.len(), cols));
        for (mut row, rng) in out.rows_mut().into_iter().zip(&mut self.streams) {
            row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        }
        out
    }

    pub fn uniform(&mut self, cols: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.streams.len(), cols));
        for (mut row, rng) in out.rows_mut().into_iter().zip(&mut self.streams) {
            row.iter_mut().for_each(|x| *x = rng.gen::<f64>());
        }
        out
    }
}

/// SplitMix64 finaliser over `seed ^ key`, used to derive independent stream
/// seeds.
pub fn mix_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward-pass context: the graph, bound parameters, mode and noise.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub p: &'a [Var],
    pub train: bool,
    pub dropout: f64,
    pub buffers: &'a mut Buffers,
    pub noise: &'a mut RowNoise,
}

impl Ctx<'_> {
    pub fn param(&self, id: ParamId) -> Var {
        self.p[id]
    }
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, input, output, bound));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, output, bound));
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let y = cx.g.matmul(x, cx.param(self.weight));
        cx.g.add_row(y, cx.param(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, buffers: &mut Buffers, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        let buffer = buffers.add(dim);
        Self { gamma, beta, buffer, momentum: 0.1, eps: 1e-5 }
    }

    /// Batch statistics in training mode (updating the running estimates),
    /// running statistics otherwise.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let g = cx.g;
        let normalized = if cx.train && g.shape(x).0 > 1 {
            let (n, mean, var) = g.batch_normalize(x, self.eps);
            let rows = g.shape(x).0 as f64;
            let unbiased = var * (rows / (rows - 1.0));
            let m = self.momentum;
            let rm = &mut cx.buffers.mean[self.buffer];
            *rm = &*rm * (1.0 - m) + &(mean * m);
            let rv = &mut cx.buffers.var[self.buffer];
            *rv = &*rv * (1.0 - m) + &(unbiased * m);
            n
        } else {
            let mean = &cx.buffers.mean[self.buffer];
            let inv = cx.buffers.var[self.buffer].mapv(|v| 1.0 / (v + self.eps).sqrt());
            let shift = g.constant((-(mean * &inv)).insert_axis(ndarray::Axis(0)));
            let scale = g.constant(inv.insert_axis(ndarray::Axis(0)));
            g.add_row(g.mul_row(x, scale), shift)
        };
        let y = g.mul_row(normalized, cx.param(self.gamma));
        g.add_row(y, cx.param(self.beta))
    }
}

/// Hidden layer of the two-layer networks: linear map, optional batch
/// normalization, ReLU and dropout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

impl HiddenLayer {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Buffers,
        name: &str,
        input: usize,
        width: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let linear = Linear::new(store, &format!("{name}.fc"), input, width, rng);
        let norm = batch_norm.then(|| BatchNorm::new(store, buffers, &format!("{name}.bn"), width));
        Self { linear, norm }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let mut h = self.linear.forward(cx, x);
        if let Some(bn) = &self.norm {
            h = bn.forward(cx, h);
        }
        h = cx.g.relu(h);
        if cx.train && cx.dropout > 0.0 {
            let keep = 1.0 - cx.dropout;
            let cols = cx.g.shape(h).1;
            let mask = cx.noise.uniform(cols).mapv(|u| if u < keep { 1.0 / keep } else { 0.0 });
            h = cx.g.mul(h, cx.g.constant(mask));
        }
        h
    }
}

/// Diagonal Gaussian parameters as graph nodes (`B×d` each).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub std: Var,
}

/// Two-layer network with a Gaussian output: `std = softplus(·)·scale + floor`
/// and `mean = (·)·scale + offset`, with optional fixed output scaling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianMlp {
    pub hidden: HiddenLayer,
    pub mean: Linear,
    pub std: Linear,
    pub floor: f64,
}

impl GaussianMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Buffers,
        name: &str,
        input: usize,
        width: usize,
        output: usize,
        batch_norm: bool,
        floor: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = HiddenLayer::new(store, buffers, name, input, width, batch_norm, rng);
        let mean = Linear::new(store, &format!("{name}.mean"), width, output, rng);
        let std = Linear::new(store, &format!("{name}.std"), width, output, rng);
        Self { hidden, mean, std, floor }
    }

    /// Returns mean and standard deviation; `scale`/`offset` (1×d) map the
    /// network's standardised output back to physical units.
    pub fn forward(&self, cx: &mut Ctx, x: Var, scale: Option<(Var, Var)>) -> GaussianVars {
        let h = self.hidden.forward(cx, x);
        let g = cx.g;
        let mut mean = self.mean.forward(cx, h);
        let mut std = g.softplus(self.std.forward(cx, h));
        if let Some((s, offset)) = scale {
            mean = g.add_row(g.mul_row(mean, s), offset);
            std = g.mul_row(std, s);
        }
        GaussianVars { mean, std: g.add_scalar(std, self.floor) }
    }
}

/// Two-layer network producing unnormalised logits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogitMlp {
    pub hidden: HiddenLayer,
    pub out: Linear,
}

impl LogitMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Buffers,
        name: &str,
        input: usize,
        width: usize,
        output: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = HiddenLayer::new(store, buffers, name, input, width, batch_norm, rng);
        let out = Linear::new(store, &format!("{name}.out"), width, output, rng);
        Self { hidden, out }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let h = self.hidden.forward(cx, x);
        self.out.forward(cx, h)
    }
}

/// One gated-recurrent-unit layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruLayer {
    pub input_map: Linear,
    pub hidden_map: Linear,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input_map = Linear::new(store, &format!("{name}.ih"), input, 3 * hidden, rng);
        let hidden_map = Linear::new(store, &format!("{name}.hh"), hidden, 3 * hidden, rng);
        Self { input_map, hidden_map, hidden }
    }

    /// `r, z` gates, candidate `n = tanh(W_in x + r ⊙ (W_hn h))`,
    /// `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn forward(&self, cx: &Ctx, x: Var, h: Var) -> Var {
        let g = cx.g;
        let n = self.hidden;
        let gi = self.input_map.forward(cx, x);
        let gh = self.hidden_map.forward(cx, h);
        let r = g.sigmoid(g.add(g.slice_cols(gi, 0, n), g.slice_cols(gh, 0, n)));
        let z = g.sigmoid(g.add(g.slice_cols(gi, n, n), g.slice_cols(gh, n, n)));
        let cand = g.tanh(g.add(g.slice_cols(gi, 2 * n, n), g.mul(r, g.slice_cols(gh, 2 * n, n))));
        let keep_new = g.add_scalar(g.neg(z), 1.0);
        g.add(g.mul(keep_new, cand), g.mul(z, h))
    }
}

/// Stacked GRU; the state is one `B×hidden` node per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth)
            .map(|l| GruLayer::new(store, &format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, cx: &Ctx, x: Var, state: &[Var]) -> Vec<Var> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(state) {
            let out = layer.forward(cx, input, h);
            next.push(out);
            input = out;
        }
        next
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<_> = store.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in store.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * k));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ctx_parts() -> (Buffers, RowNoise) {
        (Buffers::default(), RowNoise::from_keys(1, &[0, 1, 2]))
    }

    #[test]
    fn gru_saturation_keeps_state_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let gru = Gru::new(&mut store, "gru", 2, 4, 2, &mut rng);
        let (mut buffers, mut noise) = ctx_parts();
        let g = Graph::new();
        let p = store.bind(&g);
        let cx = Ctx { g: &g, p: &p, train: false, dropout: 0.0, buffers: &mut buffers, noise: &mut noise };
        let x = g.constant(Array2::from_elem((3, 2), 50.0));
        let h0 = vec![g.constant(Array2::from_elem((3, 4), 0.9)); 2];
        let h1 = gru.forward(&cx, x, &h0);
        for h in h1 {
            assert!(g.value(h).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut store = ParamStore::default();
        let mut buffers = Buffers::default();
        let bn = BatchNorm::new(&mut store, &mut buffers, "bn", 2);
        buffers.mean[0] = array![1.0, -1.0];
        buffers.var[0] = array![4.0, 1.0];
        let mut noise = RowNoise::from_keys(0, &[0]);
        let g = Graph::new();
        let p = store.bind(&g);
        let mut cx = Ctx { g: &g, p: &p, train: false, dropout: 0.0, buffers: &mut buffers, noise: &mut noise };
        let x = g.constant(array![[3.0, 0.0]]);
        let y = g.value(bn.forward(&mut cx, x));
        assert!((y[[0, 0]] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((y[[0, 1]] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::default();
        store.add("w", array![[1.0, -1.0]]);
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store, &[array![[2.0, -3.0]]]);
        let w = store.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-9);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = vec![array![[3.0, 4.0]]];
        let before = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads[0][[0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn row_noise_is_keyed_per_row() {
        let a = RowNoise::from_keys(9, &[5, 6]).normal(3);
        let b = RowNoise::from_keys(9, &[6, 5]).normal(3);
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }
}
