//! Per-role hierarchical policy: gated observation, macro-goal predictor,
//! variational recurrent core (or the deterministic-state Gaussian RNN
//! baseline), teacher-forced sequence objective and long-horizon rollout.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, ActionDist, ConstraintConfig, PenaltyInputs, PenaltyTerm};
use crate::error::{Error, Result};
use crate::macro_goal::{self, GridSpec, LabelerConfig, MacroGoalNet};
use crate::nn::{mix_seed, Buffers, Ctx, GaussianMlp, GaussianVars, Gru, ParamStore, RowNoise};
use crate::observation::{one_hot_max, GateMode, ObservationLayer, ObservationOverride, STATE_DIM};
use crate::tape::{Graph, Var};
use crate::trajectory::{AgentState, PlaySequence, Role, Vec2};

pub const MODEL_VERSION: u32 = 1;
/// Velocity (2) and acceleration (2).
pub const ACTION_DIM: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Vrnn,
    RnnGauss,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub macro_goals: bool,
    pub macro_rnn_hidden: usize,
    pub macro_rnn_layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub temperature: f64,
    pub std_floor: f64,
    /// Overrides the sport's court grid.
    pub grid: Option<GridSpec>,
    pub labeler: LabelerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Vrnn,
            embed_dim: 32,
            hidden: 64,
            latent: 64,
            rnn_hidden: 100,
            rnn_layers: 2,
            macro_goals: true,
            macro_rnn_hidden: 100,
            macro_rnn_layers: 2,
            dropout: 0.5,
            batch_norm: true,
            temperature: 1.0,
            std_floor: 1e-4,
            grid: None,
            labeler: LabelerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.hidden, self.rnn_hidden, self.rnn_layers];
        if dims.contains(&0) || (self.kind == ModelKind::Vrnn && self.latent == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.macro_goals && (self.macro_rnn_hidden == 0 || self.macro_rnn_layers == 0) {
            return Err(Error::Config("macro-goal layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.temperature > 0.0) || !(self.std_floor > 0.0) {
            return Err(Error::Config("temperature and std floor must be positive".into()));
        }
        Ok(())
    }
}

/// Affine normalisation of state features and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub state_mean: [f64; STATE_DIM],
    pub state_std: [f64; STATE_DIM],
    pub action_mean: [f64; ACTION_DIM],
    pub action_std: [f64; ACTION_DIM],
}

fn mean_std<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> ([f64; N], [f64; N]) {
    let mut n = 0.0;
    let mut sum = [0.0; N];
    let mut sq = [0.0; N];
    for r in rows {
        n += 1.0;
        for i in 0..N {
            sum[i] += r[i];
            sq[i] += r[i] * r[i];
        }
    }
    let mut mean = [0.0; N];
    let mut std = [1.0; N];
    if n > 0.0 {
        for i in 0..N {
            mean[i] = sum[i] / n;
            std[i] = (sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt().max(1e-3);
        }
    }
    (mean, std)
}

fn action_of(s: &AgentState) -> [f64; ACTION_DIM] {
    [s.velocity[0], s.velocity[1], s.acceleration[0], s.acceleration[1]]
}

impl Scaler {
    /// Pools state features over every agent and frame, and actions over
    /// every defender.
    pub fn fit(windows: &[PlaySequence]) -> Self {
        let (state_mean, state_std) = mean_std(windows.iter().flat_map(|w| w.frames.iter().flatten().map(|s| s.features())));
        let (action_mean, action_std) = mean_std(windows.iter().flat_map(|w| {
            let defenders = w.defenders();
            w.frames.iter().flat_map(move |f| defenders.iter().map(move |&k| action_of(&f[k])).collect::<Vec<_>>())
        }));
        Self { state_mean, state_std, action_mean, action_std }
    }

    pub fn identity() -> Self {
        Self {
            state_mean: [0.0; STATE_DIM],
            state_std: [1.0; STATE_DIM],
            action_mean: [0.0; ACTION_DIM],
            action_std: [1.0; ACTION_DIM],
        }
    }

    /// Normalised state row for one frame: `K·6` values.
    pub fn state_row(&self, frame: &[AgentState], out: &mut [f64]) {
        for (k, s) in frame.iter().enumerate() {
            for (i, x) in s.features().iter().enumerate() {
                out[k * STATE_DIM + i] = (x - self.state_mean[i]) / self.state_std[i];
            }
        }
    }

    pub fn action_row(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|i| (a[i] - self.action_mean[i]) / self.action_std[i])
    }
}

/// Sub-networks of one role model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Networks {
    pub observation: ObservationLayer,
    pub macro_goal: Option<MacroGoalNet>,
    pub prior: Option<GaussianMlp>,
    pub encoder: Option<GaussianMlp>,
    pub decoder: GaussianMlp,
    pub rnn: Gru,
}

/// Trained policy for one defender role.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyModel {
    pub version: u32,
    pub config: ModelConfig,
    /// Role index among the defenders.
    pub role: usize,
    /// Agent slot the role occupies in every sequence.
    pub slot: usize,
    pub n_agents: usize,
    pub dt: f64,
    pub grid: GridSpec,
    pub scaler: Scaler,
    pub params: ParamStore,
    pub buffers: Buffers,
    pub nets: Networks,
}

/// Teacher-forcing inputs for a batch of windows. Every per-frame array has
/// one row per window.
pub struct Batch {
    pub ids: Vec<String>,
    pub keys: Vec<u64>,
    /// Normalised full state, `B × K·6`.
    pub states: Vec<Array2<f64>>,
    /// Raw actions of the role agent, `B × 4`.
    pub actions: Vec<Array2<f64>>,
    /// Normalised actions, `B × 4`.
    pub actions_norm: Vec<Array2<f64>>,
    pub positions: Vec<Array2<f64>>,
    pub accelerations: Vec<Array2<f64>>,
    pub goals: Vec<Vec<usize>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn frames(&self) -> usize {
        self.states.len()
    }
}

/// FNV-1a hash of a window id, used to key per-window noise.
pub fn window_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Summed loss terms over the rows of a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rows: usize,
    pub recon: f64,
    pub kl: f64,
    pub macro_ce: Option<f64>,
    /// Unweighted penalty sums for the enabled terms.
    pub penalties: BTreeMap<PenaltyTerm, f64>,
    /// Weighted penalty total.
    pub penalty: f64,
    pub total: f64,
}

impl LossReport {
    /// `total − (recon + kl + macro_ce + Σ λ·penalty)`.
    pub fn residual(&self, constraints: &ConstraintConfig) -> f64 {
        let weighted: f64 = self.penalties.iter().map(|(t, v)| constraints.weight(*t) * v).sum();
        self.total - (self.recon + self.kl + self.macro_ce.unwrap_or(0.0) + weighted)
    }

    pub fn add(&mut self, other: &LossReport) {
        self.rows += other.rows;
        self.recon += other.recon;
        self.kl += other.kl;
        if let Some(ce) = other.macro_ce {
            *self.macro_ce.get_or_insert(0.0) += ce;
        }
        for (t, v) in &other.penalties {
            *self.penalties.entry(*t).or_insert(0.0) += v;
        }
        self.penalty += other.penalty;
        self.total += other.total;
    }

    /// Named terms as logged: recon, kl, macro_ce (if present), each
    /// enabled penalty, the weighted penalty total and the total.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let mut out = vec![("recon".to_string(), self.recon), ("kl".to_string(), self.kl)];
        if let Some(ce) = self.macro_ce {
            out.push(("macro_ce".into(), ce));
        }
        for (t, v) in &self.penalties {
            out.push((t.as_str().into(), *v));
        }
        out.push(("penalty".into(), self.penalty));
        out.push(("total".into(), self.total));
        out
    }

    /// Per-row average.
    pub fn mean(&self) -> LossReport {
        let n = self.rows.max(1) as f64;
        LossReport {
            rows: self.rows,
            recon: self.recon / n,
            kl: self.kl / n,
            macro_ce: self.macro_ce.map(|c| c / n),
            penalties: self.penalties.iter().map(|(t, v)| (*t, v / n)).collect(),
            penalty: self.penalty / n,
            total: self.total / n,
        }
    }
}

/// Graph-side loss: the batch total and its decomposition.
pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
    /// Gate values per predicted frame, `B × K` (frame `t` uses the gate at
    /// `t − 1`).
    pub gates: Vec<Array2<f64>>,
}

fn row_const(g: &Graph, values: &[f64]) -> Var {
    g.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row"))
}

fn reparameterize(g: &Graph, dist: GaussianVars, eps: Array2<f64>) -> Var {
    g.add(dist.mean, g.mul(dist.std, g.constant(eps)))
}

impl PolicyModel {
    /// Builds an untrained model for the defender `role` of sequences shaped
    /// like `template`.
    pub fn new(config: ModelConfig, template: &PlaySequence, role: usize, scaler: Scaler, seed: u64) -> Result<Self> {
        config.validate()?;
        let defenders = template.defenders();
        let slot = *defenders
            .get(role)
            .ok_or_else(|| Error::arg(format!("role {role} out of range for {} defenders", defenders.len())))?;
        let n_agents = template.n_agents();
        let grid = config.grid.unwrap_or_else(|| GridSpec::for_sport(template.sport));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, role as u64));
        let mut params = ParamStore::default();
        let mut buffers = Buffers::default();
        let c = &config;
        let observation = ObservationLayer::new(&mut params, "obs", n_agents, c.embed_dim, c.temperature, &mut rng);
        let obs_dim = observation.output_dim();
        let macro_goal = c.macro_goals.then(|| {
            MacroGoalNet::new(
                &mut params,
                &mut buffers,
                obs_dim,
                grid.n_cells(),
                c.macro_rnn_hidden,
                c.macro_rnn_layers,
                c.hidden,
                c.batch_norm,
                &mut rng,
            )
        });
        let cond = c.rnn_hidden + obs_dim + if c.macro_goals { grid.n_cells() } else { 0 };
        let (prior, encoder, decoder, rnn) = match c.kind {
            ModelKind::Vrnn => {
                let prior = GaussianMlp::new(&mut params, &mut buffers, "prior", cond, c.hidden, c.latent, c.batch_norm, c.std_floor, &mut rng);
                let encoder = GaussianMlp::new(
                    &mut params,
                    &mut buffers,
                    "enc",
                    ACTION_DIM + cond,
                    c.hidden,
                    c.latent,
                    c.batch_norm,
                    c.std_floor,
                    &mut rng,
                );
                let decoder = GaussianMlp::new(
                    &mut params,
                    &mut buffers,
                    "dec",
                    c.latent + cond,
                    c.hidden,
                    ACTION_DIM,
                    c.batch_norm,
                    c.std_floor,
                    &mut rng,
                );
                let rnn = Gru::new(&mut params, "rnn", ACTION_DIM + c.latent, c.rnn_hidden, c.rnn_layers, &mut rng);
                (Some(prior), Some(encoder), decoder, rnn)
            }
            ModelKind::RnnGauss => {
                let decoder =
                    GaussianMlp::new(&mut params, &mut buffers, "dec", cond, c.hidden, ACTION_DIM, c.batch_norm, c.std_floor, &mut rng);
                let rnn = Gru::new(&mut params, "rnn", ACTION_DIM, c.rnn_hidden, c.rnn_layers, &mut rng);
                (None, None, decoder, rnn)
            }
        };
        let nets = Networks { observation, macro_goal, prior, encoder, decoder, rnn };
        Ok(Self {
            version: MODEL_VERSION,
            config,
            role,
            slot,
            n_agents,
            dt: template.dt(),
            grid,
            scaler,
            params,
            buffers,
            nets,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.count()
    }

    fn check_window(&self, w: &PlaySequence) -> Result<()> {
        if w.n_agents() != self.n_agents || w.agents.get(self.slot).map(|a| a.role) != Some(Role::Defense) {
            return Err(Error::arg(format!("window `{}` does not match the model's agent layout", w.sequence_id)));
        }
        Ok(())
    }

    /// Macro-goal labels of the role agent.
    pub fn labels(&self, w: &PlaySequence) -> Vec<usize> {
        macro_goal::label_macro_goals(&w.track(self.slot), w.dt(), &self.grid, self.config.labeler)
    }

    /// Assembles teacher-forcing arrays for `windows` (equal lengths).
    pub fn batch(&self, windows: &[&PlaySequence]) -> Result<Batch> {
        let b = windows.len();
        let t_len = windows.first().map_or(0, |w| w.len());
        if b == 0 || t_len < 3 {
            return Err(Error::arg("batch needs at least one window of 3 or more frames"));
        }
        for w in windows {
            self.check_window(w)?;
            if w.len() != t_len {
                return Err(Error::arg("windows in a batch must have equal length"));
            }
        }
        let width = self.n_agents * STATE_DIM;
        let mut states = vec![Array2::zeros((b, width)); t_len];
        let mut actions = vec![Array2::zeros((b, ACTION_DIM)); t_len];
        let mut actions_norm = vec![Array2::zeros((b, ACTION_DIM)); t_len];
        let mut positions = vec![Array2::zeros((b, 2)); t_len];
        let mut accelerations = vec![Array2::zeros((b, 2)); t_len];
        let mut goals = vec![vec![0; b]; t_len];
        for (i, w) in windows.iter().enumerate() {
            let labels = if self.config.macro_goals { self.labels(w) } else { vec![0; t_len] };
            for t in 0..t_len {
                let frame = &w.frames[t];
                self.scaler.state_row(frame, states[t].row_mut(i).as_slice_mut().expect("contiguous"));
                let s = frame[self.slot];
                let a = action_of(&s);
                let an = self.scaler.action_row(&a);
                for j in 0..ACTION_DIM {
                    actions[t][[i, j]] = a[j];
                    actions_norm[t][[i, j]] = an[j];
                }
                for j in 0..2 {
                    positions[t][[i, j]] = s.position[j];
                    accelerations[t][[i, j]] = s.acceleration[j];
                }
                goals[t][i] = labels[t];
            }
        }
        Ok(Batch {
            ids: windows.iter().map(|w| w.sequence_id.clone()).collect(),
            keys: windows.iter().map(|w| window_key(&w.sequence_id)).collect(),
            states,
            actions,
            actions_norm,
            positions,
            accelerations,
            goals,
        })
    }

    fn initial_state(&self, g: &Graph, rows: usize, hidden: usize, layers: usize) -> Vec<Var> {
        (0..layers).map(|_| g.constant(Array2::zeros((rows, hidden)))).collect()
    }

    fn action_scale(&self, g: &Graph) -> (Var, Var) {
        (row_const(g, &self.scaler.action_std), row_const(g, &self.scaler.action_mean))
    }

    /// Teacher-forced sequence objective over a batch: reconstruction NLL,
    /// KL, macro-goal cross-entropy and the enabled penalties, summed over
    /// frames and rows. The first frame only provides the initial
    /// observation.
    pub fn loss(&self, cx: &mut Ctx, batch: &Batch, constraints: &ConstraintConfig, mode: GateMode) -> Result<LossGraph> {
        let g = cx.g;
        let rows = batch.rows();
        let t_len = batch.frames();
        let c = &self.config;
        let scale = self.action_scale(g);
        let mut h = self.initial_state(g, rows, c.rnn_hidden, c.rnn_layers);
        let mut hg = self.nets.macro_goal.as_ref().map(|_| self.initial_state(g, rows, c.macro_rnn_hidden, c.macro_rnn_layers));
        let mut recon: Option<Var> = None;
        let mut kl: Option<Var> = None;
        let mut ce: Option<Var> = None;
        let mut dists = Vec::with_capacity(t_len - 1);
        let mut gates = Vec::with_capacity(t_len - 1);
        let add = |acc: &mut Option<Var>, v: Var| {
            *acc = Some(match *acc {
                Some(a) => g.add(a, v),
                None => v,
            })
        };
        for t in 1..t_len {
            let state = g.constant(batch.states[t - 1].clone());
            let obs = self.nets.observation.forward(cx, state, mode, None);
            gates.push(g.value(obs.gate));
            let mut cond_parts = vec![*h.last().expect("state"), obs.observation];
            if let (Some(net), Some(state_g)) = (&self.nets.macro_goal, hg.as_mut()) {
                let log_probs = net.log_probs(cx, state_g, obs.observation);
                let target = g.constant(macro_goal::one_hot_rows(&batch.goals[t], net.n_cells));
                add(&mut ce, g.neg(g.sum_cols(g.mul(log_probs, target))));
                *state_g = net.advance(cx, state_g, target, obs.observation);
                cond_parts.push(target);
            }
            let cond = g.concat(&cond_parts);
            let action = g.constant(batch.actions[t].clone());
            let action_norm = g.constant(batch.actions_norm[t].clone());
            let dec = match (&self.nets.prior, &self.nets.encoder) {
                (Some(prior_net), Some(enc_net)) => {
                    let prior = prior_net.forward(cx, cond, None);
                    let post = enc_net.forward(cx, g.concat(&[action_norm, cond]), None);
                    add(&mut kl, constraints::kl_graph(g, post.mean, post.std, prior.mean, prior.std));
                    let eps = if cx.train { cx.noise.normal(c.latent) } else { Array2::zeros((rows, c.latent)) };
                    let z = reparameterize(g, post, eps);
                    let dec = self.nets.decoder.forward(cx, g.concat(&[z, cond]), Some(scale));
                    h = self.nets.rnn.forward(cx, g.concat(&[action_norm, z]), &h);
                    dec
                }
                _ => {
                    let dec = self.nets.decoder.forward(cx, cond, Some(scale));
                    h = self.nets.rnn.forward(cx, action_norm, &h);
                    dec
                }
            };
            add(&mut recon, constraints::nll_graph(g, action, dec.mean, dec.std));
            dists.push(ActionDist { mean: dec.mean, std: dec.std });
        }
        let positions: Vec<Var> = batch.positions.iter().map(|p| g.constant(p.clone())).collect();
        let accelerations: Vec<Var> = batch.accelerations.iter().map(|a| g.constant(a.clone())).collect();
        let penalties = constraints::mechanical_penalties(
            g,
            &PenaltyInputs { dists: &dists, first: 1, positions: &positions, accelerations: &accelerations, dt: self.dt },
            constraints,
        )?;
        let recon = recon.expect("at least one frame");
        let mut total = recon;
        let mut report = LossReport { rows, recon: g.value(recon).sum(), ..Default::default() };
        if let Some(kl) = kl {
            total = g.add(total, kl);
            report.kl = g.value(kl).sum();
        }
        if let Some(ce) = ce {
            total = g.add(total, ce);
            report.macro_ce = Some(g.value(ce).sum());
        }
        for term in constraints.enabled() {
            let v = penalties.get(term).expect("enabled term");
            let w = constraints.weight(term);
            let value = g.value(v).sum();
            report.penalties.insert(term, value);
            report.penalty += w * value;
            total = g.add(total, g.scale(v, w));
        }
        let total = g.sum(total);
        report.total = g.scalar(total);
        Ok(LossGraph { total, report, gates })
    }

    /// Evaluates the teacher-forced loss without touching parameters or
    /// running statistics.
    pub fn evaluate_loss(&self, batch: &Batch, constraints: &ConstraintConfig, seed: u64) -> Result<LossReport> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let mut buffers = self.buffers.clone();
        let mut noise = RowNoise::from_keys(seed, &batch.keys);
        let mut cx = Ctx { g: &g, p: &p, train: false, dropout: 0.0, buffers: &mut buffers, noise: &mut noise };
        Ok(self.loss(&mut cx, batch, constraints, GateMode::Hard)?.report)
    }
}

/// How stochastic quantities are drawn during rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    #[default]
    Stochastic,
    /// Distribution means, greedy goals and noise-free gates.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub burn_in: usize,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: SampleMode,
    /// All samples share one random stream.
    pub shared_noise: bool,
    /// Gate override applied from the first generated frame on.
    pub observation_override: Option<ObservationOverride>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            burn_in: crate::trajectory::DEFAULT_BURN_IN,
            horizon: crate::trajectory::DEFAULT_HORIZON,
            samples: 10,
            seed: 0,
            mode: SampleMode::Stochastic,
            shared_noise: false,
            observation_override: None,
        }
    }
}

/// Sampled futures for the modelled roles of one window. Indices are
/// `[sample][frame][role]`; `gates[s][t][r]` is the gate vector applied to
/// frame `t` (used to predict frame `t + 1`), so it has one frame fewer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub window_id: String,
    pub burn_in: usize,
    pub dt: f64,
    /// Agent slot of each modelled role.
    pub slots: Vec<usize>,
    pub positions: Vec<Vec<Vec<Vec2>>>,
    pub velocities: Vec<Vec<Vec<Vec2>>>,
    pub accelerations: Vec<Vec<Vec<Vec2>>>,
    pub gates: Vec<Vec<Vec<Vec<f64>>>>,
    pub goals: Vec<Vec<Vec<usize>>>,
    /// Positions of every agent, `[sample][frame][agent]`.
    pub scene: Vec<Vec<Vec<Vec2>>>,
}

impl RolloutResult {
    pub fn samples(&self) -> usize {
        self.positions.len()
    }

    pub fn frames(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }
}

struct Runner<'m> {
    model: &'m PolicyModel,
    g: Graph,
    p: Vec<Var>,
    buffers: Buffers,
    noise: RowNoise,
    h: Vec<Var>,
    hg: Option<Vec<Var>>,
}

fn sample_gaussian(mean: &Array2<f64>, std: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    mean + &(std * eps)
}

/// Jointly rolls out the role models in `team` on `window`: the first
/// `burn_in` frames are ground truth, later frames of modelled roles are
/// generated, everything else is replayed from the window.
pub fn rollout(team: &[PolicyModel], window: &PlaySequence, options: &RolloutOptions) -> Result<RolloutResult> {
    let t_len = options.burn_in + options.horizon;
    if options.burn_in == 0 || options.horizon == 0 {
        return Err(Error::arg("burn-in and horizon must be positive"));
    }
    if t_len > window.len() {
        return Err(Error::arg(format!(
            "burn-in {} + horizon {} exceeds window length {}",
            options.burn_in,
            options.horizon,
            window.len()
        )));
    }
    if options.samples == 0 || team.is_empty() {
        return Err(Error::arg("need at least one sample and one role model"));
    }
    let n = options.samples;
    let n_agents = window.n_agents();
    if let Some(ov) = &options.observation_override {
        ov.validate(n_agents)?;
        if let ObservationOverride::Recorded(log) = ov {
            if log.len() != n || log.iter().any(|s| s.len() + 1 < t_len || s.iter().any(|f| f.len() != team.len())) {
                return Err(Error::arg("recorded override does not match the rollout shape"));
            }
        }
    }
    for m in team {
        m.check_window(window)?;
    }
    let dt = window.dt();
    let keys: Vec<u64> = (0..n as u64).map(|i| if options.shared_noise { 0 } else { i }).collect();
    let mut runners: Vec<Runner> = team
        .iter()
        .map(|m| {
            let g = Graph::new();
            let p = m.params.bind_frozen(&g);
            let c = &m.config;
            let h = m.initial_state(&g, n, c.rnn_hidden, c.rnn_layers);
            let hg = m.nets.macro_goal.as_ref().map(|_| m.initial_state(&g, n, c.macro_rnn_hidden, c.macro_rnn_layers));
            let noise = RowNoise::from_keys(mix_seed(options.seed, m.role as u64), &keys);
            Runner { model: m, g, p, buffers: m.buffers.clone(), noise, h, hg }
        })
        .collect();

    let mut current: Vec<Vec<AgentState>> = vec![window.frames[0].clone(); n];
    let mut positions = vec![Vec::with_capacity(t_len); n];
    let mut velocities = vec![Vec::with_capacity(t_len); n];
    let mut accelerations = vec![Vec::with_capacity(t_len); n];
    let mut gates = vec![Vec::with_capacity(t_len - 1); n];
    let mut goals = vec![Vec::with_capacity(t_len - 1); n];
    let mut scene: Vec<Vec<Vec<Vec2>>> = vec![Vec::with_capacity(t_len); n];
    let record = |positions: &mut Vec<Vec<Vec<Vec2>>>,
                  velocities: &mut Vec<Vec<Vec<Vec2>>>,
                  accelerations: &mut Vec<Vec<Vec<Vec2>>>,
                  current: &[Vec<AgentState>]| {
        for s in 0..n {
            positions[s].push(team.iter().map(|m| current[s][m.slot].position).collect());
            velocities[s].push(team.iter().map(|m| current[s][m.slot].velocity).collect());
            accelerations[s].push(team.iter().map(|m| current[s][m.slot].acceleration).collect());
        }
    };
    record(&mut positions, &mut velocities, &mut accelerations, &current);
    for s in 0..n {
        scene[s].push(current[s].iter().map(|a| a.position).collect());
    }

    for t in 1..t_len {
        let generating = t >= options.burn_in;
        let width = n_agents * STATE_DIM;
        let mut step_gates = vec![Vec::with_capacity(team.len()); n];
        let mut step_goals = vec![Vec::with_capacity(team.len()); n];
        let mut actions: Vec<Array2<f64>> = Vec::with_capacity(team.len());
        for (r, run) in runners.iter_mut().enumerate() {
            let m = run.model;
            let c = &m.config;
            let mut state = Array2::zeros((n, width));
            for s in 0..n {
                m.scaler.state_row(&current[s], state.row_mut(s).as_slice_mut().expect("contiguous"));
            }
            let mut cx = Ctx {
                g: &run.g,
                p: &run.p,
                train: false,
                dropout: 0.0,
                buffers: &mut run.buffers,
                noise: &mut run.noise,
            };
            let g = cx.g;
            let state = g.constant(state);
            // Gate noise is drawn even when the gate is overridden.
            let (sampled, probability) = m.nets.observation.gate(&mut cx, state, GateMode::Hard, None);
            let forced = match (&options.observation_override, generating) {
                (Some(ObservationOverride::Fixed(b)), true) => Some(Array2::from_shape_fn((n, n_agents), |(_, j)| b[j])),
                (Some(ObservationOverride::OneHotMax), true) => Some(one_hot_max(&probability)),
                (Some(ObservationOverride::Recorded(log)), true) => {
                    Some(Array2::from_shape_fn((n, n_agents), |(s, j)| log[s][t - 1][r][j]))
                }
                _ => None,
            };
            let gate = match (forced, options.mode) {
                (Some(b), _) => g.constant(b),
                (None, SampleMode::Mean) => g.constant(probability.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 })),
                (None, SampleMode::Stochastic) => sampled,
            };
            let embedded = m.nets.observation.embed(&cx, state);
            let obs = m.nets.observation.observe(g, gate, embedded);
            let gate_values = g.value(gate);
            for s in 0..n {
                step_gates[s].push(gate_values.row(s).to_vec());
            }

            let mut cond_parts = vec![*run.h.last().expect("state"), obs];
            if let (Some(net), Some(hg)) = (&m.nets.macro_goal, run.hg.as_mut()) {
                let log_probs = g.value(net.log_probs(&mut cx, hg, obs));
                let u = cx.noise.uniform(1);
                let cells = match options.mode {
                    SampleMode::Stochastic => macro_goal::sample_cells(&log_probs, &u),
                    SampleMode::Mean => macro_goal::greedy_cells(&log_probs),
                };
                let goal = g.constant(macro_goal::one_hot_rows(&cells, net.n_cells));
                *hg = net.advance(&cx, hg, goal, obs);
                cond_parts.push(goal);
                for s in 0..n {
                    step_goals[s].push(cells[s]);
                }
            }
            let cond = g.concat(&cond_parts);
            let scale = m.action_scale(g);
            let truth: Array2<f64> = Array2::from_shape_fn((n, ACTION_DIM), |(_, j)| action_of(&window.frames[t][m.slot])[j]);
            let truth_norm = {
                let a = action_of(&window.frames[t][m.slot]);
                let an = m.scaler.action_row(&a);
                Array2::from_shape_fn((n, ACTION_DIM), |(_, j)| an[j])
            };
            let action = match (&m.nets.prior, &m.nets.encoder) {
                (Some(prior_net), Some(enc_net)) => {
                    let eps_z = cx.noise.normal(c.latent);
                    let eps_a = cx.noise.normal(ACTION_DIM);
                    let (z, action) = if generating {
                        let prior = prior_net.forward(&mut cx, cond, None);
                        let z = match options.mode {
                            SampleMode::Stochastic => reparameterize(g, prior, eps_z),
                            SampleMode::Mean => prior.mean,
                        };
                        let dec = m.nets.decoder.forward(&mut cx, g.concat(&[z, cond]), Some(scale));
                        let a = match options.mode {
                            SampleMode::Stochastic => sample_gaussian(&g.value(dec.mean), &g.value(dec.std), &eps_a),
                            SampleMode::Mean => g.value(dec.mean),
                        };
                        (z, a)
                    } else {
                        let post = enc_net.forward(&mut cx, g.concat(&[g.constant(truth_norm.clone()), cond]), None);
                        let z = match options.mode {
                            SampleMode::Stochastic => reparameterize(g, post, eps_z),
                            SampleMode::Mean => post.mean,
                        };
                        (z, truth.clone())
                    };
                    let action_norm = normalize_actions(m, &action);
                    run.h = m.nets.rnn.forward(&cx, g.concat(&[g.constant(action_norm), z]), &run.h);
                    action
                }
                _ => {
                    let eps_a = cx.noise.normal(ACTION_DIM);
                    let action = if generating {
                        let dec = m.nets.decoder.forward(&mut cx, cond, Some(scale));
                        match options.mode {
                            SampleMode::Stochastic => sample_gaussian(&g.value(dec.mean), &g.value(dec.std), &eps_a),
                            SampleMode::Mean => g.value(dec.mean),
                        }
                    } else {
                        truth.clone()
                    };
                    let action_norm = normalize_actions(m, &action);
                    run.h = m.nets.rnn.forward(&cx, g.constant(action_norm), &run.h);
                    action
                }
            };
            actions.push(action);
        }
        for s in 0..n {
            let mut next = window.frames[t].clone();
            if generating {
                for (r, m) in team.iter().enumerate() {
                    let a = actions[r].row(s);
                    let prev = current[s][m.slot].position;
                    let velocity = [a[0], a[1]];
                    next[m.slot] = AgentState {
                        position: [prev[0] + velocity[0] * dt, prev[1] + velocity[1] * dt],
                        velocity,
                        acceleration: [a[2], a[3]],
                    };
                }
            }
            scene[s].push(next.iter().map(|a| a.position).collect());
            current[s] = next;
            gates[s].push(std::mem::take(&mut step_gates[s]));
            goals[s].push(std::mem::take(&mut step_goals[s]));
        }
        record(&mut positions, &mut velocities, &mut accelerations, &current);
    }
    Ok(RolloutResult {
        window_id: window.sequence_id.clone(),
        burn_in: options.burn_in,
        dt,
        slots: team.iter().map(|m| m.slot).collect(),
        positions,
        velocities,
        accelerations,
        gates,
        goals,
        scene,
    })
}

fn normalize_actions(m: &PolicyModel, actions: &Array2<f64>) -> Array2<f64> {
    let mean = Array1::from(m.scaler.action_mean.to_vec()).insert_axis(Axis(0));
    let std = Array1::from(m.scaler.action_std.to_vec()).insert_axis(Axis(0));
    (actions - &mean) / &std
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Preset;
    use crate::synthetic::{generate_dataset, ScenarioSpec};
    use crate::trajectory::Sport;

    fn windows() -> Vec<PlaySequence> {
        let spec = ScenarioSpec { n_defenders: 2, n_attackers: 2, tracking: vec![0, 1], n_frames: 14, seed: 5, ..Default::default() };
        generate_dataset(&spec, 3, 0, 0).unwrap().0.train
    }

    fn config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            embed_dim: 3,
            hidden: 8,
            latent: 3,
            rnn_hidden: 6,
            rnn_layers: 2,
            macro_rnn_hidden: 5,
            macro_rnn_layers: 1,
            dropout: 0.0,
            grid: Some(GridSpec { origin: [0.0, 0.0], cell: [7.0, 7.5], rows: 2, cols: 2 }),
            ..Default::default()
        }
    }

    fn model(kind: ModelKind, role: usize) -> PolicyModel {
        let w = windows();
        PolicyModel::new(config(kind), &w[0], role, Scaler::fit(&w), 9).unwrap()
    }

    fn opts(samples: usize) -> RolloutOptions {
        RolloutOptions { burn_in: 5, horizon: 9, samples, seed: 3, ..Default::default() }
    }

    #[test]
    fn scaler_normalises() {
        let w = windows();
        let s = Scaler::fit(&w);
        assert!(s.state_std.iter().chain(&s.action_std).all(|&x| x > 0.0));
        let a = s.action_row(&s.action_mean);
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn loss_is_finite_and_decomposes() {
        let w = windows();
        let refs: Vec<&PlaySequence> = w.iter().collect();
        let constraints = ConstraintConfig::preset(Preset::Mech, Sport::Basketball);
        for kind in [ModelKind::Vrnn, ModelKind::RnnGauss] {
            let m = model(kind, 0);
            let r = m.evaluate_loss(&m.batch(&refs).unwrap(), &constraints, 1).unwrap();
            assert!(r.total.is_finite());
            assert!(r.residual(&constraints).abs() < 1e-6 * r.total.abs().max(1.0));
            assert_eq!(r.penalties.len(), 4);
            if kind == ModelKind::RnnGauss {
                assert_eq!(r.kl, 0.0);
            } else {
                assert!(r.kl >= 0.0);
            }
        }
    }

    #[test]
    fn duplicated_batch_doubles_eval_loss() {
        let w = windows();
        let m = model(ModelKind::Vrnn, 1);
        let constraints = ConstraintConfig::preset(Preset::Mech, Sport::Basketball);
        let one = m.evaluate_loss(&m.batch(&[&w[0]]).unwrap(), &constraints, 4).unwrap();
        let two = m.evaluate_loss(&m.batch(&[&w[0], &w[0]]).unwrap(), &constraints, 4).unwrap();
        assert!((two.total - 2.0 * one.total).abs() < 1e-9 * one.total.abs());
    }

    #[test]
    fn batch_rejects_mismatched_windows() {
        let w = windows();
        let m = model(ModelKind::Vrnn, 0);
        let short = w[1].slice(0, 10, "short");
        assert!(m.batch(&[&w[0], &short]).is_err());
        assert!(m.batch(&[]).is_err());
        assert!(PolicyModel::new(config(ModelKind::Vrnn), &w[0], 2, Scaler::identity(), 0).is_err());
    }

    #[test]
    fn rollout_burn_in_is_truth_and_positions_integrate() {
        let w = windows();
        let team = vec![model(ModelKind::Vrnn, 0), model(ModelKind::Vrnn, 1)];
        let r = rollout(&team, &w[0], &opts(3)).unwrap();
        assert_eq!(r.frames(), 14);
        assert_eq!(r.gates[0].len(), 13);
        for s in 0..3 {
            for t in 0..5 {
                for (k, &slot) in r.slots.iter().enumerate() {
                    assert_eq!(r.positions[s][t][k], w[0].frames[t][slot].position);
                }
            }
            for t in 5..14 {
                for k in 0..2 {
                    let (p, q, v) = (r.positions[s][t][k], r.positions[s][t - 1][k], r.velocities[s][t][k]);
                    assert!((p[0] - q[0] - v[0] * r.dt).abs() < 1e-12 && (p[1] - q[1] - v[1] * r.dt).abs() < 1e-12);
                }
                // attackers and ball are replayed
                assert_eq!(r.scene[s][t][3], w[0].frames[t][3].position);
            }
        }
    }

    #[test]
    fn mean_mode_and_shared_noise_give_identical_samples() {
        let w = windows();
        let team = vec![model(ModelKind::Vrnn, 0)];
        let r = rollout(&team, &w[0], &RolloutOptions { mode: SampleMode::Mean, ..opts(3) }).unwrap();
        assert_eq!(r.positions[0], r.positions[2]);
        let r = rollout(&team, &w[0], &RolloutOptions { shared_noise: true, ..opts(3) }).unwrap();
        assert_eq!(r.positions[0], r.positions[1]);
        let a = rollout(&team, &w[0], &opts(2)).unwrap();
        let b = rollout(&team, &w[0], &opts(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_gates_replay_exactly() {
        let w = windows();
        let team = vec![model(ModelKind::Vrnn, 0), model(ModelKind::RnnGauss, 1)];
        let base = rollout(&team, &w[0], &opts(2)).unwrap();
        let replay = RolloutOptions { observation_override: Some(ObservationOverride::Recorded(base.gates.clone())), ..opts(2) };
        assert_eq!(rollout(&team, &w[0], &replay).unwrap(), base);
    }

    #[test]
    fn forced_gates_are_logged_and_change_the_future() {
        let w = windows();
        let team = vec![model(ModelKind::Vrnn, 0)];
        let base = rollout(&team, &w[0], &opts(2)).unwrap();
        let zeros = RolloutOptions { observation_override: Some(ObservationOverride::Fixed(vec![0.0; 5])), ..opts(2) };
        let forced = rollout(&team, &w[0], &zeros).unwrap();
        assert_eq!(forced.positions[0][..5], base.positions[0][..5]);
        assert!(forced.gates[0][4..].iter().all(|f| f[0] == vec![0.0; 5]));
        assert_ne!(forced.positions, base.positions);
        let one_hot = RolloutOptions { observation_override: Some(ObservationOverride::OneHotMax), ..opts(2) };
        let r = rollout(&team, &w[0], &one_hot).unwrap();
        assert!(r.gates[0][4..].iter().all(|f| f[0].iter().sum::<f64>() == 1.0));
    }

    #[test]
    fn rollout_rejects_bad_options() {
        let w = windows();
        let team = vec![model(ModelKind::Vrnn, 0)];
        assert!(rollout(&team, &w[0], &RolloutOptions { burn_in: 0, ..opts(1) }).is_err());
        assert!(rollout(&team, &w[0], &RolloutOptions { horizon: 10, ..opts(1) }).is_err());
        assert!(rollout(&team, &w[0], &RolloutOptions { samples: 0, ..opts(1) }).is_err());
        let bad = RolloutOptions { observation_override: Some(ObservationOverride::Fixed(vec![1.0; 4])), ..opts(1) };
        assert!(rollout(&team, &w[0], &bad).is_err());
    }

    #[test]
    fn window_keys_are_stable() {
        assert_eq!(window_key("a"), window_key("a"));
        assert_ne!(window_key("a"), window_key("b"));
    }
}
