//! Mechanical-constraint penalties: indirect kinematic distributions built
//! from consecutive decoder outputs, closed-form Gaussian divergences and
//! the weighted penalty terms added to the sequence objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::trajectory::Sport;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian with explicit variances.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self { mean, var }
    }

    pub fn nll(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| HALF_LN_2PI + 0.5 * v.ln() + (x - m) * (x - m) / (2.0 * v))
            .sum()
    }
}

/// `KL(p ‖ q)` for diagonal Gaussians.
pub fn gaussian_kl(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.mean.len() != q.mean.len() || p.var.len() != p.mean.len() || q.var.len() != q.mean.len() {
        return Err(Error::arg("dimension mismatch"));
    }
    if p.var.iter().chain(&q.var).any(|&v| !(v > 0.0)) {
        return Err(Error::arg("variances must be positive"));
    }
    Ok(p.mean
        .iter()
        .zip(&p.var)
        .zip(q.mean.iter().zip(&q.var))
        .map(|((mp, vp), (mq, vq))| 0.5 * ((vq / vp).ln() + (vp + (mp - mq) * (mp - mq)) / vq - 1.0))
        .sum())
}

/// Distribution of `(v_t − v_{t−1})/Δt` for independent Gaussian
/// velocities.
pub fn indirect_acc_distribution(vel_t: &DiagGaussian, vel_prev: &DiagGaussian, dt: f64) -> Result<DiagGaussian> {
    if !(dt > 0.0) {
        return Err(Error::arg("dt must be positive"));
    }
    Ok(DiagGaussian {
        mean: vel_t.mean.iter().zip(&vel_prev.mean).map(|(a, b)| (a - b) / dt).collect(),
        var: vel_t.var.iter().zip(&vel_prev.var).map(|(a, b)| (a + b) / (dt * dt)).collect(),
    })
}

/// Distribution of `x_{t−1} + v_t·Δt`.
pub fn indirect_pos_distribution(prev_pos: &[f64], vel_t: &DiagGaussian, dt: f64) -> Result<DiagGaussian> {
    if !(dt > 0.0) {
        return Err(Error::arg("dt must be positive"));
    }
    Ok(DiagGaussian {
        mean: prev_pos.iter().zip(&vel_t.mean).map(|(p, v)| p + v * dt).collect(),
        var: vel_t.var.iter().map(|v| v * dt * dt).collect(),
    })
}

/// Penalty terms that can appear in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTerm {
    /// KL between direct and indirect acceleration.
    KlAcc,
    /// NLL of the true position under the integrated velocity.
    PosNll,
    /// NLL of the next true acceleration under the current prediction.
    JerkNll,
    /// Extra reconstruction NLL of the acceleration dimensions.
    AccRecon,
}

impl PenaltyTerm {
    pub const ALL: [PenaltyTerm; 4] = [Self::KlAcc, Self::PosNll, Self::JerkNll, Self::AccRecon];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::KlAcc => "kl_acc",
            Self::PosNll => "pos_nll",
            Self::JerkNll => "jerk_nll",
            Self::AccRecon => "acc_recon",
        }
    }
}

/// Ablation presets, from no constraint to the full mechanical objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Vrnn,
    CPos,
    CPosAcc,
    CPosAccJrk,
    Mech,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Self::Vrnn, Self::CPos, Self::CPosAcc, Self::CPosAccJrk, Self::Mech];

    pub fn terms(self) -> &'static [PenaltyTerm] {
        use PenaltyTerm::*;
        match self {
            Self::Vrnn => &[],
            Self::CPos => &[PosNll],
            Self::CPosAcc => &[KlAcc, PosNll],
            Self::CPosAccJrk => &[KlAcc, PosNll, JerkNll],
            Self::Mech => &[KlAcc, PosNll, JerkNll, AccRecon],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vrnn => "vrnn",
            Self::CPos => "c-pos",
            Self::CPosAcc => "c-pos-acc",
            Self::CPosAccJrk => "c-pos-acc-jrk",
            Self::Mech => "mech",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown constraint preset `{s}`")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Penalty weights and per-term switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    pub lambda_acc: f64,
    pub lambda_pos: f64,
    pub lambda_jrk: f64,
    pub lambda_rec: f64,
    pub use_acc: bool,
    pub use_pos: bool,
    pub use_jrk: bool,
    pub use_rec: bool,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self::preset(Preset::Mech, Sport::Basketball)
    }
}

impl ConstraintConfig {
    /// Default weights: basketball `λ_acc=0.1, λ_pos=0.01, λ_jrk=0.1,
    /// λ_rec=0.2`; soccer one tenth of each.
    pub fn weights(sport: Sport) -> [f64; 4] {
        let k = match sport {
            Sport::Basketball => 1.0,
            Sport::Soccer => 0.1,
        };
        [0.1 * k, 0.01 * k, 0.1 * k, 0.2 * k]
    }

    pub fn preset(preset: Preset, sport: Sport) -> Self {
        let [lambda_acc, lambda_pos, lambda_jrk, lambda_rec] = Self::weights(sport);
        let terms = preset.terms();
        let on = |t| terms.contains(&t);
        Self {
            lambda_acc,
            lambda_pos,
            lambda_jrk,
            lambda_rec,
            use_acc: on(PenaltyTerm::KlAcc),
            use_pos: on(PenaltyTerm::PosNll),
            use_jrk: on(PenaltyTerm::JerkNll),
            use_rec: on(PenaltyTerm::AccRecon),
        }
    }

    pub fn none() -> Self {
        Self::preset(Preset::Vrnn, Sport::Basketball)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_acc, self.lambda_pos, self.lambda_jrk, self.lambda_rec];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("penalty weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn enabled(&self) -> Vec<PenaltyTerm> {
        PenaltyTerm::ALL.into_iter().filter(|&t| self.is_enabled(t)).collect()
    }

    pub fn is_enabled(&self, term: PenaltyTerm) -> bool {
        match term {
            PenaltyTerm::KlAcc => self.use_acc,
            PenaltyTerm::PosNll => self.use_pos,
            PenaltyTerm::JerkNll => self.use_jrk,
            PenaltyTerm::AccRecon => self.use_rec,
        }
    }

    pub fn weight(&self, term: PenaltyTerm) -> f64 {
        match term {
            PenaltyTerm::KlAcc => self.lambda_acc,
            PenaltyTerm::PosNll => self.lambda_pos,
            PenaltyTerm::JerkNll => self.lambda_jrk,
            PenaltyTerm::AccRecon => self.lambda_rec,
        }
    }
}

/// Row-wise Gaussian NLL summed over columns, `B × 1`. `x` is constant.
pub fn nll_graph(g: &Graph, x: Var, mean: Var, std: Var) -> Var {
    let z = g.mul(g.sub(x, mean), g.recip(std));
    let per = g.add(g.ln(std), g.scale(g.square(z), 0.5));
    let cols = g.shape(x).1 as f64;
    g.add_scalar(g.sum_cols(per), HALF_LN_2PI * cols)
}

/// Row-wise `KL(N(μp, σp²) ‖ N(μq, vq))` summed over columns, `B × 1`;
/// the second argument is given as a variance.
pub fn kl_graph_var(g: &Graph, mean_p: Var, std_p: Var, mean_q: Var, var_q: Var) -> Var {
    let var_p = g.square(std_p);
    let inv_q = g.recip(var_q);
    let ratio = g.mul(g.add(var_p, g.square(g.sub(mean_p, mean_q))), inv_q);
    let log_term = g.sub(g.ln(var_q), g.ln(var_p));
    let per = g.scale(g.add_scalar(g.add(log_term, ratio), -1.0), 0.5);
    g.sum_cols(per)
}

/// Row-wise KL between two diagonal Gaussians given by standard deviations.
pub fn kl_graph(g: &Graph, mean_p: Var, std_p: Var, mean_q: Var, std_q: Var) -> Var {
    let var_q = g.square(std_q);
    kl_graph_var(g, mean_p, std_p, mean_q, var_q)
}

/// Decoder output at one step, in physical units. Columns 0..2 are
/// velocity and 2..4 acceleration.
#[derive(Clone, Copy, Debug)]
pub struct ActionDist {
    pub mean: Var,
    pub std: Var,
}

impl ActionDist {
    pub fn vel(&self, g: &Graph) -> (Var, Var) {
        (g.slice_cols(self.mean, 0, 2), g.slice_cols(self.std, 0, 2))
    }

    pub fn acc(&self, g: &Graph) -> (Var, Var) {
        (g.slice_cols(self.mean, 2, 2), g.slice_cols(self.std, 2, 2))
    }
}

/// Unweighted per-row penalty sums, `B × 1` each; `None` when disabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct PenaltyVars {
    pub kl_acc: Option<Var>,
    pub pos_nll: Option<Var>,
    pub jerk_nll: Option<Var>,
    pub acc_recon: Option<Var>,
}

impl PenaltyVars {
    pub fn get(&self, term: PenaltyTerm) -> Option<Var> {
        match term {
            PenaltyTerm::KlAcc => self.kl_acc,
            PenaltyTerm::PosNll => self.pos_nll,
            PenaltyTerm::JerkNll => self.jerk_nll,
            PenaltyTerm::AccRecon => self.acc_recon,
        }
    }
}

/// Ground truth aligned with decoder outputs: `dists[i]` predicts frame
/// `first + i`; `positions[t]` and `accelerations[t]` are frame `t` (`B × 2`
/// constants).
pub struct PenaltyInputs<'a> {
    pub dists: &'a [ActionDist],
    pub first: usize,
    pub positions: &'a [Var],
    pub accelerations: &'a [Var],
    pub dt: f64,
}

fn accumulate(g: &Graph, acc: &mut Option<Var>, term: Var) {
    *acc = Some(match *acc {
        Some(a) => g.add(a, term),
        None => term,
    });
}

/// The four penalty sums over frames `t ≥ 2`. The jerk term needs frame
/// `t + 1`, so it stops one frame before the end. The acceleration
/// reconstruction runs over every predicted frame, like the main
/// reconstruction term.
pub fn mechanical_penalties(g: &Graph, input: &PenaltyInputs, config: &ConstraintConfig) -> Result<PenaltyVars> {
    let t_len = input.positions.len();
    if t_len < 3 {
        return Err(Error::arg("penalties need a window of at least 3 frames"));
    }
    let mut out = PenaltyVars::default();
    let dt = input.dt;
    let rows = g.shape(input.positions[0]).0;
    let zero = || g.constant(ndarray::Array2::zeros((rows, 1)));
    for (i, d) in input.dists.iter().enumerate() {
        let t = input.first + i;
        let (mu_a, sd_a) = d.acc(g);
        if config.use_rec {
            accumulate(g, &mut out.acc_recon, nll_graph(g, input.accelerations[t], mu_a, sd_a));
        }
        if t < 2 {
            continue;
        }
        let (mu_v, sd_v) = d.vel(g);
        if config.use_acc && i >= 1 {
            let (mu_pv, sd_pv) = input.dists[i - 1].vel(g);
            let mean_q = g.scale(g.sub(mu_v, mu_pv), 1.0 / dt);
            let var_q = g.scale(g.add(g.square(sd_v), g.square(sd_pv)), 1.0 / (dt * dt));
            accumulate(g, &mut out.kl_acc, kl_graph_var(g, mu_a, sd_a, mean_q, var_q));
        }
        if config.use_pos {
            let mean = g.add(input.positions[t - 1], g.scale(mu_v, dt));
            let std = g.scale(sd_v, dt);
            accumulate(g, &mut out.pos_nll, nll_graph(g, input.positions[t], mean, std));
        }
        if config.use_jrk && t + 1 < t_len {
            accumulate(g, &mut out.jerk_nll, nll_graph(g, input.accelerations[t + 1], mu_a, sd_a));
        }
    }
    for term in config.enabled() {
        let slot = match term {
            PenaltyTerm::KlAcc => &mut out.kl_acc,
            PenaltyTerm::PosNll => &mut out.pos_nll,
            PenaltyTerm::JerkNll => &mut out.jerk_nll,
            PenaltyTerm::AccRecon => &mut out.acc_recon,
        };
        if slot.is_none() {
            *slot = Some(zero());
        }
    }
    Ok(out)
}
