//! Role assignment: a Gaussian hidden Markov model fitted over per-agent
//! features, an emission cost per (player, role), and optimal linear
//! assignment to reindex defenders into consistent role slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::PlaySequence;

pub const ROLE_MODEL_VERSION: u32 = 1;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;
/// Per-timestep negative log density is clamped to this value.
pub const NLL_CEILING: f64 = 1e6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fitted Gaussian HMM with diagonal covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleModel {
    pub version: u32,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub variance_floor: f64,
    #[serde(default)]
    pub ball_relative: bool,
}

impl RoleModel {
    pub fn n_roles(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `log N(x; μ_r, diag σ²_r)`.
    pub fn log_density(&self, role: usize, x: &[f64]) -> f64 {
        let (mu, var) = (&self.means[role], &self.variances[role]);
        -0.5 * x
            .iter()
            .zip(mu)
            .zip(var)
            .map(|((&x, &m), &v)| LN_2PI + v.ln() + (x - m) * (x - m) / v)
            .sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.version != ROLE_MODEL_VERSION {
            return Err(Error::Version(model.version));
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmmOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for HmmOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6, variance_floor: DEFAULT_VARIANCE_FLOOR }
    }
}

#[derive(Clone, Debug)]
pub struct HmmFit {
    pub model: RoleModel,
    /// Log-likelihood of the data under the parameters entering each
    /// iteration, followed by the final parameters.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Roles whose variance hit the floor on every dimension.
    pub degenerate: Vec<usize>,
}

/// Per-agent HMM features: position and velocity, optionally followed by the
/// position relative to the ball.
pub fn role_features(seq: &PlaySequence, agent: usize, ball_relative: bool) -> Vec<Vec<f64>> {
    let ball = seq.ball();
    seq.frames
        .iter()
        .map(|f| {
            let s = f[agent];
            let mut x = vec![s.position[0], s.position[1], s.velocity[0], s.velocity[1]];
            if ball_relative {
                let b = f[ball].position;
                x.extend([s.position[0] - b[0], s.position[1] - b[1]]);
            }
            x
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point seeding followed by a few Lloyd iterations.
fn initial_means(points: &[&[f64]], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let n = points.len() as f64;
    let centroid: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let pick_farthest = |from: &dyn Fn(&[f64]) -> f64| {
        points
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                let d = from(p);
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            })
            .0
    };
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    if k == 1 {
        return vec![centroid];
    }
    means.push(points[pick_farthest(&|p| sq_dist(p, &centroid))].to_vec());
    while means.len() < k {
        let i = pick_farthest(&|p| means.iter().map(|m| sq_dist(p, m)).fold(f64::INFINITY, f64::min));
        means.push(points[i].to_vec());
    }
    for _ in 0..10 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = (0..k).min_by(|&a, &b| sq_dist(p, &means[a]).total_cmp(&sq_dist(p, &means[b]))).unwrap();
            counts[j] += 1;
            sums[j].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                means[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    means
}

struct Accumulator {
    initial: Vec<f64>,
    trans: Vec<Vec<f64>>,
    weight: Vec<f64>,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
    log_likelihood: f64,
}

/// Scaled forward-backward over one sequence, accumulating sufficient
/// statistics.
fn e_step(model: &RoleModel, seq: &[Vec<f64>], acc: &mut Accumulator) {
    let k = model.n_roles();
    let t_len = seq.len();
    let mut emit = vec![vec![0.0; k]; t_len];
    for (t, x) in seq.iter().enumerate() {
        let logs: Vec<f64> = (0..k).map(|r| model.log_density(r, x)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        acc.log_likelihood += max;
        for r in 0..k {
            emit[t][r] = (logs[r] - max).exp();
        }
    }
    let mut alpha = vec![vec![0.0; k]; t_len];
    let mut scale = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..k {
            let prior = if t == 0 {
                model.initial[j]
            } else {
                (0..k).map(|i| alpha[t - 1][i] * model.transition[i][j]).sum()
            };
            alpha[t][j] = prior * emit[t][j];
        }
        scale[t] = alpha[t].iter().sum::<f64>().max(f64::MIN_POSITIVE);
        alpha[t].iter_mut().for_each(|a| *a /= scale[t]);
        acc.log_likelihood += scale[t].ln();
    }
    let mut beta = vec![vec![1.0; k]; t_len];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..k {
            beta[t][i] = (0..k).map(|j| model.transition[i][j] * emit[t + 1][j] * beta[t + 1][j]).sum::<f64>() / scale[t + 1];
        }
    }
    for t in 0..t_len {
        let gamma: Vec<f64> = (0..k).map(|i| alpha[t][i] * beta[t][i]).collect();
        let norm: f64 = gamma.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        for i in 0..k {
            let g = gamma[i] / norm;
            if t == 0 {
                acc.initial[i] += g;
            }
            acc.weight[i] += g;
            for (d, &x) in seq[t].iter().enumerate() {
                acc.sum[i][d] += g * x;
                acc.sum_sq[i][d] += g * x * x;
            }
        }
        if t + 1 < t_len {
            for i in 0..k {
                for j in 0..k {
                    acc.trans[i][j] +=
                        alpha[t][i] * model.transition[i][j] * emit[t + 1][j] * beta[t + 1][j] / scale[t + 1];
                }
            }
        }
    }
}

fn accumulate(model: &RoleModel, sequences: &[Vec<Vec<f64>>]) -> Accumulator {
    let k = model.n_roles();
    let dim = model.dim();
    let mut acc = Accumulator {
        initial: vec![0.0; k],
        trans: vec![vec![0.0; k]; k],
        weight: vec![0.0; k],
        sum: vec![vec![0.0; dim]; k],
        sum_sq: vec![vec![0.0; dim]; k],
        log_likelihood: 0.0,
    };
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        e_step(model, seq, &mut acc);
    }
    acc
}

fn m_step(model: &mut RoleModel, acc: &Accumulator) {
    let k = model.n_roles();
    let total_initial: f64 = acc.initial.iter().sum();
    if total_initial > 0.0 {
        model.initial = acc.initial.iter().map(|x| x / total_initial).collect();
    }
    for i in 0..k {
        let row: f64 = acc.trans[i].iter().sum();
        if row > 0.0 {
            model.transition[i] = acc.trans[i].iter().map(|x| x / row).collect();
        }
        let w = acc.weight[i];
        if w > 1e-12 {
            for d in 0..model.dim() {
                let mean = acc.sum[i][d] / w;
                let var = (acc.sum_sq[i][d] / w - mean * mean).max(model.variance_floor);
                model.means[i][d] = mean;
                model.variances[i][d] = var;
            }
        }
    }
}

/// Baum-Welch over a set of feature sequences until the log-likelihood
/// improvement falls below `tol` or `max_iters` is reached.
pub fn fit_role_hmm(sequences: &[Vec<Vec<f64>>], n_roles: usize, options: HmmOptions) -> Result<HmmFit> {
    if n_roles == 0 {
        return Err(Error::arg("n_roles must be ≥ 1"));
    }
    let points: Vec<&[f64]> = sequences.iter().flatten().map(Vec::as_slice).collect();
    if points.is_empty() {
        return Err(Error::arg("no feature vectors to fit"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::arg("features must be finite and of equal dimension"));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..dim)
        .map(|d| (points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).max(options.variance_floor))
        .collect();
    let mut model = RoleModel {
        version: ROLE_MODEL_VERSION,
        initial: vec![1.0 / n_roles as f64; n_roles],
        transition: vec![vec![1.0 / n_roles as f64; n_roles]; n_roles],
        means: initial_means(&points, n_roles),
        variances: vec![var; n_roles],
        variance_floor: options.variance_floor,
        ball_relative: false,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..options.max_iters {
        let acc = accumulate(&model, sequences);
        if let Some(&prev) = trace.last() {
            if acc.log_likelihood - prev < options.tol {
                trace.push(acc.log_likelihood);
                converged = true;
                break;
            }
        }
        trace.push(acc.log_likelihood);
        m_step(&mut model, &acc);
    }
    if !converged {
        trace.push(accumulate(&model, sequences).log_likelihood);
    }
    let degenerate: Vec<usize> = (0..n_roles)
        .filter(|&r| model.variances[r].iter().all(|&v| v <= options.variance_floor))
        .collect();
    for r in &degenerate {
        log::warn!("role {r} collapsed: variance at floor on every dimension");
    }
    Ok(HmmFit { model, log_likelihood: trace, converged, degenerate })
}

/// `cost[k][r] = Σ_t −log N(x_{k,t}; role r)`, each term clamped to
/// [`NLL_CEILING`].
pub fn role_cost(players: &[Vec<Vec<f64>>], model: &RoleModel) -> Vec<Vec<f64>> {
    players
        .iter()
        .map(|track| {
            (0..model.n_roles())
                .map(|r| track.iter().map(|x| (-model.log_density(r, x)).min(NLL_CEILING)).sum())
                .collect()
        })
        .collect()
}

/// Mapping defender slot → role index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePermutation(pub Vec<usize>);

impl RolePermutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &r in &map {
            if r >= map.len() || std::mem::replace(&mut seen[r], true) {
                return Err(Error::arg(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Self(map))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (k, &r) in self.0.iter().enumerate() {
            inv[r] = k;
        }
        Self(inv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub permutation: RolePermutation,
    pub total: f64,
}

/// Shortest-augmenting-path Hungarian algorithm; returns row → column.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect();
    hungarian(&sub).iter().enumerate().map(|(i, &j)| sub[i][j]).sum()
}

/// Minimum-cost perfect matching. Among optimal matchings the
/// lexicographically smallest permutation is returned.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::arg("cost matrix must be square"));
    }
    if cost.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::arg("cost matrix must be finite"));
    }
    let scale = cost.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;
    let mut remaining_cols: Vec<usize> = (0..n).collect();
    let mut target = optimum(cost, &(0..n).collect::<Vec<_>>(), &remaining_cols);
    let total = target;
    let mut map = Vec::with_capacity(n);
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (idx, &col) in remaining_cols.iter().enumerate() {
            let cols: Vec<usize> = remaining_cols.iter().copied().filter(|&c| c != col).collect();
            let value = cost[row][col] + optimum(cost, &rest_rows, &cols);
            if value <= target + tol {
                chosen = Some((idx, col, value - cost[row][col]));
                break;
            }
        }
        let (idx, col, rest) = chosen.expect("an optimal completion exists");
        map.push(col);
        remaining_cols.remove(idx);
        target = rest;
    }
    Ok(Assignment { permutation: RolePermutation(map), total })
}

/// Reorders defender slots so that the defender in slot `k` moves to slot
/// `permutation[k]`. Offense and ball are untouched.
pub fn reindex(seq: &PlaySequence, permutation: &RolePermutation) -> Result<PlaySequence> {
    let defenders = seq.defenders();
    if permutation.len() != defenders.len() {
        return Err(Error::arg(format!(
            "permutation of length {} for {} defenders",
            permutation.len(),
            defenders.len()
        )));
    }
    RolePermutation::new(permutation.0.clone())?;
    let mut out = seq.clone();
    for (k, &r) in permutation.0.iter().enumerate() {
        let (from, to) = (defenders[k], defenders[r]);
        out.agents[to] = seq.agents[from].clone();
        for (dst, src) in out.frames.iter_mut().zip(&seq.frames) {
            dst[to] = src[from];
        }
    }
    let composed = match &seq.role_permutation {
        Some(prev) => prev.iter().map(|&p| permutation.0[p]).collect(),
        None => permutation.0.clone(),
    };
    out.role_permutation = Some(composed);
    Ok(out)
}

/// How the assignment cost is aggregated over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentMode {
    /// One permutation per sequence from costs summed over time.
    #[default]
    PerSequence,
    /// One permutation per frame.
    PerTimestep,
}

fn defender_features(seq: &PlaySequence, model: &RoleModel) -> Vec<Vec<Vec<f64>>> {
    seq.defenders().into_iter().map(|k| role_features(seq, k, model.ball_relative)).collect()
}

/// Per-sequence assignment followed by reindexing.
pub fn assign_roles(seq: &PlaySequence, model: &RoleModel) -> Result<PlaySequence> {
    let cost = role_cost(&defender_features(seq, model), model);
    let assignment = solve_assignment(&cost)?;
    reindex(seq, &assignment.permutation)
}

/// Per-frame assignment; returns the reindexed sequence and the permutation
/// chosen at every frame. Kinematics stay attached to the original tracks.
pub fn assign_roles_per_timestep(seq: &PlaySequence, model: &RoleModel) -> Result<(PlaySequence, Vec<RolePermutation>)> {
    let features = defender_features(seq, model);
    let defenders = seq.defenders();
    let mut out = seq.clone();
    let mut perms = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let frame_features: Vec<Vec<Vec<f64>>> = features.iter().map(|f| vec![f[t].clone()]).collect();
        let assignment = solve_assignment(&role_cost(&frame_features, model))?;
        for (k, &r) in assignment.permutation.0.iter().enumerate() {
            out.frames[t][defenders[r]] = seq.frames[t][defenders[k]];
        }
        perms.push(assignment.permutation);
    }
    Ok((out, perms))
}

/// Fits the role model on the defenders of `sequences`.
pub fn fit_on_defenders(sequences: &[PlaySequence], options: HmmOptions, ball_relative: bool) -> Result<HmmFit> {
    let n_roles = sequences.first().map_or(0, |s| s.defenders().len());
    let feats: Vec<Vec<Vec<f64>>> = sequences
        .iter()
        .flat_map(|s| s.defenders().into_iter().map(move |k| role_features(s, k, ball_relative)))
        .collect();
    let mut fit = fit_role_hmm(&feats, n_roles, options)?;
    fit.model.ball_relative = ball_relative;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        permutations(cost.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn identity_for_off_diagonal_cost() {
        let cost: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        let a = solve_assignment(&cost).unwrap();
        assert_eq!(a.permutation, RolePermutation::identity(4));
        assert_eq!(a.total, 0.0);
    }

    #[test]
    fn three_by_three_matches_enumeration() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(brute_force(&cost), 5.0);
        let a = solve_assignment(&cost).unwrap();
        assert_eq!(a.permutation.0, vec![1, 0, 2]);
        assert_eq!(a.total, 5.0);
    }

    #[test]
    fn zero_pattern_recovers_permutation() {
        for p in permutations(4) {
            let cost: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if p[i] == j { 0.0 } else { 3.0 }).collect()).collect();
            let a = solve_assignment(&cost).unwrap();
            assert_eq!(a.permutation.0, p);
            assert_eq!(a.total, 0.0);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        let cost = vec![vec![1.0; 3]; 3];
        assert_eq!(solve_assignment(&cost).unwrap().permutation, RolePermutation::identity(3));
    }

    #[test]
    fn non_square_rejected() {
        assert!(solve_assignment(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn random_costs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=6 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
                let a = solve_assignment(&cost).unwrap();
                let total: f64 = a.permutation.0.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                assert!((total - brute_force(&cost)).abs() < 1e-9);
                assert!((a.total - total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_state_is_a_gaussian_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..50).map(|_| vec![rng.gen_range(-1.0..3.0), rng.sample::<f64, _>(StandardNormal) * 2.0]).collect())
            .collect();
        let fit = fit_role_hmm(&seqs, 1, HmmOptions::default()).unwrap();
        let pts: Vec<&Vec<f64>> = seqs.iter().flatten().collect();
        let n = pts.len() as f64;
        for d in 0..2 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = pts.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((fit.model.means[0][d] - mean).abs() < 1e-9);
            assert!((fit.model.variances[0][d] - var).abs() < 1e-9);
        }
        assert!((fit.model.transition[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_matches_closed_form_nll() {
        let model = RoleModel {
            version: ROLE_MODEL_VERSION,
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.5, 0.5]; 2],
            means: vec![vec![0.0], vec![2.0]],
            variances: vec![vec![1.0], vec![4.0]],
            variance_floor: 1e-4,
            ball_relative: false,
        };
        let players = vec![vec![vec![0.0], vec![1.0]], vec![vec![2.0], vec![2.0]]];
        let cost = role_cost(&players, &model);
        let half_ln_2pi = 0.5 * LN_2PI;
        // player 0 under role 0: x=0 → ½ln2π ; x=1 → ½ln2π + ½
        assert!((cost[0][0] - (2.0 * half_ln_2pi + 0.5)).abs() < 1e-12);
        // player 0 under role 1 (σ=2): x=0 → ½ln2π + ln2 + ½ ; x=1 → ½ln2π + ln2 + 1/8
        assert!((cost[0][1] - (2.0 * half_ln_2pi + 2.0 * 2f64.ln() + 0.625)).abs() < 1e-12);
        assert!((cost[1][1] - 2.0 * (half_ln_2pi + 2f64.ln())).abs() < 1e-12);
        assert!((cost[1][0] - 2.0 * (half_ln_2pi + 2.0)).abs() < 1e-12);
        // a player exactly at a role mean is the row minimum there
        assert!(cost[1][1] < cost[1][0]);
        let same = role_cost(&[players[0].clone(), players[0].clone()], &model);
        assert_eq!(same[0], same[1]);
    }

    #[test]
    fn permutation_validation_and_inverse() {
        assert!(RolePermutation::new(vec![0, 0, 1]).is_err());
        let p = RolePermutation::new(vec![2, 0, 1]).unwrap();
        let q = p.inverse();
        for k in 0..3 {
            assert_eq!(q.0[p.0[k]], k);
        }
    }

    #[test]
    fn role_model_json_roundtrip() {
        let fit = fit_role_hmm(&[vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![5.0, 5.0]]], 2, HmmOptions::default()).unwrap();
        let back = RoleModel::from_json(&fit.model.to_json().unwrap()).unwrap();
        assert_eq!(back, fit.model);
    }
}
