//! Rollout metrics: mean and best-of-N L2 per kinematic dimension,
//! acceleration and jerk distributions, observation-gate statistics and the
//! constant-velocity baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, PolicyModel, RolloutOptions, RolloutResult};
use crate::trajectory::{PlaySequence, Vec2};

pub const DIMENSIONS: [&str; 3] = ["pos", "vel", "acc"];

/// Kinematics of `K` agents over `T` frames, indexed `[frame][agent]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub positions: Vec<Vec<Vec2>>,
    pub velocities: Vec<Vec<Vec2>>,
    pub accelerations: Vec<Vec<Vec2>>,
}

impl Track {
    /// Ground truth of `slots` in `window`.
    pub fn from_window(window: &PlaySequence, slots: &[usize]) -> Self {
        let pick = |f: fn(&crate::trajectory::AgentState) -> Vec2| {
            window.frames.iter().map(|fr| slots.iter().map(|&k| f(&fr[k])).collect()).collect()
        };
        Self { positions: pick(|s| s.position), velocities: pick(|s| s.velocity), accelerations: pick(|s| s.acceleration) }
    }

    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    /// Frames `start..` of every dimension.
    pub fn tail(&self, start: usize) -> Self {
        Self {
            positions: self.positions[start..].to_vec(),
            velocities: self.velocities[start..].to_vec(),
            accelerations: self.accelerations[start..].to_vec(),
        }
    }

    fn dim(&self, m: usize) -> &Vec<Vec<Vec2>> {
        match m {
            0 => &self.positions,
            1 => &self.velocities,
            _ => &self.accelerations,
        }
    }
}

/// Sample `s` of a rollout as a track.
pub fn rollout_track(result: &RolloutResult, s: usize) -> Track {
    Track {
        positions: result.positions[s].clone(),
        velocities: result.velocities[s].clone(),
        accelerations: result.accelerations[s].clone(),
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(1/(T·K)) Σ_t Σ_k ‖pred − truth‖` for dimension `m`.
pub fn sample_l2(pred: &Track, truth: &Track, m: usize) -> Result<f64> {
    let (p, t) = (pred.dim(m), truth.dim(m));
    if p.len() != t.len() || p.is_empty() || p.iter().zip(t).any(|(a, b)| a.len() != b.len() || a.is_empty()) {
        return Err(Error::arg("prediction and truth shapes differ"));
    }
    let count = (p.len() * p[0].len()) as f64;
    Ok(p.iter().zip(t).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| dist(*x, *y))).sum::<f64>() / count)
}

/// Mean and best L2 over the samples of one sequence, per dimension
/// (`[pos, vel, acc]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceL2 {
    pub per_sample: Vec<[f64; 3]>,
    pub mean: [f64; 3],
    pub best: [f64; 3],
}

pub fn l2_metrics(samples: &[Track], truth: &Track) -> Result<SequenceL2> {
    if samples.is_empty() {
        return Err(Error::arg("need at least one sample"));
    }
    let per_sample = samples
        .iter()
        .map(|s| Ok([sample_l2(s, truth, 0)?, sample_l2(s, truth, 1)?, sample_l2(s, truth, 2)?]))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let mean = std::array::from_fn(|m| per_sample.iter().map(|v| v[m]).sum::<f64>() / n);
    let best = std::array::from_fn(|m| per_sample.iter().map(|v| v[m]).fold(f64::INFINITY, f64::min));
    Ok(SequenceL2 { per_sample, mean, best })
}

/// L2 metrics of the generated frames of a rollout against its window.
pub fn rollout_l2(result: &RolloutResult, window: &PlaySequence) -> Result<SequenceL2> {
    let truth = Track::from_window(window, &result.slots);
    let frames = result.frames();
    let truth = Track {
        positions: truth.positions[..frames].to_vec(),
        velocities: truth.velocities[..frames].to_vec(),
        accelerations: truth.accelerations[..frames].to_vec(),
    }
    .tail(result.burn_in);
    let samples: Vec<Track> = (0..result.samples()).map(|s| rollout_track(result, s).tail(result.burn_in)).collect();
    l2_metrics(&samples, &truth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (zero for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, sd }
    }
}

/// Box-plot summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1,
            median: quantile(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            whisker_low: v.iter().copied().find(|&x| x >= lo).unwrap_or(v[0]),
            whisker_high: v.iter().rev().copied().find(|&x| x <= hi).unwrap_or(v[v.len() - 1]),
        }
    }
}

/// Distributions of `‖acc_t‖` and `‖acc_t − acc_{t−1}‖`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccelStats {
    pub acc_norm: Distribution,
    pub jerk_norm: Distribution,
}

pub fn acceleration_norms(tracks: &[Track]) -> (Vec<f64>, Vec<f64>) {
    let mut acc = Vec::new();
    let mut jerk = Vec::new();
    for tr in tracks {
        for (t, frame) in tr.accelerations.iter().enumerate() {
            for (k, a) in frame.iter().enumerate() {
                acc.push(a[0].hypot(a[1]));
                if t > 0 {
                    jerk.push(dist(*a, tr.accelerations[t - 1][k]));
                }
            }
        }
    }
    (acc, jerk)
}

pub fn accel_stats(tracks: &[Track]) -> AccelStats {
    let (acc, jerk) = acceleration_norms(tracks);
    AccelStats { acc_norm: Distribution::of(&acc), jerk_norm: Distribution::of(&jerk) }
}

/// Gate statistics for one defender at one frame: the gate count, and for
/// steps observing at least one other agent, the distance to the farthest
/// observed agent and to the same-order nearest agent.
pub fn observation_step(gate: &[f64], positions: &[Vec2], self_slot: usize) -> (f64, Option<(f64, f64)>) {
    let count: f64 = gate.iter().sum();
    let me = positions[self_slot];
    let observed: Vec<f64> = (0..gate.len()).filter(|&j| j != self_slot && gate[j] > 0.5).map(|j| dist(me, positions[j])).collect();
    if observed.is_empty() {
        return (count, None);
    }
    let farthest = observed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut others: Vec<f64> = (0..positions.len()).filter(|&j| j != self_slot).map(|j| dist(me, positions[j])).collect();
    others.sort_by(f64::total_cmp);
    (count, Some((farthest, others[observed.len() - 1])))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationStats {
    pub gate_count: MeanSd,
    pub farthest_observed: MeanSd,
    pub same_order_nearest: MeanSd,
    /// Mean gate value per agent slot.
    pub mean_coefficient: Vec<f64>,
    /// Mean gate value per modelled role and agent slot.
    pub role_coefficients: Vec<Vec<f64>>,
}

/// Per-sequence means of the gate statistics, aggregated as mean ± sd over
/// sequences.
pub fn observation_stats(results: &[RolloutResult]) -> ObservationStats {
    let mut counts = Vec::new();
    let mut far = Vec::new();
    let mut near = Vec::new();
    let mut coef_sum: Vec<f64> = Vec::new();
    let mut coef_n: f64 = 0.0;
    let mut role_sum: Vec<Vec<f64>> = Vec::new();
    let mut role_n: Vec<f64> = Vec::new();
    for r in results {
        let (mut c, mut f, mut n, mut steps, mut dsteps) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in 0..r.samples() {
            for (t, frame) in r.gates[s].iter().enumerate() {
                for (role, gate) in frame.iter().enumerate() {
                    if coef_sum.len() < gate.len() {
                        coef_sum.resize(gate.len(), 0.0);
                    }
                    coef_sum.iter_mut().zip(gate).for_each(|(a, g)| *a += g);
                    coef_n += 1.0;
                    if role_sum.len() <= role {
                        role_sum.resize(role + 1, vec![0.0; gate.len()]);
                        role_n.resize(role + 1, 0.0);
                    }
                    role_sum[role].iter_mut().zip(gate).for_each(|(a, g)| *a += g);
                    role_n[role] += 1.0;
                    let (count, d) = observation_step(gate, &r.scene[s][t], r.slots[role]);
                    c += count;
                    steps += 1.0;
                    if let Some((fa, ne)) = d {
                        f += fa;
                        n += ne;
                        dsteps += 1.0;
                    }
                }
            }
        }
        if steps > 0.0 {
            counts.push(c / steps);
        }
        if dsteps > 0.0 {
            far.push(f / dsteps);
            near.push(n / dsteps);
        }
    }
    ObservationStats {
        gate_count: MeanSd::of(&counts),
        farthest_observed: MeanSd::of(&far),
        same_order_nearest: MeanSd::of(&near),
        mean_coefficient: coef_sum.into_iter().map(|x| x / coef_n.max(1.0)).collect(),
        role_coefficients: role_sum
            .into_iter()
            .zip(role_n)
            .map(|(row, n)| row.into_iter().map(|x| x / n.max(1.0)).collect())
            .collect(),
    }
}

/// Constant last-observed velocity from frame `burn_in − 1` on; positions
/// integrated, acceleration zero.
pub fn velocity_baseline(window: &PlaySequence, slots: &[usize], burn_in: usize, horizon: usize) -> Result<Track> {
    if burn_in < 2 {
        return Err(Error::arg("velocity baseline needs burn_in ≥ 2"));
    }
    if burn_in + horizon > window.len() {
        return Err(Error::arg("burn-in + horizon exceeds window length"));
    }
    let mut track = Track::from_window(window, slots);
    track.positions.truncate(burn_in + horizon);
    track.velocities.truncate(burn_in + horizon);
    track.accelerations.truncate(burn_in + horizon);
    let dt = window.dt();
    for t in burn_in..burn_in + horizon {
        for k in 0..slots.len() {
            let v = track.velocities[burn_in - 1][k];
            let p = track.positions[t - 1][k];
            track.positions[t][k] = [p[0] + v[0] * dt, p[1] + v[1] * dt];
            track.velocities[t][k] = v;
            track.accelerations[t][k] = [0.0, 0.0];
        }
    }
    Ok(track)
}

/// Aggregated L2 over test sequences, `[pos, vel, acc]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct L2Summary {
    pub mean: [MeanSd; 3],
    pub best: [MeanSd; 3],
}

impl L2Summary {
    pub fn of(sequences: &[SequenceL2]) -> Self {
        let col = |f: &dyn Fn(&SequenceL2) -> f64| MeanSd::of(&sequences.iter().map(f).collect::<Vec<_>>());
        Self {
            mean: std::array::from_fn(|m| col(&|s| s.mean[m])),
            best: std::array::from_fn(|m| col(&|s| s.best[m])),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub sequences: usize,
    pub samples: usize,
    pub l2: L2Summary,
    pub per_sequence: Vec<SequenceL2>,
    pub accel: AccelStats,
    pub observation: Option<ObservationStats>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table: one row per model, mean then best L2 per dimension.
    pub fn table(reports: &[MetricReport]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} | {:>13} {:>13} {:>13} | {:>13} {:>13} {:>13}",
            "model", "mean pos", "mean vel", "mean acc", "best pos", "best vel", "best acc"
        );
        let _ = writeln!(out, "{}", "-".repeat(16 + 3 + 3 * 14 + 3 + 3 * 14));
        for r in reports {
            let cell = |m: &MeanSd| format!("{:.2} ± {:.2}", m.mean, m.sd);
            let _ = writeln!(
                out,
                "{:<16} | {:>13} {:>13} {:>13} | {:>13} {:>13} {:>13}",
                r.model,
                cell(&r.l2.mean[0]),
                cell(&r.l2.mean[1]),
                cell(&r.l2.mean[2]),
                cell(&r.l2.best[0]),
                cell(&r.l2.best[1]),
                cell(&r.l2.best[2])
            );
        }
        out
    }
}

/// Rolls the team out on every window and collects the report together
/// with the raw rollouts.
pub fn evaluate_team(name: &str, team: &[PolicyModel], windows: &[PlaySequence], options: &RolloutOptions) -> Result<(MetricReport, Vec<RolloutResult>)> {
    let mut per_sequence = Vec::with_capacity(windows.len());
    let mut tracks = Vec::new();
    let mut results = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let opts = RolloutOptions { seed: crate::nn::mix_seed(options.seed, i as u64), ..options.clone() };
        let r = policy::rollout(team, w, &opts)?;
        per_sequence.push(rollout_l2(&r, w)?);
        tracks.extend((0..r.samples()).map(|s| rollout_track(&r, s).tail(r.burn_in)));
        results.push(r);
    }
    let report = MetricReport {
        model: name.into(),
        sequences: windows.len(),
        samples: options.samples,
        l2: L2Summary::of(&per_sequence),
        per_sequence,
        accel: accel_stats(&tracks),
        observation: Some(observation_stats(&results)),
    };
    Ok((report, results))
}

/// Report for the constant-velocity baseline (a single deterministic
/// sample).
pub fn evaluate_velocity_baseline(windows: &[PlaySequence], slots: &[usize], burn_in: usize, horizon: usize) -> Result<MetricReport> {
    let mut per_sequence = Vec::with_capacity(windows.len());
    let mut tracks = Vec::new();
    for w in windows {
        let pred = velocity_baseline(w, slots, burn_in, horizon)?.tail(burn_in);
        let mut truth = Track::from_window(w, slots).tail(burn_in);
        truth.positions.truncate(horizon);
        truth.velocities.truncate(horizon);
        truth.accelerations.truncate(horizon);
        per_sequence.push(l2_metrics(std::slice::from_ref(&pred), &truth)?);
        tracks.push(pred);
    }
    Ok(MetricReport {
        model: "velocity".into(),
        sequences: windows.len(),
        samples: 1,
        l2: L2Summary::of(&per_sequence),
        per_sequence,
        accel: accel_stats(&tracks),
        observation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{AgentInfo, Role, Sport};
    use approx::assert_abs_diff_eq;

    fn track(positions: Vec<Vec<Vec2>>) -> Track {
        let zeros: Vec<Vec<Vec2>> = positions.iter().map(|f| vec![[0.0, 0.0]; f.len()]).collect();
        Track { positions, velocities: zeros.clone(), accelerations: zeros }
    }

    fn agents(n: usize) -> Vec<AgentInfo> {
        let mut a: Vec<AgentInfo> = (0..n - 1).map(|i| AgentInfo { id: format!("p{i}"), role: Role::Defense }).collect();
        a.push(AgentInfo { id: "ball".into(), role: Role::Ball });
        a
    }

    #[test]
    fn uniform_offset_gives_offset() {
        let truth = track((0..7).map(|t| vec![[t as f64, 1.0], [2.0, -(t as f64)]]).collect());
        let mut pred = truth.clone();
        let d = 0.37;
        let dir = [0.6, 0.8];
        for frame in &mut pred.positions {
            for p in frame {
                p[0] += d * dir[0];
                p[1] += d * dir[1];
            }
        }
        assert_abs_diff_eq!(sample_l2(&pred, &truth, 0).unwrap(), d, epsilon = 1e-12);
        let m = l2_metrics(&[truth.clone()], &truth).unwrap();
        assert_eq!(m.mean, [0.0; 3]);
        assert_eq!(m.best, [0.0; 3]);
    }

    #[test]
    fn best_of_three_by_hand() {
        // one agent, two frames; errors per frame (1, 1), (0, 2), (3, 0)
        let truth = track(vec![vec![[0.0, 0.0]], vec![[0.0, 0.0]]]);
        let a = track(vec![vec![[1.0, 0.0]], vec![[0.0, 1.0]]]);
        let b = track(vec![vec![[0.0, 0.0]], vec![[0.0, 2.0]]]);
        let c = track(vec![vec![[3.0, 0.0]], vec![[0.0, 0.0]]]);
        let m = l2_metrics(&[a, b, c], &truth).unwrap();
        let per: Vec<f64> = m.per_sample.iter().map(|v| v[0]).collect();
        assert_eq!(per, vec![1.0, 1.0, 1.5]);
        assert_eq!(m.best[0], 1.0);
        assert_abs_diff_eq!(m.mean[0], 3.5 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = track(vec![vec![[0.0, 0.0]]]);
        let b = track(vec![vec![[0.0, 0.0]], vec![[0.0, 0.0]]]);
        assert!(sample_l2(&a, &b, 0).is_err());
        assert!(l2_metrics(&[], &a).is_err());
    }

    #[test]
    fn mean_sd_and_quantiles() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m.mean, 2.5);
        assert_abs_diff_eq!(m.sd, (5.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        let d = Distribution::of(&[4.0, 1.0, 3.0, 2.0, 100.0]);
        assert_eq!((d.q1, d.median, d.q3), (2.0, 3.0, 4.0));
        assert_eq!(d.whisker_high, 4.0);
        assert_eq!(d.max, 100.0);
    }

    #[test]
    fn constant_velocity_has_zero_norms() {
        let s = accel_stats(&[track(vec![vec![[0.0, 0.0]]; 5])]);
        assert_eq!(s.acc_norm.max, 0.0);
        assert_eq!(s.jerk_norm.max, 0.0);
    }

    #[test]
    fn sinusoid_norms_match_derivatives() {
        // x = A sin(ωt): |a| = Aω²|sin ωt|, |Δa| ≈ Aω³|cos ωt| dt
        let (amp, w, dt) = (2.0, 1.3, 0.01);
        let n = 2000;
        let acc: Vec<Vec<Vec2>> = (0..n).map(|i| vec![[-amp * w * w * (w * i as f64 * dt).sin(), 0.0]]).collect();
        let tr = Track { positions: acc.clone(), velocities: acc.clone(), accelerations: acc };
        let (a, j) = acceleration_norms(&[tr]);
        for (i, v) in a.iter().enumerate() {
            assert_abs_diff_eq!(*v, amp * w * w * (w * i as f64 * dt).sin().abs(), epsilon = 1e-12);
        }
        for (i, v) in j.iter().enumerate() {
            let mid = w * (i as f64 + 0.5) * dt;
            assert_abs_diff_eq!(*v, amp * w.powi(3) * mid.cos().abs() * dt, epsilon = 1e-6);
        }
        let s = accel_stats(&[Track { positions: vec![], velocities: vec![], accelerations: vec![] }]);
        assert_eq!(s.acc_norm.count, 0);
    }

    #[test]
    fn observation_geometry_by_hand() {
        // self at the origin, agents at distances 1, 2, 3 along the axes
        let positions = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]];
        let (count, d) = observation_step(&[0.0, 1.0, 0.0, 1.0], &positions, 0);
        assert_eq!(count, 2.0);
        assert_eq!(d, Some((3.0, 2.0)));
        let (count, d) = observation_step(&[1.0, 0.0, 1.0, 0.0], &positions, 0);
        assert_eq!(count, 2.0);
        assert_eq!(d, Some((2.0, 1.0)));
        assert_eq!(observation_step(&[1.0, 0.0, 0.0, 0.0], &positions, 0), (1.0, None));
        assert_eq!(observation_step(&[1.0; 4], &positions, 0).0, 4.0);
    }

    #[test]
    fn velocity_baseline_on_constant_velocity() {
        let positions: Vec<Vec<Vec2>> = (0..30).map(|t| vec![[0.1 * t as f64, 1.0], [3.0, 3.0]]).collect();
        let w = PlaySequence::from_positions("cv", Sport::Basketball, 10, agents(2), &positions).unwrap();
        let pred = velocity_baseline(&w, &[0, 1], 10, 20).unwrap();
        for t in 10..30 {
            assert_abs_diff_eq!(pred.positions[t][0][0], 0.1 * t as f64, epsilon = 1e-9);
            assert_eq!(pred.positions[t][1], [3.0, 3.0]);
        }
        let r = evaluate_velocity_baseline(&[w.clone()], &[0, 1], 10, 20).unwrap();
        assert!(r.l2.best[0].mean < 1e-9);
        assert!(velocity_baseline(&w, &[0], 1, 5).is_err());
        assert!(velocity_baseline(&w, &[0], 10, 21).is_err());
    }
}
