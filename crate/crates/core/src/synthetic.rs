//! Synthetic multi-agent scenarios with minimum-jerk motion and a planted
//! observation structure.
//!
//! Attackers and the ball chain minimum-jerk segments between random
//! waypoints. Each defender chains minimum-jerk segments towards the midpoint
//! between its designated attacker and the ball, evaluated when the segment
//! starts. The planted observation mask of a defender covers exactly its
//! designated attacker, the ball and itself.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mix_seed;
use crate::trajectory::{AgentInfo, Court, Dataset, PlaySequence, Role, Split, Sport, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sport: Sport,
    pub n_defenders: usize,
    pub n_attackers: usize,
    pub court: Court,
    pub n_frames: usize,
    pub sample_rate: u32,
    /// Segment duration range in seconds.
    pub segment_duration: (f64, f64),
    /// Attacker pause range at waypoints, in seconds.
    pub pause_duration: (f64, f64),
    /// Defender `d` tracks attacker `tracking[d]` (attacker index, not slot).
    pub tracking: Vec<usize>,
    /// Standard deviation of additive position noise in meters.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            sport: Sport::Basketball,
            n_defenders: 5,
            n_attackers: 5,
            court: Court::new([0.0, 0.0], [14.0, 15.0]),
            n_frames: 80,
            sample_rate: 10,
            segment_duration: (1.0, 2.5),
            pause_duration: (0.0, 1.0),
            tracking: (0..5).collect(),
            noise: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate as f64
    }

    pub fn n_agents(&self) -> usize {
        self.n_defenders + self.n_attackers + 1
    }

    pub fn attacker_slot(&self, attacker: usize) -> usize {
        self.n_defenders + attacker
    }

    pub fn ball_slot(&self) -> usize {
        self.n_defenders + self.n_attackers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.n_attackers == 0 {
            return bad("need at least one attacker".into());
        }
        if self.tracking.len() != self.n_defenders {
            return bad(format!("tracking map has {} entries for {} defenders", self.tracking.len(), self.n_defenders));
        }
        if let Some(a) = self.tracking.iter().find(|&&a| a >= self.n_attackers) {
            return bad(format!("tracking target {a} out of range"));
        }
        let (lo, hi) = self.segment_duration;
        if !(lo > 0.0 && hi >= lo) || lo < 2.0 * self.dt() {
            return bad(format!("segment duration range ({lo}, {hi}) must satisfy 2·dt ≤ lo ≤ hi"));
        }
        let (plo, phi) = self.pause_duration;
        if !(plo >= 0.0 && phi >= plo) {
            return bad(format!("invalid pause range ({plo}, {phi})"));
        }
        if self.n_frames < 3 || self.sample_rate == 0 || self.noise < 0.0 {
            return bad("need n_frames ≥ 3, sample_rate > 0 and noise ≥ 0".into());
        }
        if !(self.court.max[0] > self.court.min[0] && self.court.max[1] > self.court.min[1]) {
            return bad("empty court".into());
        }
        Ok(())
    }

    /// Upper bound on the jerk norm of noiseless trajectories:
    /// `60 · diagonal / T_min³`.
    pub fn jerk_bound(&self) -> f64 {
        let d = [self.court.max[0] - self.court.min[0], self.court.max[1] - self.court.min[1]];
        60.0 * (d[0] * d[0] + d[1] * d[1]).sqrt() / self.segment_duration.0.powi(3)
    }
}

/// Minimum-jerk blend `10τ³ − 15τ⁴ + 6τ⁵`.
pub fn min_jerk_profile(tau: f64) -> f64 {
    tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau))
}

/// Minimum-jerk positions from `x0` to `xf` over `duration` seconds, sampled
/// at `n + 1` equally spaced instants where `n = round(duration / dt)`.
pub fn min_jerk_segment(x0: Vec2, xf: Vec2, duration: f64, dt: f64) -> Result<Vec<Vec2>> {
    if !(dt > 0.0) || !(duration >= 2.0 * dt) {
        return Err(Error::arg(format!("duration {duration} must be at least 2·dt ({dt})")));
    }
    let n = (duration / dt).round() as usize;
    Ok((0..=n)
        .map(|k| {
            let s = min_jerk_profile(k as f64 / n as f64);
            [x0[0] + (xf[0] - x0[0]) * s, x0[1] + (xf[1] - x0[1]) * s]
        })
        .collect())
}

/// Planted observation mask: one row of length `K_total` per defender.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    pub agents: Vec<String>,
    pub tracking: Vec<usize>,
    pub rows: Vec<Vec<u8>>,
}

fn frames_in(rng: &mut impl Rng, range: (f64, f64), dt: f64) -> usize {
    let secs = if range.1 > range.0 { rng.gen_range(range.0..=range.1) } else { range.0 };
    (secs / dt).round() as usize
}

fn uniform_point(rng: &mut impl Rng, court: &Court) -> Vec2 {
    [rng.gen_range(court.min[0]..=court.max[0]), rng.gen_range(court.min[1]..=court.max[1])]
}

/// Appends a segment from the last point of `track` to `target` lasting
/// `n` frames (≥ 2).
fn extend(track: &mut Vec<Vec2>, target: Vec2, n: usize) {
    let x0 = *track.last().expect("track starts non-empty");
    for k in 1..=n {
        let s = min_jerk_profile(k as f64 / n as f64);
        track.push([x0[0] + (target[0] - x0[0]) * s, x0[1] + (target[1] - x0[1]) * s]);
    }
}

fn midpoint(a: Vec2, b: Vec2) -> Vec2 {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Generates one scenario and its planted observation mask.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(PlaySequence, ObservationMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dt = spec.dt();
    let total = spec.n_frames;
    let seg = |rng: &mut ChaCha8Rng| frames_in(rng, spec.segment_duration, dt).max(2);

    let mut attackers = Vec::with_capacity(spec.n_attackers);
    for _ in 0..spec.n_attackers {
        let mut track = vec![uniform_point(&mut rng, &spec.court)];
        while track.len() < total {
            let hold = frames_in(&mut rng, spec.pause_duration, dt);
            let here = *track.last().unwrap();
            track.extend(std::iter::repeat(here).take(hold));
            let target = uniform_point(&mut rng, &spec.court);
            let n = seg(&mut rng);
            extend(&mut track, target, n);
        }
        track.truncate(total);
        attackers.push(track);
    }

    let mut ball = vec![attackers[0][0]];
    while ball.len() < total {
        let n = seg(&mut rng);
        let end = (ball.len() - 1 + n).min(total - 1);
        let receiver = rng.gen_range(0..spec.n_attackers);
        extend(&mut ball, attackers[receiver][end], n);
    }
    ball.truncate(total);

    let mut defenders = Vec::with_capacity(spec.n_defenders);
    for &a in &spec.tracking {
        let mut track = vec![midpoint(attackers[a][0], ball[0])];
        while track.len() < total {
            let n = seg(&mut rng);
            let start = track.len() - 1;
            extend(&mut track, midpoint(attackers[a][start], ball[start]), n);
        }
        track.truncate(total);
        defenders.push(track);
    }

    let mut agents = Vec::with_capacity(spec.n_agents());
    let mut tracks = Vec::with_capacity(spec.n_agents());
    for (i, t) in defenders.into_iter().enumerate() {
        agents.push(AgentInfo { id: format!("d{}", i + 1), role: Role::Defense });
        tracks.push(t);
    }
    for (i, t) in attackers.into_iter().enumerate() {
        agents.push(AgentInfo { id: format!("a{}", i + 1), role: Role::Offense });
        tracks.push(t);
    }
    agents.push(AgentInfo { id: "ball".into(), role: Role::Ball });
    tracks.push(ball);

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::arg(e.to_string()))?;
        for track in &mut tracks {
            for p in track.iter_mut() {
                *p = spec.court.clamp([p[0] + normal.sample(&mut rng), p[1] + normal.sample(&mut rng)]);
            }
        }
    }

    let positions: Vec<Vec<Vec2>> = (0..total).map(|t| tracks.iter().map(|tr| tr[t]).collect()).collect();
    let seq = PlaySequence::from_positions(format!("synth-{}", spec.seed), spec.sport, spec.sample_rate, agents.clone(), &positions)?;

    let rows = spec
        .tracking
        .iter()
        .enumerate()
        .map(|(d, &a)| {
            let mut row = vec![0u8; spec.n_agents()];
            row[d] = 1;
            row[spec.attacker_slot(a)] = 1;
            row[spec.ball_slot()] = 1;
            row
        })
        .collect();
    let mask = ObservationMask { agents: agents.into_iter().map(|a| a.id).collect(), tracking: spec.tracking.clone(), rows };
    Ok((seq, mask))
}

/// Generates `train + val + test` independent scenarios; scenario `i` uses
/// seed `mix(spec.seed, i)`.
pub fn generate_dataset(spec: &ScenarioSpec, train: usize, val: usize, test: usize) -> Result<(Dataset, ObservationMask)> {
    let mut dataset = Dataset::new(spec.dt());
    let mut mask = None;
    let splits = [(Split::Train, train), (Split::Val, val), (Split::Test, test)];
    let mut index = 0u64;
    for (split, count) in splits {
        for _ in 0..count {
            let scenario = ScenarioSpec { seed: mix_seed(spec.seed, index), ..spec.clone() };
            let (mut seq, m) = generate_scenario(&scenario)?;
            seq.sequence_id = format!("synth-{}-{index}", spec.seed);
            seq.split = Some(split);
            dataset.push(seq);
            mask.get_or_insert(m);
            index += 1;
        }
    }
    let mask = match mask {
        Some(m) => m,
        None => generate_scenario(spec)?.1,
    };
    Ok((dataset, mask))
}

/// Writes `<stem>.jsonl` and the sidecar `<stem>.mask.json`.
pub fn write_scenarios(dir: impl AsRef<Path>, stem: &str, dataset: &Dataset, mask: &ObservationMask) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    crate::trajectory::write_tracking(dir.join(format!("{stem}.jsonl")), dataset)?;
    fs::write(dir.join(format!("{stem}.mask.json")), serde_json::to_string_pretty(mask)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ½∫‖x⃛‖² dt of sampled positions via third differences.
    fn jerk_cost(x: &[f64], dt: f64) -> f64 {
        x.windows(4)
            .map(|w| {
                let j = (w[3] - 3.0 * w[2] + 3.0 * w[1] - w[0]) / dt.powi(3);
                0.5 * j * j * dt
            })
            .sum()
    }

    #[test]
    fn midpoint_and_endpoints() {
        let xs = min_jerk_segment([0.0, 0.0], [1.0, 0.0], 1.0, 0.1).unwrap();
        assert_eq!(xs.len(), 11);
        assert!((xs[5][0] - 0.5).abs() < 1e-12 && xs[5][1] == 0.0);
        assert_eq!(xs[0], [0.0, 0.0]);
        assert_eq!(xs[10], [1.0, 0.0]);
        assert!(min_jerk_segment([0.0, 0.0], [1.0, 0.0], 0.15, 0.1).is_err());
    }

    #[test]
    fn quintic_has_lowest_jerk_cost() {
        // Candidates share endpoints and rest boundary conditions are padded
        // with stationary samples so boundary jerk is counted.
        let dt = 0.01;
        let n = 100;
        let pad = 5;
        let build = |f: &dyn Fn(f64) -> f64| {
            let mut v = vec![0.0; pad];
            v.extend((0..=n).map(|k| f(k as f64 / n as f64)));
            v.extend(vec![1.0; pad]);
            v
        };
        let quintic = jerk_cost(&build(&min_jerk_profile), dt);
        let linear = jerk_cost(&build(&|t| t), dt);
        let cubic = jerk_cost(&build(&|t| 3.0 * t * t - 2.0 * t * t * t), dt);
        assert!(quintic < linear, "{quintic} vs linear {linear}");
        assert!(quintic < cubic, "{quintic} vs cubic {cubic}");
        // continuous optimum is 360 for unit displacement over unit time
        assert!((quintic - 360.0).abs() / 360.0 < 0.05, "{quintic}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = ScenarioSpec { seed: 7, noise: 0.01, ..ScenarioSpec::default() };
        let (a, ma) = generate_scenario(&spec).unwrap();
        let (b, mb) = generate_scenario(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn mask_rows_mark_three_agents() {
        let spec = ScenarioSpec { tracking: vec![4, 3, 2, 1, 0], ..ScenarioSpec::default() };
        let (_, mask) = generate_scenario(&spec).unwrap();
        for (d, row) in mask.rows.iter().enumerate() {
            assert_eq!(row.iter().map(|&x| x as usize).sum::<usize>(), 3);
            assert_eq!(row[d], 1);
            assert_eq!(row[spec.attacker_slot(spec.tracking[d])], 1);
            assert_eq!(row[spec.ball_slot()], 1);
        }
    }

    #[test]
    fn noiseless_defenders_are_piecewise_quintic() {
        let spec = ScenarioSpec { seed: 3, n_frames: 120, ..ScenarioSpec::default() };
        let (seq, _) = generate_scenario(&spec).unwrap();
        let dt = spec.dt();
        for d in 0..spec.n_defenders {
            let track = seq.track(d);
            for s in &track {
                assert!(spec.court.contains(s.position));
            }
            for w in track.windows(2).skip(2) {
                let jerk = ((w[1].acceleration[0] - w[0].acceleration[0]).hypot(w[1].acceleration[1] - w[0].acceleration[1])) / dt;
                assert!(jerk <= spec.jerk_bound() * (1.0 + 1e-9), "jerk {jerk} > {}", spec.jerk_bound());
            }
        }
    }

    #[test]
    fn noisy_positions_stay_in_bounds() {
        let spec = ScenarioSpec { seed: 11, noise: 0.5, ..ScenarioSpec::default() };
        let (seq, _) = generate_scenario(&spec).unwrap();
        assert!(seq.frames.iter().flatten().all(|s| spec.court.contains(s.position)));
    }

    #[test]
    fn invalid_tracking_rejected() {
        let spec = ScenarioSpec { tracking: vec![0, 1], ..ScenarioSpec::default() };
        assert!(generate_scenario(&spec).is_err());
    }
}
