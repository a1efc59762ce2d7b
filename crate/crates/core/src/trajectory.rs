//! Tracking data model, JSON-Lines ingestion, kinematic derivation,
//! attack-direction normalization and windowing.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sampling interval in seconds (10 Hz).
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_BURN_IN: usize = 20;
pub const DEFAULT_HORIZON: usize = 60;

const FEET: f64 = 0.3048;

pub type Vec2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sport {
    Basketball,
    Soccer,
}

/// Axis-aligned playing area in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Court {
    pub min: Vec2,
    pub max: Vec2,
}

impl Court {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [p[0].clamp(self.min[0], self.max[0]), p[1].clamp(self.min[1], self.max[1])]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }

    pub fn mid_x(&self) -> f64 {
        0.5 * (self.min[0] + self.max[0])
    }
}

impl Sport {
    /// Full playing area: basketball 94 × 50 ft, soccer 105 × 68 m.
    pub fn court(self) -> Court {
        match self {
            Sport::Basketball => Court::new([0.0, 0.0], [94.0 * FEET, 50.0 * FEET]),
            Sport::Soccer => Court::new([0.0, 0.0], [105.0, 68.0]),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sport::Basketball => "basketball",
            Sport::Soccer => "soccer",
        }
    }
}

impl FromStr for Sport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basketball" => Ok(Sport::Basketball),
            "soccer" => Ok(Sport::Soccer),
            other => Err(Error::Config(format!("unknown sport `{other}`"))),
        }
    }
}

impl fmt::Display for Sport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Defense,
    Offense,
    Ball,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Defense => "defense",
            Role::Offense => "offense",
            Role::Ball => "ball",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub id: String,
    pub role: Role,
}

/// Position (m), velocity (m/s) and acceleration (m/s²) of one agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
}

impl AgentState {
    /// `[x, y, vx, vy, ax, ay]`.
    pub fn features(&self) -> [f64; 6] {
        let (p, v, a) = (self.position, self.velocity, self.acceleration);
        [p[0], p[1], v[0], v[1], a[0], a[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.features().iter().all(|x| x.is_finite())
    }
}

/// A fixed-rate multi-agent trajectory. `frames[t][k]` is agent `k` at
/// frame `t`; agent order is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaySequence {
    pub sequence_id: String,
    pub sport: Sport,
    pub sample_rate: u32,
    pub agents: Vec<AgentInfo>,
    pub frames: Vec<Vec<AgentState>>,
    pub split: Option<Split>,
    /// Defender slot → role index applied by role assignment, if any.
    pub role_permutation: Option<Vec<usize>>,
}

impl PlaySequence {
    /// Builds a sequence from positions, deriving velocity and acceleration
    /// by backward differences.
    pub fn from_positions(
        sequence_id: impl Into<String>,
        sport: Sport,
        sample_rate: u32,
        agents: Vec<AgentInfo>,
        positions: &[Vec<Vec2>],
    ) -> Result<Self> {
        let sequence_id = sequence_id.into();
        if sample_rate == 0 {
            return Err(Error::Schema { sequence: sequence_id, message: "fps must be positive".into() });
        }
        let dt = 1.0 / sample_rate as f64;
        let n_agents = agents.len();
        for (t, frame) in positions.iter().enumerate() {
            if frame.len() != n_agents {
                return Err(Error::Schema {
                    sequence: sequence_id,
                    message: format!("frame {t} has {} agents, expected {n_agents}", frame.len()),
                });
            }
        }
        let mut frames = vec![vec![AgentState::default(); n_agents]; positions.len()];
        if !positions.is_empty() {
            for k in 0..n_agents {
                let track: Vec<Vec2> = positions.iter().map(|f| f[k]).collect();
                let (vel, acc) = derive_kinematics(&track, dt).map_err(|_| Error::Schema {
                    sequence: sequence_id.clone(),
                    message: format!("need at least 3 frames, got {}", track.len()),
                })?;
                for t in 0..track.len() {
                    frames[t][k] = AgentState { position: track[t], velocity: vel[t], acceleration: acc[t] };
                }
            }
        }
        let seq = Self { sequence_id, sport, sample_rate, agents, frames, split: None, role_permutation: None };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |message: String| Error::Schema { sequence: self.sequence_id.clone(), message };
        let balls = self.agents.iter().filter(|a| a.role == Role::Ball).count();
        if balls != 1 {
            return Err(schema(format!("expected exactly one ball slot, found {balls}")));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.agents.len() {
                return Err(schema(format!("frame {t} has {} agents, expected {}", frame.len(), self.agents.len())));
            }
            if frame.iter().any(|s| !s.is_finite()) {
                return Err(schema(format!("non-finite state in frame {t}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate as f64
    }

    pub fn indices_of(&self, role: Role) -> Vec<usize> {
        self.agents.iter().enumerate().filter(|(_, a)| a.role == role).map(|(i, _)| i).collect()
    }

    pub fn defenders(&self) -> Vec<usize> {
        self.indices_of(Role::Defense)
    }

    pub fn ball(&self) -> usize {
        self.indices_of(Role::Ball)[0]
    }

    pub fn track(&self, agent: usize) -> Vec<AgentState> {
        self.frames.iter().map(|f| f[agent]).collect()
    }

    pub fn positions(&self, agent: usize) -> Vec<Vec2> {
        self.frames.iter().map(|f| f[agent].position).collect()
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn slice(&self, start: usize, len: usize, sequence_id: impl Into<String>) -> Self {
        Self {
            sequence_id: sequence_id.into(),
            frames: self.frames[start..start + len].to_vec(),
            ..self.clone()
        }
    }
}

/// Train/validation/test collections of sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<PlaySequence>,
    pub val: Vec<PlaySequence>,
    pub test: Vec<PlaySequence>,
    pub dt: f64,
}

impl Dataset {
    pub fn new(dt: f64) -> Self {
        Self { dt, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, seq: PlaySequence) {
        match seq.split.unwrap_or(Split::Train) {
            Split::Train => self.train.push(seq),
            Split::Val => self.val.push(seq),
            Split::Test => self.test.push(seq),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &PlaySequence> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    fn map_splits(&self, mut f: impl FnMut(&[PlaySequence]) -> Result<Vec<PlaySequence>>) -> Result<Self> {
        Ok(Self { train: f(&self.train)?, val: f(&self.val)?, test: f(&self.test)?, dt: self.dt })
    }
}

/// One line of the tracking file.
#[derive(Debug, Serialize, Deserialize)]
struct TrackingRecord {
    sequence_id: String,
    sport: String,
    fps: u32,
    agents: Vec<AgentInfo>,
    frames: Vec<Option<Vec<Option<Vec2>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role_permutation: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Fail on sequences with gaps instead of dropping them.
    pub strict: bool,
}

/// A sequence skipped during ingestion.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropped {
    pub sequence_id: String,
    pub reason: String,
}

/// Reads a JSON-Lines tracking file with default options.
pub fn ingest_tracking(path: impl AsRef<Path>) -> Result<Dataset> {
    ingest_tracking_with(path, IngestOptions::default()).map(|(d, _)| d)
}

pub fn ingest_tracking_with(path: impl AsRef<Path>, options: IngestOptions) -> Result<(Dataset, Vec<Dropped>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tracking(&text, path, options)
}

fn parse_tracking(text: &str, path: &Path, options: IngestOptions) -> Result<(Dataset, Vec<Dropped>)> {
    let mut dataset = Dataset::new(DEFAULT_DT);
    let mut dropped = Vec::new();
    let mut rate = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let record: TrackingRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let sport: Sport = record.sport.parse()?;
        let n_agents = record.agents.len();
        let mut positions = Vec::with_capacity(record.frames.len());
        let mut gap = None;
        for (t, frame) in record.frames.iter().enumerate() {
            let Some(frame) = frame else {
                gap.get_or_insert(t);
                continue;
            };
            if frame.len() != n_agents {
                return Err(Error::Schema {
                    sequence: record.sequence_id,
                    message: format!("frame {t} has {} agents, expected {n_agents}", frame.len()),
                });
            }
            let row: Option<Vec<Vec2>> = frame.iter().copied().collect();
            match row {
                Some(row) if row.iter().flatten().all(|x| x.is_finite()) => positions.push(row),
                _ => {
                    gap.get_or_insert(t);
                }
            }
        }
        if let Some(frame) = gap {
            if options.strict {
                return Err(Error::Gap { sequence: record.sequence_id, frame });
            }
            log::warn!("dropping sequence `{}`: gap at frame {frame}", record.sequence_id);
            dropped.push(Dropped { sequence_id: record.sequence_id, reason: format!("gap at frame {frame}") });
            continue;
        }
        let mut seq = PlaySequence::from_positions(record.sequence_id, sport, record.fps, record.agents, &positions)?;
        seq.split = record.split;
        seq.role_permutation = record.role_permutation;
        rate.get_or_insert(seq.dt());
        dataset.push(seq);
    }
    if let Some(dt) = rate {
        dataset.dt = dt;
    }
    check_disjoint(&dataset)?;
    Ok((dataset, dropped))
}

fn check_disjoint(dataset: &Dataset) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for seq in dataset.iter() {
        if !seen.insert(seq.sequence_id.as_str()) {
            return Err(Error::Schema { sequence: seq.sequence_id.clone(), message: "duplicate sequence_id".into() });
        }
    }
    Ok(())
}

/// One JSON line per sequence, in the ingestion schema.
pub fn to_jsonl(sequences: &[&PlaySequence]) -> Result<String> {
    let mut out = String::new();
    for seq in sequences {
        let record = TrackingRecord {
            sequence_id: seq.sequence_id.clone(),
            sport: seq.sport.as_str().to_string(),
            fps: seq.sample_rate,
            agents: seq.agents.clone(),
            frames: seq.frames.iter().map(|f| Some(f.iter().map(|s| Some(s.position)).collect())).collect(),
            split: seq.split,
            role_permutation: seq.role_permutation.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_tracking(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let all: Vec<&PlaySequence> = dataset.iter().collect();
    fs::write(path, to_jsonl(&all)?)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-format CSV export: `sequence_id,t,agent_id,role,x,y`.
pub fn write_tracking_csv(mut out: impl std::io::Write, dataset: &Dataset) -> Result<()> {
    writeln!(out, "sequence_id,t,agent_id,role,x,y")?;
    for seq in dataset.iter() {
        for (t, frame) in seq.frames.iter().enumerate() {
            for (agent, state) in seq.agents.iter().zip(frame) {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    csv_field(&seq.sequence_id),
                    t,
                    csv_field(&agent.id),
                    agent.role.as_str(),
                    state.position[0],
                    state.position[1]
                )?;
            }
        }
    }
    Ok(())
}

/// Backward-difference velocity and acceleration. The first velocity and the
/// first two accelerations repeat the earliest computable value.
pub fn derive_kinematics(positions: &[Vec2], dt: f64) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    if positions.len() < 3 {
        return Err(Error::arg(format!("need at least 3 positions, got {}", positions.len())));
    }
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::arg(format!("dt must be positive, got {dt}")));
    }
    let diff = |a: Vec2, b: Vec2| [(a[0] - b[0]) / dt, (a[1] - b[1]) / dt];
    let mut vel = vec![[0.0; 2]; positions.len()];
    for t in 1..positions.len() {
        vel[t] = diff(positions[t], positions[t - 1]);
    }
    vel[0] = vel[1];
    let mut acc = vec![[0.0; 2]; positions.len()];
    for t in 2..positions.len() {
        acc[t] = diff(vel[t], vel[t - 1]);
    }
    acc[0] = acc[2];
    acc[1] = acc[2];
    Ok((vel, acc))
}

/// Mirrors the sequence about the court's x midline when the offense's mean
/// displacement points towards +x, so that the offense always attacks
/// towards −x.
pub fn normalize_attack_direction(seq: &PlaySequence) -> Result<PlaySequence> {
    let offense = seq.indices_of(Role::Offense);
    if offense.is_empty() || seq.frames.len() < 2 {
        return Ok(seq.clone());
    }
    let first = &seq.frames[0];
    let last = &seq.frames[seq.frames.len() - 1];
    let mean_dx = offense.iter().map(|&k| last[k].position[0] - first[k].position[0]).sum::<f64>() / offense.len() as f64;
    if mean_dx <= 0.0 {
        return Ok(seq.clone());
    }
    let court = seq.sport.court();
    let pivot = court.min[0] + court.max[0];
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for s in frame {
            s.position[0] = pivot - s.position[0];
            s.velocity[0] = -s.velocity[0];
            s.acceleration[0] = -s.acceleration[0];
        }
    }
    Ok(out)
}

/// Cuts every sequence into non-overlapping windows of `burn_in + horizon`
/// frames; shorter tails are dropped.
pub fn split_windows(dataset: &Dataset, burn_in: usize, horizon: usize) -> Result<Dataset> {
    if burn_in == 0 || horizon == 0 {
        return Err(Error::arg(format!("burn_in and horizon must be ≥ 1 (got {burn_in}, {horizon})")));
    }
    let len = burn_in + horizon;
    dataset.map_splits(|seqs| {
        let mut out = Vec::new();
        for seq in seqs {
            let n = seq.len() / len;
            if n == 0 {
                log::warn!("sequence `{}` has {} frames, shorter than one window of {len}", seq.sequence_id, seq.len());
            }
            for w in 0..n {
                out.push(seq.slice(w * len, len, format!("{}#w{w}", seq.sequence_id)));
            }
        }
        Ok(out)
    })
}
