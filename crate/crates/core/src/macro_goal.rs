//! Court grids, stationary-position weak labels and the recurrent
//! macro-goal predictor.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Buffers, Ctx, Gru, LogitMlp, ParamStore};
use crate::tape::Var;
use crate::trajectory::{AgentState, Sport, Vec2};

pub const FOOT: f64 = 0.3048;
pub const DEFAULT_SPEED_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_HOLD: f64 = 0.5;

/// Rectangular grid of `rows × cols` cells anchored at `origin`; rows run
/// along y and columns along x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec2,
    pub cell: Vec2,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    /// 10 × 9 cells of 5 × 5 ft over the attacking half court.
    pub fn basketball() -> Self {
        Self { origin: [0.0, 0.0], cell: [5.0 * FOOT, 5.0 * FOOT], rows: 10, cols: 9 }
    }

    /// 34 × 22 cells of about 3 × 3 m over the full pitch.
    pub fn soccer() -> Self {
        let court = Sport::Soccer.court();
        Self {
            origin: court.min,
            cell: [(court.max[0] - court.min[0]) / 34.0, (court.max[1] - court.min[1]) / 22.0],
            rows: 22,
            cols: 34,
        }
    }

    pub fn for_sport(sport: Sport) -> Self {
        match sport {
            Sport::Basketball => Self::basketball(),
            Sport::Soccer => Self::soccer(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major cell index; points outside the grid map to the nearest
    /// boundary cell.
    pub fn cell_of(&self, p: Vec2) -> usize {
        let axis = |v: f64, o: f64, size: f64, n: usize| {
            let i = ((v - o) / size).floor();
            if i.is_nan() {
                0
            } else {
                i.clamp(0.0, (n - 1) as f64) as usize
            }
        };
        let col = axis(p[0], self.origin[0], self.cell[0], self.cols);
        let row = axis(p[1], self.origin[1], self.cell[1], self.rows);
        row * self.cols + col
    }

    pub fn cell_center(&self, index: usize) -> Vec2 {
        let (row, col) = (index / self.cols, index % self.cols);
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell[0],
            self.origin[1] + (row as f64 + 0.5) * self.cell[1],
        ]
    }

    pub fn one_hot(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_cells()];
        v[index] = 1.0;
        v
    }
}

/// Parameters of the stationary-segment labeler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub speed_threshold: f64,
    pub min_hold: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { speed_threshold: DEFAULT_SPEED_THRESHOLD, min_hold: DEFAULT_MIN_HOLD }
    }
}

/// Maximal runs `[start, end)` with speed below the threshold lasting at
/// least `min_hold`.
pub fn stationary_segments(track: &[AgentState], dt: f64, config: LabelerConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..=track.len() {
        let slow = t < track.len() && {
            let v = track[t].velocity;
            v[0].hypot(v[1]) < config.speed_threshold
        };
        match (slow, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if (t - s) as f64 * dt >= config.min_hold - 1e-9 {
                    out.push((s, t));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Labels every frame with the cell of the next stationary segment's mean
/// position; frames after the last stop take the final position's cell.
pub fn label_macro_goals(track: &[AgentState], dt: f64, grid: &GridSpec, config: LabelerConfig) -> Vec<usize> {
    let segments = stationary_segments(track, dt, config);
    let cells: Vec<usize> = segments
        .iter()
        .map(|&(s, e)| {
            let n = (e - s) as f64;
            let (sx, sy) = track[s..e].iter().fold((0.0, 0.0), |(x, y), a| (x + a.position[0], y + a.position[1]));
            grid.cell_of([sx / n, sy / n])
        })
        .collect();
    let tail = track.last().map_or(0, |a| grid.cell_of(a.position));
    let mut next = 0;
    (0..track.len())
        .map(|t| {
            while next < segments.len() && segments[next].1 <= t {
                next += 1;
            }
            cells.get(next).copied().unwrap_or(tail)
        })
        .collect()
}

/// Recurrent categorical predictor over grid cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MacroGoalNet {
    pub rnn: Gru,
    pub head: LogitMlp,
    pub n_cells: usize,
}

impl MacroGoalNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Buffers,
        observation_dim: usize,
        n_cells: usize,
        rnn_hidden: usize,
        rnn_layers: usize,
        width: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let rnn = Gru::new(store, "macro.rnn", n_cells + observation_dim, rnn_hidden, rnn_layers, rng);
        let head = LogitMlp::new(store, buffers, "macro.head", rnn_hidden + observation_dim, width, n_cells, batch_norm, rng);
        Self { rnn, head, n_cells }
    }

    /// Log-probabilities over cells given `h_g` and the previous
    /// observation.
    pub fn log_probs(&self, cx: &mut Ctx, state: &[Var], observation: Var) -> Var {
        let top = *state.last().expect("recurrent state");
        let x = cx.g.concat(&[top, observation]);
        let logits = self.head.forward(cx, x);
        cx.g.log_softmax(logits)
    }

    /// Advances `h_g` with the chosen goal and the previous observation.
    pub fn advance(&self, cx: &Ctx, state: &[Var], goal: Var, observation: Var) -> Vec<Var> {
        let x = cx.g.concat(&[goal, observation]);
        self.rnn.forward(cx, x, state)
    }
}

/// One-hot rows for a batch of cell indices.
pub fn one_hot_rows(cells: &[usize], n_cells: usize) -> Array2<f64> {
    let mut out = Array2::zeros((cells.len(), n_cells));
    for (i, &c) in cells.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}

/// Samples one cell per row from `log_probs` using uniforms `u`.
pub fn sample_cells(log_probs: &Array2<f64>, u: &Array2<f64>) -> Vec<usize> {
    log_probs
        .rows()
        .into_iter()
        .zip(u.rows())
        .map(|(row, u)| {
            let mut acc = 0.0;
            let target = u[0];
            for (j, &lp) in row.iter().enumerate() {
                acc += lp.exp();
                if target < acc {
                    return j;
                }
            }
            row.len() - 1
        })
        .collect()
}

/// Argmax per row, first index on ties.
pub fn greedy_cells(log_probs: &Array2<f64>) -> Vec<usize> {
    log_probs
        .rows()
        .into_iter()
        .map(|row| row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::derive_kinematics;
    use ndarray::array;

    fn track(positions: &[Vec2], dt: f64) -> Vec<AgentState> {
        let (v, a) = derive_kinematics(positions, dt).unwrap();
        positions
            .iter()
            .zip(v.iter().zip(&a))
            .map(|(&position, (&velocity, &acceleration))| AgentState { position, velocity, acceleration })
            .collect()
    }

    #[test]
    fn grid_indices() {
        let grid = GridSpec::basketball();
        assert_eq!(grid.n_cells(), 90);
        assert_eq!(grid.cell_of([0.0, 0.0]), 0);
        for idx in 0..grid.n_cells() {
            assert_eq!(grid.cell_of(grid.cell_center(idx)), idx);
        }
        let c = grid.cell_center(3 * 9 + 4);
        assert_eq!(grid.cell_of(c), 31);
        assert_eq!(grid.cell_of([-0.001, 2.0]), grid.cell_of([0.0, 2.0]));
        let far = [9.0 * 5.0 * FOOT + 0.001, 10.0 * 5.0 * FOOT + 0.001];
        assert_eq!(grid.cell_of(far), 89);
    }

    #[test]
    fn soccer_grid_tiles_the_pitch() {
        let grid = GridSpec::soccer();
        assert_eq!(grid.n_cells(), 34 * 22);
        assert!((grid.cell[0] - 105.0 / 34.0).abs() < 1e-12);
        assert_eq!(grid.cell_of([104.999, 67.999]), grid.n_cells() - 1);
    }

    #[test]
    fn stationary_agent_labels_its_cell() {
        let grid = GridSpec::basketball();
        let p = [4.0, 6.0];
        let labels = label_macro_goals(&track(&vec![p; 30], 0.1), 0.1, &grid, LabelerConfig::default());
        assert!(labels.iter().all(|&c| c == grid.cell_of(p)));
    }

    #[test]
    fn move_then_stop() {
        let grid = GridSpec::basketball();
        let mut pos: Vec<Vec2> = (0..20).map(|t| [1.0 + 0.3 * t as f64, 1.0]).collect();
        pos.extend(vec![[6.7, 1.0]; 15]);
        let labels = label_macro_goals(&track(&pos, 0.1), 0.1, &grid, LabelerConfig::default());
        assert!(labels[..20].iter().all(|&c| c == grid.cell_of([6.7, 1.0])));
    }

    #[test]
    fn two_stops_switch_at_first_stop_end() {
        // Phase 1: stopped at p1 for frames 0..10; phase 2: move 10..20;
        // phase 3: stopped at p2 from frame 20 on.
        let grid = GridSpec::basketball();
        let p1 = [2.0, 2.0];
        let p2 = [8.0, 2.0];
        let mut pos = vec![p1; 10];
        pos.extend((1..=10).map(|i| [2.0 + 0.6 * i as f64, 2.0]));
        pos.extend(vec![p2; 10]);
        let t = track(&pos, 0.1);
        // frame 10 is the first moving frame under backward differences
        assert!(t[10].velocity[0] > 0.5 && t[9].velocity[0] == 0.0);
        let labels = label_macro_goals(&t, 0.1, &grid, LabelerConfig::default());
        assert!(labels[..10].iter().all(|&c| c == grid.cell_of(p1)));
        assert!(labels[10..].iter().all(|&c| c == grid.cell_of(p2)));
    }

    #[test]
    fn short_pause_is_ignored() {
        let grid = GridSpec::basketball();
        let mut pos: Vec<Vec2> = (0..10).map(|t| [1.0 + 0.3 * t as f64, 1.0]).collect();
        pos.extend(vec![[3.7, 1.0]; 3]);
        pos.extend((1..=10).map(|t| [3.7 + 0.3 * t as f64, 1.0]));
        let labels = label_macro_goals(&track(&pos, 0.1), 0.1, &grid, LabelerConfig::default());
        assert!(labels.iter().all(|&c| c == grid.cell_of([6.7, 1.0])));
    }

    #[test]
    fn sampling_and_greedy() {
        let lp = array![[0.25f64.ln(), 0.75f64.ln()]];
        assert_eq!(sample_cells(&lp, &array![[0.2]]), vec![0]);
        assert_eq!(sample_cells(&lp, &array![[0.3]]), vec![1]);
        assert_eq!(greedy_cells(&lp), vec![1]);
        assert_eq!(one_hot_rows(&[1, 0], 2), array![[0.0, 1.0], [1.0, 0.0]]);
    }
}
