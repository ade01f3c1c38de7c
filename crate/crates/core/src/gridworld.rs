//! Slippery gridworlds with walls, lava and a goal, compiled to [`TabularMdp`].
//!
//! State id is `row * width + col` with row 0 at the top. Actions are
//! up, down, left, right. The intended move succeeds with probability
//! `1 − slip_prob`; each of the other three directions takes `slip_prob / 3`.
//! Moving into a wall or off the grid leaves the agent in place. Goal and lava
//! cells are absorbing with zero reward; the goal reward is paid on the step
//! that enters the goal. Wall cells are unreachable and modeled as absorbing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

pub const NUM_ACTIONS: usize = 4;
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = ["up", "down", "left", "right"];

const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Wall,
    Start,
    Goal,
    Lava,
}

impl Cell {
    fn parse(c: char) -> Option<Self> {
        match c {
            '.' => Some(Cell::Empty),
            'W' => Some(Cell::Wall),
            'S' => Some(Cell::Start),
            'G' => Some(Cell::Goal),
            'L' => Some(Cell::Lava),
            _ => None,
        }
    }

    fn is_absorbing(self) -> bool {
        matches!(self, Cell::Goal | Cell::Lava | Cell::Wall)
    }
}

fn default_discount() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<String>,
    pub slip_prob: f64,
    pub goal_reward: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl GridworldSpec {
    /// Parses and validates the cell layout.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("width/height", "must be positive"));
        }
        if self.rows.len() != self.height {
            return Err(Error::invalid(
                "rows",
                format!("{} rows for height {}", self.rows.len(), self.height),
            ));
        }
        let mut cells = Vec::with_capacity(self.width * self.height);
        for (r, row) in self.rows.iter().enumerate() {
            let parsed: Vec<Cell> = row
                .chars()
                .map(|c| {
                    Cell::parse(c)
                        .ok_or_else(|| Error::invalid("rows", format!("unknown cell '{c}' in row {r}")))
                })
                .collect::<Result<_>>()?;
            if parsed.len() != self.width {
                return Err(Error::invalid(
                    "rows",
                    format!("row {r} has {} cells for width {}", parsed.len(), self.width),
                ));
            }
            cells.extend(parsed);
        }
        match cells.iter().filter(|&&c| c == Cell::Start).count() {
            0 => return Err(Error::invalid("start", "no start cell")),
            1 => {}
            n => return Err(Error::invalid("start", format!("{n} start cells, expected exactly one"))),
        }
        if !cells.contains(&Cell::Goal) {
            return Err(Error::invalid("goal", "at least one goal cell required"));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::invalid("slip_prob", format!("{} not in [0, 1)", self.slip_prob)));
        }
        if !self.goal_reward.is_finite() {
            return Err(Error::invalid("goal_reward", "must be finite"));
        }
        Ok(cells)
    }

    pub fn with_slip(&self, slip_prob: f64) -> Self {
        Self {
            slip_prob,
            ..self.clone()
        }
    }

    pub fn state_id(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Target of a move from `(row, col)`, staying put when blocked.
    fn step(&self, cells: &[Cell], row: usize, col: usize, dir: usize) -> usize {
        let (dr, dc) = MOVES[dir];
        let (nr, nc) = (row as isize + dr, col as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            return self.state_id(row, col);
        }
        let next = self.state_id(nr as usize, nc as usize);
        if cells[next] == Cell::Wall {
            self.state_id(row, col)
        } else {
            next
        }
    }
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    let cells = spec.cells()?;
    let n = cells.len();
    let mut transition = vec![0.0; n * NUM_ACTIONS * n];
    let reward = vec![0.0; n * NUM_ACTIONS];
    let mut paid = vec![0.0; n * NUM_ACTIONS * n];
    let mut initial = vec![0.0; n];
    let terminal: Vec<bool> = cells.iter().map(|c| c.is_absorbing()).collect();

    for row in 0..spec.height {
        for col in 0..spec.width {
            let s = spec.state_id(row, col);
            if cells[s] == Cell::Start {
                initial[s] = 1.0;
            }
            for a in 0..NUM_ACTIONS {
                let base = (s * NUM_ACTIONS + a) * n;
                if terminal[s] {
                    transition[base + s] = 1.0;
                    continue;
                }
                for dir in 0..NUM_ACTIONS {
                    let p = if dir == a {
                        1.0 - spec.slip_prob
                    } else {
                        spec.slip_prob / 3.0
                    };
                    if p == 0.0 {
                        continue;
                    }
                    let next = spec.step(&cells, row, col, dir);
                    transition[base + next] += p;
                    if cells[next] == Cell::Goal {
                        paid[base + next] = spec.goal_reward;
                    }
                }
            }
        }
    }
    TabularMdp::new(
        n,
        NUM_ACTIONS,
        transition,
        reward,
        spec.discount,
        initial,
        terminal,
        spec.goal_reward.abs(),
    )?
    .with_transition_rewards(paid)
}

/// The default 8×8 layout: a short corridor along a lava pool and a longer,
/// safer detour around the walls.
pub fn default_layout() -> Vec<String> {
    [
        "S......W",
        ".WWWW..W",
        ".W...L..",
        ".W.W.L..",
        "...W...G",
        ".WWW.LLL",
        ".......W",
        "WWW.....",
    ]
    .iter()
    .map(|r| r.to_string())
    .collect()
}

pub fn default_spec(slip_prob: f64) -> GridworldSpec {
    GridworldSpec {
        width: 8,
        height: 8,
        rows: default_layout(),
        slip_prob,
        goal_reward: 1.0,
        discount: default_discount(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::solve_optimal_q;

    fn tiny(slip: f64) -> GridworldSpec {
        GridworldSpec {
            width: 2,
            height: 1,
            rows: vec!["SG".into()],
            slip_prob: slip,
            goal_reward: 1.0,
            discount: 0.99,
        }
    }

    #[test]
    fn smallest_instance() {
        let mdp = build_gridworld(&tiny(0.0)).unwrap();
        assert_eq!(mdp.next_dist(0, 3), &[0.0, 1.0]);
        assert_eq!(mdp.reward(0, 3), 1.0);
        assert!(mdp.is_terminal(1));
        let q = solve_optimal_q(&mdp, 1e-10, 10_000).unwrap();
        assert!((q.get(0, 3) - 1.0).abs() < 1e-9);
        assert_eq!(q.row(1), &[0.0; 4]);
    }

    #[test]
    fn default_spec_shape_and_slip_mass() {
        let spec = default_spec(0.3);
        let cells = spec.cells().unwrap();
        let mdp = build_gridworld(&spec).unwrap();
        assert_eq!(mdp.num_states(), 64);
        assert_eq!(mdp.num_actions(), 4);
        for row in 0..8 {
            for col in 0..8 {
                let s = spec.state_id(row, col);
                if mdp.is_terminal(s) {
                    continue;
                }
                for a in 0..4 {
                    let target = spec.step(&cells, row, col, a);
                    let mass = mdp.next_dist(s, a)[target];
                    assert!(mass >= 0.7 - 1e-12);
                    if target != s {
                        assert!((mass - 0.7).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn no_slip_is_deterministic() {
        let mdp = build_gridworld(&default_spec(0.0)).unwrap();
        for s in 0..mdp.num_states() {
            for a in 0..4 {
                let row = mdp.next_dist(s, a);
                assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn malformed_specs_name_the_invariant() {
        let mut spec = tiny(0.1);
        spec.rows = vec!["..".into()];
        assert!(build_gridworld(&spec).unwrap_err().to_string().contains("start"));
        spec.rows = vec!["SS".into()];
        assert!(build_gridworld(&spec).unwrap_err().to_string().contains("start"));
        spec.rows = vec!["S.".into()];
        assert!(build_gridworld(&spec).unwrap_err().to_string().contains("goal"));
        let mut spec = tiny(1.0);
        spec.rows = vec!["SG".into()];
        assert!(build_gridworld(&spec).unwrap_err().to_string().contains("slip_prob"));
    }

    #[test]
    fn lava_absorbs_with_zero_reward() {
        let spec = GridworldSpec {
            width: 3,
            height: 1,
            rows: vec!["LSG".into()],
            slip_prob: 0.0,
            goal_reward: 1.0,
            discount: 0.9,
        };
        let mdp = build_gridworld(&spec).unwrap();
        assert!(mdp.is_terminal(0));
        assert_eq!(mdp.next_dist(1, 2), &[1.0, 0.0, 0.0]);
        assert_eq!(mdp.reward(1, 2), 0.0);
        for a in 0..4 {
            assert_eq!(mdp.reward(0, a), 0.0);
            assert_eq!(mdp.next_dist(0, a)[0], 1.0);
        }
    }

    #[test]
    fn json_document_parses() {
        let doc = r#"{"width":2,"height":1,"rows":["SG"],"slip_prob":0.3,"goal_reward":1.0}"#;
        let spec: GridworldSpec = serde_json::from_str(doc).unwrap();
        assert_eq!(spec.discount, 0.95);
        assert!(build_gridworld(&spec).is_ok());
    }
}
