use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Game, Observation};

const CAR_LEN: usize = 2;
const CARS_PER_LANE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub row: usize,
    /// +1 moves right, -1 moves left.
    pub dir: i64,
    /// Steps per one-cell move.
    pub period: usize,
    /// Column of the first car's left cell.
    pub offset: usize,
}

/// Agent climbs from the bottom row through lanes of constant-velocity cars.
/// Reaching row 0 scores +1 and returns the agent to the bottom; a car
/// collision pushes the agent down one row. Episodes run to the step limit.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneCross {
    pub grid: usize,
    pub agent_row: usize,
    pub agent_col: usize,
    pub lanes: Vec<Lane>,
    pub t: usize,
}

impl LaneCross {
    pub fn new(grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let lanes = (3..=grid - 3)
            .step_by(2)
            .enumerate()
            .map(|(i, row)| Lane {
                row,
                dir: if i % 2 == 0 { 1 } else { -1 },
                period: 1 + (i % 3),
                offset: rng.gen_range(0..grid),
            })
            .collect();
        Self {
            grid,
            agent_row: grid - 1,
            agent_col: grid / 2 - 1,
            lanes,
            t: 0,
        }
    }

    fn car_at(&self, row: usize, col: usize) -> bool {
        let g = self.grid;
        self.lanes.iter().filter(|l| l.row == row).any(|l| {
            (0..CARS_PER_LANE).any(|c| {
                let start = (l.offset + c * g / CARS_PER_LANE) % g;
                (0..CAR_LEN).any(|k| (start + k) % g == col)
            })
        })
    }
}

impl Game for LaneCross {
    fn advance(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (f64, bool) {
        self.t += 1;
        match action {
            1 => self.agent_row = self.agent_row.saturating_sub(1),
            2 => self.agent_row = (self.agent_row + 1).min(self.grid - 1),
            _ => {}
        }
        let g = self.grid as i64;
        for lane in &mut self.lanes {
            if self.t % lane.period == 0 {
                lane.offset = (lane.offset as i64 + lane.dir).rem_euclid(g) as usize;
            }
        }
        if self.agent_row == 0 {
            self.agent_row = self.grid - 1;
            return (1.0, false);
        }
        if self.car_at(self.agent_row, self.agent_col) {
            self.agent_row = (self.agent_row + 1).min(self.grid - 1);
        }
        (0.0, false)
    }

    fn render(&self) -> Observation {
        let mut obs = Observation::blank(self.grid);
        for r in 0..self.grid {
            for c in 0..self.grid {
                if self.car_at(r, c) {
                    obs.set(r, c, 0.5);
                }
            }
        }
        obs.set(self.agent_row, self.agent_col, 1.0);
        obs
    }
}
