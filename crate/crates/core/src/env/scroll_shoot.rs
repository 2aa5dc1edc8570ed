use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Game, Observation};

const ENEMIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Enemy {
    pub row: usize,
    pub col: usize,
}

/// Enemies descend columns at per-column constant speeds; the ship at the
/// bottom moves left/right and fires a single upward shot. A hit scores +1;
/// an enemy reaching the bottom row ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrollShoot {
    pub grid: usize,
    pub ship_col: usize,
    pub enemies: Vec<Enemy>,
    /// Steps per one-row descent, indexed by column.
    pub column_period: Vec<usize>,
    pub bullet: Option<(usize, usize)>,
    pub t: usize,
}

impl ScrollShoot {
    pub fn new(grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let column_period = (0..grid).map(|_| rng.gen_range(3..=6)).collect();
        let mut s = Self {
            grid,
            ship_col: rng.gen_range(grid / 4..3 * grid / 4),
            enemies: Vec::new(),
            column_period,
            bullet: None,
            t: 0,
        };
        for _ in 0..ENEMIES {
            let col = s.free_column(rng);
            let row = rng.gen_range(0..grid / 4);
            s.enemies.push(Enemy { row, col });
        }
        s
    }

    fn free_column(&self, rng: &mut ChaCha8Rng) -> usize {
        loop {
            let c = rng.gen_range(0..self.grid);
            if self.enemies.iter().all(|e| e.col != c) {
                return c;
            }
        }
    }

    fn respawn(&mut self, idx: usize, rng: &mut ChaCha8Rng) {
        self.enemies[idx].col = usize::MAX;
        let col = self.free_column(rng);
        self.enemies[idx] = Enemy { row: 0, col };
    }

    /// Index of an enemy occupying the bullet cell, if any.
    fn hit(&self) -> Option<usize> {
        let (br, bc) = self.bullet?;
        self.enemies.iter().position(|e| e.row == br && e.col == bc)
    }
}

impl Game for ScrollShoot {
    fn advance(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (f64, bool) {
        self.t += 1;
        let g = self.grid;
        match action {
            1 => self.ship_col = self.ship_col.saturating_sub(1),
            2 => self.ship_col = (self.ship_col + 1).min(g - 1),
            3 if self.bullet.is_none() => self.bullet = Some((g - 1, self.ship_col)),
            _ => {}
        }
        let mut reward: f64 = 0.0;
        // bullet climbs two rows per step, checking both cells
        for _ in 0..2 {
            let Some((r, c)) = self.bullet else { break };
            if r == 0 {
                self.bullet = None;
                break;
            }
            self.bullet = Some((r - 1, c));
            if let Some(i) = self.hit() {
                reward += 1.0;
                self.bullet = None;
                self.respawn(i, rng);
            }
        }
        let mut over = false;
        for i in 0..self.enemies.len() {
            let col = self.enemies[i].col;
            if self.t % self.column_period[col] == 0 {
                self.enemies[i].row += 1;
            }
            if self.hit() == Some(i) {
                reward += 1.0;
                self.bullet = None;
                self.respawn(i, rng);
            } else if self.enemies[i].row >= g - 1 {
                self.enemies[i].row = g - 1;
                over = true;
            }
        }
        (reward.min(1.0), over)
    }

    fn render(&self) -> Observation {
        let g = self.grid;
        let mut obs = Observation::blank(g);
        if let Some((r, c)) = self.bullet {
            obs.set(r, c, 0.3);
        }
        for e in &self.enemies {
            obs.set(e.row, e.col, 0.6);
        }
        let ship = if self.enemies.iter().any(|e| e.row == g - 1 && e.col == self.ship_col) {
            0.8
        } else {
            1.0
        };
        obs.set(g - 1, self.ship_col, ship);
        obs
    }
}
