use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Game, Observation};

const MOVES: [(i64, i64); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
const ENEMY_PERIOD: usize = 2;

/// Pellet maze with one chasing enemy. Pellets score +1 each and refill once
/// cleared; touching the enemy ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeChase {
    pub grid: usize,
    pub walls: Vec<bool>,
    pub pellets: Vec<bool>,
    pub agent: (usize, usize),
    pub enemy: (usize, usize),
    pub enemy_dir: usize,
    pub t: usize,
}

impl MazeChase {
    pub fn new(grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = grid;
        let mut walls = vec![false; g * g];
        for r in 0..g {
            for c in 0..g {
                let border = r == 0 || c == 0 || r == g - 1 || c == g - 1;
                let pillar = r % 2 == 0 && c % 2 == 0;
                walls[r * g + c] = border || pillar;
            }
        }
        let mut s = Self {
            grid,
            pellets: vec![false; g * g],
            walls,
            agent: (0, 0),
            enemy: (0, 0),
            enemy_dir: 0,
            t: 0,
        };
        s.refill();
        let hi = odd_below(g - 1);
        let corners = [(1, 1), (1, hi), (hi, 1), (hi, hi)];
        let k = rng.gen_range(0..4);
        s.agent = corners[k];
        s.enemy = corners[3 - k];
        // jitter the enemy along its corridor
        let shift = 2 * rng.gen_range(0..g / 4);
        s.enemy.1 = if s.enemy.1 == 1 { 1 + shift } else { s.enemy.1 - shift };
        s.enemy_dir = rng.gen_range(1..5);
        s.pellets[s.agent.0 * g + s.agent.1] = false;
        s
    }

    fn refill(&mut self) {
        let g = self.grid;
        for r in 0..g {
            for c in 0..g {
                self.pellets[r * g + c] = r % 2 == 1 && c % 2 == 1 && !self.walls[r * g + c];
            }
        }
    }

    fn open(&self, pos: (usize, usize), dir: usize) -> Option<(usize, usize)> {
        let (dr, dc) = MOVES[dir];
        let r = pos.0 as i64 + dr;
        let c = pos.1 as i64 + dc;
        let g = self.grid as i64;
        if r < 0 || c < 0 || r >= g || c >= g || self.walls[(r * g + c) as usize] {
            return None;
        }
        Some((r as usize, c as usize))
    }

    fn move_enemy(&mut self, rng: &mut ChaCha8Rng) {
        let reverse = |d: usize| match d {
            1 => 2,
            2 => 1,
            3 => 4,
            4 => 3,
            _ => 0,
        };
        let options: Vec<usize> = (1..5)
            .filter(|&d| self.open(self.enemy, d).is_some() && d != reverse(self.enemy_dir))
            .collect();
        let options = if options.is_empty() {
            vec![reverse(self.enemy_dir)]
        } else {
            options
        };
        let dist = |p: (usize, usize)| p.0.abs_diff(self.agent.0) + p.1.abs_diff(self.agent.1);
        let dir = if rng.gen_bool(0.5) {
            *options
                .iter()
                .min_by_key(|&&d| dist(self.open(self.enemy, d).unwrap()))
                .unwrap()
        } else {
            options[rng.gen_range(0..options.len())]
        };
        self.enemy_dir = dir;
        self.enemy = self.open(self.enemy, dir).unwrap();
    }
}

fn odd_below(n: usize) -> usize {
    if n % 2 == 1 {
        n - 2
    } else {
        n - 1
    }
}

impl Game for MazeChase {
    fn advance(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (f64, bool) {
        self.t += 1;
        let g = self.grid;
        let before = self.agent;
        if let Some(p) = self.open(self.agent, action) {
            self.agent = p;
        }
        if self.agent == self.enemy {
            return (0.0, true);
        }
        let mut reward = 0.0;
        let cell = self.agent.0 * g + self.agent.1;
        if self.pellets[cell] {
            self.pellets[cell] = false;
            reward = 1.0;
            if !self.pellets.iter().any(|&p| p) {
                self.refill();
                self.pellets[cell] = false;
            }
        }
        if self.t % ENEMY_PERIOD == 0 {
            let prev = self.enemy;
            self.move_enemy(rng);
            // caught head-on or swapped cells
            if self.enemy == self.agent || (prev == self.agent && self.enemy == before) {
                return (reward, true);
            }
        }
        (reward, false)
    }

    fn render(&self) -> Observation {
        let g = self.grid;
        let mut obs = Observation::blank(g);
        for i in 0..g * g {
            if self.walls[i] {
                obs.pixels[i] = 0.5;
            } else if self.pellets[i] {
                obs.pixels[i] = 0.25;
            }
        }
        let e = self.enemy.0 * g + self.enemy.1;
        obs.pixels[e] = if self.pellets[e] { 0.85 } else { 0.75 };
        let a = self.agent.0 * g + self.agent.1;
        obs.pixels[a] = if a == e { 0.9 } else { 1.0 };
        obs
    }
}
