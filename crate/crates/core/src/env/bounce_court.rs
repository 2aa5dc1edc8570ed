use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Game, Observation};

const PADDLE_WIDTH: usize = 3;
/// Speed multiplier applied on every paddle hit.
pub const SPEED_UP: f64 = 1.1;
/// Ball speed never exceeds one cell per step, so it cannot skip the paddle row.
pub const MAX_SPEED: f64 = 0.95;

/// Continuous-state ball reflecting off three walls and a paddle. A paddle
/// hit scores +1 and speeds the ball up by [`SPEED_UP`]; a miss scores -1
/// and ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct BounceCourt {
    pub grid: usize,
    pub paddle: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl BounceCourt {
    pub fn new(grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = grid as f64;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            grid,
            paddle: grid / 2 - PADDLE_WIDTH / 2 - 1,
            x: rng.gen_range(1.0..g - 1.0),
            y: rng.gen_range(0.5..2.5),
            vx: sign * rng.gen_range(0.15..0.35),
            vy: 0.3,
        }
    }

    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }

    fn covers(&self, col: usize) -> bool {
        col >= self.paddle && col < self.paddle + PADDLE_WIDTH
    }
}

impl Game for BounceCourt {
    fn advance(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (f64, bool) {
        let g = self.grid as f64;
        match action {
            1 => self.paddle = self.paddle.saturating_sub(1),
            2 => self.paddle = (self.paddle + 1).min(self.grid - PADDLE_WIDTH),
            _ => {}
        }
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = self.vx.abs();
        } else if self.x >= g {
            self.x = 2.0 * g - self.x - 1e-9;
            self.vx = -self.vx.abs();
        }
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = self.vy.abs();
        }
        let line = g - 1.0;
        if self.y >= line {
            let col = (self.x as usize).min(self.grid - 1);
            if self.covers(col) {
                self.y = (2.0 * line - self.y).max(0.0);
                self.vy = -self.vy.abs();
                let s = self.speed();
                let k = (SPEED_UP * s).min(MAX_SPEED) / s;
                self.vx *= k;
                self.vy *= k;
                return (1.0, false);
            }
            self.y = self.y.min(g - 1e-9);
            return (-1.0, true);
        }
        (0.0, false)
    }

    fn render(&self) -> Observation {
        let mut obs = Observation::blank(self.grid);
        let row = self.grid - 1;
        for c in self.paddle..self.paddle + PADDLE_WIDTH {
            obs.set(row, c, 0.6);
        }
        let bx = (self.x as usize).min(self.grid - 1);
        let by = (self.y as usize).min(self.grid - 1);
        obs.set(by, bx, 1.0);
        obs
    }
}
