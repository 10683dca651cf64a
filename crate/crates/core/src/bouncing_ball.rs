//! BouncingBall+: steer a ball in a 32x32 box to a fixed target while paying
//! for the image quadrants it looks at.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{acquisition_cost, CostModel};
use crate::env::Environment;
use crate::error::{CoreError, Result};
use crate::types::{EnvDescriptor, JointAction, MaskedObservation, Outcome, StepResult};

pub const VERSION: &str = "bouncing-ball-plus-v1";

/// Control indices.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const UP: usize = 3;
pub const NULL: usize = 4;
pub const N_CONTROLS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    pub box_size: usize,
    pub ball_radius: f64,
    pub target: (f64, f64),
    pub target_threshold: f64,
    pub speed_init: f64,
    pub velocity_delta: f64,
    pub max_speed: f64,
    pub max_steps: usize,
    pub reward_success: f64,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            box_size: 32,
            ball_radius: 2.0,
            target: (5.0, 25.0),
            target_threshold: 1.0,
            speed_init: 4.0,
            velocity_delta: 0.5,
            max_speed: 5.0,
            max_steps: 50,
            reward_success: 1.0,
        }
    }
}

impl BallConfig {
    /// Smallest admissible center coordinate.
    pub fn lower(&self) -> f64 {
        self.ball_radius
    }

    /// Largest admissible center coordinate; keeps the whole disk on the
    /// pixel grid `0..box_size`.
    pub fn upper(&self) -> f64 {
        (self.box_size - 1) as f64 - self.ball_radius
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        let n = self.box_size;
        let half = n / 2;
        let quadrant = |row0: usize, col0: usize| -> Vec<usize> {
            (row0..row0 + half)
                .flat_map(|r| (col0..col0 + half).map(move |c| r * n + c))
                .collect()
        };
        EnvDescriptor::new(
            "bouncing_ball",
            vec![n, n],
            N_CONTROLS,
            self.max_steps,
            vec![quadrant(0, 0), quadrant(0, half), quadrant(half, 0), quadrant(half, half)],
        )
        .expect("quadrants are disjoint")
    }
}

/// Ball center `(x, y)` in pixels; `x` runs along columns, `y` down the rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallTransition {
    pub state: BallState,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Outcome,
}

fn reflect(mut pos: f64, mut vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    while pos < lo || pos > hi {
        if pos < lo {
            pos = 2.0 * lo - pos;
            vel = vel.abs();
        } else {
            pos = 2.0 * hi - pos;
            vel = -vel.abs();
        }
    }
    (pos, vel)
}

impl BallConfig {
    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> BallState {
        let half = (self.box_size / 2) as f64;
        let x = rng.random_range(self.lower()..half);
        let y = rng.random_range(self.lower()..half);
        let (vx, vy) = loop {
            let a: f64 = rng.random_range(-0.5..=0.5);
            let b: f64 = rng.random_range(-0.5..=0.5);
            let norm = a.hypot(b);
            if norm > 1e-12 {
                break (self.speed_init * a / norm, self.speed_init * b / norm);
            }
        };
        BallState {
            x,
            y,
            vx,
            vy,
            step_count: 0,
        }
    }

    /// Velocity after a control; an update that would push a component past
    /// `max_speed` is discarded.
    pub fn apply_control(&self, vx: f64, vy: f64, control: usize) -> (f64, f64) {
        let d = self.velocity_delta;
        let capped = |v: f64, dv: f64| if (v + dv).abs() > self.max_speed { v } else { v + dv };
        match control {
            LEFT => (capped(vx, -d), vy),
            RIGHT => (capped(vx, d), vy),
            DOWN => (vx, capped(vy, d)),
            UP => (vx, capped(vy, -d)),
            _ => (vx, vy),
        }
    }

    pub fn transition(&self, state: &BallState, control: usize) -> Result<BallTransition> {
        if control >= N_CONTROLS {
            return Err(CoreError::InvalidControl {
                index: control,
                n: N_CONTROLS,
            });
        }
        let (vx, vy) = self.apply_control(state.vx, state.vy, control);
        let (x, vx) = reflect(state.x + vx, vx, self.lower(), self.upper());
        let (y, vy) = reflect(state.y + vy, vy, self.lower(), self.upper());
        let next = BallState {
            x,
            y,
            vx,
            vy,
            step_count: state.step_count + 1,
        };
        let hit = (x - self.target.0).abs() <= self.target_threshold
            && (y - self.target.1).abs() <= self.target_threshold;
        let (reward, terminal, outcome) = if hit {
            (self.reward_success, true, Outcome::Success)
        } else if next.step_count >= self.max_steps {
            (0.0, true, Outcome::Timeout)
        } else {
            (0.0, false, Outcome::None)
        };
        Ok(BallTransition {
            state: next,
            reward,
            terminal,
            outcome,
        })
    }

    /// Binary frame, row-major, with every pixel within `ball_radius` of the
    /// center set to one.
    pub fn render(&self, state: &BallState) -> Vec<f32> {
        let n = self.box_size;
        let r2 = self.ball_radius * self.ball_radius;
        let mut frame = vec![0.0f32; n * n];
        let r = self.ball_radius.ceil() as i64;
        let (cx, cy) = (state.x.round() as i64, state.y.round() as i64);
        for row in (cy - r - 1).max(0)..=(cy + r + 1).min(n as i64 - 1) {
            for col in (cx - r - 1).max(0)..=(cx + r + 1).min(n as i64 - 1) {
                let dx = col as f64 - state.x;
                let dy = row as f64 - state.y;
                if dx * dx + dy * dy <= r2 {
                    frame[row as usize * n + col as usize] = 1.0;
                }
            }
        }
        frame
    }
}

/// Stateful BouncingBall+ environment.
#[derive(Debug, Clone)]
pub struct BouncingBall {
    cfg: BallConfig,
    desc: EnvDescriptor,
    cost: CostModel,
    state: Option<BallState>,
    done: bool,
}

impl BouncingBall {
    pub fn new(cfg: BallConfig, cost: CostModel) -> Self {
        let desc = cfg.descriptor();
        Self {
            cfg,
            desc,
            cost,
            state: None,
            done: false,
        }
    }

    pub fn config(&self) -> &BallConfig {
        &self.cfg
    }

    pub fn state(&self) -> Option<&BallState> {
        self.state.as_ref()
    }

    /// Places the ball in a given state, e.g. for scripted tests.
    pub fn set_state(&mut self, state: BallState) {
        self.state = Some(state);
        self.done = false;
    }
}

impl Environment for BouncingBall {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    fn set_cost_model(&mut self, cost: CostModel) {
        self.cost = cost;
    }

    fn version(&self) -> String {
        VERSION.to_string()
    }

    fn reset(&mut self, seed: u64) -> MaskedObservation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = self.cfg.initial_state(&mut rng);
        self.state = Some(state);
        self.done = false;
        MaskedObservation::from_full(self.cfg.render(&state), self.desc.null_mask())
            .expect("frame matches descriptor")
    }

    fn step(&mut self, action: &JointAction) -> Result<StepResult> {
        let state = self.state.ok_or(CoreError::NotReset)?;
        if self.done {
            return Err(CoreError::EpisodeOver);
        }
        let raw_mask = self.desc.expand_mask(&action.acquisition)?;
        let tr = self.cfg.transition(&state, action.control)?;
        self.state = Some(tr.state);
        self.done = tr.terminal;
        let obs = MaskedObservation::from_full(self.cfg.render(&tr.state), raw_mask)?;
        let mut info = BTreeMap::new();
        info.insert("outcome".to_string(), tr.outcome.as_str().to_string());
        Ok(StepResult {
            obs,
            reward: tr.reward,
            cost: acquisition_cost(&action.acquisition, &self.cost),
            terminal: tr.terminal,
            outcome: tr.outcome,
            info,
        })
    }
}
