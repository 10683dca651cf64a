//! Random-rollout fuzzing of both simulators against independent rules.

use std::collections::BTreeMap;
use std::sync::Arc;

use afa_core::bouncing_ball::{BallConfig, BouncingBall, DOWN, LEFT, RIGHT, UP};
use afa_core::sepsis::{treatments_from_bits, Sepsis, SepsisDynamics, MAX_STEPS};
use afa_core::types::Outcome as Ending;
use afa_core::{CostModel, Environment, FeatureMask, JointAction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const UNIT_COST: f64 = 0.01;

fn random_action(rng: &mut ChaCha8Rng, n_controls: usize, n_features: usize) -> JointAction {
    JointAction::new(
        rng.random_range(0..n_controls),
        FeatureMask::new((0..n_features).map(|_| rng.random_bool(0.5)).collect()),
    )
}

/// Folds an unconstrained coordinate back into `[lo, hi]` by mirror symmetry.
fn fold(p: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    let q = (p - lo).rem_euclid(2.0 * width);
    lo + if q > width { 2.0 * width - q } else { q }
}

/// Velocity change requested by a control, before the cap is applied.
fn requested(control: usize, delta: f64) -> (f64, f64) {
    match control {
        LEFT => (-delta, 0.0),
        RIGHT => (delta, 0.0),
        DOWN => (0.0, delta),
        UP => (0.0, -delta),
        _ => (0.0, 0.0),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

pub fn bouncing_ball() -> Result<String, String> {
    let cfg = BallConfig::default();
    let (lo, hi) = (cfg.lower(), cfg.upper());
    let mut episodes = 0usize;
    let mut successes = 0usize;
    let mut capped = 0usize;
    for seed in 0..10u64 {
        let mut env = BouncingBall::new(cfg.clone(), CostModel::new(UNIT_COST, 0.99).map_err(|e| e.to_string())?);
        let desc = env.descriptor().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut need_reset = true;
        for step in 0..10_000 {
            if need_reset {
                env.reset(rng.random());
                episodes += 1;
                let s = *env.state().ok_or("no state after reset")?;
                let speed = s.vx.hypot(s.vy);
                if (speed - 4.0).abs() > 1e-9 {
                    return Err(format!("seed {seed}: initial speed {speed}"));
                }
            }
            let before = *env.state().ok_or("no state")?;
            let action = random_action(&mut rng, desc.n_control_actions, desc.n_features);
            let out = env.step(&action).map_err(|e| e.to_string())?;
            let after = *env.state().ok_or("no state")?;
            let ctx = format!("seed {seed} step {step}");

            // Velocity: the requested change is kept only when it stays under the cap.
            let (dx, dy) = requested(action.control, cfg.velocity_delta);
            let mut expect = (before.vx, before.vy);
            for (v, d) in [(&mut expect.0, dx), (&mut expect.1, dy)] {
                if d != 0.0 {
                    if (*v + d).abs() > cfg.max_speed {
                        capped += 1;
                    } else {
                        *v += d;
                    }
                }
            }
            if !close(after.vx.abs(), expect.0.abs()) || !close(after.vy.abs(), expect.1.abs()) {
                return Err(format!("{ctx}: velocity {:?} expected magnitudes {:?}", (after.vx, after.vy), expect));
            }
            if after.vx.abs() > cfg.max_speed + 1e-12 || after.vy.abs() > cfg.max_speed + 1e-12 {
                return Err(format!("{ctx}: speed component above the cap"));
            }

            // Position: straight-line move folded into the admissible box.
            let (x, y) = (fold(before.x + expect.0, lo, hi), fold(before.y + expect.1, lo, hi));
            if !close(after.x, x) || !close(after.y, y) {
                return Err(format!("{ctx}: position ({}, {}) expected ({x}, {y})", after.x, after.y));
            }
            if !(lo..=hi).contains(&after.x) || !(lo..=hi).contains(&after.y) {
                return Err(format!("{ctx}: ball left the box at ({}, {})", after.x, after.y));
            }
            let frame_ok = out.obs.mask() == desc.expand_mask(&action.acquisition).map_err(|e| e.to_string())?;
            if !frame_ok {
                return Err(format!("{ctx}: observation mask differs from the acquisition"));
            }

            // Reward and termination.
            let hit = (after.x - cfg.target.0).abs() <= cfg.target_threshold
                && (after.y - cfg.target.1).abs() <= cfg.target_threshold;
            let (reward, terminal, ending) = if hit {
                (cfg.reward_success, true, Ending::Success)
            } else if after.step_count >= cfg.max_steps {
                (0.0, true, Ending::Timeout)
            } else {
                (0.0, false, Ending::None)
            };
            if out.reward != reward || out.terminal != terminal || out.outcome != ending {
                return Err(format!(
                    "{ctx}: got ({}, {}, {:?}) expected ({reward}, {terminal}, {ending:?})",
                    out.reward, out.terminal, out.outcome
                ));
            }
            let cost = UNIT_COST * action.acquisition.count() as f64;
            if !close(out.cost, cost) {
                return Err(format!("{ctx}: cost {} expected {cost}", out.cost));
            }
            successes += hit as usize;
            need_reset = terminal;
        }
    }
    Ok(format!("100000 steps, {episodes} episodes, {successes} successes, {capped} capped updates"))
}

/// One cell of the pooled frequency test: observed count against the sum of
/// model probabilities over every visit.
#[derive(Default)]
struct Cell {
    observed: f64,
    expected: f64,
    variance: f64,
}

pub fn sepsis() -> Result<String, String> {
    let mut rows = 0usize;
    for (name, d) in [("reference", SepsisDynamics::reference()), ("shipped", SepsisDynamics::shipped())] {
        let counts = d.level_counts();
        for (v, &levels) in counts.iter().enumerate() {
            for level in 0..levels {
                for prev in 0..8 {
                    for treat in 0..8 {
                        for diabetic in [false, true] {
                            let row = d.row(v, level, treatments_from_bits(prev), treatments_from_bits(treat), diabetic);
                            let sum: f64 = row.iter().sum();
                            if row.len() != levels || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                                return Err(format!("{name}: vital {v} level {level} row {row:?} is not a distribution"));
                            }
                            rows += 1;
                        }
                    }
                }
            }
        }
    }

    let dynamics = Arc::new(SepsisDynamics::shipped());
    let normal = dynamics.normal_levels();
    let mut env = Sepsis::new(dynamics.clone(), CostModel::new(UNIT_COST, 0.99).map_err(|e| e.to_string())?);
    let desc = env.descriptor().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cells: BTreeMap<(usize, usize, usize), Cell> = BTreeMap::new();
    let mut endings: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut need_reset = true;
    let mut length = 0usize;
    for step in 0..100_000 {
        if need_reset {
            env.reset(rng.random());
            length = 0;
        }
        let before = *env.state().ok_or("no state")?;
        let action = random_action(&mut rng, desc.n_control_actions, desc.n_features);
        let out = env.step(&action).map_err(|e| e.to_string())?;
        let after = *env.state().ok_or("no state")?;
        length += 1;
        let ctx = format!("step {step}");

        for v in 0..4 {
            let row = dynamics.row(v, before.vitals[v], before.treatments, treatments_from_bits(action.control), before.diabetic);
            for (k, p) in row.iter().enumerate() {
                let cell = cells.entry((v, before.vitals[v], k)).or_default();
                cell.expected += p;
                cell.variance += p * (1.0 - p);
                cell.observed += (after.vitals[v] == k) as u8 as f64;
            }
        }

        if ![-1.0, 0.0, 1.0].contains(&out.reward) {
            return Err(format!("{ctx}: reward {}", out.reward));
        }
        if length > MAX_STEPS {
            return Err(format!("{ctx}: episode longer than {MAX_STEPS}"));
        }
        let abnormal = (0..4).filter(|&v| after.vitals[v] != normal[v]).count();
        let (reward, ending) = match out.outcome {
            Ending::Discharge => {
                if abnormal != 0 {
                    return Err(format!("{ctx}: discharge with vitals {:?}", after.vitals));
                }
                (1.0, "discharge")
            }
            Ending::Mortality => {
                if abnormal < 3 {
                    return Err(format!("{ctx}: death with vitals {:?}", after.vitals));
                }
                (-1.0, "mortality")
            }
            Ending::Timeout => {
                if length != MAX_STEPS || abnormal == 0 || abnormal >= 3 {
                    return Err(format!("{ctx}: timeout after {length} steps with {abnormal} abnormal"));
                }
                (0.0, "timeout")
            }
            Ending::None => {
                if abnormal == 0 || abnormal >= 3 || length >= MAX_STEPS {
                    return Err(format!("{ctx}: episode continued with {abnormal} abnormal at step {length}"));
                }
                (0.0, "running")
            }
            Ending::Success => return Err(format!("{ctx}: sepsis reported success")),
        };
        if out.reward != reward || out.terminal != (ending != "running") {
            return Err(format!("{ctx}: reward {} terminal {} for {ending}", out.reward, out.terminal));
        }
        *endings.entry(ending).or_default() += 1;
        need_reset = out.terminal;
    }

    let mut worst = (0.0f64, (0, 0, 0));
    for (key, cell) in &cells {
        if cell.variance <= 0.0 {
            if cell.observed != cell.expected.round() {
                return Err(format!("cell {key:?}: {} observed for a deterministic outcome", cell.observed));
            }
            continue;
        }
        let z = (cell.observed - cell.expected).abs() / cell.variance.sqrt();
        if z > worst.0 {
            worst = (z, *key);
        }
    }
    let summary = format!(
        "{rows} rows stochastic; endings {endings:?}; {} frequency cells, worst |z| {:.2} at (vital, from, to) {:?}",
        cells.len(),
        worst.0,
        worst.1
    );
    if worst.0 > 3.0 {
        return Err(summary);
    }
    Ok(summary)
}

pub fn environment_fuzz() -> Outcome {
    let ball = bouncing_ball()?;
    let sepsis = sepsis()?;
    Ok(format!("ball: {ball}; sepsis: {sepsis}"))
}
