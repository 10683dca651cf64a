//! Tabular Sepsis dynamics and their on-disk format.
//!
//! Each measurement vital evolves independently given the treatment status
//! before the step, the treatments chosen for the step and the diabetes flag.
//! Rows are keyed by `(level, previous, treatment, diabetic)` because a
//! treatment that is switched off has its own withdrawal effect.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};

pub const VITAL_NAMES: [&str; 4] = ["heart_rate", "sys_bp", "percoxyg", "glucose"];
pub const HEART_RATE: usize = 0;
pub const SYS_BP: usize = 1;
pub const PERCOXYG: usize = 2;
pub const GLUCOSE: usize = 3;

pub const ABX: usize = 0;
pub const VENT: usize = 1;
pub const VASO: usize = 2;

pub type Treatments = [bool; 3];

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitalSpec {
    pub name: String,
    pub levels: usize,
    pub normal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub diabetic_prob: f64,
    /// Per-vital level distribution, in `vitals` order.
    pub vitals: Vec<Vec<f64>>,
    /// Resample initial states that already satisfy an outcome predicate.
    pub reject_absorbing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRule {
    /// Mortality when at least this many vitals are away from normal.
    pub mortality_min_abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRow {
    pub level: usize,
    pub previous: Treatments,
    pub treatment: Treatments,
    pub diabetic: bool,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionTable {
    pub vital: String,
    pub rows: Vec<TransitionRow>,
}

/// Serialized form of [`SepsisDynamics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsFile {
    pub version: String,
    pub vitals: Vec<VitalSpec>,
    pub initial: InitialSpec,
    pub outcome: OutcomeRule,
    pub transitions: Vec<TransitionTable>,
}

/// Validated, immutable Sepsis dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct SepsisDynamics {
    version: String,
    vitals: Vec<VitalSpec>,
    initial: InitialSpec,
    outcome: OutcomeRule,
    // tables[v][row_index(level, previous, treatment, diabetic)]
    tables: Vec<Vec<Vec<f64>>>,
}

fn bits(t: Treatments) -> usize {
    t.iter()
        .enumerate()
        .map(|(i, &b)| (b as usize) << i)
        .sum()
}

pub fn treatments_from_bits(code: usize) -> Treatments {
    [code & 1 != 0, code & 2 != 0, code & 4 != 0]
}

fn row_index(level: usize, previous: Treatments, treatment: Treatments, diabetic: bool) -> usize {
    ((level * 8 + bits(previous)) * 8 + bits(treatment)) * 2 + diabetic as usize
}

fn describe_row(vital: &str, level: usize, p: Treatments, t: Treatments, d: bool) -> String {
    format!("{vital} row (level={level}, previous={p:?}, treatment={t:?}, diabetic={d})")
}

fn check_distribution(probs: &[f64], what: &str) -> std::result::Result<(), String> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(format!("{what} has a negative or non-finite entry"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(format!("{what} sums to {sum}, expected 1"));
    }
    Ok(())
}

impl SepsisDynamics {
    pub fn from_file_struct(file: DynamicsFile, origin: &str) -> Result<Self> {
        let fail = |reason: String| CoreError::Dynamics {
            path: origin.to_string(),
            reason,
        };
        if file.vitals.len() != VITAL_NAMES.len() {
            return Err(fail(format!(
                "expected {} vitals, found {}",
                VITAL_NAMES.len(),
                file.vitals.len()
            )));
        }
        for (spec, name) in file.vitals.iter().zip(VITAL_NAMES) {
            if spec.name != name {
                return Err(fail(format!("expected vital `{name}`, found `{}`", spec.name)));
            }
            if spec.levels < 2 || spec.normal >= spec.levels {
                return Err(fail(format!(
                    "vital `{name}` has {} levels with normal index {}",
                    spec.levels, spec.normal
                )));
            }
        }
        if !(0.0..=1.0).contains(&file.initial.diabetic_prob) {
            return Err(fail("initial.diabetic_prob outside [0, 1]".into()));
        }
        if file.initial.vitals.len() != VITAL_NAMES.len() {
            return Err(fail("initial.vitals must list one distribution per vital".into()));
        }
        for (v, dist) in file.initial.vitals.iter().enumerate() {
            if dist.len() != file.vitals[v].levels {
                return Err(fail(format!("initial distribution for `{}` has wrong length", VITAL_NAMES[v])));
            }
            check_distribution(dist, &format!("initial distribution for `{}`", VITAL_NAMES[v]))
                .map_err(&fail)?;
        }
        if file.outcome.mortality_min_abnormal == 0 {
            return Err(fail("outcome.mortality_min_abnormal must be at least 1".into()));
        }

        let mut tables = Vec::with_capacity(VITAL_NAMES.len());
        for (v, name) in VITAL_NAMES.iter().enumerate() {
            let table = file
                .transitions
                .iter()
                .find(|t| t.vital == *name)
                .ok_or_else(|| fail(format!("missing transition table for vital `{name}`")))?;
            let levels = file.vitals[v].levels;
            let mut rows: Vec<Option<Vec<f64>>> = vec![None; levels * 8 * 8 * 2];
            for row in &table.rows {
                let what = describe_row(name, row.level, row.previous, row.treatment, row.diabetic);
                if row.level >= levels {
                    return Err(fail(format!("{what}: level out of range")));
                }
                if row.probs.len() != levels {
                    return Err(fail(format!("{what}: expected {levels} probabilities")));
                }
                check_distribution(&row.probs, &what).map_err(&fail)?;
                let idx = row_index(row.level, row.previous, row.treatment, row.diabetic);
                if rows[idx].replace(row.probs.clone()).is_some() {
                    return Err(fail(format!("{what}: duplicate row")));
                }
            }
            let mut dense = Vec::with_capacity(rows.len());
            for (idx, row) in rows.into_iter().enumerate() {
                match row {
                    Some(p) => dense.push(p),
                    None => {
                        let d = idx % 2 == 1;
                        let t = treatments_from_bits((idx / 2) % 8);
                        let p = treatments_from_bits((idx / 16) % 8);
                        let level = idx / 128;
                        return Err(fail(format!("{}: missing", describe_row(name, level, p, t, d))));
                    }
                }
            }
            tables.push(dense);
        }
        if let Some(extra) = file
            .transitions
            .iter()
            .find(|t| !VITAL_NAMES.contains(&t.vital.as_str()))
        {
            return Err(fail(format!("unknown vital table `{}`", extra.vital)));
        }
        Ok(Self {
            version: file.version,
            vitals: file.vitals,
            initial: file.initial,
            outcome: file.outcome,
            tables,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: DynamicsFile = serde_json::from_str(text).map_err(|source| CoreError::Json {
            path: origin.to_string(),
            source,
        })?;
        Self::from_file_struct(file, origin)
    }

    /// Dynamics shipped with the crate.
    pub fn shipped() -> Self {
        Self::parse(include_str!("../../data/sepsis_dynamics_v1.json"), "<shipped>")
            .expect("shipped dynamics file is valid")
    }

    pub fn to_file_struct(&self) -> DynamicsFile {
        let mut transitions = Vec::new();
        for (v, name) in VITAL_NAMES.iter().enumerate() {
            let mut rows = Vec::new();
            for level in 0..self.vitals[v].levels {
                for p in 0..8 {
                    for t in 0..8 {
                        for d in [false, true] {
                            let (previous, treatment) = (treatments_from_bits(p), treatments_from_bits(t));
                            rows.push(TransitionRow {
                                level,
                                previous,
                                treatment,
                                diabetic: d,
                                probs: self.row(v, level, previous, treatment, d).to_vec(),
                            });
                        }
                    }
                }
            }
            transitions.push(TransitionTable {
                vital: name.to_string(),
                rows,
            });
        }
        DynamicsFile {
            version: self.version.clone(),
            vitals: self.vitals.clone(),
            initial: self.initial.clone(),
            outcome: self.outcome.clone(),
            transitions,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_struct()).expect("dynamics serialize") + "\n"
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn vitals(&self) -> &[VitalSpec] {
        &self.vitals
    }

    pub fn level_counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|v| self.vitals[v].levels)
    }

    pub fn normal_levels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|v| self.vitals[v].normal)
    }

    pub fn initial(&self) -> &InitialSpec {
        &self.initial
    }

    pub fn outcome_rule(&self) -> &OutcomeRule {
        &self.outcome
    }

    pub fn row(
        &self,
        vital: usize,
        level: usize,
        previous: Treatments,
        treatment: Treatments,
        diabetic: bool,
    ) -> &[f64] {
        &self.tables[vital][row_index(level, previous, treatment, diabetic)]
    }

    pub fn num_abnormal(&self, vitals: &[usize; 4]) -> usize {
        vitals
            .iter()
            .zip(&self.vitals)
            .filter(|(l, spec)| **l != spec.normal)
            .count()
    }

    pub fn is_discharge(&self, vitals: &[usize; 4]) -> bool {
        self.num_abnormal(vitals) == 0
    }

    pub fn is_mortality(&self, vitals: &[usize; 4]) -> bool {
        self.num_abnormal(vitals) >= self.outcome.mortality_min_abnormal
    }

    /// Degenerate dynamics in which every vital keeps its level.
    pub fn identity(version: &str) -> Self {
        let reference = Self::reference();
        let tables = reference
            .vitals
            .iter()
            .map(|spec| {
                (0..spec.levels * 128)
                    .map(|idx| {
                        let mut p = vec![0.0; spec.levels];
                        p[idx / 128] = 1.0;
                        p
                    })
                    .collect()
            })
            .collect();
        Self {
            version: version.to_string(),
            tables,
            ..reference
        }
    }

    /// Dynamics of the reference diabetic Sepsis simulator, tabulated by
    /// composing its per-treatment effects.
    pub fn reference() -> Self {
        let vitals: Vec<VitalSpec> = [(3, 1), (3, 1), (2, 1), (5, 2)]
            .iter()
            .zip(VITAL_NAMES)
            .map(|(&(levels, normal), name)| VitalSpec {
                name: name.to_string(),
                levels,
                normal,
            })
            .collect();
        let initial = InitialSpec {
            diabetic_prob: 0.2,
            vitals: vitals
                .iter()
                .map(|s| vec![1.0 / s.levels as f64; s.levels])
                .collect(),
            reject_absorbing: true,
        };
        let tables = vitals
            .iter()
            .enumerate()
            .map(|(v, spec)| {
                (0..spec.levels * 128)
                    .map(|idx| {
                        let d = idx % 2 == 1;
                        let t = treatments_from_bits((idx / 2) % 8);
                        let p = treatments_from_bits((idx / 16) % 8);
                        reference_row(v, spec.levels, idx / 128, p, t, d)
                    })
                    .collect()
            })
            .collect();
        Self {
            version: "sepsis-diabetic-reference-v1".to_string(),
            vitals,
            initial,
            outcome: OutcomeRule {
                mortality_min_abnormal: 3,
            },
            tables,
        }
    }
}

/// Row-vector times a transition given as a per-level map to outcomes.
fn apply(p: &[f64], step: impl Fn(usize) -> Vec<(usize, f64)>) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for (l, &mass) in p.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (to, q) in step(l) {
            out[to] += mass * q;
        }
    }
    out
}

fn fluctuate(n: usize, down: f64, up: f64) -> impl Fn(usize) -> Vec<(usize, f64)> {
    move |l| {
        vec![
            (l.saturating_sub(1), down),
            ((l + 1).min(n - 1), up),
            (l, 1.0 - down - up),
        ]
    }
}

fn move_if(from: usize, to: usize, prob: f64) -> impl Fn(usize) -> Vec<(usize, f64)> {
    move |l| {
        if l == from {
            vec![(to, prob), (l, 1.0 - prob)]
        } else {
            vec![(l, 1.0)]
        }
    }
}

fn reference_row(
    vital: usize,
    n: usize,
    level: usize,
    previous: Treatments,
    treatment: Treatments,
    diabetic: bool,
) -> Vec<f64> {
    let mut p = vec![0.0; n];
    p[level] = 1.0;
    match vital {
        HEART_RATE => {
            if treatment[ABX] {
                p = apply(&p, move_if(2, 1, 0.5));
            } else if previous[ABX] {
                p = apply(&p, move_if(1, 2, 0.1));
            } else {
                p = apply(&p, fluctuate(n, 0.1, 0.1));
            }
        }
        SYS_BP => {
            let mut free = true;
            if treatment[ABX] {
                p = apply(&p, move_if(2, 1, 0.5));
                free = false;
            } else if previous[ABX] {
                p = apply(&p, move_if(1, 2, 0.1));
                free = false;
            }
            if treatment[VASO] {
                p = if diabetic {
                    apply(&p, |l| match l {
                        0 => vec![(1, 0.5), (2, 0.4), (0, 0.1)],
                        1 => vec![(2, 0.9), (1, 0.1)],
                        _ => vec![(l, 1.0)],
                    })
                } else {
                    apply(&p, |l| match l {
                        0 => vec![(1, 0.7), (0, 0.3)],
                        1 => vec![(2, 0.7), (1, 0.3)],
                        _ => vec![(l, 1.0)],
                    })
                };
                free = false;
            } else if previous[VASO] {
                let q = if diabetic { 0.05 } else { 0.1 };
                p = apply(&p, |l| vec![(l.saturating_sub(1), q), (l, 1.0 - q)]);
                free = false;
            }
            if free {
                p = apply(&p, fluctuate(n, 0.1, 0.1));
            }
        }
        PERCOXYG => {
            if treatment[VENT] {
                p = apply(&p, move_if(0, 1, 0.7));
            } else if previous[VENT] {
                p = apply(&p, move_if(1, 0, 0.1));
            } else {
                p = apply(&p, fluctuate(n, 0.1, 0.1));
            }
        }
        _ => {
            if treatment[VASO] {
                if diabetic {
                    p = apply(&p, |l| vec![((l + 1).min(n - 1), 0.5), (l, 0.5)]);
                }
            } else if diabetic {
                p = apply(&p, fluctuate(n, 0.3, 0.3));
            } else {
                p = apply(&p, fluctuate(n, 0.1, 0.1));
            }
        }
    }
    p
}
