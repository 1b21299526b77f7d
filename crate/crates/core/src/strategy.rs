//! Turning attribution vectors into `(delta_h, delta_w)`.
//!
//! Hard strategies take the argmax of J6 or J+ and apply the fixed action for
//! that slot. The soft strategy blends the four gradient channels with
//! temperature-softmax weights sharpened by a contrast exponent. Three
//! baselines ignore the scores: static roles (`h` on Heat, `w` on
//! Confidence), fixed scalarization and pairwise gradient surgery.
//!
//! Most actions are a non-negative mix of the four blocks,
//! `delta_h = -eta_h (a J11 + b J21)` and `delta_w = -eta_w (c J12 + d J22)`,
//! which [`Mix`] records so the decision stays inspectable.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::attrib::{
    j6_with, jplus_with, Aligner, AttribError, GradientSet, J6Vector, JPlusVector,
};
use crate::linalg::{argmax, axpy, dot, max_abs, norm_sq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{name} must be {requirement}, got {value}")]
    OutOfRange {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("unknown strategy `{0}` (expected one of hard-j6, hard-jplus, soft, static, scalarized, grad-surgery)")]
    UnknownStrategy(String),
    #[error("unknown pre-normalization `{0}` (expected none or max-abs)")]
    UnknownPreNorm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    HardJ6,
    HardJPlus,
    Soft,
    Static,
    Scalarized,
    GradSurgery,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::HardJ6,
        StrategyKind::HardJPlus,
        StrategyKind::Soft,
        StrategyKind::Static,
        StrategyKind::Scalarized,
        StrategyKind::GradSurgery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::HardJ6 => "hard-j6",
            StrategyKind::HardJPlus => "hard-jplus",
            StrategyKind::Soft => "soft",
            StrategyKind::Static => "static",
            StrategyKind::Scalarized => "scalarized",
            StrategyKind::GradSurgery => "grad-surgery",
        }
    }

    /// Number of selectable slots for strategies that pick one per step.
    pub fn slot_count(self) -> Option<usize> {
        match self {
            StrategyKind::HardJ6 | StrategyKind::Soft => Some(6),
            StrategyKind::HardJPlus => Some(15),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PreNorm {
    #[default]
    None,
    /// Divide scores by `max|s| + 1e-12` before the softmax.
    MaxAbs,
}

impl FromStr for PreNorm {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PreNorm::None),
            "max-abs" => Ok(PreNorm::MaxAbs),
            other => Err(ConfigError::UnknownPreNorm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Softmax temperature.
    pub tau: f64,
    /// Contrast exponent, > 1.
    pub gamma: f64,
    pub eta_h: f64,
    pub eta_w: f64,
    /// Scale of the auxiliary group in J+ "prioritize / auxiliary" actions.
    pub beta_aux: f64,
    /// Scalarization weights for (Heat, Confidence).
    pub lambda: (f64, f64),
    pub pre_norm: PreNorm,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::HardJ6,
            tau: 1.0,
            gamma: 2.0,
            eta_h: 0.05,
            eta_w: 0.05,
            beta_aux: 0.5,
            lambda: (0.5, 0.5),
            pre_norm: PreNorm::None,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta_h = eta;
        self.eta_w = eta;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |name, ok: bool, requirement, value| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    name,
                    requirement,
                    value,
                })
            }
        };
        check(
            "tau",
            self.tau > 0.0 && self.tau.is_finite(),
            "positive",
            self.tau,
        )?;
        check(
            "gamma",
            self.gamma > 1.0 && self.gamma.is_finite(),
            "> 1",
            self.gamma,
        )?;
        check(
            "eta_h",
            self.eta_h > 0.0 && self.eta_h.is_finite(),
            "positive",
            self.eta_h,
        )?;
        check(
            "eta_w",
            self.eta_w > 0.0 && self.eta_w.is_finite(),
            "positive",
            self.eta_w,
        )?;
        check(
            "beta_aux",
            (0.0..=1.0).contains(&self.beta_aux),
            "in [0, 1]",
            self.beta_aux,
        )?;
        let (l1, l2) = self.lambda;
        check("lambda_1", l1 >= 0.0, "non-negative", l1)?;
        check("lambda_2", l2 >= 0.0, "non-negative", l2)?;
        check(
            "lambda_1 + lambda_2",
            ((l1 + l2) - 1.0).abs() <= 1e-12,
            "1",
            l1 + l2,
        )?;
        Ok(())
    }
}

/// Coefficients of a non-negative block mix:
/// `delta_h = -eta_h (h[0] J11 + h[1] J21)`, `delta_w = -eta_w (w[0] J12 + w[1] J22)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mix {
    pub h: [f64; 2],
    pub w: [f64; 2],
}

impl Mix {
    const fn new(h: [f64; 2], w: [f64; 2]) -> Self {
        Self { h, w }
    }

    pub fn deltas(&self, gs: &GradientSet, cfg: &StrategyConfig) -> (Vec<f64>, Vec<f64>) {
        let mut dh = vec![0.0; gs.j11.len()];
        let mut dw = vec![0.0; gs.j12.len()];
        axpy(-cfg.eta_h * self.h[0], &gs.j11, &mut dh);
        axpy(-cfg.eta_h * self.h[1], &gs.j21, &mut dh);
        axpy(-cfg.eta_w * self.w[0], &gs.j12, &mut dw);
        axpy(-cfg.eta_w * self.w[1], &gs.j22, &mut dw);
        (dh, dw)
    }
}

/// The attribution vector a decision was based on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scores {
    J6(J6Vector),
    JPlus(JPlusVector),
}

impl Scores {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Scores::J6(s) => s.as_slice(),
            Scores::JPlus(s) => s.as_slice(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDecision {
    pub delta_h: Vec<f64>,
    pub delta_w: Vec<f64>,
    /// Argmax slot for hard strategies: 0-based for J6, 1-based for J+.
    pub chosen_index: Option<usize>,
    pub alpha: Option<[f64; 6]>,
    pub scores: Option<Scores>,
    /// Block coefficients, when the update is a plain mix.
    pub mix: Option<Mix>,
}

impl UpdateDecision {
    fn from_mix(mix: Mix, gs: &GradientSet, cfg: &StrategyConfig) -> Self {
        let (delta_h, delta_w) = mix.deltas(gs, cfg);
        Self {
            delta_h,
            delta_w,
            chosen_index: None,
            alpha: None,
            scores: None,
            mix: Some(mix),
        }
    }

    fn with_scores(mut self, scores: Scores) -> Self {
        self.scores = Some(scores);
        self
    }
}

/// Block mix for each J6 slot.
pub fn j6_action(index: usize) -> Mix {
    match index {
        0 => Mix::new([1.0, 0.0], [0.0, 0.0]),
        1 => Mix::new([1.0, 0.0], [0.0, 1.0]),
        2 => Mix::new([0.0, 0.0], [1.0, 0.0]),
        3 => Mix::new([0.0, 1.0], [0.0, 0.0]),
        4 => Mix::new([0.0, 0.0], [0.0, 1.0]),
        5 => Mix::new([0.0, 1.0], [1.0, 0.0]),
        _ => panic!("J6 slot {index} out of range"),
    }
}

/// Block mix for each 1-based J+ index.
pub fn jplus_action(index: usize, beta: f64) -> Mix {
    const NONE: [f64; 2] = [0.0, 0.0];
    const HEAT: [f64; 2] = [1.0, 0.0];
    const CONF: [f64; 2] = [0.0, 1.0];
    const BOTH: [f64; 2] = [1.0, 1.0];
    let aux = [beta, beta];
    match index {
        1 => Mix::new(HEAT, NONE),
        2 => Mix::new(NONE, HEAT),
        3 => Mix::new(CONF, NONE),
        4 => Mix::new(NONE, CONF),
        5 => Mix::new(HEAT, CONF),
        6 => Mix::new(CONF, HEAT),
        7 | 14 => Mix::new(BOTH, NONE),
        8 | 15 => Mix::new(NONE, BOTH),
        9 => Mix::new(BOTH, BOTH),
        10 => Mix::new(HEAT, aux),
        11 => Mix::new(CONF, aux),
        12 => Mix::new(aux, HEAT),
        13 => Mix::new(aux, CONF),
        _ => panic!("J+ index {index} out of range"),
    }
}

pub fn hard_route_j6(s: &J6Vector, gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    let idx = argmax(&s.0);
    let mix = if s.0.iter().all(|&x| x == 0.0) {
        Mix::default()
    } else {
        j6_action(idx)
    };
    UpdateDecision {
        chosen_index: Some(idx),
        ..UpdateDecision::from_mix(mix, gs, cfg)
    }
    .with_scores(Scores::J6(*s))
}

pub fn hard_route_jplus(s: &JPlusVector, gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    let idx = argmax(&s.0) + 1;
    UpdateDecision {
        chosen_index: Some(idx),
        ..UpdateDecision::from_mix(jplus_action(idx, cfg.beta_aux), gs, cfg)
    }
    .with_scores(Scores::JPlus(*s))
}

/// Raw contrast powers `w_i^gamma`, before renormalization.
pub fn reward_powers(weights: &[f64], gamma: f64) -> Vec<f64> {
    weights.iter().map(|w| w.powf(gamma)).collect()
}

/// `w_i^gamma / sum_j w_j^gamma`, evaluated as powers of `w_i / max w` so
/// the largest term is exactly 1 and cannot underflow.
pub fn contrast(weights: &[f64], gamma: f64) -> Vec<f64> {
    let top = weights.iter().copied().fold(0.0_f64, f64::max);
    let mut out: Vec<f64> = weights.iter().map(|w| (w / top).powf(gamma)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Temperature softmax over J6 followed by the contrast step.
pub fn soft_weights(s: &J6Vector, cfg: &StrategyConfig) -> [f64; 6] {
    let mut z = s.0;
    if cfg.pre_norm == PreNorm::MaxAbs {
        let scale = max_abs(&z) + 1e-12;
        z.iter_mut().for_each(|x| *x /= scale);
    }
    z.iter_mut().for_each(|x| *x /= cfg.tau);
    let tilde = crate::model::softmax(&z);
    let alpha = contrast(&tilde, cfg.gamma);
    let mut out = [0.0; 6];
    out.copy_from_slice(&alpha);
    out
}

/// Extra update terms driven by the alignment weights `alpha[1]`, `alpha[5]`,
/// which [`soft_update`] leaves unused.
pub trait AuxiliaryUpdate {
    fn apply(
        &self,
        alpha: &[f64; 6],
        gs: &GradientSet,
        cfg: &StrategyConfig,
        delta_h: &mut [f64],
        delta_w: &mut [f64],
    );
}

/// The default: alignment weights scale nothing.
pub struct NoAuxiliary;

impl AuxiliaryUpdate for NoAuxiliary {
    fn apply(
        &self,
        _: &[f64; 6],
        _: &GradientSet,
        _: &StrategyConfig,
        _: &mut [f64],
        _: &mut [f64],
    ) {
    }
}

pub fn soft_update(alpha: &[f64; 6], gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    soft_update_with(alpha, gs, cfg, &NoAuxiliary)
}

pub fn soft_update_with(
    alpha: &[f64; 6],
    gs: &GradientSet,
    cfg: &StrategyConfig,
    aux: &dyn AuxiliaryUpdate,
) -> UpdateDecision {
    let mix = Mix::new([alpha[0], alpha[3]], [alpha[2], alpha[4]]);
    let mut d = UpdateDecision::from_mix(mix, gs, cfg);
    aux.apply(alpha, gs, cfg, &mut d.delta_h, &mut d.delta_w);
    d.alpha = Some(*alpha);
    d
}

pub fn static_baseline(gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    UpdateDecision::from_mix(Mix::new([1.0, 0.0], [0.0, 1.0]), gs, cfg)
}

pub fn scalarized_baseline(gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    let (l1, l2) = cfg.lambda;
    UpdateDecision::from_mix(Mix::new([l1, l2], [l1, l2]), gs, cfg)
}

/// Projects each of two conflicting gradients off the other (against the
/// originals) and returns `g1' + g2'`.
pub fn project_conflicting(g1: &[f64], g2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p1 = g1.to_vec();
    let mut p2 = g2.to_vec();
    let d = dot(g1, g2);
    if d < 0.0 {
        let n2 = norm_sq(g2);
        if n2 > 0.0 {
            axpy(-d / n2, g2, &mut p1);
        }
        let n1 = norm_sq(g1);
        if n1 > 0.0 {
            axpy(-d / n1, g1, &mut p2);
        }
    }
    (p1, p2)
}

pub fn gradsurgery_baseline(gs: &GradientSet, cfg: &StrategyConfig) -> UpdateDecision {
    let group = |g1: &[f64], g2: &[f64], eta: f64| {
        let (p1, p2) = project_conflicting(g1, g2);
        p1.iter().zip(&p2).map(|(a, b)| -eta * (a + b)).collect()
    };
    UpdateDecision {
        delta_h: group(&gs.j11, &gs.j21, cfg.eta_h),
        delta_w: group(&gs.j12, &gs.j22, cfg.eta_w),
        chosen_index: None,
        alpha: None,
        scores: None,
        mix: None,
    }
}

/// Scores the gradient set as the strategy requires and produces its update.
/// Baselines are scored with J6 so every decision carries a score vector.
pub fn decide(
    cfg: &StrategyConfig,
    gs: &GradientSet,
    aligner: &Aligner<'_>,
) -> Result<UpdateDecision, AttribError> {
    if cfg.kind == StrategyKind::HardJPlus {
        return Ok(hard_route_jplus(&jplus_with(gs, aligner)?, gs, cfg));
    }
    let s = j6_with(gs, aligner)?;
    let d = match cfg.kind {
        StrategyKind::HardJ6 => return Ok(hard_route_j6(&s, gs, cfg)),
        StrategyKind::Soft => soft_update(&soft_weights(&s, cfg), gs, cfg),
        StrategyKind::Static => static_baseline(gs, cfg),
        StrategyKind::Scalarized => scalarized_baseline(gs, cfg),
        StrategyKind::GradSurgery => gradsurgery_baseline(gs, cfg),
        StrategyKind::HardJPlus => unreachable!(),
    };
    Ok(d.with_scores(Scores::J6(s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_picked() -> GradientSet {
        GradientSet {
            j11: vec![1.0, 0.0],
            j12: vec![1.0, 1.0],
            j21: vec![2.0, 0.0],
            j22: vec![0.0, 2.0],
        }
    }

    fn cfg(kind: StrategyKind) -> StrategyConfig {
        StrategyConfig {
            eta_h: 0.1,
            eta_w: 0.2,
            ..StrategyConfig::new(kind)
        }
    }

    fn rel_diff(a: &UpdateDecision, b: &UpdateDecision) -> f64 {
        let num: f64 = a
            .delta_h
            .iter()
            .chain(&a.delta_w)
            .zip(b.delta_h.iter().chain(&b.delta_w))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let den: f64 = b.delta_h.iter().chain(&b.delta_w).map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn hard_j6_hand_picked() {
        let c = cfg(StrategyKind::HardJ6);
        let s = J6Vector([1.0, 0.0, 2.0, 4.0, 4.0, 2.0]);
        let d = hard_route_j6(&s, &hand_picked(), &c);
        assert_eq!(d.chosen_index, Some(3));
        assert_eq!(d.delta_h, vec![-0.1 * 2.0, -0.0]);
        assert!(d.delta_w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hard_j6_ties_and_zero() {
        let c = cfg(StrategyKind::HardJ6);
        let s = J6Vector([3.0, 1.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_route_j6(&s, &hand_picked(), &c).chosen_index, Some(0));
        let zero = GradientSet::zeros(2, 2);
        let d = hard_route_j6(&J6Vector([0.0; 6]), &zero, &c);
        assert!(d.delta_h.iter().chain(&d.delta_w).all(|&x| x == 0.0));
        // all-zero scores freeze both groups even with non-zero blocks
        let d = hard_route_j6(&J6Vector([0.0; 6]), &hand_picked(), &c);
        assert!(d.delta_h.iter().chain(&d.delta_w).all(|&x| x == 0.0));
    }

    #[test]
    fn hard_jplus_actions() {
        let c = cfg(StrategyKind::HardJPlus);
        let gs = hand_picked();
        let mut s = [0.0; 15];
        s[4] = 10.0; // index 5
        let d = hard_route_jplus(&JPlusVector(s), &gs, &c);
        assert_eq!(d.chosen_index, Some(5));
        assert_eq!(d.delta_h, vec![-0.1, -0.0]);
        assert_eq!(d.delta_w, vec![-0.0, -0.2 * 2.0]);

        let mut s = [0.0; 15];
        s[9] = 10.0; // index 10, prioritize h on Heat, auxiliary w at half scale
        let d = hard_route_jplus(&JPlusVector(s), &gs, &c);
        assert_eq!(d.chosen_index, Some(10));
        assert_eq!(d.delta_h, vec![-0.1, -0.0]);
        let w_sum = [1.0, 3.0];
        for (x, y) in d.delta_w.iter().zip(w_sum) {
            assert!((x - (-0.2 * 0.5 * y)).abs() < 1e-15);
        }

        let zero = GradientSet::zeros(2, 2);
        let d = hard_route_jplus(&JPlusVector([0.0; 15]), &zero, &c);
        assert_eq!(d.chosen_index, Some(1));
        assert!(d.delta_h.iter().chain(&d.delta_w).all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_jplus_rows_act_identically() {
        assert_eq!(jplus_action(7, 0.5), jplus_action(14, 0.5));
        assert_eq!(jplus_action(8, 0.5), jplus_action(15, 0.5));
    }

    #[test]
    fn contrast_matches_worked_example() {
        let w = [0.5, 0.3, 0.1, 0.1];
        let sq = reward_powers(&w, 2.0);
        for (x, y) in sq.iter().zip([0.25, 0.09, 0.01, 0.01]) {
            assert!((x - y).abs() <= 2.0 * f64::EPSILON * y);
        }
        let a = contrast(&w, 2.0);
        let expect = [0.25 / 0.36, 0.09 / 0.36, 0.01 / 0.36, 0.01 / 0.36];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scores_give_uniform_alpha() {
        for (tau, gamma) in [(0.01, 1.5), (1.0, 2.0), (50.0, 7.0)] {
            let c = StrategyConfig {
                tau,
                gamma,
                ..cfg(StrategyKind::Soft)
            };
            let a = soft_weights(&J6Vector([3.7; 6]), &c);
            for x in a {
                assert!((x - 1.0 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn soft_update_limits() {
        let c = cfg(StrategyKind::Soft);
        let gs = hand_picked();
        let d = soft_update(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &gs, &c);
        assert_eq!(d.delta_h, vec![-0.1, 0.0]);
        assert!(d.delta_w.iter().all(|&x| x == 0.0));

        let d = soft_update(&[1.0 / 6.0; 6], &gs, &c);
        let expect_h = [-0.1 * 3.0 / 6.0, 0.0];
        let expect_w = [-0.2 * 1.0 / 6.0, -0.2 * 3.0 / 6.0];
        for (x, y) in d.delta_h.iter().zip(expect_h) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in d.delta_w.iter().zip(expect_w) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_approaches_hard_at_low_temperature() {
        let c = StrategyConfig {
            tau: 1e-3,
            ..cfg(StrategyKind::Soft)
        };
        let gs = GradientSet {
            j11: vec![0.2, 0.1],
            j12: vec![0.3, -0.1],
            j21: vec![0.1, 0.1],
            j22: vec![0.9, 0.4],
        };
        let s = J6Vector([0.05, 0.17, 0.1, 0.02, 0.97, 0.02]);
        let soft = soft_update(&soft_weights(&s, &c), &gs, &c);
        let hard = hard_route_j6(&s, &gs, &c);
        assert_eq!(hard.chosen_index, Some(4));
        assert!(rel_diff(&soft, &hard) < 1e-3);
    }

    #[test]
    fn pre_norm_makes_tau_scale_free() {
        let c = StrategyConfig {
            pre_norm: PreNorm::MaxAbs,
            ..cfg(StrategyKind::Soft)
        };
        let s = J6Vector([0.5, 0.1, 0.2, 0.0, 0.3, -0.2]);
        let big = J6Vector(s.0.map(|x| 1e4 * x));
        let a = soft_weights(&s, &c);
        let b = soft_weights(&big, &c);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn static_baseline_cases() {
        let c = cfg(StrategyKind::Static);
        let gs = GradientSet {
            j11: vec![0.0, 0.0],
            j12: vec![5.0, -3.0],
            j21: vec![1.0, 1.0],
            j22: vec![0.5, 0.5],
        };
        let d = static_baseline(&gs, &c);
        assert!(d.delta_h.iter().all(|&x| x == 0.0));
        assert_eq!(d.delta_w, vec![-0.1, -0.1]);

        let s = J6Vector([0.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let hard = hard_route_j6(&s, &hand_picked(), &c);
        assert_eq!(hard.chosen_index, Some(1));
        let stat = static_baseline(&hand_picked(), &c);
        assert_eq!(hard.delta_h, stat.delta_h);
        assert_eq!(hard.delta_w, stat.delta_w);
    }

    #[test]
    fn scalarized_cases() {
        let gs = hand_picked();
        let c = StrategyConfig {
            lambda: (1.0, 0.0),
            ..cfg(StrategyKind::Scalarized)
        };
        let d = scalarized_baseline(&gs, &c);
        assert_eq!(d.delta_h, vec![-0.1, -0.0]);
        assert_eq!(d.delta_w, vec![-0.2, -0.2]);

        let half = scalarized_baseline(&gs, &cfg(StrategyKind::Scalarized));
        let uni = soft_update(&[1.0 / 6.0; 6], &gs, &cfg(StrategyKind::Soft));
        for (x, y) in half
            .delta_h
            .iter()
            .chain(&half.delta_w)
            .zip(uni.delta_h.iter().chain(&uni.delta_w))
        {
            assert!((x / 3.0 - y).abs() < 1e-15);
        }
        let z = scalarized_baseline(&GradientSet::zeros(2, 3), &c);
        assert!(z.delta_h.iter().chain(&z.delta_w).all(|&x| x == 0.0));
    }

    #[test]
    fn surgery_antiparallel_cancels() {
        let (p1, p2) = project_conflicting(&[1.0, 0.0], &[-1.0, 0.0]);
        assert_eq!(p1, vec![0.0, 0.0]);
        assert_eq!(p2, vec![0.0, 0.0]);
        let gs = GradientSet {
            j11: vec![1.0, 0.0],
            j12: vec![0.0, 0.0],
            j21: vec![-1.0, 0.0],
            j22: vec![0.0, 0.0],
        };
        let d = gradsurgery_baseline(&gs, &cfg(StrategyKind::GradSurgery));
        assert!(d.delta_h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn surgery_passthrough_without_conflict() {
        let gs = hand_picked();
        let a = gradsurgery_baseline(&gs, &cfg(StrategyKind::GradSurgery));
        let b = scalarized_baseline(&gs, &cfg(StrategyKind::Scalarized));
        for (x, y) in a
            .delta_h
            .iter()
            .chain(&a.delta_w)
            .zip(b.delta_h.iter().chain(&b.delta_w))
        {
            assert!((x - 2.0 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn surgery_zero_cogradient_skips_projection() {
        let (p1, p2) = project_conflicting(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(p1, vec![1.0, 2.0]);
        assert_eq!(p2, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::default().validate().is_ok());
        let bad = [
            StrategyConfig {
                tau: 0.0,
                ..Default::default()
            },
            StrategyConfig {
                gamma: 1.0,
                ..Default::default()
            },
            StrategyConfig {
                eta_w: -1.0,
                ..Default::default()
            },
            StrategyConfig {
                beta_aux: 1.5,
                ..Default::default()
            },
            StrategyConfig {
                lambda: (0.7, 0.7),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(
            "grad-surgery".parse::<StrategyKind>(),
            Ok(StrategyKind::GradSurgery)
        );
        assert!("pcgrad".parse::<StrategyKind>().is_err());
    }
}
