//! The per-prompt optimization loop with stopping rules and a full trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attrib::{gradient_set_from_forward, Aligner, Alignment, AlignmentMode, AttribError};
use crate::linalg::{argmax, axpy, norm};
use crate::model::{forward, ModelError, ObjectivePair, Perturbations, ProblemInstance};
use crate::strategy::{decide, ConfigError, StrategyConfig, StrategyKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("direct alignment needs h and w of equal length, instance has {h_len} and {w_len} (use pushforward or a single-row instance)")]
    IncompatibleAlignment { h_len: usize, w_len: usize },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attrib(#[from] AttribError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub max_steps: usize,
    /// Stop once all four block norms fall below this.
    pub grad_tol: f64,
    /// Stop once `|d ob1| + |d ob2|` between consecutive steps falls below
    /// this; zero disables.
    pub loss_tol: f64,
    pub seed: u64,
    /// Perturbations start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// `None` picks [`AlignmentMode::default_for`] the instance's `w` mode.
    pub alignment: Option<AlignmentMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            grad_tol: 1e-8,
            loss_tol: 0.0,
            seed: 0,
            init_scale: 0.0,
            alignment: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    MaxSteps,
    GradTol,
    LossTol,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxSteps => "max_steps",
            StopReason::GradTol => "grad_tol",
            StopReason::LossTol => "loss_tol",
        }
    }
}

/// State and decision of one executed step. Objectives and norms are
/// measured before the update is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub ob1: f64,
    pub ob2: f64,
    pub entropy: f64,
    /// `[|J11|, |J12|, |J21|, |J22|]`
    pub norms: [f64; 4],
    pub scores: Vec<f64>,
    pub chosen_index: Option<usize>,
    pub alpha: Option<[f64; 6]>,
    pub dh_norm: f64,
    pub dw_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: StrategyKind,
    pub perturbations: Perturbations,
    pub objectives: ObjectivePair,
    pub trace: Vec<TraceRecord>,
    pub stop_reason: StopReason,
}

impl RunResult {
    /// How often each slot was selected: the argmax for hard strategies, the
    /// largest weight for the soft strategy. `None` for the baselines.
    pub fn selection_counts(&self) -> Option<Vec<usize>> {
        let slots = self.strategy.slot_count()?;
        let mut counts = vec![0; slots];
        for r in &self.trace {
            let slot = match (self.strategy, r.chosen_index, r.alpha) {
                (StrategyKind::HardJPlus, Some(i), _) => i - 1,
                (_, Some(i), _) => i,
                (_, None, Some(a)) => argmax(&a),
                _ => continue,
            };
            counts[slot] += 1;
        }
        Some(counts)
    }
}

/// Zeros when `init_scale` is 0, otherwise i.i.d. uniform draws from a
/// ChaCha8 stream seeded with `seed` (all of `h`, then all of `w`).
pub fn init_perturbations(instance: &ProblemInstance, init_scale: f64, seed: u64) -> Perturbations {
    let mut pert = Perturbations::zeros(instance);
    if init_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in pert.h.iter_mut().chain(pert.w.iter_mut()) {
            *x = rng.random_range(-init_scale..=init_scale);
        }
    }
    pert
}

/// Precedence: GradTol, then LossTol, then MaxSteps.
pub fn stop_check(records: &[TraceRecord], rcfg: &RunConfig) -> Option<StopReason> {
    if let Some(last) = records.last() {
        if last.norms.iter().all(|&n| n < rcfg.grad_tol) {
            return Some(StopReason::GradTol);
        }
        if rcfg.loss_tol > 0.0 && records.len() >= 2 {
            let prev = &records[records.len() - 2];
            let change = (last.ob1 - prev.ob1).abs() + (last.ob2 - prev.ob2).abs();
            if change < rcfg.loss_tol {
                return Some(StopReason::LossTol);
            }
        }
    }
    (records.len() >= rcfg.max_steps).then_some(StopReason::MaxSteps)
}

pub fn resolve_alignment(
    instance: &ProblemInstance,
    rcfg: &RunConfig,
) -> Result<AlignmentMode, RunError> {
    let mode = rcfg
        .alignment
        .unwrap_or_else(|| AlignmentMode::default_for(instance.w_mode()));
    if mode.alignment == Alignment::Direct && instance.dim() != instance.w_len() {
        return Err(RunError::IncompatibleAlignment {
            h_len: instance.dim(),
            w_len: instance.w_len(),
        });
    }
    Ok(mode)
}

/// Runs from the initialization described by `rcfg`.
pub fn run(
    instance: &ProblemInstance,
    cfg: &StrategyConfig,
    rcfg: &RunConfig,
) -> Result<RunResult, RunError> {
    let init = init_perturbations(instance, rcfg.init_scale, rcfg.seed);
    run_from(instance, cfg, rcfg, init)
}

/// Runs from an explicit starting point.
pub fn run_from(
    instance: &ProblemInstance,
    cfg: &StrategyConfig,
    rcfg: &RunConfig,
    init: Perturbations,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mode = resolve_alignment(instance, rcfg)?;
    instance.check(&init)?;
    let mut pert = init;
    let mut trace: Vec<TraceRecord> = Vec::new();

    let stop_reason = loop {
        if trace.is_empty() {
            if let Some(r) = stop_check(&trace, rcfg) {
                break r;
            }
        }
        let step = trace.len();
        let fwd = forward(instance, &pert)?;
        let ob = fwd.objectives;
        if !(ob.ob1.is_finite() && ob.ob2.is_finite()) {
            return Err(RunError::NonFinite { what: "loss", step });
        }
        let gs = gradient_set_from_forward(instance, &pert, &fwd)?;
        if !gs.is_finite() {
            return Err(RunError::NonFinite {
                what: "gradient",
                step,
            });
        }
        let aligner = Aligner::new(mode, instance, &pert)?;
        let d = decide(cfg, &gs, &aligner)?;
        if !d.delta_h.iter().chain(&d.delta_w).all(|x| x.is_finite()) {
            return Err(RunError::NonFinite {
                what: "update",
                step,
            });
        }
        trace.push(TraceRecord {
            step,
            ob1: ob.ob1,
            ob2: ob.ob2,
            entropy: fwd.entropy,
            norms: gs.norms(),
            scores: d.scores.map(|s| s.as_slice().to_vec()).unwrap_or_default(),
            chosen_index: d.chosen_index,
            alpha: d.alpha,
            dh_norm: norm(&d.delta_h),
            dw_norm: norm(&d.delta_w),
        });
        axpy(1.0, &d.delta_h, &mut pert.h);
        axpy(1.0, &d.delta_w, &mut pert.w);
        if let Some(r) = stop_check(&trace, rcfg) {
            break r;
        }
    };

    let objectives = forward(instance, &pert)?.objectives;
    if !(objectives.ob1.is_finite() && objectives.ob2.is_finite()) {
        return Err(RunError::NonFinite {
            what: "loss",
            step: trace.len(),
        });
    }
    Ok(RunResult {
        strategy: cfg.kind,
        perturbations: pert,
        objectives,
        trace,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrib::Scale;
    use crate::linalg::Matrix;
    use crate::model::WMode;

    fn instance(mode: WMode) -> ProblemInstance {
        let hidden = Matrix::from_rows(&[vec![0.4, -1.1, 0.3], vec![1.2, 0.2, -0.5]]).unwrap();
        let emb = Matrix::from_rows(&[
            vec![0.3, 0.8, -0.4],
            vec![-1.0, 0.1, 0.6],
            vec![0.5, -0.7, 0.9],
            vec![0.2, 0.2, -1.3],
        ])
        .unwrap();
        ProblemInstance::new(hidden, emb, vec![2, 0], mode, None).unwrap()
    }

    fn record(ob1: f64, ob2: f64, norms: [f64; 4]) -> TraceRecord {
        TraceRecord {
            step: 0,
            ob1,
            ob2,
            entropy: -ob2,
            norms,
            scores: vec![],
            chosen_index: None,
            alpha: None,
            dh_norm: 0.0,
            dw_norm: 0.0,
        }
    }

    #[test]
    fn init_cases() {
        let inst = instance(WMode::FullMatrix);
        let z = init_perturbations(&inst, 0.0, 9);
        assert!(z.h.iter().chain(&z.w).all(|&x| x == 0.0));
        let a = init_perturbations(&inst, 0.3, 9);
        let b = init_perturbations(&inst, 0.3, 9);
        assert_eq!(a, b);
        assert!(a.h.iter().chain(&a.w).all(|x| x.abs() <= 0.3));
        assert_ne!(a, init_perturbations(&inst, 0.3, 10));
    }

    #[test]
    fn stop_check_precedence() {
        let rcfg = RunConfig {
            max_steps: 2,
            loss_tol: 1e-9,
            ..RunConfig::default()
        };
        assert_eq!(
            stop_check(
                &[],
                &RunConfig {
                    max_steps: 0,
                    ..rcfg.clone()
                }
            ),
            Some(StopReason::MaxSteps)
        );
        assert_eq!(
            stop_check(&[record(1.0, -1.0, [0.0; 4])], &rcfg),
            Some(StopReason::GradTol)
        );
        let same = [record(1.0, -1.0, [1.0; 4]), record(1.0, -1.0, [1.0; 4])];
        assert_eq!(stop_check(&same, &rcfg), Some(StopReason::LossTol));
        let moving = [record(1.0, -1.0, [1.0; 4]), record(0.9, -1.0, [1.0; 4])];
        assert_eq!(stop_check(&moving, &rcfg), Some(StopReason::MaxSteps));
        assert_eq!(stop_check(&moving[..1], &rcfg), None);
        // disabled loss_tol never fires
        let off = RunConfig {
            loss_tol: 0.0,
            max_steps: 10,
            ..rcfg
        };
        assert_eq!(stop_check(&same, &off), None);
    }

    #[test]
    fn zero_steps_gives_empty_trace() {
        let inst = instance(WMode::SingleRow);
        let rcfg = RunConfig {
            max_steps: 0,
            ..RunConfig::default()
        };
        let r = run(&inst, &StrategyConfig::default(), &rcfg).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(r.stop_reason, StopReason::MaxSteps);
    }

    #[test]
    fn uniform_start_still_moves() {
        // H = 0 gives uniform logits: confidence blocks vanish, J11 does not
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let inst = ProblemInstance::new(Matrix::zeros(1, 2), emb, vec![1], WMode::SingleRow, None)
            .unwrap();
        let rcfg = RunConfig {
            max_steps: 5,
            ..RunConfig::default()
        };
        let r = run(&inst, &StrategyConfig::default(), &rcfg).unwrap();
        assert_eq!(r.trace[0].norms[2], 0.0);
        assert!(r.trace[0].norms[0] > 0.0);
        assert_eq!(r.stop_reason, StopReason::MaxSteps);
        assert_eq!(r.trace.len(), 5);
    }

    #[test]
    fn direct_alignment_rejected_for_full_matrix() {
        let inst = instance(WMode::FullMatrix);
        let rcfg = RunConfig {
            alignment: Some(AlignmentMode::new(Alignment::Direct, Scale::Raw)),
            ..RunConfig::default()
        };
        assert!(matches!(
            run(&inst, &StrategyConfig::default(), &rcfg),
            Err(RunError::IncompatibleAlignment {
                h_len: 3,
                w_len: 12
            })
        ));
    }

    #[test]
    fn divergent_run_reports_step() {
        let inst = instance(WMode::FullMatrix);
        let cfg = StrategyConfig::new(StrategyKind::Scalarized).with_eta(1e200);
        let rcfg = RunConfig {
            max_steps: 50,
            ..RunConfig::default()
        };
        match run(&inst, &cfg, &rcfg) {
            Err(RunError::NonFinite { step, .. }) => assert!(step > 0),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn trace_has_one_record_per_step_with_scores() {
        let inst = instance(WMode::FullMatrix);
        let rcfg = RunConfig {
            max_steps: 12,
            ..RunConfig::default()
        };
        for kind in StrategyKind::ALL {
            let r = run(&inst, &StrategyConfig::new(kind), &rcfg).unwrap();
            assert_eq!(r.trace.len(), 12);
            let width = if kind == StrategyKind::HardJPlus {
                15
            } else {
                6
            };
            for (i, rec) in r.trace.iter().enumerate() {
                assert_eq!(rec.step, i);
                assert_eq!(rec.scores.len(), width);
            }
            if let Some(counts) = r.selection_counts() {
                assert_eq!(counts.iter().sum::<usize>(), r.trace.len());
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let inst = instance(WMode::FullMatrix);
        let rcfg = RunConfig {
            max_steps: 30,
            init_scale: 0.1,
            seed: 4,
            ..RunConfig::default()
        };
        let cfg = StrategyConfig::new(StrategyKind::Soft);
        let a = run(&inst, &cfg, &rcfg).unwrap();
        let b = run(&inst, &cfg, &rcfg).unwrap();
        assert_eq!(a, b);
    }
}
