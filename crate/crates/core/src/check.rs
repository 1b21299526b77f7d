//! Analytic gradients against central finite differences.

use crate::attrib::GradientSet;
use crate::linalg::max_abs;
use crate::model::{fd_gradient, Group, ModelError, Objective, Perturbations, ProblemInstance};

/// Pass threshold on the per-block relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Denominator floor so that an all-zero block is compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Block order used throughout: `[J11, J12, J21, J22]`.
pub const BLOCKS: [(Objective, Group, &str); 4] = [
    (Objective::Heat, Group::H, "J11"),
    (Objective::Heat, Group::W, "J12"),
    (Objective::Conf, Group::H, "J21"),
    (Objective::Conf, Group::W, "J22"),
];

/// `|a - f|_inf / max(|a|_inf, |f|_inf, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max);
    diff / max_abs(analytic).max(max_abs(fd)).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub label: &'static str,
    pub rel_err: f64,
    /// Coordinate with the largest absolute disagreement.
    pub worst: Option<usize>,
    pub analytic: Vec<f64>,
    pub fd: Vec<f64>,
}

impl BlockCheck {
    fn new(label: &'static str, analytic: Vec<f64>, fd: Vec<f64>) -> Self {
        let worst = analytic
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f).abs())
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i);
        Self {
            label,
            rel_err: relative_error(&analytic, &fd),
            worst,
            analytic,
            fd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.rel_err < tol)
    }

    pub fn worst_block(&self) -> &BlockCheck {
        self.blocks
            .iter()
            .reduce(|a, b| if b.rel_err > a.rel_err { b } else { a })
            .expect("four blocks")
    }
}

/// Compares a given gradient set with finite differences at `pert`.
pub fn check_gradient_set(
    gs: &GradientSet,
    instance: &ProblemInstance,
    pert: &Perturbations,
    eps: f64,
) -> Result<GradCheck, ModelError> {
    let blocks = BLOCKS
        .iter()
        .map(|&(obj, group, label)| {
            let fd = fd_gradient(obj, group, instance, pert, eps)?;
            Ok(BlockCheck::new(label, gs.block(obj, group).to_vec(), fd))
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(GradCheck { blocks })
}

/// Compares the analytic gradients with finite differences at `pert`.
pub fn check_gradients(
    instance: &ProblemInstance,
    pert: &Perturbations,
    eps: f64,
) -> Result<GradCheck, ModelError> {
    let gs = crate::attrib::compute_gradient_set(instance, pert)?;
    check_gradient_set(&gs, instance, pert, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate, Family, GeneratorSpec};
    use crate::model::{WMode, DEFAULT_FD_EPS};
    use crate::optimizer::init_perturbations;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[2.0, 0.0], &[1.0, 0.0]), 0.5);
        assert!((relative_error(&[1e-9], &[0.0]) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn generated_instance_passes() {
        let g = generate(&GeneratorSpec::new(Family::Gaussian, 5, 3, 2, 11)).unwrap();
        let pert = init_perturbations(&g.instance, 0.3, 11);
        let report = check_gradients(&g.instance, &pert, DEFAULT_FD_EPS).unwrap();
        assert!(report.passes(GRADCHECK_TOL), "{report:?}");
        assert_eq!(report.blocks.len(), 4);
    }

    #[test]
    fn corrupted_block_is_caught_at_its_coordinate() {
        let spec = GeneratorSpec::new(Family::Gaussian, 4, 3, 1, 5).with_w_mode(WMode::SingleRow);
        let g = generate(&spec).unwrap();
        let pert = init_perturbations(&g.instance, 0.3, 5);
        let mut gs = crate::attrib::compute_gradient_set(&g.instance, &pert).unwrap();
        gs.j22[1] += 1.0;
        let report = check_gradient_set(&gs, &g.instance, &pert, DEFAULT_FD_EPS).unwrap();
        assert!(!report.passes(GRADCHECK_TOL));
        let worst = report.worst_block();
        assert_eq!(worst.label, "J22");
        assert_eq!(worst.worst, Some(1));
    }
}
