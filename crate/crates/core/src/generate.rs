//! Seeded synthetic instances.
//!
//! Every draw comes from one ChaCha8 stream seeded by [`GeneratorSpec::seed`].
//! The conflict families are defined by a measurable certificate evaluated at
//! zero perturbation; candidates are drawn from the same stream until one
//! satisfies it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::attrib::compute_gradient_set;
use crate::linalg::{argmax, dot, norm_sq, Matrix};
use crate::model::{
    forward, grad_logits_conf, grad_logits_heat, ModelError, Perturbations, ProblemInstance, WMode,
};

/// Candidates tried before a conflict family gives up.
pub const MAX_ATTEMPTS: usize = 100_000;

/// RoleSwap accepts only instances with `|J11|^2 / |J12|^2` below this.
pub const ROLE_SWAP_MAX_RATIO: f64 = 0.05;

/// Standard deviations of `H` and `W` entries for RoleSwap candidates. A wide
/// hidden state and narrow embeddings make the `w`-pathway to Heat dominate.
const ROLE_SWAP_HIDDEN_STD: f64 = 3.0;
const ROLE_SWAP_EMBED_STD: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("no {family} instance satisfied its certificate within {attempts} draws")]
    Exhausted { family: Family, attempts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Family {
    #[default]
    Gaussian,
    /// Targets sit below the current argmax and the logit-space Heat and
    /// Confidence gradients have negative inner product.
    Conflicting,
    /// The `h`-pathway to Heat is suppressed relative to the `w`-pathway.
    RoleSwap,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Conflicting => "conflicting",
            Family::RoleSwap => "role-swap",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "conflicting" => Ok(Family::Conflicting),
            "role-swap" => Ok(Family::RoleSwap),
            other => Err(GenError::InvalidSpec(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VStarRule {
    /// Target of the last position.
    #[default]
    LastTarget,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub vocab: usize,
    pub dim: usize,
    pub positions: usize,
    pub seed: u64,
    pub family: Family,
    pub w_mode: WMode,
    pub v_star: VStarRule,
}

impl GeneratorSpec {
    pub fn new(family: Family, vocab: usize, dim: usize, positions: usize, seed: u64) -> Self {
        Self {
            vocab,
            dim,
            positions,
            seed,
            family,
            w_mode: WMode::FullMatrix,
            v_star: VStarRule::LastTarget,
        }
    }

    pub fn with_w_mode(mut self, w_mode: WMode) -> Self {
        self.w_mode = w_mode;
        self
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.vocab < 2 {
            return Err(GenError::InvalidSpec(format!(
                "V must be >= 2, got {}",
                self.vocab
            )));
        }
        if self.dim < 1 {
            return Err(GenError::InvalidSpec("d must be >= 1".into()));
        }
        if self.positions < 1 {
            return Err(GenError::InvalidSpec("T must be >= 1".into()));
        }
        if let VStarRule::Fixed(v) = self.v_star {
            if v >= self.vocab {
                return Err(GenError::InvalidSpec(format!(
                    "v_star {v} out of range for V = {}",
                    self.vocab
                )));
            }
        }
        if self.family == Family::RoleSwap && self.w_mode == WMode::Broadcast {
            return Err(GenError::InvalidSpec(
                "role-swap needs a live w pathway; broadcast w has zero gradient".into(),
            ));
        }
        Ok(())
    }
}

/// Measured value that admitted an instance to its family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Certificate {
    /// Sum over positions of `<grad_logits_heat, grad_logits_conf>`; negative.
    Conflict { inner_product: f64 },
    /// `|J11|^2 / |J12|^2`; below [`ROLE_SWAP_MAX_RATIO`].
    RoleSwap { ratio: f64 },
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Certificate::Conflict { inner_product } => {
                write!(
                    f,
                    "conflict: <dHeat/dz, dConf/dz> = {inner_product:e} (< 0)"
                )
            }
            Certificate::RoleSwap { ratio } => {
                write!(
                    f,
                    "role-swap: |J11|^2/|J12|^2 = {ratio:e} (< {ROLE_SWAP_MAX_RATIO})"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub instance: ProblemInstance,
    pub spec: GeneratorSpec,
    pub certificate: Option<Certificate>,
    /// Candidates drawn, including the accepted one.
    pub attempts: usize,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

fn build(
    spec: &GeneratorSpec,
    hidden: Matrix,
    embeddings: Matrix,
    targets: Vec<usize>,
) -> Result<ProblemInstance, ModelError> {
    let v_star = match spec.v_star {
        VStarRule::LastTarget => None,
        VStarRule::Fixed(v) => Some(v),
    };
    ProblemInstance::new(hidden, embeddings, targets, spec.w_mode, v_star)
}

/// Sum over positions of the logit-space Heat/Confidence inner product at
/// zero perturbation.
pub fn conflict_inner_product(instance: &ProblemInstance) -> Result<f64, ModelError> {
    let fwd = forward(instance, &Perturbations::zeros(instance))?;
    Ok((0..instance.positions())
        .map(|t| {
            let p = fwd.probs.row(t);
            dot(
                &grad_logits_heat(p, instance.targets()[t]),
                &grad_logits_conf(p),
            )
        })
        .sum())
}

/// `|J11|^2 / |J12|^2` at zero perturbation.
pub fn role_swap_ratio(instance: &ProblemInstance) -> Result<f64, ModelError> {
    let gs = compute_gradient_set(instance, &Perturbations::zeros(instance))?;
    Ok(norm_sq(&gs.j11) / norm_sq(&gs.j12))
}

pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedInstance, GenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (v, d, t) = (spec.vocab, spec.dim, spec.positions);

    match spec.family {
        Family::Gaussian => {
            let hidden = normal_matrix(&mut rng, t, d, 1.0);
            let emb = normal_matrix(&mut rng, v, d, 1.0);
            let targets = (0..t).map(|_| rng.random_range(0..v)).collect();
            Ok(GeneratedInstance {
                instance: build(spec, hidden, emb, targets)?,
                spec: spec.clone(),
                certificate: None,
                attempts: 1,
            })
        }
        Family::Conflicting => {
            for attempt in 1..=MAX_ATTEMPTS {
                let hidden = normal_matrix(&mut rng, t, d, 1.0);
                let emb = normal_matrix(&mut rng, v, d, 1.0);
                let mut targets = Vec::with_capacity(t);
                for pos in 0..t {
                    let logits: Vec<f64> =
                        (0..v).map(|u| dot(hidden.row(pos), emb.row(u))).collect();
                    let top = argmax(&logits);
                    // uniform over the V - 1 tokens other than the argmax
                    let k = rng.random_range(0..v - 1);
                    targets.push(if k >= top { k + 1 } else { k });
                }
                let inst = build(spec, hidden, emb, targets)?;
                let ip = conflict_inner_product(&inst)?;
                if ip < 0.0 {
                    return Ok(GeneratedInstance {
                        instance: inst,
                        spec: spec.clone(),
                        certificate: Some(Certificate::Conflict { inner_product: ip }),
                        attempts: attempt,
                    });
                }
            }
            Err(GenError::Exhausted {
                family: spec.family,
                attempts: MAX_ATTEMPTS,
            })
        }
        Family::RoleSwap => {
            let wide = Normal::new(0.0, ROLE_SWAP_HIDDEN_STD).expect("valid std");
            for attempt in 1..=MAX_ATTEMPTS {
                let data = (0..t * d).map(|_| wide.sample(&mut rng)).collect();
                let hidden = Matrix::from_vec(t, d, data).expect("sized buffer");
                let emb = normal_matrix(&mut rng, v, d, ROLE_SWAP_EMBED_STD);
                let targets = (0..t).map(|_| rng.random_range(0..v)).collect();
                let inst = build(spec, hidden, emb, targets)?;
                let ratio = role_swap_ratio(&inst)?;
                if ratio < ROLE_SWAP_MAX_RATIO {
                    return Ok(GeneratedInstance {
                        instance: inst,
                        spec: spec.clone(),
                        certificate: Some(Certificate::RoleSwap { ratio }),
                        attempts: attempt,
                    });
                }
            }
            Err(GenError::Exhausted {
                family: spec.family,
                attempts: MAX_ATTEMPTS,
            })
        }
    }
}
