//! Jacobian blocks and the J6 / J+ attribution vectors built from them.
//!
//! The four blocks are `J11 = d Heat/dh`, `J12 = d Heat/dw`, `J21 = d Conf/dh`
//! and `J22 = d Conf/dw`. Norm entries are always taken in native parameter
//! space. Inner products between an `h`-shaped and a `w`-shaped block go
//! through [`align`], which either compares the flat vectors directly (only
//! possible when both have length `d`) or compares the logit-space changes
//! each block induces under the local linearization of the bilinear map.

use thiserror::Error;

use crate::linalg::{add, dot, norm, norm_sq, Matrix};
use crate::model::{
    forward, grad_h, grad_w, Forward, Group, ModelError, Objective, Perturbations, ProblemInstance,
    WMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttribError {
    #[error("direct alignment needs equal shapes, got lengths {left} and {right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Gradients of both objectives with respect to both perturbation groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Heat w.r.t. `h`.
    pub j11: Vec<f64>,
    /// Heat w.r.t. `w`.
    pub j12: Vec<f64>,
    /// Confidence w.r.t. `h`.
    pub j21: Vec<f64>,
    /// Confidence w.r.t. `w`.
    pub j22: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(h_len: usize, w_len: usize) -> Self {
        Self {
            j11: vec![0.0; h_len],
            j12: vec![0.0; w_len],
            j21: vec![0.0; h_len],
            j22: vec![0.0; w_len],
        }
    }

    pub fn block(&self, objective: Objective, group: Group) -> &[f64] {
        match (objective, group) {
            (Objective::Heat, Group::H) => &self.j11,
            (Objective::Heat, Group::W) => &self.j12,
            (Objective::Conf, Group::H) => &self.j21,
            (Objective::Conf, Group::W) => &self.j22,
        }
    }

    /// Euclidean norms in the order `[J11, J12, J21, J22]`.
    pub fn norms(&self) -> [f64; 4] {
        [
            norm(&self.j11),
            norm(&self.j12),
            norm(&self.j21),
            norm(&self.j22),
        ]
    }

    /// Every block multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| c * x).collect();
        Self {
            j11: s(&self.j11),
            j12: s(&self.j12),
            j21: s(&self.j21),
            j22: s(&self.j22),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.j11, &self.j12, &self.j21, &self.j22]
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Builds all four blocks at the current `(h, w)`.
pub fn compute_gradient_set(
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<GradientSet, ModelError> {
    let fwd = forward(instance, pert)?;
    gradient_set_from_forward(instance, pert, &fwd)
}

/// Same as [`compute_gradient_set`] but reuses an existing forward pass.
pub fn gradient_set_from_forward(
    instance: &ProblemInstance,
    pert: &Perturbations,
    fwd: &Forward,
) -> Result<GradientSet, ModelError> {
    let gh = fwd.logit_grads(instance, Objective::Heat);
    let gc = fwd.logit_grads(instance, Objective::Conf);
    Ok(GradientSet {
        j11: grad_h(instance, pert, &gh)?,
        j12: grad_w(instance, pert, &gh)?,
        j21: grad_h(instance, pert, &gc)?,
        j22: grad_w(instance, pert, &gc)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Alignment {
    /// Inner product of the flat vectors; shapes must match.
    Direct,
    /// Inner product of the induced `T x V` logit-space fields.
    Pushforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scale {
    #[default]
    Raw,
    /// Divide by the product of operand norms in the space the product was
    /// taken in; zero when either norm is zero.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AlignmentMode {
    pub alignment: Alignment,
    pub scale: Scale,
}

impl AlignmentMode {
    pub const fn new(alignment: Alignment, scale: Scale) -> Self {
        Self { alignment, scale }
    }

    /// Direct when `h` and `w` share a shape, Pushforward otherwise. Raw scale.
    pub fn default_for(w_mode: WMode) -> Self {
        let alignment = match w_mode {
            WMode::FullMatrix => Alignment::Pushforward,
            WMode::SingleRow | WMode::Broadcast => Alignment::Direct,
        };
        Self::new(alignment, Scale::Raw)
    }
}

/// A gradient tagged with the group whose shape it has.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub group: Group,
    pub values: &'a [f64],
}

impl<'a> Operand<'a> {
    pub fn h(values: &'a [f64]) -> Self {
        Self {
            group: Group::H,
            values,
        }
    }

    pub fn w(values: &'a [f64]) -> Self {
        Self {
            group: Group::W,
            values,
        }
    }
}

/// Precomputed effective `H + h` and `W + w` for pushing parameter-space
/// directions into logit space.
pub struct Pushforward<'a> {
    instance: &'a ProblemInstance,
    hiddens: Matrix,
    embeddings: Matrix,
}

impl<'a> Pushforward<'a> {
    pub fn new(instance: &'a ProblemInstance, pert: &Perturbations) -> Result<Self, ModelError> {
        instance.check(pert)?;
        Ok(Self {
            instance,
            hiddens: instance.effective_hiddens(pert),
            embeddings: instance.effective_embeddings(pert),
        })
    }

    /// Row-major `T x V` logit change induced by moving along `op`.
    pub fn field(&self, op: Operand<'_>) -> Vec<f64> {
        let (t_len, v_len) = (self.instance.positions(), self.instance.vocab());
        let mut out = vec![0.0; t_len * v_len];
        match op.group {
            Group::H => {
                let per_vocab: Vec<f64> = (0..v_len)
                    .map(|v| dot(op.values, self.embeddings.row(v)))
                    .collect();
                for row in out.chunks_mut(v_len) {
                    row.copy_from_slice(&per_vocab);
                }
            }
            Group::W => {
                for v in 0..v_len {
                    if let Some(g) = self.instance.w_row(op.values, v) {
                        for t in 0..t_len {
                            out[t * v_len + v] = dot(g, self.hiddens.row(t));
                        }
                    }
                }
            }
        }
        out
    }
}

fn scaled_product(a: &[f64], b: &[f64], scale: Scale) -> f64 {
    let raw = dot(a, b);
    match scale {
        Scale::Raw => raw,
        Scale::Cosine => {
            let denom = norm(a) * norm(b);
            if denom == 0.0 {
                0.0
            } else {
                (raw / denom).clamp(-1.0, 1.0)
            }
        }
    }
}

/// Stateful aligner so repeated products reuse one [`Pushforward`].
pub struct Aligner<'a> {
    mode: AlignmentMode,
    push: Option<Pushforward<'a>>,
}

impl<'a> Aligner<'a> {
    pub fn new(
        mode: AlignmentMode,
        instance: &'a ProblemInstance,
        pert: &Perturbations,
    ) -> Result<Self, ModelError> {
        let push = match mode.alignment {
            Alignment::Direct => None,
            Alignment::Pushforward => Some(Pushforward::new(instance, pert)?),
        };
        Ok(Self { mode, push })
    }

    pub fn mode(&self) -> AlignmentMode {
        self.mode
    }

    pub fn align(&self, a: Operand<'_>, b: Operand<'_>) -> Result<f64, AttribError> {
        match &self.push {
            None => {
                if a.values.len() != b.values.len() {
                    return Err(AttribError::ShapeMismatch {
                        left: a.values.len(),
                        right: b.values.len(),
                    });
                }
                Ok(scaled_product(a.values, b.values, self.mode.scale))
            }
            Some(p) => Ok(scaled_product(&p.field(a), &p.field(b), self.mode.scale)),
        }
    }

    /// Same-shape inner product in native parameter space.
    fn native(&self, a: &[f64], b: &[f64]) -> f64 {
        scaled_product(a, b, self.mode.scale)
    }
}

/// Inner product of two gradients under `mode`.
pub fn align(
    a: Operand<'_>,
    b: Operand<'_>,
    mode: AlignmentMode,
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<f64, AttribError> {
    Aligner::new(mode, instance, pert)?.align(a, b)
}

/// `[|J11|^2, <J11,J22>, |J12|^2, |J21|^2, |J22|^2, <J21,J12>]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct J6Vector(pub [f64; 6]);

impl J6Vector {
    pub const LABELS: [&'static str; 6] = [
        "h->heat",
        "align(h-heat,w-conf)",
        "w->heat",
        "h->conf",
        "w->conf",
        "align(h-conf,w-heat)",
    ];

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The fifteen J+ terms, stored 0-based but addressed 1-based through
/// [`JPlusVector::get`] to match the action table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JPlusVector(pub [f64; 15]);

impl JPlusVector {
    /// Entry at 1-based `index`.
    pub fn get(&self, index: usize) -> f64 {
        self.0[index - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn j6(
    gs: &GradientSet,
    mode: AlignmentMode,
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<J6Vector, AttribError> {
    let aligner = Aligner::new(mode, instance, pert)?;
    j6_with(gs, &aligner)
}

pub fn j6_with(gs: &GradientSet, aligner: &Aligner<'_>) -> Result<J6Vector, AttribError> {
    Ok(J6Vector([
        norm_sq(&gs.j11),
        aligner.align(Operand::h(&gs.j11), Operand::w(&gs.j22))?,
        norm_sq(&gs.j12),
        norm_sq(&gs.j21),
        norm_sq(&gs.j22),
        aligner.align(Operand::h(&gs.j21), Operand::w(&gs.j12))?,
    ]))
}

pub fn jplus(
    gs: &GradientSet,
    mode: AlignmentMode,
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<JPlusVector, AttribError> {
    let aligner = Aligner::new(mode, instance, pert)?;
    jplus_with(gs, &aligner)
}

pub fn jplus_with(gs: &GradientSet, aligner: &Aligner<'_>) -> Result<JPlusVector, AttribError> {
    let h_sum = add(&gs.j11, &gs.j21);
    let w_sum = add(&gs.j12, &gs.j22);
    let al = |a: Operand<'_>, b: Operand<'_>| aligner.align(a, b);
    Ok(JPlusVector([
        norm_sq(&gs.j11),
        norm_sq(&gs.j12),
        norm_sq(&gs.j21),
        norm_sq(&gs.j22),
        al(Operand::h(&gs.j11), Operand::w(&gs.j22))?,
        al(Operand::h(&gs.j21), Operand::w(&gs.j12))?,
        aligner.native(&gs.j11, &gs.j21),
        aligner.native(&gs.j12, &gs.j22),
        al(Operand::h(&h_sum), Operand::w(&w_sum))?,
        al(Operand::h(&gs.j11), Operand::w(&w_sum))?,
        al(Operand::h(&gs.j21), Operand::w(&w_sum))?,
        al(Operand::h(&h_sum), Operand::w(&gs.j12))?,
        al(Operand::h(&h_sum), Operand::w(&gs.j22))?,
        norm_sq(&h_sum),
        norm_sq(&w_sum),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_dim_instance(mode: WMode) -> ProblemInstance {
        let hidden = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        ProblemInstance::new(hidden, emb, vec![0], mode, Some(0)).unwrap()
    }

    fn hand_picked() -> GradientSet {
        GradientSet {
            j11: vec![1.0, 0.0],
            j12: vec![1.0, 1.0],
            j21: vec![2.0, 0.0],
            j22: vec![0.0, 2.0],
        }
    }

    const DIRECT_RAW: AlignmentMode = AlignmentMode::new(Alignment::Direct, Scale::Raw);

    #[test]
    fn direct_alignment_basics() {
        let inst = two_dim_instance(WMode::SingleRow);
        let pert = Perturbations::zeros(&inst);
        let g = [3.0, -4.0];
        let self_dot = align(Operand::h(&g), Operand::h(&g), DIRECT_RAW, &inst, &pert).unwrap();
        assert_eq!(self_dot, 25.0);
        let ortho = align(
            Operand::h(&[1.0, 0.0]),
            Operand::w(&[0.0, 2.0]),
            DIRECT_RAW,
            &inst,
            &pert,
        )
        .unwrap();
        assert_eq!(ortho, 0.0);
    }

    #[test]
    fn direct_alignment_rejects_mismatched_shapes() {
        let inst = two_dim_instance(WMode::FullMatrix);
        let pert = Perturbations::zeros(&inst);
        let err = align(
            Operand::h(&[1.0, 0.0]),
            Operand::w(&[0.0; 6]),
            DIRECT_RAW,
            &inst,
            &pert,
        );
        assert_eq!(err, Err(AttribError::ShapeMismatch { left: 2, right: 6 }));
    }

    #[test]
    fn pushforward_fields_follow_linearization() {
        let inst = two_dim_instance(WMode::FullMatrix);
        let pert = Perturbations::zeros(&inst);
        let p = Pushforward::new(&inst, &pert).unwrap();
        // h-direction e0 moves logits by W[:,0]
        assert_eq!(p.field(Operand::h(&[1.0, 0.0])), vec![1.0, 0.0, 1.0]);
        // w-direction in row 1 only moves logit 1 by H[0] . row
        let mut w = vec![0.0; 6];
        w[2] = 5.0;
        w[3] = 7.0;
        assert_eq!(p.field(Operand::w(&w)), vec![0.0, 5.0, 0.0]);
    }

    #[test]
    fn cosine_is_bounded_and_zero_safe() {
        let inst = two_dim_instance(WMode::FullMatrix);
        let pert = Perturbations {
            h: vec![0.2, -0.1],
            w: vec![0.1, 0.3, -0.2, 0.0, 0.5, 0.4],
        };
        let mode = AlignmentMode::new(Alignment::Pushforward, Scale::Cosine);
        let c = align(
            Operand::h(&[1.0, 2.0]),
            Operand::w(&[0.3, -1.0, 0.2, 0.2, 1.0, 0.0]),
            mode,
            &inst,
            &pert,
        )
        .unwrap();
        assert!((-1.0..=1.0).contains(&c));
        let zero = align(
            Operand::h(&[0.0, 0.0]),
            Operand::w(&[1.0; 6]),
            mode,
            &inst,
            &pert,
        );
        assert_eq!(zero, Ok(0.0));
    }

    #[test]
    fn j6_hand_picked() {
        let inst = two_dim_instance(WMode::SingleRow);
        let pert = Perturbations::zeros(&inst);
        let s = j6(&hand_picked(), DIRECT_RAW, &inst, &pert).unwrap();
        assert_eq!(s.0, [1.0, 0.0, 2.0, 4.0, 4.0, 2.0]);
        let z = j6(&GradientSet::zeros(2, 2), DIRECT_RAW, &inst, &pert).unwrap();
        assert_eq!(z.0, [0.0; 6]);
    }

    #[test]
    fn j6_direct_with_full_matrix_is_a_shape_error() {
        let inst = two_dim_instance(WMode::FullMatrix);
        let pert = Perturbations::zeros(&inst);
        let gs = GradientSet::zeros(2, 6);
        assert!(matches!(
            j6(&gs, DIRECT_RAW, &inst, &pert),
            Err(AttribError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn jplus_hand_picked() {
        let inst = two_dim_instance(WMode::SingleRow);
        let pert = Perturbations::zeros(&inst);
        let gs = hand_picked();
        let s = jplus(&gs, DIRECT_RAW, &inst, &pert).unwrap();
        assert_eq!(s.get(7), 2.0);
        assert_eq!(s.get(14), 9.0);
        let six = j6(&gs, DIRECT_RAW, &inst, &pert).unwrap();
        for (jp, j) in [(1, 0), (2, 2), (3, 3), (4, 4), (5, 1), (6, 5)] {
            assert_eq!(s.get(jp).to_bits(), six.0[j].to_bits());
        }
        let z = jplus(&GradientSet::zeros(2, 2), DIRECT_RAW, &inst, &pert).unwrap();
        assert_eq!(z.0, [0.0; 15]);
    }

    #[test]
    fn uniform_logits_kill_confidence_blocks() {
        let hidden = Matrix::zeros(2, 3);
        let emb = Matrix::from_rows(&[
            vec![0.5, -1.0, 2.0],
            vec![1.5, 0.3, -0.7],
            vec![-0.2, 0.8, 0.1],
            vec![0.9, 0.9, 0.9],
        ])
        .unwrap();
        let inst = ProblemInstance::new(hidden, emb, vec![1, 3], WMode::FullMatrix, None).unwrap();
        let gs = compute_gradient_set(&inst, &Perturbations::zeros(&inst)).unwrap();
        assert!(norm(&gs.j21) < 1e-15);
        assert!(norm(&gs.j22) < 1e-15);
        assert!(norm(&gs.j11) > 0.1);
    }

    #[test]
    fn saturated_correct_position_contributes_nothing() {
        // position 0 is one-hot on its target, position 1 is not
        let hidden = Matrix::from_rows(&[vec![1000.0, 0.0], vec![0.3, 0.4]]).unwrap();
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let both =
            ProblemInstance::new(hidden, emb.clone(), vec![0, 2], WMode::FullMatrix, None).unwrap();
        let only = ProblemInstance::new(
            Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap(),
            emb,
            vec![2],
            WMode::FullMatrix,
            None,
        )
        .unwrap();
        let a = compute_gradient_set(&both, &Perturbations::zeros(&both)).unwrap();
        let b = compute_gradient_set(&only, &Perturbations::zeros(&only)).unwrap();
        // means over T=2 vs T=1 differ by exactly a factor 2
        for (x, y) in a.j11.iter().zip(&b.j11) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        for (x, y) in a.j22.iter().zip(&b.j22) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
}
