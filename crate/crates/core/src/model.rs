//! Bilinear logit model `logits = (H + h)(W + w)^T` with its two objectives.
//!
//! Heat is the mean cross-entropy against the targets, Confidence is the mean
//! negative entropy `sum_v p_v log p_v`. Both objectives have closed-form
//! logit-space gradients; parameter gradients follow by the chain rule through
//! the bilinear map. [`fd_gradient`] is the independent central-difference
//! oracle used to check them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} index {index} out of range for vocabulary of size {vocab}")]
    Index {
        what: &'static str,
        index: usize,
        vocab: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension {0} must be positive")]
    EmptyDimension(&'static str),
}

/// How the embedding perturbation `w` is added to the embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// `w` is a `V x d` matrix added row-wise to `W`.
    #[default]
    FullMatrix,
    /// `w` is a length-`d` vector added to row `v_star` only.
    SingleRow,
    /// `w` is a length-`d` vector added to every row. Gradient-dead: shifting
    /// every logit of a position by the same amount changes nothing.
    Broadcast,
}

impl WMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WMode::FullMatrix => "full_matrix",
            WMode::SingleRow => "single_row",
            WMode::Broadcast => "broadcast",
        }
    }
}

impl fmt::Display for WMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts `full_matrix`, `single_row`, `broadcast`, with `-` or `_`.
impl FromStr for WMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "full_matrix" => Ok(WMode::FullMatrix),
            "single_row" => Ok(WMode::SingleRow),
            "broadcast" => Ok(WMode::Broadcast),
            _ => Err(format!(
                "unknown w mode '{s}' (expected full-matrix, single-row or broadcast)"
            )),
        }
    }
}

/// The two objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Heat,
    Conf,
}

/// Which perturbation group a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    H,
    W,
}

/// Frozen base representations and targets for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    hidden: Matrix,
    embeddings: Matrix,
    targets: Vec<usize>,
    w_mode: WMode,
    v_star: usize,
}

impl ProblemInstance {
    /// `hidden` is `T x d`, `embeddings` is `V x d`. When `v_star` is `None`
    /// it defaults to the target of the last position.
    pub fn new(
        hidden: Matrix,
        embeddings: Matrix,
        targets: Vec<usize>,
        w_mode: WMode,
        v_star: Option<usize>,
    ) -> Result<Self, ModelError> {
        let (t, d, v) = (hidden.rows(), hidden.cols(), embeddings.rows());
        if t == 0 {
            return Err(ModelError::EmptyDimension("T"));
        }
        if d == 0 {
            return Err(ModelError::EmptyDimension("d"));
        }
        if v == 0 {
            return Err(ModelError::EmptyDimension("V"));
        }
        if embeddings.cols() != d {
            return Err(ModelError::Shape {
                what: "embedding columns",
                expected: d,
                actual: embeddings.cols(),
            });
        }
        if targets.len() != t {
            return Err(ModelError::Shape {
                what: "targets",
                expected: t,
                actual: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(ModelError::Index {
                what: "target",
                index: bad,
                vocab: v,
            });
        }
        let v_star = v_star.unwrap_or(targets[t - 1]);
        if v_star >= v {
            return Err(ModelError::Index {
                what: "v_star",
                index: v_star,
                vocab: v,
            });
        }
        if !hidden.is_finite() {
            return Err(ModelError::NonFinite("H"));
        }
        if !embeddings.is_finite() {
            return Err(ModelError::NonFinite("W"));
        }
        Ok(Self {
            hidden,
            embeddings,
            targets,
            w_mode,
            v_star,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.hidden.cols()
    }

    pub fn positions(&self) -> usize {
        self.hidden.rows()
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn w_mode(&self) -> WMode {
        self.w_mode
    }

    pub fn v_star(&self) -> usize {
        self.v_star
    }

    /// Same base data under a different `w` mode.
    pub fn with_w_mode(&self, w_mode: WMode) -> Self {
        Self {
            w_mode,
            ..self.clone()
        }
    }

    /// Flat length of a `w`-shaped vector for this instance.
    pub fn w_len(&self) -> usize {
        match self.w_mode {
            WMode::FullMatrix => self.vocab() * self.dim(),
            WMode::SingleRow | WMode::Broadcast => self.dim(),
        }
    }

    pub fn group_len(&self, group: Group) -> usize {
        match group {
            Group::H => self.dim(),
            Group::W => self.w_len(),
        }
    }

    /// Row of a `w`-shaped vector that contributes to vocabulary row `v`.
    #[inline]
    pub fn w_row<'a>(&self, w: &'a [f64], v: usize) -> Option<&'a [f64]> {
        let d = self.dim();
        match self.w_mode {
            WMode::FullMatrix => Some(&w[v * d..(v + 1) * d]),
            WMode::SingleRow => (v == self.v_star).then_some(w),
            WMode::Broadcast => Some(w),
        }
    }

    /// `W[v] + w_row(v)`
    pub fn effective_embedding(&self, pert: &Perturbations, v: usize) -> Vec<f64> {
        let mut row = self.embeddings.row(v).to_vec();
        if let Some(wr) = self.w_row(&pert.w, v) {
            axpy(1.0, wr, &mut row);
        }
        row
    }

    /// `H[t] + h`
    pub fn effective_hidden(&self, pert: &Perturbations, t: usize) -> Vec<f64> {
        let mut row = self.hidden.row(t).to_vec();
        axpy(1.0, &pert.h, &mut row);
        row
    }

    pub(crate) fn effective_embeddings(&self, pert: &Perturbations) -> Matrix {
        let mut m = self.embeddings.clone();
        for v in 0..self.vocab() {
            if let Some(wr) = self.w_row(&pert.w, v) {
                axpy(1.0, wr, m.row_mut(v));
            }
        }
        m
    }

    pub(crate) fn effective_hiddens(&self, pert: &Perturbations) -> Matrix {
        let mut m = self.hidden.clone();
        for t in 0..self.positions() {
            axpy(1.0, &pert.h, m.row_mut(t));
        }
        m
    }

    pub fn check(&self, pert: &Perturbations) -> Result<(), ModelError> {
        if pert.h.len() != self.dim() {
            return Err(ModelError::Shape {
                what: "h",
                expected: self.dim(),
                actual: pert.h.len(),
            });
        }
        if pert.w.len() != self.w_len() {
            return Err(ModelError::Shape {
                what: "w",
                expected: self.w_len(),
                actual: pert.w.len(),
            });
        }
        if !pert.h.iter().chain(&pert.w).all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite("perturbations"));
        }
        Ok(())
    }
}

/// The tunable pair `(h, w)`; `w` is stored flat with a length fixed by the
/// instance's [`WMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbations {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
}

impl Perturbations {
    pub fn zeros(instance: &ProblemInstance) -> Self {
        Self {
            h: vec![0.0; instance.dim()],
            w: vec![0.0; instance.w_len()],
        }
    }

    pub fn group(&self, group: Group) -> &[f64] {
        match group {
            Group::H => &self.h,
            Group::W => &self.w,
        }
    }

    pub fn group_mut(&mut self, group: Group) -> &mut Vec<f64> {
        match group {
            Group::H => &mut self.h,
            Group::W => &mut self.w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectivePair {
    /// Heat, nats.
    pub ob1: f64,
    /// Confidence (negative entropy), nats.
    pub ob2: f64,
}

impl ObjectivePair {
    pub fn get(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Heat => self.ob1,
            Objective::Conf => self.ob2,
        }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Matrix,
    pub probs: Matrix,
    pub objectives: ObjectivePair,
    /// Mean Shannon entropy over positions, nats.
    pub entropy: f64,
}

impl Forward {
    /// `T x V` matrix of `d ob / d logits` for one objective, before the
    /// `1/T` averaging (which is applied in [`grad_h`] / [`grad_w`]).
    pub fn logit_grads(&self, instance: &ProblemInstance, objective: Objective) -> Matrix {
        let (t_len, v_len) = (self.probs.rows(), self.probs.cols());
        let mut g = Matrix::zeros(t_len, v_len);
        for t in 0..t_len {
            let p = self.probs.row(t);
            let row = match objective {
                Objective::Heat => grad_logits_heat(p, instance.targets()[t]),
                Objective::Conf => grad_logits_conf(p),
            };
            g.row_mut(t).copy_from_slice(&row);
        }
        g
    }
}

/// `logits[t][v] = (H[t] + h) . (W[v] + w_row(v))`
pub fn compute_logits(
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<Matrix, ModelError> {
    instance.check(pert)?;
    let hid = instance.effective_hiddens(pert);
    let emb = instance.effective_embeddings(pert);
    let mut logits = Matrix::zeros(instance.positions(), instance.vocab());
    for t in 0..instance.positions() {
        for v in 0..instance.vocab() {
            logits.set(t, v, dot(hid.row(t), emb.row(v)));
        }
    }
    Ok(logits)
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Mean cross-entropy over positions.
pub fn heat_loss(logits: &Matrix, targets: &[usize]) -> Result<f64, ModelError> {
    if targets.len() != logits.rows() {
        return Err(ModelError::Shape {
            what: "targets",
            expected: logits.rows(),
            actual: targets.len(),
        });
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y >= logits.cols() {
            return Err(ModelError::Index {
                what: "target",
                index: y,
                vocab: logits.cols(),
            });
        }
        total -= log_softmax_at(logits.row(t), y);
    }
    Ok(total / logits.rows() as f64)
}

/// Mean negative entropy over positions.
pub fn confidence_loss(logits: &Matrix) -> f64 {
    let total: f64 = (0..logits.rows())
        .map(|t| -entropy(&softmax(logits.row(t))))
        .sum();
    total / logits.rows() as f64
}

/// `p - onehot(y)`
pub fn grad_logits_heat(p: &[f64], y: usize) -> Vec<f64> {
    let mut g = p.to_vec();
    g[y] -= 1.0;
    g
}

/// `p_k (log p_k + E)` with `E` the entropy of `p`.
pub fn grad_logits_conf(p: &[f64]) -> Vec<f64> {
    let e = entropy(p);
    p.iter()
        .map(|&pk| if pk > 0.0 { pk * (pk.ln() + e) } else { 0.0 })
        .collect()
}

/// One full forward pass: logits, per-position softmax, both objectives.
pub fn forward(instance: &ProblemInstance, pert: &Perturbations) -> Result<Forward, ModelError> {
    let logits = compute_logits(instance, pert)?;
    let (t_len, v_len) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(t_len, v_len);
    let mut ce = 0.0;
    let mut ent = 0.0;
    for t in 0..t_len {
        let p = softmax(logits.row(t));
        ce -= log_softmax_at(logits.row(t), instance.targets()[t]);
        ent += entropy(&p);
        probs.row_mut(t).copy_from_slice(&p);
    }
    let n = t_len as f64;
    let out = Forward {
        logits,
        probs,
        objectives: ObjectivePair {
            ob1: ce / n,
            ob2: -ent / n,
        },
        entropy: ent / n,
    };
    #[cfg(debug_assertions)]
    debug_check_forward(instance, &out);
    Ok(out)
}

/// Zero-sum and range checks run on every forward pass in debug builds.
#[cfg(debug_assertions)]
fn debug_check_forward(instance: &ProblemInstance, fwd: &Forward) {
    if !fwd.logits.is_finite() {
        return;
    }
    let log_v = (instance.vocab() as f64).ln();
    let slack = 1e-12;
    for t in 0..fwd.probs.rows() {
        let p = fwd.probs.row(t);
        let h = entropy(p);
        debug_assert!(
            h >= -slack && h <= log_v + slack,
            "entropy {h} outside [0, log V]"
        );
        for g in [
            grad_logits_heat(p, instance.targets()[t]),
            grad_logits_conf(p),
        ] {
            let s: f64 = g.iter().sum();
            debug_assert!(s.abs() < 1e-10, "logit gradient sums to {s}");
        }
    }
    let ob = fwd.objectives;
    debug_assert!(ob.ob1 >= 0.0, "heat {} negative", ob.ob1);
    debug_assert!(
        ob.ob2 >= -log_v - slack && ob.ob2 <= slack,
        "confidence {} outside [-log V, 0]",
        ob.ob2
    );
}

/// `(1/T) sum_t sum_v g[t][v] (W[v] + w_row(v))`
pub fn grad_h(
    instance: &ProblemInstance,
    pert: &Perturbations,
    g_logits: &Matrix,
) -> Result<Vec<f64>, ModelError> {
    check_logit_grad_shape(instance, g_logits)?;
    instance.check(pert)?;
    let emb = instance.effective_embeddings(pert);
    let mut out = vec![0.0; instance.dim()];
    for t in 0..instance.positions() {
        for v in 0..instance.vocab() {
            axpy(g_logits.get(t, v), emb.row(v), &mut out);
        }
    }
    let n = instance.positions() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Gradient with respect to `w`, shaped per the instance's [`WMode`].
pub fn grad_w(
    instance: &ProblemInstance,
    pert: &Perturbations,
    g_logits: &Matrix,
) -> Result<Vec<f64>, ModelError> {
    check_logit_grad_shape(instance, g_logits)?;
    instance.check(pert)?;
    let d = instance.dim();
    let hid = instance.effective_hiddens(pert);
    let mut out = vec![0.0; instance.w_len()];
    for t in 0..instance.positions() {
        let x = hid.row(t);
        match instance.w_mode() {
            WMode::FullMatrix => {
                for v in 0..instance.vocab() {
                    axpy(g_logits.get(t, v), x, &mut out[v * d..(v + 1) * d]);
                }
            }
            WMode::SingleRow => axpy(g_logits.get(t, instance.v_star()), x, &mut out),
            WMode::Broadcast => {
                let s: f64 = g_logits.row(t).iter().sum();
                axpy(s, x, &mut out);
            }
        }
    }
    let n = instance.positions() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

fn check_logit_grad_shape(instance: &ProblemInstance, g: &Matrix) -> Result<(), ModelError> {
    if g.rows() != instance.positions() {
        return Err(ModelError::Shape {
            what: "logit gradient rows",
            expected: instance.positions(),
            actual: g.rows(),
        });
    }
    if g.cols() != instance.vocab() {
        return Err(ModelError::Shape {
            what: "logit gradient columns",
            expected: instance.vocab(),
            actual: g.cols(),
        });
    }
    Ok(())
}

/// Analytic gradient of one objective with respect to one group.
pub fn analytic_gradient(
    objective: Objective,
    group: Group,
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<Vec<f64>, ModelError> {
    let fwd = forward(instance, pert)?;
    let g = fwd.logit_grads(instance, objective);
    match group {
        Group::H => grad_h(instance, pert, &g),
        Group::W => grad_w(instance, pert, &g),
    }
}

/// Objective value at `pert`, straight from the loss definitions.
pub fn objective_value(
    objective: Objective,
    instance: &ProblemInstance,
    pert: &Perturbations,
) -> Result<f64, ModelError> {
    let logits = compute_logits(instance, pert)?;
    match objective {
        Objective::Heat => heat_loss(&logits, instance.targets()),
        Objective::Conf => Ok(confidence_loss(&logits)),
    }
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central differences of `f` at `x`, coordinate by coordinate:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn central_difference<E>(
    x: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = probe[i];
        probe[i] = x0 + eps;
        let fp = f(&probe)?;
        probe[i] = x0 - eps;
        let fm = f(&probe)?;
        probe[i] = x0;
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Finite-difference gradient of one objective with respect to one group,
/// evaluated straight from the loss definitions.
pub fn fd_gradient(
    objective: Objective,
    group: Group,
    instance: &ProblemInstance,
    pert: &Perturbations,
    eps: f64,
) -> Result<Vec<f64>, ModelError> {
    instance.check(pert)?;
    let mut probe = pert.clone();
    central_difference(pert.group(group), eps, |x| {
        probe.group_mut(group).copy_from_slice(x);
        objective_value(objective, instance, &probe)
    })
}
