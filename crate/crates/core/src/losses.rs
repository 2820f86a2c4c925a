//! Classification, soft-target and phase-transfer objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{KlDirection, Tape, Var};

pub const DEFAULT_TAU: f64 = 4.0;

/// Component values of one composite objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kt: f64,
    pub dikt: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// Graph handles of a composite objective. Disabled terms are `None` and
/// are never built.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub ce: Option<Var>,
    pub kt: Option<Var>,
    pub dikt: Option<Var>,
    pub total: Var,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            ce: get(self.ce),
            kt: get(self.kt),
            dikt: get(self.dikt),
            total: tape.value(self.total).item(),
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
        }
    }
}

/// Which objective terms take part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Terms {
    pub ce: bool,
    pub kt: bool,
    pub dikt: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { ce: true, kt: true, dikt: true };
}

pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// KL between `softmax(target / tau)` and `softmax(learner / tau)`; the
/// target is detached so only the learner receives gradient.
pub fn kt_loss(tape: &mut Tape, target: Var, learner: Var, tau: f64, direction: KlDirection) -> Result<Var> {
    let target = tape.detach(target);
    tape.kl_div(target, learner, tau, direction)
}

/// Mean squared error against a detached teacher stack.
pub fn dikt_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let teacher = tape.detach(teacher);
    tape.mse(student, teacher)
}

fn check_weights(beta: f64, gamma: f64, tau: f64) -> Result<()> {
    if !(beta >= 0.0) || !(gamma >= 0.0) || !beta.is_finite() || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("loss weights must be >= 0, got beta {beta}, gamma {gamma}")));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn assemble(tape: &mut Tape, parts: &[(Option<Var>, f64)]) -> Var {
    let mut total: Option<Var> = None;
    for &(v, w) in parts {
        let Some(v) = v else { continue };
        let term = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            Some(t) => tape.add(t, term).expect("scalar terms"),
            None => term,
        });
    }
    total.unwrap_or_else(|| tape.constant(crate::tensor::Tensor::scalar(0.0)))
}

/// `ce + beta * kt` for the teacher, imitating the student's soft targets.
#[allow(clippy::too_many_arguments)]
pub fn teacher_total(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
    beta: f64,
    tau: f64,
    direction: KlDirection,
    terms: Terms,
) -> Result<Objective> {
    check_weights(beta, 0.0, tau)?;
    let ce = terms.ce.then(|| ce_loss(tape, teacher_logits, labels)).transpose()?;
    let kt =
        (terms.kt && beta > 0.0).then(|| kt_loss(tape, student_logits, teacher_logits, tau, direction)).transpose()?;
    let total = assemble(tape, &[(ce, 1.0), (kt, beta)]);
    Ok(Objective { ce, kt, dikt: None, total, beta, gamma: 0.0, tau })
}

/// `ce + beta * kt + gamma * dikt` for the student. `transfer` is the pair
/// (activated student stack, activated teacher stack).
#[allow(clippy::too_many_arguments)]
pub fn student_total(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    transfer: Option<(Var, Var)>,
    labels: &[usize],
    beta: f64,
    gamma: f64,
    tau: f64,
    direction: KlDirection,
    terms: Terms,
) -> Result<Objective> {
    check_weights(beta, gamma, tau)?;
    let ce = terms.ce.then(|| ce_loss(tape, student_logits, labels)).transpose()?;
    let kt =
        (terms.kt && beta > 0.0).then(|| kt_loss(tape, teacher_logits, student_logits, tau, direction)).transpose()?;
    let dikt = match (terms.dikt && gamma > 0.0, transfer) {
        (true, Some((s, t))) => Some(dikt_loss(tape, s, t)?),
        (true, None) => return Err(Error::InvalidArgument("dikt enabled without phase stacks".into())),
        (false, _) => None,
    };
    let total = assemble(tape, &[(ce, 1.0), (kt, beta), (dikt, gamma)]);
    Ok(Objective { ce, kt, dikt, total, beta, gamma, tau })
}
