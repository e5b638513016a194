use super::{better, AttackContext, Candidate, CwParams, Goal, PerturbationResult};
use crate::error::{Error, Result};
use crate::qnet::InputLoss;

/// Keeps the tanh inverse finite at the edges of the box.
const BOX_EDGE: f64 = 1e-12;

fn margin(goal: Goal, action: usize) -> InputLoss {
    match goal {
        Goal::NonTargeted => InputLoss::MarginAway { action, confidence: 0.0 },
        Goal::Targeted(target) => InputLoss::MarginToward { target, confidence: 0.0 },
    }
}

/// Result for the best qualifying iterate, or for the last iterate when none qualifies.
fn finish(
    ctx: &AttackContext,
    best: Option<(Candidate, usize)>,
    last: Option<(Candidate, usize)>,
    action: usize,
    goal: Goal,
    epsilon: Option<f64>,
) -> PerturbationResult {
    let (c, it) = best.or(last).expect("at least one iteration");
    PerturbationResult::from_candidate(ctx, c, action, goal, it, epsilon)
}

/// C&W-L2 with a tanh change of variables: each attacked coordinate is mapped from the
/// constraint box onto `[0, 1]` and written as `(tanh(w) + 1) / 2`. Plain gradient descent
/// on `w` minimizes `||delta||^2 + c * f(x + delta)` with the zero-confidence margin `f`.
/// The qualifying iterate with the smallest L2 distance is returned.
pub fn cw_l2_box(ctx: &AttackContext, goal: Goal, params: &CwParams) -> Result<PerturbationResult> {
    ctx.check()?;
    check_params(params)?;
    let action = ctx.net.greedy_action(ctx.state)?;
    if goal == Goal::Targeted(action) {
        ctx.classify(action, action, goal)?;
        return Ok(PerturbationResult::already_on_target(ctx, action));
    }
    let (lo, hi) = ctx.constraints.box_bounds;
    if !(lo < hi) {
        return Err(Error::InvalidConfig("constraint box must have lower < upper".into()));
    }
    let half = 0.5 * (hi - lo);
    let x = ctx.original();
    let to_x = |w: f64| lo + half * (w.tanh() + 1.0);
    let mut w: Vec<f64> = x
        .iter()
        .map(|v| {
            let s = ((v - lo) / (hi - lo)).clamp(BOX_EDGE, 1.0 - BOX_EDGE);
            (2.0 * s - 1.0).atanh()
        })
        .collect();
    let loss = margin(goal, action);

    let mut best: Option<(Candidate, usize)> = None;
    let mut last = None;
    for it in 1..=params.max_iters {
        let xp: Vec<f64> = w.iter().map(|&wi| to_x(wi)).collect();
        let (_, g) = ctx.net.input_loss_gradient(&ctx.splice(&xp), &loss)?;
        for d in 0..w.len() {
            let dobj = 2.0 * (xp[d] - x[d]) + params.c * g[ctx.coords.start + d];
            let t = w[d].tanh();
            w[d] -= params.learning_rate * dobj * half * (1.0 - t * t);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Ok(PerturbationResult::aborted(ctx, action, goal, it));
        }
        let xp: Vec<f64> = w.iter().map(|&wi| to_x(wi)).collect();
        let c = ctx.assess(&xp, action, goal)?;
        if better(&c, best.as_ref().map(|b| &b.0)) {
            best = Some((c, it));
        } else {
            last = Some((c, it));
        }
    }
    if best.is_none() && last.is_none() {
        return Ok(PerturbationResult::aborted(ctx, action, goal, params.max_iters));
    }
    Ok(finish(ctx, best, last, action, goal, None))
}

/// C&W-L2 over `delta = eps * k * u` in feature units. Each coordinate of the gradient with
/// respect to `u` is clipped to `[-1, 1]` before the step, so `|delta_d|` never exceeds
/// `eps * k_d * max_iters * lr`. The norm term is taken on `u`, which puts every attacked
/// feature on a common scale.
pub fn cw_scaled(ctx: &AttackContext, goal: Goal, k: &[f64], params: &CwParams) -> Result<PerturbationResult> {
    ctx.check()?;
    check_params(params)?;
    if k.len() != ctx.coords.len() {
        return Err(Error::dim(ctx.coords.len(), k.len()));
    }
    let action = ctx.net.greedy_action(ctx.state)?;
    if goal == Goal::Targeted(action) {
        ctx.classify(action, action, goal)?;
        return Ok(PerturbationResult::already_on_target(ctx, action));
    }
    let x = ctx.original();
    let scale: Vec<f64> = k.iter().map(|kd| params.epsilon * kd).collect();
    let mut u = vec![0.0; x.len()];
    let loss = margin(goal, action);
    let shifted = |u: &[f64]| -> Vec<f64> { (0..x.len()).map(|d| x[d] + scale[d] * u[d]).collect() };

    let mut best: Option<(Candidate, usize)> = None;
    let mut last = None;
    for it in 1..=params.max_iters {
        let (_, g) = ctx.net.input_loss_gradient(&ctx.splice(&shifted(&u)), &loss)?;
        for d in 0..u.len() {
            let du = 2.0 * u[d] + params.c * scale[d] * g[ctx.coords.start + d];
            u[d] -= params.learning_rate * du.clamp(-1.0, 1.0);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Ok(PerturbationResult::aborted(ctx, action, goal, it));
        }
        let c = ctx.assess(&shifted(&u), action, goal)?;
        if better(&c, best.as_ref().map(|b| &b.0)) {
            best = Some((c, it));
        } else {
            last = Some((c, it));
        }
    }
    if best.is_none() && last.is_none() {
        return Ok(PerturbationResult::aborted(ctx, action, goal, params.max_iters));
    }
    Ok(finish(ctx, best, last, action, goal, Some(params.epsilon)))
}

fn check_params(p: &CwParams) -> Result<()> {
    if p.max_iters == 0 || !(p.learning_rate > 0.0) || !(p.c >= 0.0) || !(p.epsilon > 0.0) {
        return Err(Error::InvalidConfig(
            "C&W needs max_iters >= 1, lr > 0, c >= 0 and epsilon > 0".into(),
        ));
    }
    Ok(())
}
