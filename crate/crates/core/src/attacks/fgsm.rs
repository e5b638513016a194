use super::{AttackContext, EpsilonLadder, Goal, PerturbationResult};
use crate::error::{Error, Result};
use crate::qnet::InputLoss;

/// Fast gradient sign attack over an epsilon ladder.
///
/// The cross-entropy gradient is taken once at the clean observation. Each rung moves the
/// attacked tuple by `eps * k * sign(g)`, up the loss of the current action (non-targeted) or
/// down the loss of the target (targeted), projects it and stops at the first qualifying
/// outcome. Without one, the last rung is returned.
pub fn fgsm_attack(ctx: &AttackContext, goal: Goal, ladder: &EpsilonLadder, k: &[f64]) -> Result<PerturbationResult> {
    ctx.check()?;
    if k.len() != ctx.coords.len() {
        return Err(Error::dim(ctx.coords.len(), k.len()));
    }
    if ladder.iterations == 0 {
        return Err(Error::InvalidArgument("empty epsilon ladder".into()));
    }
    let action = ctx.net.greedy_action(ctx.state)?;
    let (loss, direction) = match goal {
        Goal::NonTargeted => (InputLoss::CrossEntropy { action }, 1.0),
        Goal::Targeted(target) if target == action => {
            ctx.classify(action, action, goal)?;
            return Ok(PerturbationResult::already_on_target(ctx, action));
        }
        Goal::Targeted(target) => (InputLoss::CrossEntropy { action: target }, -1.0),
    };
    let grad = ctx.net.input_gradient(ctx.state, &loss)?;
    let sign: Vec<f64> = grad[ctx.coords.clone()]
        .iter()
        .map(|g| if *g > 0.0 { 1.0 } else if *g < 0.0 { -1.0 } else { 0.0 })
        .collect();
    let x = ctx.original();

    let mut last = None;
    for (i, eps) in ladder.values().into_iter().enumerate() {
        let candidate: Vec<f64> = (0..x.len())
            .map(|d| x[d] + direction * eps * k[d] * sign[d])
            .collect();
        let c = ctx.assess(&candidate, action, goal)?;
        let done = c.outcome.qualifies();
        last = Some(PerturbationResult::from_candidate(ctx, c, action, goal, i + 1, Some(eps)));
        if done {
            break;
        }
    }
    Ok(last.expect("ladder has at least one rung"))
}
