use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

/// Distance kept between scores and the ends of `(0, 1)` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

pub struct DiscriminatorLoss {
    pub total: Var,
    /// `-mean(log D(y))`
    pub real: Var,
    /// `-mean(log(1 - D(G(c))))`
    pub fake: Var,
}

fn log_clamped<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.clamp(x, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    tape.log(c)
}

fn log_one_minus<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.clamp(x, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let neg = tape.scale(c, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    tape.log(one_minus)
}

/// Minimized by the discriminator: real patches toward 1, fake toward 0.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<DiscriminatorLoss> {
    let lr = log_clamped(tape, real_scores)?;
    let mr = tape.mean(lr)?;
    let real = tape.scale(mr, -1.0)?;
    let lf = log_one_minus(tape, fake_scores)?;
    let mf = tape.mean(lf)?;
    let fake = tape.scale(mf, -1.0)?;
    let total = tape.add(real, fake)?;
    Ok(DiscriminatorLoss { total, real, fake })
}

pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub l1: Var,
}

/// `adv + lambda * mean|real - fake|`, with `adv` the non-saturating
/// `-mean(log D(G(c)))` or, when `minimax` is set, `mean(log(1 - D(G(c))))`.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    fake_scores: Var,
    fake_image: Var,
    real_image: Var,
    lambda_l1: f64,
    minimax: bool,
) -> Result<GeneratorLoss> {
    let adversarial = if minimax {
        let l = log_one_minus(tape, fake_scores)?;
        tape.mean(l)?
    } else {
        let l = log_clamped(tape, fake_scores)?;
        let m = tape.mean(l)?;
        tape.scale(m, -1.0)?
    };
    let d = tape.sub(real_image, fake_image)?;
    let a = tape.abs(d)?;
    let l1 = tape.mean(a)?;
    let weighted = tape.scale(l1, lambda_l1)?;
    let total = tape.add(adversarial, weighted)?;
    Ok(GeneratorLoss { total, adversarial, l1 })
}
