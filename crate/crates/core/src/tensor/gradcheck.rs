//! Central finite-difference check of tape gradients, at 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    /// Perturbation `h` in `(f(w+h) - f(w-h)) / 2h`.
    pub step: f64,
    /// When `w+h` or `w-h` crosses a kink, `h` is divided by ten and the
    /// probe retried, down to this size.
    pub min_step: f64,
    /// Entries probed per parameter block (all entries if the block is smaller).
    pub probes_per_block: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding do not divide by zero.
    pub abs_floor: f64,
    /// Seed for probe selection and for the tape's dropout masks.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            min_step: 1e-6,
            probes_per_block: 5,
            tolerance: 1e-5,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub path: String,
    pub probes: usize,
    /// Probes dropped because `w+h` or `w-h` crossed an activation kink at
    /// every step size tried.
    pub kink_skips: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen among the probes.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance && b.probes > b.kink_skips)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare analytic gradients of the scalar built by `graph` with central
/// differences, for every parameter block in `store`.
///
/// `graph` must be a pure function of the store: it is re-run on fresh tapes
/// seeded with `cfg.seed` for every perturbation. A probe whose perturbed
/// passes took a different branch at any ReLU, max-pool, abs or clamp than the
/// unperturbed pass is counted as a kink skip instead of compared.
pub fn finite_difference_check<F>(graph: F, store: &ParamStore<f64>, cfg: FdConfig) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(cfg.seed);
    let loss = graph(&mut tape, store)?;
    let signature = tape.kink_signature();
    let analytic = tape.backward(loss)?.for_params(store, "");
    drop(tape);

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new(cfg.seed);
        let l = graph(&mut t, s)?;
        Ok((t.value(l).item(), t.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut work = store.clone();
    let mut blocks = Vec::new();
    for (path, grad) in &analytic {
        let n = grad.numel();
        let mut idx: Vec<usize> = sample(&mut rng, n, cfg.probes_per_block.min(n)).into_vec();
        idx.sort_unstable();
        let mut report = BlockReport {
            path: path.clone(),
            probes: idx.len(),
            kink_skips: 0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for i in idx {
            let orig = work.get(path)?.data()[i];
            let mut h = cfg.step;
            let numeric = loop {
                work.get_mut(path).expect("present").data_mut()[i] = orig + h;
                let (plus, sig_plus) = eval(&work)?;
                work.get_mut(path).expect("present").data_mut()[i] = orig - h;
                let (minus, sig_minus) = eval(&work)?;
                work.get_mut(path).expect("present").data_mut()[i] = orig;
                if sig_plus == signature && sig_minus == signature {
                    break Some((plus - minus) / (2.0 * h));
                }
                h /= 10.0;
                if h < cfg.min_step * (1.0 - 1e-9) {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                report.kink_skips += 1;
                continue;
            };
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
        }
        blocks.push(report);
    }
    Ok(FdReport {
        tolerance: cfg.tolerance,
        blocks,
    })
}
