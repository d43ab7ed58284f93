//! Finite-difference gradient oracle shared by the integration tests.

#![allow(dead_code)]

use fxtune::tensornet::ForwardPass;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Agreement below this is accepted whatever the relative error, since both
/// values are then dominated by floating-point cancellation.
pub const ABS_FLOOR: f64 = 1e-9;

/// Everything that decides which linear piece the loss is on: ReLU signs
/// and pooling winners.
#[derive(Debug, PartialEq)]
pub struct Pieces {
    signs: Vec<bool>,
    argmax: Vec<u32>,
}

impl Pieces {
    pub fn of(pass: &ForwardPass) -> Self {
        let mut signs = vec![];
        let mut argmax = vec![];
        for layer in &pass.layers {
            signs.extend(layer.pre_activation.iter().map(|&a| a > 0.0));
            if let Some(idx) = &layer.pool_argmax {
                argmax.extend_from_slice(idx);
            }
        }
        Self { signs, argmax }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdTally {
    pub checked: usize,
    pub passed: usize,
    /// Points whose ReLU or pooling pattern changes within one step.
    pub kinks: usize,
    /// Largest relative error among gradients of magnitude at least 1e-6.
    pub worst_rel: f64,
}

impl FdTally {
    pub fn add(&mut self, other: FdTally) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.kinks += other.kinks;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }

    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

pub fn agrees(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale == 0.0 { 0.0 } else { diff / scale };
    (diff <= ABS_FLOOR || rel <= REL_TOL, rel)
}

/// Central differences of `eval` around `theta` for every coordinate,
/// compared with `analytic`. `eval` returns the loss and its forward pass.
pub fn check_coordinates(
    theta: &[f64],
    analytic: &[f64],
    base: &Pieces,
    mut eval: impl FnMut(&[f64]) -> ForwardPass,
) -> FdTally {
    let mut tally = FdTally::default();
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + FD_STEP;
        let plus = eval(&work);
        work[i] = theta[i] - FD_STEP;
        let minus = eval(&work);
        work[i] = theta[i];
        if Pieces::of(&plus) != *base || Pieces::of(&minus) != *base {
            tally.kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
        let (ok, rel) = agrees(analytic[i], numeric);
        tally.checked += 1;
        tally.passed += usize::from(ok);
        if analytic[i].abs().max(numeric.abs()) >= 1e-6 {
            tally.worst_rel = tally.worst_rel.max(rel);
        }
    }
    tally
}
