//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences at the coordinates `(input, flat index)` in `coords`.
pub fn check<F>(inputs: &[Tensor], coords: &[(usize, usize)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut samples = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        let analytic = tape.grad(vars[input]).map_or(0.0, |g| g[index]);
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + h;
        let plus = eval(&work)?;
        work[input].data_mut()[index] = orig - h;
        let minus = eval(&work)?;
        work[input].data_mut()[index] = orig;
        samples.push(GradSample {
            input,
            index,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(GradReport { samples })
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect()
}

/// `count` distinct coordinates drawn uniformly over all elements.
pub fn sample_coords<R: Rng + ?Sized>(inputs: &[Tensor], count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let all = all_coords(inputs);
    let n = count.min(all.len());
    sample(rng, all.len(), n).into_iter().map(|i| all[i]).collect()
}
