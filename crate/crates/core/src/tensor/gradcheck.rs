//! Finite-difference verification of tape gradients.
//!
//! Analytic gradients come from a 32-bit tape. The reference is a central
//! difference of the same objective re-executed in 64-bit, so rounding in the
//! reference stays far below the tolerances being asserted.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of a list of parameter tensors, expressible at any precision.
pub trait Objective {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per tensor; `None` probes all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub index: usize,
    pub checked: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over probed entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖₂` over probed entries.
    pub diff_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub loss: f64,
    pub tensors: Vec<TensorReport>,
    /// Full analytic gradients, one buffer per parameter tensor.
    pub gradients: Vec<Vec<f32>>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    /// Relative error of all probed entries taken as one vector, so tensors
    /// whose gradient is negligible next to the rest do not dominate.
    pub fn global_rel_error(&self) -> f64 {
        let sq = |f: fn(&TensorReport) -> f64| self.tensors.iter().map(|t| f(t).powi(2)).sum::<f64>().sqrt();
        let diff = sq(|t| t.diff_norm);
        let denom = sq(|t| t.analytic_norm).max(sq(|t| t.numeric_norm));
        if denom < 1e-12 {
            diff
        } else {
            diff / denom
        }
    }
}

fn eval64<O: Objective>(obj: &O, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = obj.loss(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Runs backward on a 32-bit tape and compares every parameter gradient with
/// 64-bit central differences.
pub fn check_gradients<O: Objective>(obj: &O, params: &[Tensor<f32>], opts: &GradCheckOptions) -> Result<GradReport> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = obj.loss(&mut tape, &vars)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0] as f64;

    let mut gradients = Vec::with_capacity(vars.len());
    for (i, &v) in vars.iter().enumerate() {
        if !tape.is_param(v) {
            return Err(Error::GradCheck(format!("parameter {i} is not a taped leaf")));
        }
        let g = tape
            .grad(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[i].numel()]);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::GradCheck(format!("non-finite gradient in parameter {i}")));
        }
        gradients.push(g);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut wide: Vec<Tensor<f64>> = params.iter().map(Tensor::cast).collect();
    let h = opts.step;
    let mut tensors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let numel = params[i].numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < numel => {
                let mut e = sample(&mut rng, numel, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..numel).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &entries {
            let orig = wide[i].data()[j];
            wide[i].data_mut()[j] = orig + h;
            let plus = eval64(obj, &wide)?;
            wide[i].data_mut()[j] = orig - h;
            let minus = eval64(obj, &wide)?;
            wide[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = gradients[i][j] as f64;
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom < 1e-12 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        tensors.push(TensorReport {
            index: i,
            checked: entries.len(),
            rel_error,
            analytic_norm: a2.sqrt(),
            numeric_norm: n2.sqrt(),
            diff_norm: diff2.sqrt(),
        });
    }
    Ok(GradReport {
        loss: loss_value,
        tensors,
        gradients,
    })
}
