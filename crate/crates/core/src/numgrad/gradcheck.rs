//! Central finite-difference verification of tape gradients (64-bit).

use super::{Mode, ParameterStore, Session, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor; larger tensors are strided.
    pub max_coords: usize,
    pub mode: Mode,
    /// Dropout seed, identical for every evaluation.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, max_coords: 24, mode: Mode::Train, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`, maximized over probed coordinates.
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU, max-pool or clamp kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
                self.worst = other.worst;
            }
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(store: &mut ParameterStore<f64>, opts: &GradCheckOptions, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::with_tape(store, opts.mode, opts.seed, Tape::with_kink_tracking());
    let root = f(&mut s)?;
    if s.tape.value(root).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar objective".into()));
    }
    Ok((s.tape.value(root)[0], s.tape.kink_signature().unwrap_or(0)))
}

/// Compares the tape's gradients of the scalar `f` with central differences,
/// over every trainable tensor in `store`.
pub fn check_gradients<F>(store: &mut ParameterStore<f64>, opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    store.zero_grad();
    let base_sig = {
        let mut s = Session::with_tape(store, opts.mode, opts.seed, Tape::with_kink_tracking());
        let root = f(&mut s)?;
        let sig = s.tape.kink_signature().unwrap_or(0);
        s.backward(root)?;
        sig
    };
    let names: Vec<String> = store.trainable().map(str::to_owned).collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let (len, analytic) = {
            let t = store.get(&name)?;
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            (t.len(), g)
        };
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            (0..opts.max_coords).map(|i| i * len / opts.max_coords).collect()
        };
        for i in coords {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let (plus, sig_plus) = evaluate(store, &opts, &mut f)?;
            store.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let (minus, sig_minus) = evaluate(store, &opts, &mut f)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(format!("{name}[{i}]"));
                }
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
