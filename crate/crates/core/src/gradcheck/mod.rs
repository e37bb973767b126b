//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes; it never looks at
//! the tape's backward rules.

use rand::Rng;

mod suite;

pub use suite::{run_suite, SuiteEntry};

use crate::tensor::{Gradients, ParamId, ParamKind, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Upper bound on checked entries per tensor; `None` checks every entry.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if abs > opts.abs_floor {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        if abs > opts.abs_floor && rel > opts.rel_tol {
            self.failures
                .push(format!("{label}: analytic {analytic:.9e} numeric {numeric:.9e} rel {rel:.3e}"));
        }
    }
}

fn entries(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Adds uniform noise in `±amount` to every bias and batch-norm shift.
///
/// Freshly initialised networks have all biases at zero, so a row whose
/// hidden units are all inactive maps to an exact zero and ties with other
/// zeros inside max aggregations. Finite differences are meaningless at
/// such kinks; moving the biases off zero checks at a generic point.
pub fn jitter_offsets<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R, amount: f64) {
    for p in store.params_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::BnShift) {
            for v in p.value.data_mut() {
                *v += rng.random_range(-amount..amount);
            }
        }
    }
}

/// Checks every parameter gradient of `loss_fn` against central differences.
///
/// `loss_fn` builds a tape over the given store and returns its loss value
/// and the gradients from one backward pass.
pub fn check_params<F, E>(store: &ParamStore<f64>, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Gradients<f64>), E>,
    E: From<TensorError>,
{
    let (_, grads) = loss_fn(store)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = store
        .ids()
        .map(|id| {
            let g = grads
                .param(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
            (id, g)
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (id, g) in analytic {
        let n = store.get(id).value.numel();
        for e in entries(n, opts.max_per_tensor) {
            let orig = store.get(id).value.data()[e];
            probe.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let plus = loss_fn(&probe)?.0;
            probe.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let minus = loss_fn(&probe)?.0;
            probe.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(format!("{}[{e}]", store.get(id).name), g[e], numeric, &opts);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to input tensors of a tape-built function.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::<f64>::new();
    let eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.value(out).iter().sum::<f64>();
        if !grad {
            return Ok((loss, None));
        }
        // Sum of outputs is the scalar checked, so seed through a reduction.
        let flat = tape.reshape(out, &[tape.value(out).len()])?;
        let total = tape.reduce(crate::tensor::ReduceKind::Sum, flat, 0)?;
        let grads = tape.backward(total)?;
        let gs = vars
            .iter()
            .map(|&v| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect();
        Ok((loss, Some(gs)))
    };

    let (_, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("requested");
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for e in entries(inputs[k].numel(), opts.max_per_tensor) {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + opts.step;
            let plus = eval(&probe, false)?.0;
            probe[k].data_mut()[e] = orig - opts.step;
            let minus = eval(&probe, false)?.0;
            probe[k].data_mut()[e] = orig;
            report.record(format!("input{k}[{e}]"), g[e], (plus - minus) / (2.0 * opts.step), &opts);
        }
    }
    Ok(report)
}
