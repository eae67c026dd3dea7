//! Central finite-difference gradient checks.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it validates.

use crate::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Maximum coordinates probed per tensor (evenly strided); 0 = all.
    pub max_probes: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            max_probes: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub probes: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.probes += 1;
        if rel >= self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices(len: usize, max_probes: usize) -> Vec<usize> {
    if max_probes == 0 || len <= max_probes {
        (0..len).collect()
    } else {
        let stride = len as f64 / max_probes as f64;
        (0..max_probes).map(|k| (k as f64 * stride) as usize).collect()
    }
}

/// Checks gradients of a scalar function with respect to the given parameters.
///
/// `build` must construct the same computation on every call; it receives a
/// fresh graph each time.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    opts: GradCheckOptions,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g);
        g.backward(loss).into_params()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &id in ids {
        let len = store.get(id).len();
        let (rows, cols) = store.get(id).shape();
        for k in probe_indices(len, opts.max_probes) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(&work, &build);
            work.get_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(&work, &build);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            report.record(
                || format!("{}[{}] of {rows}x{cols}", store.name(id), k),
                a,
                numeric,
                opts.floor,
            );
        }
    }
    report
}

fn eval<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut g = Graph::with_params(store);
    let loss = build(&mut g);
    g.value(loss).data()[0]
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], opts: GradCheckOptions, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let run = |xs: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let value = g.value(loss).data()[0];
        let back = g.backward(loss);
        (value, vars.iter().map(|v| back.wrt(*v).cloned()).collect())
    };
    let (_, analytic) = run(inputs);
    let forward = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (n, input) in inputs.iter().enumerate() {
        for k in probe_indices(input.len(), opts.max_probes) {
            let orig = input.data()[k];
            work[n].data_mut()[k] = orig + opts.step;
            let plus = forward(&work);
            work[n].data_mut()[k] = orig - opts.step;
            let minus = forward(&work);
            work[n].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[n].as_ref().map_or(0.0, |t| t.data()[k]);
            report.record(|| format!("input {n}[{k}]"), a, numeric, opts.floor);
        }
    }
    report
}
