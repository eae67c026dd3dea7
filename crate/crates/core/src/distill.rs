//! Temperature-softened KL divergence between teacher and adapted student maps.

use dyndistill_autodiff::{Graph, Var};

use crate::config::SoftmaxDomain;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillOptions {
    pub tau: f64,
    pub temperature_squared: bool,
    pub domain: SoftmaxDomain,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            tau: 15.0,
            temperature_squared: true,
            domain: SoftmaxDomain::Full,
        }
    }
}

/// `KL(softmax(t/tau) || softmax(s/tau))` for one level, teacher detached.
fn level_kl(g: &mut Graph<'_>, teacher: Var, student: Var, opts: DistillOptions) -> Var {
    let (rows, cols) = g.shape(student);
    let t = g.detach(teacher);
    let (t, s, groups) = match opts.domain {
        SoftmaxDomain::Full => (
            g.reshape(t, 1, rows * cols),
            g.reshape(student, 1, rows * cols),
            1,
        ),
        SoftmaxDomain::PerChannel => (g.transpose(t), g.transpose(student), cols),
    };
    let t = g.scale(t, 1.0 / opts.tau);
    let s = g.scale(s, 1.0 / opts.tau);
    let lt = g.log_softmax_rows(t);
    let ls = g.log_softmax_rows(s);
    let pt = g.exp(lt);
    let diff = g.sub(lt, ls);
    let prod = g.mul(pt, diff);
    let kl = g.sum_all(prod);
    g.scale(kl, 1.0 / groups as f64)
}

/// Mean over levels of the per-level KL, times `tau^2` when enabled.
pub fn distill_loss(g: &mut Graph<'_>, teacher: &[Var], student: &[Var], opts: DistillOptions) -> Result<Var> {
    if !(opts.tau > 0.0) || !opts.tau.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {}", opts.tau)));
    }
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Config(format!(
            "distillation needs matching non-empty level lists, got {} teacher and {} student",
            teacher.len(),
            student.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (k, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        if g.shape(t) != g.shape(s) {
            return Err(Error::Config(format!(
                "level {k}: teacher {:?} and student {:?} shapes differ",
                g.shape(t),
                g.shape(s)
            )));
        }
        let kl = level_kl(g, t, s, opts);
        total = Some(match total {
            Some(acc) => g.add(acc, kl),
            None => kl,
        });
    }
    let factor = if opts.temperature_squared { opts.tau * opts.tau } else { 1.0 };
    Ok(g.scale(total.expect("non-empty"), factor / teacher.len() as f64))
}
