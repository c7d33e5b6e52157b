use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many coordinates per parameter (evenly spaced,
    /// always including the first and last). `None` probes every one.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m >= 2 => (0..m).map(|i| i * (len - 1) / (m - 1)).collect(),
        Some(1) if len > 1 => vec![0],
        _ => (0..len).collect(),
    }
}

fn eval<F>(store: &mut ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::dim("grad_check", "objective must be scalar"));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of a scalar objective against central
/// finite differences. The error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; the report
/// carries the maximum.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    options: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|&id| {
            // a parameter the objective never read has zero gradient
            Some(
                tape_param_grad(&tape, &grads, store, id)
                    .unwrap_or_else(|| vec![0.0; store.value(id).numel()]),
            )
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    for (&id, ana) in ids.iter().zip(&analytic) {
        let ana = ana.as_ref().expect("filled above");
        if let Some(bad) = ana.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("grad_check", format!("non-finite analytic gradient {bad}")));
        }
        for idx in probe_indices(ana.len(), options.max_per_param) {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + options.step;
            let plus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[idx] = orig - options.step;
            let minus = eval(store, &mut f)?;
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * options.step);
            if !numeric.is_finite() {
                return Err(Error::numeric("grad_check", "non-finite numeric gradient"));
            }
            let a = ana[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.probes += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = store.get(id).name.clone();
                    report.worst_index = idx;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn tape_param_grad(
    tape: &Tape,
    grads: &super::tape::Gradients,
    store: &ParamStore,
    id: ParamId,
) -> Option<Vec<f64>> {
    tape.param_var(id)
        .and_then(|v| grads.wrt(v))
        .map(|g| {
            debug_assert_eq!(g.numel(), store.value(id).numel());
            g.data().to_vec()
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_objective_has_unit_gradient() {
        let mut store = ParamStore::new();
        let theta = store
            .add("theta", Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0))
            .unwrap();
        let report = grad_check(&mut store, &[theta], &GradCheckOptions::default(), |t, s| {
            let v = t.param(s, theta)?;
            t.sum(v)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
        assert_eq!(report.probes, 12);
    }

    #[test]
    fn probe_subsets_are_spread() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(5)), vec![0, 1]);
        assert_eq!(probe_indices(4, None), vec![0, 1, 2, 3]);
    }
}
