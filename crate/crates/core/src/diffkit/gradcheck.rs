use super::{DiffError, NodeId, ParamStore, Tape};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter id holding the worst error.
    pub worst_param: Option<String>,
    pub checked_scalars: usize,
}

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences with step `epsilon`.
///
/// The error of one parameter tensor is
/// `max_i |g_ad[i] - g_fd[i]| / max(max_i |g_ad[i]|, max_i |g_fd[i]|, 1e-8)`;
/// the report carries the maximum over tensors.
pub fn grad_check<F>(store: &ParamStore, epsilon: f64, f: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId, DiffError>,
{
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.value(out).item().is_finite() {
        return Err(DiffError::NonFinite { param: "<output>".into() });
    }
    let analytic = tape.backward(out, store)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_param: None, checked_scalars: 0 };
    for idx in 0..store.len() {
        let id = store.by_index(idx).id.clone();
        let g_ad = analytic.get(idx);
        if g_ad.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite { param: id });
        }
        let mut max_diff: f64 = 0.0;
        let mut max_ad: f64 = 0.0;
        let mut max_fd: f64 = 0.0;
        for k in 0..g_ad.len() {
            let orig = store.by_index(idx).data[k];
            probe.by_index_mut(idx).data[k] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.by_index_mut(idx).data[k] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.by_index_mut(idx).data[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFinite { param: id });
            }
            let g_fd = (plus - minus) / (2.0 * epsilon);
            max_diff = max_diff.max((g_ad[k] - g_fd).abs());
            max_ad = max_ad.max(g_ad[k].abs());
            max_fd = max_fd.max(g_fd.abs());
            report.checked_scalars += 1;
        }
        let rel = max_diff / max_ad.max(max_fd).max(1e-8);
        if report.worst_param.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_param = Some(id);
        }
    }
    Ok(report)
}
