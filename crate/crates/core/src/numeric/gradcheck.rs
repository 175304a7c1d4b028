use crate::error::Result;
use crate::numeric::{ParamStore, Tape, Var};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares tape gradients of `loss` against central differences
/// `(f(p+h) − f(p−h)) / 2h` for every trainable scalar in `store`.
///
/// `loss` receives a fresh tape and the bound parameter handles, and must be
/// deterministic.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let vars = tape.bind(store);
    let out = loss(&mut tape, &vars)?;
    tape.backward(out, store)?;
    let analytic: Vec<Option<Vec<f64>>> = (0..store.len())
        .map(|i| store.get(i).grad.clone())
        .collect();
    store.zero_grad();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let out = loss(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        n_checked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        if !store.get(p).requires_grad {
            continue;
        }
        for j in 0..store.get(p).numel() {
            let orig = store.get(p).data()[j];
            store.get_mut(p).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(p).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(p).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.n_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.names()[p].clone(), j));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
