//! Central-difference gradient verification.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, ParamVars};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        // NaN must never read as a pass.
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = Some((input, index));
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f` against central differences at every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        h,
        tol,
        usize::MAX,
    )
}

/// Checks a scalar function of several inputs. At most `max_per_input`
/// evenly spaced entries of each input are perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in spread_indices(input.numel(), max_per_input) {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(which, idx, analytic[which][idx], numeric);
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    if g.value(v).len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got dims {:?}",
            g.dims(v)
        )));
    }
    Ok(g.scalar(v))
}

/// Up to `max` indices spread evenly over `0..n`.
pub fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * n / max).collect();
    out.dedup();
    out
}

/// Result of [`grad_check_params`], with the worst entry resolved to a name.
#[derive(Clone, Debug)]
pub struct ParamGradReport {
    pub report: GradCheckReport,
    pub worst_param: Option<String>,
    /// Largest relative error seen per checked parameter.
    pub per_param: Vec<(String, f64)>,
}

impl ParamGradReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Central-difference check of a scalar function of named parameters. At
/// most `max_per_param` evenly spaced entries of each listed parameter are
/// perturbed; all other parameters stay fixed.
pub fn grad_check_params<F, E>(
    store: &ParamStore,
    names: &[String],
    f: F,
    h: f64,
    tol: f64,
    max_per_param: usize,
) -> std::result::Result<ParamGradReport, E>
where
    F: Fn(&mut Graph, &ParamVars) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars = store.bind(&mut g, |n| names.iter().any(|x| x == n));
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let grads = vars.grads(&g);

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars = work.bind(&mut g, |_| false);
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out)?)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    let mut per_param = Vec::with_capacity(names.len());
    for (which, name) in names.iter().enumerate() {
        let numel = store.get(name)?.numel();
        let zeros = vec![0.0; numel];
        let analytic = grads.get(name).unwrap_or(&zeros);
        let mut worst_here: f64 = 0.0;
        for idx in spread_indices(numel, max_per_param) {
            let orig = store.get(name)?.data()[idx];
            work.get_mut(name)?.data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(which, idx, analytic[idx], numeric);
            let r = rel_error(analytic[idx], numeric);
            worst_here = if r.is_nan() { f64::INFINITY } else { worst_here.max(r) };
        }
        per_param.push((name.clone(), worst_here));
    }
    let worst_param = report.worst.map(|(i, _)| names[i].clone());
    Ok(ParamGradReport {
        report,
        worst_param,
        per_param,
    })
}
