use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub rtol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_entries(entries: Vec<GradCheckEntry>, rtol: f64) -> Self {
        let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
        Self {
            passed: max_rel_error <= rtol,
            entries,
            max_rel_error,
            rtol,
        }
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Compares tape gradients of a scalar function of one tensor against central
/// finite differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let x = tape.constant(t.clone());
        Ok(f(&tape, x)?.item())
    };
    if eval(point)?.to_bits() != eval(point)?.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let y = f(&tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| vec![0.0; point.numel()]);
    let mut entries = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        entries.push(GradCheckEntry {
            label: "x".into(),
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    Ok(GradCheckReport::from_entries(entries, rtol))
}

/// Finite-difference check of a scalar function of model parameters.
///
/// At most `max_coords` coordinates per parameter are probed, spread evenly
/// over the tensor. Parameter values are restored before returning.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    rtol: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t ParamStore, &'t Tape) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        Ok(f(s, &tape)?.item())
    };
    if eval(store)?.to_bits() != eval(store)?.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let grads = {
        let tape = Tape::new();
        let y = f(store, &tape)?;
        tape.backward(y)?;
        tape.param_grads()
    };
    let mut entries = Vec::new();
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * eps);
            entries.push(GradCheckEntry {
                label: store.name(id).to_string(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric),
            });
        }
    }
    Ok(GradCheckReport::from_entries(entries, rtol))
}
