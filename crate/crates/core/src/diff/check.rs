use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(loss_fn: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::shape("gradient_check", "loss must be scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient_check",
        });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(L(theta + h) - L(theta - h)) / 2h` for every scalar of every trainable
/// parameter.
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, &analytic)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite {
            op: "gradient_check",
        });
    }
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut analytic);

    let mut probe = params.clone();
    let mut entries = Vec::new();
    for idx in 0..params.len() {
        let (name, p) = params.by_index(idx);
        if !p.trainable {
            continue;
        }
        let name = name.to_string();
        for k in 0..p.value.numel() {
            let orig = p.value.data()[k];
            probe.by_index_mut(idx).1.value.data_mut()[k] = orig + h;
            let plus = eval_loss(&mut loss_fn, &probe)?;
            probe.by_index_mut(idx).1.value.data_mut()[k] = orig - h;
            let minus = eval_loss(&mut loss_fn, &probe)?;
            probe.by_index_mut(idx).1.value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.by_index(idx).1.grad.data()[k];
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tol,
    })
}
