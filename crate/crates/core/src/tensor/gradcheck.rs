use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over parameter tensors of `‖a − n‖ / (‖a‖ + ‖n‖ + 1e-12)`.
    pub max_rel_err: f64,
    /// The same ratio for each parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// Max over individual entries of `|a − n| / (|a| + |n| + 1e-12)`.
    pub max_elem_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn eval(f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`.
///
/// `f` receives a fresh graph and one leaf per entry of `params`. It must be
/// deterministic (fix any RNG it uses); two evaluations at the same point
/// that disagree produce [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let base = g.value(loss).item();
    let again = eval(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {base:e} and {again:e}"
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut num = Tensor::zeros(params[i].shape());
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        numeric.push(num);
    }

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_elem: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff: f64 = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        per_param.push(diff / (a.norm() + n.norm() + 1e-12));
        for (x, y) in a.data().iter().zip(n.data()) {
            max_elem = max_elem.max((x - y).abs() / (x.abs() + y.abs() + 1e-12));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        max_elem_rel_err: max_elem,
        analytic,
        numeric,
    })
}
