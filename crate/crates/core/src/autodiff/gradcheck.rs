use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

fn eval<F>(f: &F, point: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NumericalFailure {
            system: None,
            message: format!("non-finite function value at {point:?}"),
        });
    }
    Ok(v)
}

fn check_step(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Validation(format!(
            "finite-difference step must be positive and finite, got {h}"
        )));
    }
    Ok(())
}

/// Central-difference gradient of a scalar graph builder. `f` receives the
/// tape and a single vector leaf holding the point.
pub fn central_difference<F>(f: &F, point: &[f64], h: f64, exec: Execution) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId> + Sync + Send,
{
    check_step(h)?;
    exec::map_range(exec, point.len(), |i| {
        let mut p = point.to_vec();
        p[i] = point[i] + h;
        let fp = eval(f, &p)?;
        p[i] = point[i] - h;
        let fm = eval(f, &p)?;
        Ok((fp - fm) / (2.0 * h))
    })
    .into_iter()
    .collect()
}

/// Max over coordinates of `|autodiff − central| / max(1, |central|)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId> + Sync + Send,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let y = f(&mut tape, x)?;
    if !tape.scalar_value(y).is_finite() {
        return Err(Error::NumericalFailure {
            system: None,
            message: "non-finite function value at the check point".into(),
        });
    }
    let grads = tape.backward(y)?;
    let ad = grads.get(x);
    let fd = central_difference(&f, point, h, Execution::default())?;
    Ok(ad
        .iter()
        .zip(&fd)
        .map(|(a, c)| (a - c).abs() / c.abs().max(1.0))
        .fold(0.0, f64::max))
}
