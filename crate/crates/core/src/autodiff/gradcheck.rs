use super::{AutodiffError, Graph, Tensor, Var};

/// Compares the reverse-mode gradient of a scalar function with central
/// differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidArgument("eps must be positive"));
    }
    let graph = Graph::new();
    let input = graph.param(x)?;
    let loss = f(&graph, input)?;
    if !loss.item()?.is_finite() {
        return Err(AutodiffError::NonFinite("grad_check: f(x)"));
    }
    let mut grads = graph.backward(loss)?;
    let analytic = grads.take_or_zeros(input, x.numel());

    let eval = |probe: &Tensor| -> Result<f64, AutodiffError> {
        let g = Graph::new();
        let v = g.leaf(probe)?;
        let y = f(&g, v)?.item()?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(AutodiffError::NonFinite("grad_check: f(x ± eps)"))
        }
    };

    let mut probe = x.clone();
    probe.set_tracked(false);
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
