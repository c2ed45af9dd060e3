use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`. Returns the largest
/// `|g_ad - g_fd| / max(1, |g_ad|)` over the coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    let analytic = g.backward(root)?.wrt(xv, &g);

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let r = f(&mut g, v)?;
        let value = g.value(r).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                op: "finite_diff_check",
            })
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let ad = analytic.data()[i];
        worst = worst.max((ad - fd).abs() / ad.abs().max(1.0));
    }
    Ok(worst)
}
