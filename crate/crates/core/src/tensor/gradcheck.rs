use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.input(t, false);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over every scalar of every parameter in `store`.
///
/// `f` builds the loss from a graph and the store. Frozen parameters are
/// checked too: they are temporarily marked trainable.
pub fn grad_check_params<F>(f: F, store: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.iter_mut().for_each(|p| {
        p.trainable = true;
        p.grad = None;
    });
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?;
    g.accumulate_param_grads(&mut work);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut probe = work.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = work.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = work.get(id).tensor.len();
        let analytic = work
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = probe.get(id).tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![2.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        let err = grad_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_block() {
        let mut rng = Rng::new(21);
        let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let lp = g.log_softmax_rows(x)?;
                g.nll_rows(lp, &[1, 4, 0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
