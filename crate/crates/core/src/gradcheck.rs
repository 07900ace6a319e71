//! Finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{collect_grads, ParamGroup};
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between backprop and central differences of a
/// scalar-valued `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let errs = grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), eps)?;
    Ok(errs[0])
}

/// Like [`grad_check`] for a function of several inputs; returns one max
/// error per input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let y = f(&g, &vars)?;
        scalar_value(&g, y)
    };

    let base = eval(points)?;
    let again = eval(points)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Verification(format!(
            "function is not deterministic ({base} vs {again})"
        )));
    }

    let g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let y = f(&g, &vars)?;
    g.backward(y)?;

    let mut pts = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(points[i].shape()));
        let mut worst = 0.0f64;
        for j in 0..points[i].len() {
            let orig = points[i].data()[j];
            let numeric = central_difference(eps, |d| {
                pts[i].data_mut()[j] = orig + d;
                let y = eval(&pts);
                pts[i].data_mut()[j] = orig;
                y
            })?;
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        out.push(worst);
    }
    Ok(out)
}

fn scalar_value(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::Argument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Central-difference gradient of a scalar `f` with respect to `point`.
pub fn numeric_gradient<F>(f: F, point: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let y = f(&g, g.constant(p.clone()))?;
        scalar_value(&g, y)
    };
    let mut pt = point.clone();
    (0..point.len())
        .map(|j| {
            let orig = point.data()[j];
            central_difference(eps, |d| {
                pt.data_mut()[j] = orig + d;
                let y = eval(&pt);
                pt.data_mut()[j] = orig;
                y
            })
        })
        .collect()
}

/// Central-difference gradient over every scalar of `params`, flattened in
/// visit order. Fails when `f` is not deterministic.
pub fn numeric_gradient_params<P, F>(params: &P, f: F, eps: f64) -> Result<Vec<f64>>
where
    P: ParamGroup + Clone,
    F: Fn(&Graph, &P::Vars) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let eval = |p: &P| -> Result<f64> {
        let g = Graph::new();
        let y = f(&g, &p.bind(&g, false))?;
        scalar_value(&g, y)
    };
    let base = eval(params)?;
    if base.to_bits() != eval(params)?.to_bits() {
        return Err(Error::Verification("function is not deterministic".into()));
    }
    let nudge = |p: &mut P, index: usize, delta: f64| {
        let mut seen = 0;
        p.visit_mut(&mut |t| {
            if (seen..seen + t.len()).contains(&index) {
                t.data_mut()[index - seen] += delta;
            }
            seen += t.len();
        });
    };
    (0..params.num_params())
        .map(|i| {
            central_difference(eps, |d| {
                let mut p = params.clone();
                nudge(&mut p, i, d);
                eval(&p)
            })
        })
        .collect()
}

/// Max relative error over every scalar in a parameter group, comparing
/// backprop through `f` with central differences of perturbed copies.
pub fn grad_check_params<P, F>(params: &P, f: F, eps: f64) -> Result<f64>
where
    P: ParamGroup + Clone,
    F: Fn(&Graph, &P::Vars) -> Result<Var>,
{
    let numeric = numeric_gradient_params(params, &f, eps)?;
    let g = Graph::new();
    let vars = params.bind(&g, true);
    g.backward(f(&g, &vars)?)?;
    let analytic = collect_grads(&g, params, &vars).into_iter().flat_map(Tensor::into_data);
    Ok(analytic
        .zip(numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Five-point central stencil `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`
/// around the unperturbed point.
fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * h))
}

/// Weighted sum `sum(w * y)` with fixed pseudo-random weights, used to turn
/// tensor-valued ops into scalar probes without symmetric cancellation.
pub fn probe(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(&g.shape(y), 1.0, &mut rng));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = grad_check(|g, x| Ok(g.sum(g.mul(x, x)?)), &p, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_then_pick() {
        let p = Tensor::from_vec(vec![0.3, -1.1, 0.8, 2.0, -0.4]);
        let err = grad_check(
            |g, x| {
                let s = g.softmax(x, 0)?;
                g.take(s, vec![2], &[1])
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dead_relu_branch_is_zero_both_ways() {
        let p = Tensor::from_vec(vec![-1.0, -2.0, -0.5]);
        let err = grad_check(|g, x| Ok(g.sum(g.relu(x))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let p = Tensor::from_vec(vec![1.0]);
        let res = grad_check(
            |g, x| {
                calls.set(calls.get() + 1);
                Ok(g.add_scalar(g.sum(x), calls.get() as f64))
            },
            &p,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Verification(_))));
    }

    #[test]
    fn catches_wrong_backward() {
        let p = Tensor::from_vec(vec![0.5, 1.5]);
        let err = grad_check(
            |g, x| {
                // x^2 with a deliberately wrong derivative (x instead of 2x).
                let y = g.custom_unary(x, |v| v * v, |x, _, up| {
                    x.data().iter().zip(up).map(|(a, u)| a * u).collect()
                });
                Ok(g.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
