//! Central finite-difference checks of the reverse sweep.

use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Anything whose trainable state lives in one or more [`ParamStore`]s.
pub trait Parameterized {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

impl Parameterized for ParamStore {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = self.0.stores();
        v.extend(self.1.stores());
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = self.0.stores_mut();
        v.extend(self.1.stores_mut());
        v
    }
}

fn check_steps(steps: &[f64]) -> Result<()> {
    match steps.iter().find(|e| !(1e-6..=1e-3).contains(*e)) {
        Some(&eps) => Err(TensorError::BadStep(eps)),
        None if steps.is_empty() => Err(TensorError::BadStep(0.0)),
        None => Ok(()),
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFiniteObjective)
    }
}

fn rel_err(analytic: f64, numeric: f64, eps: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + eps)
}

/// Max over coordinates of `|autodiff - central difference| / (|central difference| + eps)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    grad_check_steps(f, theta, &[eps])
}

/// [`grad_check`] where each coordinate is scored at its best step. A wrong
/// derivative fails at every step; a kink within reach of the larger step
/// or roundoff at the smaller one fails at only one.
pub fn grad_check_steps<F>(f: F, theta: &Tensor, steps: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    check_steps(steps)?;
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x);
        finite(g.scalar(y))
    };
    let mut g = Graph::new();
    let x = g.variable(theta);
    let y = f(&mut g, x);
    finite(g.scalar(y))?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; theta.len()]);
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        let mut best = f64::INFINITY;
        for &eps in steps {
            probe.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            best = best.min(rel_err(a, (up - down) / (2.0 * eps), eps));
        }
        probe.data_mut()[i] = orig;
        worst = worst.max(best);
    }
    Ok(worst)
}

/// [`grad_check`] over every coordinate of every parameter of `model`.
pub fn grad_check_model<M, F>(model: &mut M, eps: f64, f: F) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&M, &mut Graph) -> Var,
{
    grad_check_model_steps(model, &[eps], f)
}

/// [`grad_check_model`] with each coordinate scored at its best step, as in
/// [`grad_check_steps`].
pub fn grad_check_model_steps<M, F>(model: &mut M, steps: &[f64], f: F) -> Result<f64>
where
    M: Parameterized,
    F: Fn(&M, &mut Graph) -> Var,
{
    check_steps(steps)?;
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(m, &mut g);
        finite(g.scalar(y))
    };
    let analytic: Vec<Vec<Vec<f64>>> = {
        let mut g = Graph::new();
        let y = f(model, &mut g);
        finite(g.scalar(y))?;
        let grads = g.backward(y)?;
        model
            .stores()
            .into_iter()
            .map(|s| {
                s.ids()
                    .map(|id| {
                        grads
                            .for_param(s, id)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; s.get(id).len()])
                    })
                    .collect()
            })
            .collect()
    };
    let mut worst = 0.0f64;
    for (si, store_grads) in analytic.iter().enumerate() {
        for (pi, grad) in store_grads.iter().enumerate() {
            for (ci, &a) in grad.iter().enumerate() {
                let nudge = |m: &mut M, delta: f64| {
                    let mut stores = m.stores_mut();
                    let id = stores[si].ids().nth(pi).unwrap();
                    stores[si].tensor_mut(id).data_mut()[ci] += delta;
                };
                let mut best = f64::INFINITY;
                for &eps in steps {
                    nudge(model, eps);
                    let up = eval(model);
                    nudge(model, -2.0 * eps);
                    let down = eval(model);
                    nudge(model, eps);
                    best = best.min(rel_err(a, (up? - down?) / (2.0 * eps), eps));
                }
                worst = worst.max(best);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let theta = Tensor::row(&[0.3, -1.0, 2.5]);
        let w = Tensor::row(&[1.5, -2.0, 0.25]);
        let err = grad_check(
            |g, x| {
                let wv = g.constant(&w);
                let p = g.mul(x, wv);
                g.sum(p)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finer_step_rescues_a_nearby_kink() {
        // relu input 4e-6 from zero: the 1e-5 probe straddles the kink.
        let theta = Tensor::row(&[4e-6]);
        let f = |g: &mut Graph, x: Var| {
            let r = g.relu(x);
            g.sum(r)
        };
        assert!(grad_check(f, &theta, 1e-5).unwrap() > 0.1);
        assert!(grad_check_steps(f, &theta, &[1e-5, 1e-6]).unwrap() < 1e-8);
        assert_eq!(grad_check_steps(f, &theta, &[]), Err(TensorError::BadStep(0.0)));
    }

    #[test]
    fn rejects_out_of_range_step() {
        let theta = Tensor::row(&[1.0]);
        assert_eq!(grad_check(|g, x| g.sum(x), &theta, 1e-2), Err(TensorError::BadStep(1e-2)));
    }

    #[test]
    fn rejects_non_finite_objective() {
        let theta = Tensor::row(&[-1.0]);
        let r = grad_check(|g, x| { let l = g.log(x); g.sum(l) }, &theta, 1e-5);
        assert_eq!(r, Err(TensorError::NonFiniteObjective));
    }

    #[test]
    fn sigmoid_chain_depth_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = rand_tensor(&mut rng, &[1, 6]);
        let err = grad_check(
            |g, x| {
                let mut h = x;
                for _ in 0..5 {
                    h = g.sigmoid(h);
                    h = g.affine(h, 3.0, -1.0);
                }
                g.sum(h)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dilated_conv_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[12, 2]);
        let k = rand_tensor(&mut rng, &[3, 2, 3]);
        for d in 1..=3 {
            let err = grad_check(
                |g, kv| {
                    let xv = g.constant(&x);
                    let y = g.conv1d(xv, kv, d, Padding::Same).unwrap();
                    let t = g.tanh(y);
                    g.sum(t)
                },
                &k,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "dilation {d}: {err}");
            let err = grad_check(
                |g, xv| {
                    let kv = g.constant(&k);
                    let y = g.conv1d(xv, kv, d, Padding::Same).unwrap();
                    let t = g.tanh(y);
                    g.sum(t)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "dilation {d} input: {err}");
        }
    }
}
