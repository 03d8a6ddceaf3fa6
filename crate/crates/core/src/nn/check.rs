//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the reverse sweep it is used to validate.

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Worst absolute error over the checked coordinates.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is ~0 are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` with `(f(x + h e_i) - f(x - h e_i)) / 2h` at the
/// given coordinates. `f` receives the perturbed point.
pub fn central_difference(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let mut point = x.to_vec();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst.max_rel_err = worst.max_rel_err.max(rel_err(analytic[i], numeric, floor));
        worst.max_abs_err = worst.max_abs_err.max((analytic[i] - numeric).abs());
        worst.checked += 1;
    }
    worst
}

/// Evenly spread coordinate sample of at most `max` indices out of `n`.
pub fn spread_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect()
    }

    /// Builds the graph with the input as a differentiable leaf, returns the
    /// analytic gradient and the max relative error against differences.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph<f64>, crate::nn::Var) -> crate::nn::Var) -> f64 {
        let n: usize = shape.iter().product();
        let x0 = wave(n, 0.3);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(shape, x0.clone()));
        let y = build(&mut g, x);
        // Weighted sum makes every output coordinate matter.
        let w = g.constant(Tensor::new(g.shape(y), wave(g.value(y).len(), 1.7)));
        let yw = g.mul(y, w);
        let loss = g.mean(yw);
        let grads = g.backward(loss);
        let analytic = grads.wrt(x).expect("input grad").to_vec();
        let coords = spread_coords(n, 64);
        let res = central_difference(&x0, &analytic, &coords, 1e-5, 1e-6, |p| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(shape, p.to_vec()));
            let y = build(&mut g, x);
            let w = g.constant(Tensor::new(g.shape(y), wave(g.value(y).len(), 1.7)));
            let yw = g.mul(y, w);
            let loss = g.mean(yw);
            g.value(loss).data()[0]
        });
        res.max_rel_err
    }

    #[test]
    fn elementwise_ops_match_differences() {
        assert!(check_op(&[3, 5], |g, x| g.gelu(x)) < 1e-6);
        assert!(check_op(&[3, 5], |g, x| g.silu(x)) < 1e-6);
        assert!(check_op(&[3, 5], |g, x| g.softmax(x)) < 1e-6);
        assert!(check_op(&[3, 5], |g, x| {
            let s = g.scale(x, 0.5);
            let m = g.mul(x, s);
            g.sub(m, x)
        }) < 1e-6);
    }

    #[test]
    fn linear_and_layer_norm_match_differences() {
        let err = check_op(&[4, 6], |g, x| {
            let w = g.constant(Tensor::new(&[6, 3], wave(18, 2.0)));
            let b = g.constant(Tensor::new(&[3], wave(3, 4.0)));
            g.linear(x, w, Some(b))
        });
        assert!(err < 1e-6, "{err}");
        let err = check_op(&[4, 6], |g, x| {
            let gain = g.constant(Tensor::new(&[6], wave(6, 5.0)));
            let bias = g.constant(Tensor::new(&[6], wave(6, 6.0)));
            g.layer_norm(x, gain, bias, 1e-5)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn weight_gradients_match_differences() {
        // Differentiate w.r.t. the weight of a linear layer and a conv kernel.
        let xs = wave(2 * 5 * 5 * 3, 0.1);
        let err = check_op(&[3, 3, 3, 4], |g, w| {
            let x = g.constant(Tensor::new(&[2, 5, 5, 3], xs.clone()));
            let b = g.constant(Tensor::new(&[4], wave(4, 0.9)));
            g.conv2d(x, w, b, 2, 1)
        });
        assert!(err < 1e-6, "{err}");
        let err = check_op(&[6, 3], |g, w| {
            let x = g.constant(Tensor::new(&[4, 6], wave(24, 0.2)));
            g.linear(x, w, None)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_ops_match_differences() {
        let err = check_op(&[2, 5, 5, 3], |g, x| {
            let w = g.constant(Tensor::new(&[3, 3, 3, 4], wave(108, 2.5)));
            let b = g.constant(Tensor::new(&[4], wave(4, 0.9)));
            let y = g.conv2d(x, w, b, 2, 1);
            let y = g.gelu(y);
            g.mean_spatial(y)
        });
        assert!(err < 1e-6, "{err}");
        let err = check_op(&[2, 3, 4, 2], |g, x| {
            let p = g.permute(x, [0, 2, 1, 3]);
            let r = g.reshape(p, &[2 * 4, 3, 2]);
            let t = g.reshape(x, &[8, 3, 2]);
            g.bmm(r, t, true)
        });
        assert!(err < 1e-6, "{err}");
        let err = check_op(&[2, 3, 4], |g, x| {
            let other = g.constant(Tensor::new(&[2, 4, 5], wave(40, 3.0)));
            let y = g.bmm(x, other, false);
            let bias = g.constant(Tensor::new(&[2, 5], wave(10, 1.0)));
            let y = g.add_group(y, bias);
            let row = g.constant(Tensor::new(&[5], wave(5, 8.0)));
            let y = g.add_broadcast(y, row);
            g.concat(&[y, x])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mse_loss_gradient() {
        let target = wave(6, 9.0);
        let err = check_op(&[2, 3], |g, x| g.mse_loss(x, &target));
        assert!(err < 1e-6, "{err}");
    }
}
