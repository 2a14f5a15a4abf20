use super::{Mlp, Scalar};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T, floor: T) -> T {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between `analytic` and central finite differences
/// of `loss` around `params`.
///
/// `floor` keeps near-zero gradients from turning round-off into large
/// relative errors.
pub fn grad_check<T, F>(params: &[T], analytic: &[T], mut loss: F, step: T, floor: T) -> T
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let two = T::one() + T::one();
    let mut probe = params.to_vec();
    let mut worst = T::zero();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (two * step);
        let err = relative_error(analytic[i], numeric, floor);
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    worst
}

/// [`grad_check`] over all parameters of a network.
///
/// `loss` is evaluated on perturbed copies of `mlp`; `analytic` holds the
/// gradient the caller derived by backpropagation.
pub fn grad_check_mlp<T, F>(mlp: &Mlp<T>, analytic: &[T], loss: F) -> T
where
    T: Scalar,
    F: Fn(&Mlp<T>) -> T,
{
    let mut probe = mlp.clone();
    grad_check(
        mlp.params(),
        analytic,
        |p| {
            probe.params_mut().copy_from_slice(p);
            loss(&probe)
        },
        T::of(1e-5),
        T::of(1e-6),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{HiddenActivation, OutputActivation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn squared_error(net: &Mlp<f64>, x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let out = net.forward(x).unwrap();
        let diff: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        let (g, _) = net.backward(x, &diff).unwrap();
        (loss, g)
    }

    #[test]
    fn linear_net_quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::new(
            &[3, 2],
            HiddenActivation::Tanh,
            OutputActivation::Identity,
            &mut rng,
        )
        .unwrap();
        let (x, y) = ([0.3, -1.2, 0.8], [0.5, -0.25]);
        let (_, g) = squared_error(&net, &x, &y);
        let err = grad_check_mlp(&net, &g, |n| squared_error(n, &x, &y).0);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_net_squared_error() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::<f64>::new(
                &[4, 8, 2],
                HiddenActivation::Tanh,
                OutputActivation::Identity,
                &mut rng,
            )
            .unwrap();
            let (x, y) = ([0.1, 0.7, -0.4, 0.2], [1.0, -1.0]);
            let (_, g) = squared_error(&net, &x, &y);
            let err = grad_check_mlp(&net, &g, |n| squared_error(n, &x, &y).0);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn wrong_sign_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::new(
            &[2, 5, 1],
            HiddenActivation::Elu,
            OutputActivation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        let (x, y) = ([0.6, -0.9], [0.9]);
        let (_, mut g) = squared_error(&net, &x, &y);
        let idx = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        g[idx] = -g[idx];
        let err = grad_check_mlp(&net, &g, |n| squared_error(n, &x, &y).0);
        assert!(err > 0.1, "{err}");
    }
}
