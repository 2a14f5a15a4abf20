use super::Scalar;
use crate::error::{check_dim, Result};

/// `R_t = r_t + γ((1 - λ) v_{t+1} + λ R_{t+1})` with `R_H = v_H`.
///
/// `rewards` has length `H`, `values` length `H + 1`; returns `H` entries.
pub fn lambda_returns<T: Scalar>(
    rewards: &[T],
    values: &[T],
    gamma: T,
    lambda: T,
) -> Result<Vec<T>> {
    let h = rewards.len();
    check_dim("lambda-return values", h + 1, values.len())?;
    let mut out = vec![T::zero(); h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((T::one() - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Pullback of [`lambda_returns`]: given `∂L/∂R_t`, returns
/// `(∂L/∂r_t, ∂L/∂v_t)`.
pub fn lambda_returns_vjp<T: Scalar>(d_returns: &[T], gamma: T, lambda: T) -> (Vec<T>, Vec<T>) {
    let h = d_returns.len();
    let mut d_r = vec![T::zero(); h];
    let mut d_v = vec![T::zero(); h + 1];
    let mut carry = T::zero();
    for t in 0..h {
        let g = d_returns[t] + carry;
        d_r[t] = g;
        d_v[t + 1] += gamma * (T::one() - lambda) * g;
        carry = gamma * lambda * g;
    }
    d_v[h] += carry;
    (d_r, d_v)
}
