//! Classical fixed-step Runge-Kutta integration.

use nalgebra::{SMatrix, SVector};

/// One RK4 step of `ẋ = f(x)`.
pub fn rk4_step<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> SVector<f64, N>,
    x: &SVector<f64, N>,
    h: f64,
) -> SVector<f64, N> {
    let k1 = f(x);
    let k2 = f(&(x + k1 * (0.5 * h)));
    let k3 = f(&(x + k2 * (0.5 * h)));
    let k4 = f(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One RK4 step together with the exact Jacobian of the discrete map,
/// obtained by differentiating each stage.
pub fn rk4_step_with_jacobian<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> (SVector<f64, N>, SMatrix<f64, N, N>),
    x: &SVector<f64, N>,
    h: f64,
) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let eye = SMatrix::<f64, N, N>::identity();
    let (k1, a1) = f(x);
    let d1 = a1;
    let (k2, a2) = f(&(x + k1 * (0.5 * h)));
    let d2 = a2 * (eye + d1 * (0.5 * h));
    let (k3, a3) = f(&(x + k2 * (0.5 * h)));
    let d3 = a3 * (eye + d2 * (0.5 * h));
    let (k4, a4) = f(&(x + k3 * h));
    let d4 = a4 * (eye + d3 * h);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let jac = eye + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0);
    (next, jac)
}

/// RK4 step of a right-hand side that can fail (domain faults).
pub fn try_rk4_step<const N: usize, E>(
    f: impl Fn(&SVector<f64, N>) -> Result<SVector<f64, N>, E>,
    x: &SVector<f64, N>,
    h: f64,
) -> Result<SVector<f64, N>, E> {
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * h)))?;
    let k3 = f(&(x + k2 * (0.5 * h)))?;
    let k4 = f(&(x + k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Explicit Euler step, used as an independent reference in tests.
pub fn euler_step<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> SVector<f64, N>,
    x: &SVector<f64, N>,
    h: f64,
) -> SVector<f64, N> {
    x + f(x) * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector1, Vector2};

    #[test]
    fn exponential_decay_is_fourth_order() {
        let f = |x: &Vector1<f64>| -*x;
        let err = |h: f64| {
            let steps = (1.0 / h).round() as usize;
            let mut x = Vector1::new(1.0);
            for _ in 0..steps {
                x = rk4_step(f, &x, h);
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let order = (err(0.1) / err(0.05)).log2();
        assert!(order > 3.8 && order < 4.2, "order {order}");
    }

    #[test]
    fn jacobian_of_linear_system_is_rk4_polynomial() {
        let a = Matrix2::new(0.0, 1.0, -4.0, -0.3);
        let f = |x: &Vector2<f64>| (a * x, a);
        let h = 0.1;
        let (_, j) = rk4_step_with_jacobian(f, &Vector2::new(1.0, 0.0), h);
        let ah = a * h;
        let expected = Matrix2::identity() + ah + ah * ah / 2.0 + ah * ah * ah / 6.0 + ah * ah * ah * ah / 24.0;
        assert!((j - expected).abs().max() < 1e-14);
    }
}
