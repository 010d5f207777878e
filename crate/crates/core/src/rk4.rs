//! Fixed-step classical Runge-Kutta integration.

use alloc::vec;
use alloc::vec::Vec;

/// Reusable RK4 stepper for systems of dimension `n`.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.k1.len()
    }

    /// Advances `y` from `t` to `t + h` in place. `f(t, y, dydt)` writes the derivative.
    pub fn step<F>(&mut self, f: &mut F, t: f64, y: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        debug_assert_eq!(n, self.dim());
        f(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Number of fixed steps of size `h` covering `[t0, t1]`, rounding to the nearest count.
pub fn step_count(t0: f64, t1: f64, h: f64) -> usize {
    let span = t1 - t0;
    if span <= 0.0 || h <= 0.0 {
        return 0;
    }
    libm::round(span / h) as usize
}

/// Integrates a scalar ODE over `[t0, t1]` with `steps` equal steps; returns `y(t1)`.
pub fn integrate_scalar<F>(mut f: F, t0: f64, y0: f64, t1: f64, steps: usize) -> f64
where
    F: FnMut(f64, f64) -> f64,
{
    if steps == 0 {
        return y0;
    }
    let h = (t1 - t0) / steps as f64;
    let mut rk = Rk4::new(1);
    let mut y = [y0];
    let mut rhs = |t: f64, y: &[f64], d: &mut [f64]| d[0] = f(t, y[0]);
    for i in 0..steps {
        rk.step(&mut rhs, t0 + i as f64 * h, &mut y, h);
    }
    y[0]
}
