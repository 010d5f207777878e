//! Rational transfer functions, step-response metrics, stability margins and
//! Ziegler-Nichols tuning for single-input single-output loops.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rk4::Rk4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("denominator is empty or identically zero")]
    ZeroDenominator,
    #[error("transfer function is improper (numerator degree {num} > denominator degree {den})")]
    Improper { num: usize, den: usize },
    #[error("derivative action requires a positive proportional gain for the filter time constant")]
    DerivativeWithoutProportional,
    #[error("gains must be finite")]
    NonFiniteGain,
    #[error("no phase crossover: ultimate-cycle tuning is not applicable")]
    NoPhaseCrossover,
    #[error("invalid frequency sweep: {0}")]
    BadSweep(&'static str),
}

/// Polynomial helpers over coefficient vectors in descending powers.
pub mod poly {
    use alloc::vec;
    use alloc::vec::Vec;
    use num_complex::Complex64;

    pub fn trim(p: &[f64]) -> Vec<f64> {
        let first = p.iter().position(|c| *c != 0.0).unwrap_or(p.len());
        let out = p[first..].to_vec();
        if out.is_empty() {
            vec![0.0]
        } else {
            out
        }
    }

    pub fn degree(p: &[f64]) -> usize {
        trim(p).len() - 1
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = a.len().max(b.len());
        let mut out = vec![0.0; n];
        for (i, x) in a.iter().rev().enumerate() {
            out[n - 1 - i] += x;
        }
        for (i, y) in b.iter().rev().enumerate() {
            out[n - 1 - i] += y;
        }
        out
    }

    pub fn scale(a: &[f64], k: f64) -> Vec<f64> {
        a.iter().map(|c| c * k).collect()
    }

    pub fn eval(p: &[f64], s: Complex64) -> Complex64 {
        p.iter().fold(Complex64::new(0.0, 0.0), |acc, c| acc * s + c)
    }

    /// Routh-Hurwitz: true iff every root has strictly negative real part.
    pub fn is_hurwitz(p: &[f64]) -> bool {
        let p = trim(p);
        let n = p.len() - 1;
        if n == 0 {
            return p[0] != 0.0;
        }
        let sign = p[0].signum();
        if p.iter().any(|c| c * sign <= 0.0) {
            return false;
        }
        let width = n / 2 + 2;
        let row = |it: &mut dyn Iterator<Item = f64>| {
            let mut r: Vec<f64> = it.collect();
            r.resize(width, 0.0);
            r
        };
        let mut prev = row(&mut p.iter().step_by(2).copied());
        let mut cur = row(&mut p.iter().skip(1).step_by(2).copied());
        if cur[0] * sign <= 0.0 {
            return false;
        }
        for _ in 2..=n {
            let mut next = vec![0.0; width];
            for j in 0..width - 1 {
                next[j] = (cur[0] * prev[j + 1] - prev[0] * cur[j + 1]) / cur[0];
            }
            if !(next[0] * sign > 0.0) {
                return false;
            }
            prev = cur;
            cur = next;
        }
        true
    }
}

/// Rational transfer function, coefficients in descending powers of `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, ControlError> {
        let num = poly::trim(&num);
        let den = poly::trim(&den);
        if den == [0.0] {
            return Err(ControlError::ZeroDenominator);
        }
        let (dn, dd) = (num.len() - 1, den.len() - 1);
        if num != [0.0] && dn > dd {
            return Err(ControlError::Improper { num: dn, den: dd });
        }
        Ok(Self { num, den })
    }

    /// `k / (s + a)^n`
    pub fn repeated_pole(k: f64, a: f64, n: usize) -> Self {
        let den = (0..n).fold(vec![1.0], |acc, _| poly::mul(&acc, &[1.0, a]));
        Self { num: vec![k], den }
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.num == [0.0] || self.num.len() < self.den.len()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        poly::eval(&self.num, s) / poly::eval(&self.den, s)
    }

    pub fn freq_response(&self, w: f64) -> Complex64 {
        self.eval(Complex64::new(0.0, w))
    }

    /// `G(0)`, infinite when the denominator has a root at the origin.
    pub fn dc_gain(&self) -> f64 {
        let n = *self.num.last().unwrap_or(&0.0);
        let d = *self.den.last().unwrap();
        n / d
    }

    pub fn series(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction {
            num: poly::trim(&poly::mul(&self.num, &other.num)),
            den: poly::trim(&poly::mul(&self.den, &other.den)),
        }
    }

    pub fn scaled(&self, k: f64) -> TransferFunction {
        TransferFunction {
            num: poly::trim(&poly::scale(&self.num, k)),
            den: self.den.clone(),
        }
    }

    /// Unity negative feedback `L / (1 + L)`.
    pub fn unity_feedback(&self) -> TransferFunction {
        TransferFunction {
            num: self.num.clone(),
            den: poly::trim(&poly::add(&self.den, &self.num)),
        }
    }

    pub fn is_stable(&self) -> bool {
        poly::is_hurwitz(&self.den)
    }

    pub fn has_integrator(&self) -> bool {
        *self.den.last().unwrap() == 0.0
    }

    pub fn state_space(&self) -> StateSpace {
        StateSpace::controllable(self)
    }
}

/// Single-input single-output controllable canonical realization.
///
/// States obey `x_i' = x_{i+1}` for `i < n` and
/// `x_n' = -sum(a_k x_{k+1}) + u`, with output `y = sum(c_k x_{k+1}) + d u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    /// Monic denominator, ascending powers `a_0 .. a_{n-1}`.
    pub a: Vec<f64>,
    /// Output weights, ascending.
    pub c: Vec<f64>,
    pub d: f64,
}

impl StateSpace {
    pub fn controllable(tf: &TransferFunction) -> Self {
        let lead = tf.den[0];
        let n = tf.order();
        let den_asc: Vec<f64> = tf.den.iter().rev().map(|c| c / lead).collect();
        let mut num_asc: Vec<f64> = tf.num.iter().rev().map(|c| c / lead).collect();
        num_asc.resize(n + 1, 0.0);
        let d = num_asc[n];
        let c = (0..n).map(|k| num_asc[k] - d * den_asc[k]).collect();
        Self {
            a: den_asc[..n].to_vec(),
            c,
            d,
        }
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    pub fn derivative(&self, x: &[f64], u: f64, dx: &mut [f64]) {
        let n = self.order();
        if n == 0 {
            return;
        }
        for i in 0..n - 1 {
            dx[i] = x[i + 1];
        }
        dx[n - 1] = u - self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
    }

    pub fn output(&self, x: &[f64], u: f64) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>() + self.d * u
    }
}

/// Unit-step response samples `(t, y)` of `system` on `[0, t_final]`.
pub fn simulate_step(system: &TransferFunction, t_final: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let ss = system.state_space();
    let n = ss.order();
    let steps = crate::rk4::step_count(0.0, t_final, dt);
    let mut rk = Rk4::new(n);
    let mut x = vec![0.0; n];
    let mut ts = Vec::with_capacity(steps + 1);
    let mut ys = Vec::with_capacity(steps + 1);
    ts.push(0.0);
    ys.push(ss.output(&x, 1.0));
    let mut f = |_t: f64, x: &[f64], dx: &mut [f64]| ss.derivative(x, 1.0, dx);
    for i in 0..steps {
        let t = i as f64 * dt;
        rk.step(&mut f, t, &mut x, dt);
        ts.push((i + 1) as f64 * dt);
        ys.push(ss.output(&x, 1.0));
    }
    (ts, ys)
}

pub const SETTLING_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Last exit from the 2% band; `+inf` when the response never settles.
    pub settling_time_s: f64,
    pub overshoot_pct: f64,
    /// `|1 - y_final|` for a unit command; NaN when the loop is unstable.
    pub steady_state_error: f64,
    pub peak: f64,
    pub peak_time_s: f64,
    pub final_value: f64,
    pub settled: bool,
}

impl StepMetrics {
    /// Metrics from sampled response. `final_value` is `None` for unstable systems.
    pub fn from_samples(t: &[f64], y: &[f64], final_value: Option<f64>) -> Self {
        let (peak_idx, peak) = y
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 || (v.is_nan() && !best.1.is_nan()) {
                    (i, v)
                } else {
                    best
                }
            });
        let peak_time_s = t.get(peak_idx).copied().unwrap_or(0.0);
        let Some(final_value) = final_value.filter(|f| f.is_finite()) else {
            return Self {
                settling_time_s: f64::INFINITY,
                overshoot_pct: overshoot_from(peak, y.last().copied().unwrap_or(f64::NAN)),
                steady_state_error: f64::NAN,
                peak,
                peak_time_s,
                final_value: f64::NAN,
                settled: false,
            };
        };
        let band = SETTLING_BAND * final_value.abs();
        let outside = |v: f64| !((v - final_value).abs() <= band);
        let last_out = y.iter().rposition(|v| outside(*v));
        let (settling_time_s, settled) = match last_out {
            None => (0.0, true),
            Some(i) if i + 1 >= y.len() => (f64::INFINITY, false),
            Some(i) => {
                // Interpolate the final band entry between samples i and i+1.
                let (e0, e1) = ((y[i] - final_value).abs(), (y[i + 1] - final_value).abs());
                let frac = if e0 > e1 { (e0 - band) / (e0 - e1) } else { 0.0 };
                (t[i] + frac.clamp(0.0, 1.0) * (t[i + 1] - t[i]), true)
            }
        };
        Self {
            settling_time_s,
            overshoot_pct: overshoot_from(peak, final_value),
            steady_state_error: (1.0 - final_value).abs(),
            peak,
            peak_time_s,
            final_value,
            settled,
        }
    }
}

fn overshoot_from(peak: f64, final_value: f64) -> f64 {
    if !final_value.is_finite() || final_value == 0.0 {
        return if peak.is_finite() { 0.0 } else { f64::INFINITY };
    }
    let pct = (peak - final_value) / final_value.abs() * 100.0;
    if pct.is_nan() {
        f64::INFINITY
    } else {
        pct.max(0.0)
    }
}

/// Steady-state value predicted by the final-value theorem, `None` if unstable.
pub fn final_value(system: &TransferFunction) -> Option<f64> {
    system.is_stable().then(|| system.dc_gain())
}

pub fn step_response_metrics(system: &TransferFunction, t_final: f64, dt: f64) -> StepMetrics {
    let (t, y) = simulate_step(system, t_final, dt);
    StepMetrics::from_samples(&t, &y, final_value(system))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// `+inf` when no phase crossover lies in the sweep.
    pub gain_margin_db: f64,
    /// `+inf` when no gain crossover lies in the sweep.
    pub phase_margin_deg: f64,
    pub phase_crossover_rad_s: Option<f64>,
    pub gain_crossover_rad_s: Option<f64>,
    pub phase_crossings: usize,
    pub gain_crossings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sweep {
    pub w_min: f64,
    pub w_max: f64,
    pub points: usize,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            w_min: 1e-3,
            w_max: 1e3,
            points: 2000,
        }
    }
}

impl Sweep {
    pub fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        let (l0, l1) = (libm::log10(self.w_min), libm::log10(self.w_max));
        let n = self.points;
        (0..n).map(move |i| libm::pow(10.0, l0 + (l1 - l0) * i as f64 / (n - 1) as f64))
    }
}

fn phase_deg(z: Complex64) -> f64 {
    libm::atan2(z.im, z.re).to_degrees()
}

fn unwrap_near(raw: f64, reference: f64) -> f64 {
    raw + 360.0 * libm::round((reference - raw) / 360.0)
}

/// Index of the odd multiple of 180 deg just above `phase`.
fn phase_branch(phase: f64) -> f64 {
    libm::floor((phase + 180.0) / 360.0)
}

const BISECTION_ITERS: usize = 80;

pub fn stability_margins(open_loop: &TransferFunction, sweep: Sweep) -> Result<Margins, ControlError> {
    if !(sweep.w_min > 0.0 && sweep.w_max > sweep.w_min) {
        return Err(ControlError::BadSweep("bounds must satisfy 0 < w_min < w_max"));
    }
    if sweep.points < 2 {
        return Err(ControlError::BadSweep("at least two points"));
    }
    let l = open_loop;
    let log_mag = |w: f64| libm::log10(l.freq_response(w).norm());

    let mut prev: Option<(f64, f64, f64)> = None; // (w, log|L|, unwrapped phase)
    let mut gain_xs: Vec<f64> = Vec::new();
    let mut phase_xs: Vec<(f64, f64)> = Vec::new(); // (w, target phase)
    for w in sweep.frequencies() {
        let z = l.freq_response(w);
        let m = libm::log10(z.norm());
        let raw = phase_deg(z);
        let ph = match prev {
            Some((_, _, p)) => unwrap_near(raw, p),
            None => raw,
        };
        if let Some((w0, m0, p0)) = prev {
            if (m0 > 0.0) != (m > 0.0) {
                gain_xs.push(bisect(|w| log_mag(w), w0, w, m0 > 0.0));
            }
            let (b0, b1) = (phase_branch(p0), phase_branch(ph));
            if b0 != b1 {
                // Crossing of the odd multiple of 180 deg between the two samples.
                let target = 360.0 * b0.max(b1) - 180.0;
                let f = |w: f64| unwrap_near(phase_deg(l.freq_response(w)), p0) - target;
                phase_xs.push((bisect(f, w0, w, p0 > target), target));
            }
        }
        prev = Some((w, m, ph));
    }

    let mut margins = Margins {
        gain_margin_db: f64::INFINITY,
        phase_margin_deg: f64::INFINITY,
        phase_crossover_rad_s: None,
        gain_crossover_rad_s: None,
        phase_crossings: phase_xs.len(),
        gain_crossings: gain_xs.len(),
    };
    for (w, _) in &phase_xs {
        let gm = -20.0 * libm::log10(l.freq_response(*w).norm());
        if gm < margins.gain_margin_db {
            margins.gain_margin_db = gm;
            margins.phase_crossover_rad_s = Some(*w);
        }
    }
    for w in &gain_xs {
        let pm = phase_margin_at(phase_deg(l.freq_response(*w)));
        if pm < margins.phase_margin_deg {
            margins.phase_margin_deg = pm;
            margins.gain_crossover_rad_s = Some(*w);
        }
    }
    Ok(margins)
}

/// `180 + phase`, with the phase taken on the branch `(-360, 0]`.
fn phase_margin_at(principal: f64) -> f64 {
    let mut p = principal;
    while p > 0.0 {
        p -= 360.0;
    }
    while p <= -360.0 {
        p += 360.0;
    }
    180.0 + p
}

/// Bisection on a log-frequency bracket; `high_first` is the sign of `f(lo) > 0`.
fn bisect<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, high_first: bool) -> f64 {
    let (mut a, mut b) = (libm::log10(lo), libm::log10(hi));
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (a + b);
        let v = f(libm::pow(10.0, mid));
        if (v > 0.0) == high_first {
            a = mid;
        } else {
            b = mid;
        }
    }
    libm::pow(10.0, 0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self { kp, ki, kd }
    }
}

/// Ratio between derivative time and its first-order filter time constant.
pub const DERIVATIVE_FILTER_RATIO: f64 = 10.0;

/// Controller `Kp + Ki/s + Kd s / (tau s + 1)` with `tau = (Kd/Kp) / 10`.
/// Absent terms contribute no dynamics.
pub fn pid_controller(gains: PidGains) -> Result<TransferFunction, ControlError> {
    let PidGains { kp, ki, kd } = gains;
    if !(kp.is_finite() && ki.is_finite() && kd.is_finite()) {
        return Err(ControlError::NonFiniteGain);
    }
    if kd != 0.0 {
        if kp <= 0.0 {
            return Err(ControlError::DerivativeWithoutProportional);
        }
        let tau = kd / kp / DERIVATIVE_FILTER_RATIO;
        if ki != 0.0 {
            TransferFunction::new(vec![kp * tau + kd, kp + ki * tau, ki], vec![tau, 1.0, 0.0])
        } else {
            TransferFunction::new(vec![kp * tau + kd, kp], vec![tau, 1.0])
        }
    } else if ki != 0.0 {
        TransferFunction::new(vec![kp, ki], vec![1.0, 0.0])
    } else {
        TransferFunction::new(vec![kp], vec![1.0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loop {
    pub open_loop: TransferFunction,
    pub closed_loop: TransferFunction,
}

pub fn pid_series(plant: &TransferFunction, gains: PidGains) -> Result<Loop, ControlError> {
    let controller = pid_controller(gains)?;
    let open_loop = controller.series(plant);
    let closed_loop = open_loop.unity_feedback();
    Ok(Loop {
        open_loop,
        closed_loop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UltimateCycle {
    pub ultimate_gain: f64,
    pub ultimate_period_s: f64,
    pub gains: PidGains,
}

/// Classic closed-loop Ziegler-Nichols table: `Kp = 0.6 Ku`, `Ti = Tu/2`, `Td = Tu/8`.
pub fn ziegler_nichols_ultimate(plant: &TransferFunction) -> Result<UltimateCycle, ControlError> {
    let m = stability_margins(plant, Sweep::default())?;
    let w = m.phase_crossover_rad_s.ok_or(ControlError::NoPhaseCrossover)?;
    let ku = libm::pow(10.0, m.gain_margin_db / 20.0);
    let tu = 2.0 * PI / w;
    let kp = 0.6 * ku;
    let ti = tu / 2.0;
    let td = tu / 8.0;
    Ok(UltimateCycle {
        ultimate_gain: ku,
        ultimate_period_s: tu,
        gains: PidGains::new(kp, kp / ti, kp * td),
    })
}
