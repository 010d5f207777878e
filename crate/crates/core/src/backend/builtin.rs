//! Primitives registered at startup.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{json, Value};

use super::{
    gains_from_value, tf_from_value, Emission, Factory, ParamKind, ParamSpec, Primitive, PrimitiveSpec, Registry,
    StepOutcome,
};
use crate::control::{
    final_value, pid_controller, pid_series, stability_margins, StateSpace, StepMetrics, Sweep, TransferFunction,
};
use crate::message::{number_to_wire, payload, Payload};
use crate::rk4::{step_count, Rk4};

const RHS: [&str; 2] = ["exp_decay", "quadratic"];

pub fn rhs_names() -> &'static [&'static str] {
    &RHS
}

fn num(args: &Payload, key: &str) -> f64 {
    args.get(key).and_then(crate::message::number_from_wire).unwrap_or(f64::NAN)
}

fn factory<F>(f: F) -> Factory
where
    F: Fn(&Payload) -> Result<Box<dyn Primitive>, String> + Send + Sync + 'static,
{
    Box::new(f)
}

/// Registry holding `rk4_integrate`, `bisection_root`, `lti_step_sim` and `freq_margins`.
pub fn builtin_registry() -> Registry {
    let mut r = Registry::new();
    r.register(
        PrimitiveSpec {
            name: "rk4_integrate".into(),
            params: vec![
                ParamSpec::optional("rhs", ParamKind::String, "", json!("exp_decay")),
                ParamSpec::optional("y0", ParamKind::Number, "", json!(1.0)),
                ParamSpec::optional("t0", ParamKind::Number, "s", json!(0.0)),
                ParamSpec::required("t1", ParamKind::Number, "s"),
                ParamSpec::required("h", ParamKind::Number, "s"),
                ParamSpec::optional("rate", ParamKind::Number, "1/s", json!(1.0)),
            ],
            emits_trajectory: true,
            step_budget: 1_000_000,
        },
        factory(|a| Rk4Integrate::new(a).map(|p| Box::new(p) as Box<dyn Primitive>)),
    )
    .expect("fresh registry");
    r.register(
        PrimitiveSpec {
            name: "bisection_root".into(),
            params: vec![
                ParamSpec::required("coeffs", ParamKind::Array, ""),
                ParamSpec::required("a", ParamKind::Number, ""),
                ParamSpec::required("b", ParamKind::Number, ""),
                ParamSpec::optional("tol", ParamKind::Number, "", json!(1e-10)),
            ],
            emits_trajectory: true,
            step_budget: 200,
        },
        factory(|a| Bisection::new(a).map(|p| Box::new(p) as Box<dyn Primitive>)),
    )
    .expect("fresh registry");
    r.register(
        PrimitiveSpec {
            name: "lti_step_sim".into(),
            params: vec![
                ParamSpec::required("plant", ParamKind::TransferFunction, ""),
                ParamSpec::optional("controller", ParamKind::Gains, "", json!({"kp": 1.0})),
                ParamSpec::optional("t_final", ParamKind::Number, "s", json!(20.0)),
                ParamSpec::optional("dt", ParamKind::Number, "s", json!(0.01)),
            ],
            emits_trajectory: true,
            step_budget: 1_000_000,
        },
        factory(|a| LtiStepSim::new(a).map(|p| Box::new(p) as Box<dyn Primitive>)),
    )
    .expect("fresh registry");
    r.register(
        PrimitiveSpec {
            name: "freq_margins".into(),
            params: vec![
                ParamSpec::required("system", ParamKind::TransferFunction, ""),
                ParamSpec::optional("controller", ParamKind::Gains, "", json!({"kp": 1.0})),
                ParamSpec::optional("w_min", ParamKind::Number, "rad/s", json!(1e-3)),
                ParamSpec::optional("w_max", ParamKind::Number, "rad/s", json!(1e3)),
                ParamSpec::optional("points", ParamKind::Integer, "", json!(2000)),
            ],
            emits_trajectory: true,
            step_budget: 1_000,
        },
        factory(|a| FreqMargins::new(a).map(|p| Box::new(p) as Box<dyn Primitive>)),
    )
    .expect("fresh registry");
    r
}

struct Rk4Integrate {
    rhs: fn(f64, f64, f64) -> f64,
    rate: f64,
    t0: f64,
    h: f64,
    steps: usize,
    done: usize,
    y: [f64; 1],
    rk: Rk4,
}

impl Rk4Integrate {
    fn new(a: &Payload) -> Result<Self, String> {
        let rhs: fn(f64, f64, f64) -> f64 = match a["rhs"].as_str().unwrap_or("") {
            "exp_decay" => |_, y, k| -k * y,
            "quadratic" => |_, y, _| y * y,
            other => return Err(format!("unknown rhs {other:?}; known: {RHS:?}")),
        };
        let (t0, t1, h) = (num(a, "t0"), num(a, "t1"), num(a, "h"));
        if !(h > 0.0 && h.is_finite()) {
            return Err("step size h must be positive".into());
        }
        if !(t0.is_finite() && t1.is_finite()) {
            return Err("interval bounds must be finite".into());
        }
        let steps = step_count(t0, t1, h);
        let h = if steps > 0 { (t1 - t0) / steps as f64 } else { h };
        Ok(Self {
            rhs,
            rate: num(a, "rate"),
            t0,
            h,
            steps,
            done: 0,
            y: [num(a, "y0")],
            rk: Rk4::new(1),
        })
    }
}

impl Primitive for Rk4Integrate {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        if self.done == self.steps {
            let t = self.t0 + self.done as f64 * self.h;
            return Ok(StepOutcome::Done(payload([
                ("metrics", json!({"y_final": number_to_wire(self.y[0])})),
                ("y_final", number_to_wire(self.y[0])),
                ("t_final", number_to_wire(t)),
                ("steps", json!(self.steps)),
            ])));
        }
        let t = self.t0 + self.done as f64 * self.h;
        let (rhs, rate) = (self.rhs, self.rate);
        let mut f = |t: f64, y: &[f64], d: &mut [f64]| d[0] = rhs(t, y[0], rate);
        self.rk.step(&mut f, t, &mut self.y, self.h);
        self.done += 1;
        out.push(Emission::state(t + self.h, &[("y", self.y[0])]));
        Ok(StepOutcome::Continue)
    }
}

struct Bisection {
    coeffs: Vec<f64>,
    a: f64,
    b: f64,
    fa: f64,
    tol: f64,
    iter: u64,
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * x + c)
}

impl Bisection {
    fn new(args: &Payload) -> Result<Self, String> {
        let coeffs = args["coeffs"]
            .as_array()
            .unwrap_or(&Vec::new())
            .iter()
            .map(|c| c.as_f64().ok_or_else(|| "coefficients must be numbers".to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        if coeffs.is_empty() {
            return Err("polynomial needs at least one coefficient".into());
        }
        let (a, b) = (num(args, "a"), num(args, "b"));
        if !(a < b) {
            return Err("interval must satisfy a < b".into());
        }
        Ok(Self {
            fa: horner(&coeffs, a),
            coeffs,
            a,
            b,
            tol: num(args, "tol"),
            iter: 0,
        })
    }
}

impl Primitive for Bisection {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        if self.iter == 0 && self.fa * horner(&self.coeffs, self.b) > 0.0 {
            return Err(format!("[{}, {}] does not bracket a root", self.a, self.b));
        }
        let mid = 0.5 * (self.a + self.b);
        if self.fa == 0.0 || self.b - self.a <= self.tol {
            let root = if self.fa == 0.0 { self.a } else { mid };
            return Ok(StepOutcome::Done(payload([
                ("root", number_to_wire(root)),
                ("iterations", json!(self.iter)),
            ])));
        }
        self.iter += 1;
        let fm = horner(&self.coeffs, mid);
        if self.fa * fm <= 0.0 {
            self.b = mid;
        } else {
            self.a = mid;
            self.fa = fm;
        }
        out.push(Emission::Stdout(format!("iter {}: [{:.12}, {:.12}]\n", self.iter, self.a, self.b)));
        out.push(Emission::state(self.iter as f64, &[("a", self.a), ("b", self.b), ("f_mid", fm)]));
        Ok(StepOutcome::Continue)
    }
}

/// `k / (s + a)^n` when `tf` has that shape.
fn repeated_pole_factor(tf: &TransferFunction) -> Option<(f64, f64, usize)> {
    let n = tf.order();
    if tf.num.len() != 1 || n == 0 {
        return None;
    }
    let lead = tf.den[0];
    let a = tf.den[1] / (n as f64 * lead);
    let reference = TransferFunction::repeated_pole(1.0, a, n);
    let close = reference
        .den
        .iter()
        .zip(&tf.den)
        .all(|(r, d)| (r - d / lead).abs() <= 1e-9 * r.abs().max(1.0));
    close.then_some((tf.num[0] / lead, a, n))
}

enum PlantModel {
    /// Chain of identical first-order blocks; internal block outputs are observable.
    Cascade { k: f64, a: f64, n: usize },
    Canonical(StateSpace),
}

impl PlantModel {
    fn order(&self) -> usize {
        match self {
            PlantModel::Cascade { n, .. } => *n,
            PlantModel::Canonical(ss) => ss.order(),
        }
    }

    fn feedthrough(&self) -> f64 {
        match self {
            PlantModel::Cascade { .. } => 0.0,
            PlantModel::Canonical(ss) => ss.d,
        }
    }

    fn output_states(&self, x: &[f64]) -> f64 {
        match self {
            PlantModel::Cascade { k, n, .. } => k * x[n - 1],
            PlantModel::Canonical(ss) => ss.output(x, 0.0),
        }
    }

    fn derivative(&self, x: &[f64], u: f64, dx: &mut [f64]) {
        match self {
            PlantModel::Cascade { a, n, .. } => {
                dx[0] = -a * x[0] + u;
                for i in 1..*n {
                    dx[i] = -a * x[i] + x[i - 1];
                }
            }
            PlantModel::Canonical(ss) => ss.derivative(x, u, dx),
        }
    }
}

struct Interconnection {
    ctrl: StateSpace,
    plant: PlantModel,
}

impl Interconnection {
    /// `(y, u)` for reference 1 given the stacked state `[x_c, x_p]`.
    fn signals(&self, x: &[f64]) -> (f64, f64) {
        let nc = self.ctrl.order();
        let (xc, xp) = x.split_at(nc);
        let dc = self.ctrl.d;
        let dp = self.plant.feedthrough();
        let yc0 = self.ctrl.output(xc, 0.0);
        let yp0 = self.plant.output_states(xp);
        let y = (yp0 + dp * (yc0 + dc)) / (1.0 + dp * dc);
        let u = yc0 + dc * (1.0 - y);
        (y, u)
    }

    fn derivative(&self, x: &[f64], dx: &mut [f64]) {
        let nc = self.ctrl.order();
        let (y, u) = self.signals(x);
        let (xc, xp) = x.split_at(nc);
        let (dxc, dxp) = dx.split_at_mut(nc);
        self.ctrl.derivative(xc, 1.0 - y, dxc);
        self.plant.derivative(xp, u, dxp);
    }
}

struct LtiStepSim {
    sys: Interconnection,
    final_value: Option<f64>,
    dt: f64,
    steps: usize,
    done: usize,
    x: Vec<f64>,
    rk: Rk4,
    ts: Vec<f64>,
    ys: Vec<f64>,
}

impl LtiStepSim {
    fn new(a: &Payload) -> Result<Self, String> {
        let plant = tf_from_value(&a["plant"])?;
        let gains = gains_from_value(&a["controller"])?;
        let (t_final, dt) = (num(a, "t_final"), num(a, "dt"));
        if !(dt > 0.0 && dt.is_finite() && t_final >= 0.0 && t_final.is_finite()) {
            return Err("need dt > 0 and t_final >= 0".into());
        }
        let ctrl = pid_controller(gains).map_err(|e| e.to_string())?;
        let closed = pid_series(&plant, gains).map_err(|e| e.to_string())?.closed_loop;
        let plant_model = match repeated_pole_factor(&plant) {
            Some((k, a, n)) => PlantModel::Cascade { k, a, n },
            None => PlantModel::Canonical(plant.state_space()),
        };
        let sys = Interconnection {
            ctrl: ctrl.state_space(),
            plant: plant_model,
        };
        let n = sys.ctrl.order() + sys.plant.order();
        let steps = step_count(0.0, t_final, dt);
        Ok(Self {
            sys,
            final_value: final_value(&closed),
            dt,
            steps,
            done: 0,
            x: vec![0.0; n],
            rk: Rk4::new(n),
            ts: Vec::with_capacity(steps + 1),
            ys: Vec::with_capacity(steps + 1),
        })
    }

    fn emit(&mut self, t: f64, out: &mut Vec<Emission>) {
        let (y, u) = self.sys.signals(&self.x);
        self.ts.push(t);
        self.ys.push(y);
        let mut vars = vec![("y".to_string(), vec![y]), ("u".to_string(), vec![u])];
        if let PlantModel::Cascade { n, .. } = self.sys.plant {
            let nc = self.sys.ctrl.order();
            for i in 0..n.saturating_sub(1) {
                vars.push((format!("x{}", i + 1), vec![self.x[nc + i]]));
            }
        }
        out.push(Emission::State { sim_time: t, variables: vars });
    }
}

impl Primitive for LtiStepSim {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        if self.ts.is_empty() {
            if (1.0 + self.sys.plant.feedthrough() * self.sys.ctrl.d).abs() < 1e-12 {
                out.push(Emission::Event {
                    event: "algebraic_loop".into(),
                    data: Payload::new(),
                });
                return Err("algebraic loop: 1 + Dc*Dp = 0".into());
            }
            self.emit(0.0, out);
            return Ok(StepOutcome::Continue);
        }
        if self.done == self.steps {
            let m = StepMetrics::from_samples(&self.ts, &self.ys, self.final_value);
            out.push(Emission::Stdout(format!(
                "Ts={:.4} s Mp={:.3}% ess={:.3e}\n",
                m.settling_time_s, m.overshoot_pct, m.steady_state_error
            )));
            return Ok(StepOutcome::Done(step_result(&m, self.ts.len())));
        }
        let t = self.done as f64 * self.dt;
        let sys = &self.sys;
        let mut f = |_t: f64, x: &[f64], dx: &mut [f64]| sys.derivative(x, dx);
        self.rk.step(&mut f, t, &mut self.x, self.dt);
        self.done += 1;
        self.emit(self.done as f64 * self.dt, out);
        Ok(StepOutcome::Continue)
    }
}

fn step_result(m: &StepMetrics, samples: usize) -> Payload {
    payload([
        (
            "metrics",
            json!({
                "settling_time": number_to_wire(m.settling_time_s),
                "overshoot": number_to_wire(m.overshoot_pct),
                "steady_state_error": number_to_wire(m.steady_state_error),
            }),
        ),
        ("peak", number_to_wire(m.peak)),
        ("peak_time_s", number_to_wire(m.peak_time_s)),
        ("final_value", number_to_wire(m.final_value)),
        ("settled", json!(m.settled)),
        ("samples", json!(samples)),
    ])
}

const SWEEP_CHUNK: usize = 250;

struct FreqMargins {
    open_loop: TransferFunction,
    sweep: Sweep,
    cursor: usize,
}

impl FreqMargins {
    fn new(a: &Payload) -> Result<Self, String> {
        let system = tf_from_value(&a["system"])?;
        let gains = gains_from_value(&a["controller"])?;
        let open_loop = pid_controller(gains).map_err(|e| e.to_string())?.series(&system);
        let sweep = Sweep {
            w_min: num(a, "w_min"),
            w_max: num(a, "w_max"),
            points: a["points"].as_u64().unwrap_or(0) as usize,
        };
        if !(sweep.w_min > 0.0 && sweep.w_max > sweep.w_min && sweep.points >= 2) {
            return Err("sweep needs 0 < w_min < w_max and at least 2 points".into());
        }
        Ok(Self {
            open_loop,
            sweep,
            cursor: 0,
        })
    }
}

impl Primitive for FreqMargins {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        if self.cursor < self.sweep.points {
            let end = (self.cursor + SWEEP_CHUNK).min(self.sweep.points);
            let w = self.sweep.frequencies().nth(end - 1).unwrap_or(self.sweep.w_max);
            let l = self.open_loop.freq_response(w);
            out.push(Emission::state(
                w,
                &[
                    ("w", w),
                    ("mag_db", 20.0 * libm::log10(l.norm())),
                    ("phase_deg", libm::atan2(l.im, l.re).to_degrees()),
                ],
            ));
            self.cursor = end;
            return Ok(StepOutcome::Continue);
        }
        let m = stability_margins(&self.open_loop, self.sweep).map_err(|e| e.to_string())?;
        let opt = |x: Option<f64>| x.map(number_to_wire).unwrap_or(Value::Null);
        let ultimate = match m.phase_crossover_rad_s {
            Some(w) => json!({
                "gain": number_to_wire(libm::pow(10.0, m.gain_margin_db / 20.0)),
                "period_s": number_to_wire(2.0 * core::f64::consts::PI / w),
            }),
            None => Value::Null,
        };
        Ok(StepOutcome::Done(payload([
            (
                "metrics",
                json!({
                    "gain_margin": number_to_wire(m.gain_margin_db),
                    "phase_margin": number_to_wire(m.phase_margin_deg),
                }),
            ),
            ("phase_crossover_rad_s", opt(m.phase_crossover_rad_s)),
            ("gain_crossover_rad_s", opt(m.gain_crossover_rad_s)),
            ("phase_crossings", json!(m.phase_crossings)),
            ("gain_crossings", json!(m.gain_crossings)),
            ("ultimate", ultimate),
        ])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{step_response_metrics, PidGains};
    use crate::message::number_from_wire;

    fn run(name: &str, args: Payload) -> (Vec<Emission>, Result<Payload, String>) {
        let reg = builtin_registry();
        let (mut p, budget) = reg.instantiate(name, &args).unwrap();
        let mut out = Vec::new();
        for _ in 0..budget {
            match p.step(&mut out) {
                Ok(StepOutcome::Continue) => {}
                Ok(StepOutcome::Done(r)) => return (out, Ok(r)),
                Err(e) => return (out, Err(e)),
            }
        }
        (out, Err("budget".into()))
    }

    fn states(out: &[Emission]) -> usize {
        out.iter().filter(|e| matches!(e, Emission::State { .. })).count()
    }

    #[test]
    fn rk4_exp_decay_streams_ten_samples() {
        let (out, r) = run("rk4_integrate", payload([("t1", json!(1.0)), ("h", json!(0.1))]));
        let r = r.unwrap();
        assert_eq!(states(&out), 10);
        let y = number_from_wire(&r["y_final"]).unwrap();
        assert!((y - libm::exp(-1.0)).abs() < 1e-6);
    }

    #[test]
    fn rk4_zero_interval_completes_without_samples() {
        let (out, r) = run("rk4_integrate", payload([("t1", json!(0.0)), ("h", json!(0.1))]));
        assert!(out.is_empty());
        assert_eq!(r.unwrap()["steps"], 0);
    }

    #[test]
    fn quadratic_blows_up_to_infinity() {
        let args = payload([("rhs", json!("quadratic")), ("t1", json!(2.0)), ("h", json!(0.1))]);
        let (out, _) = run("rk4_integrate", args);
        let non_finite = out.iter().any(|e| match e {
            Emission::State { variables, .. } => !variables[0].1[0].is_finite(),
            _ => false,
        });
        assert!(non_finite);
    }

    #[test]
    fn bisection_finds_sqrt_two() {
        let args = payload([("coeffs", json!([1.0, 0.0, -2.0])), ("a", json!(0.0)), ("b", json!(2.0))]);
        let r = run("bisection_root", args).1.unwrap();
        let root = number_from_wire(&r["root"]).unwrap();
        assert!((root - libm::sqrt(2.0)).abs() < 1e-9);
    }

    #[test]
    fn bisection_rejects_non_bracket() {
        let args = payload([("coeffs", json!([1.0, 0.0, 2.0])), ("a", json!(0.0)), ("b", json!(2.0))]);
        assert!(run("bisection_root", args).1.unwrap_err().contains("bracket"));
    }

    #[test]
    fn lti_sim_agrees_with_closed_loop_metrics() {
        let plant = TransferFunction::repeated_pole(1.0, 1.0, 3);
        let g = PidGains::new(3.432, 1.456, 3.192);
        let args = payload([
            ("plant", super::super::tf_to_value(&plant)),
            ("controller", super::super::gains_to_value(g)),
        ]);
        let (out, r) = run("lti_step_sim", args);
        let r = r.unwrap();
        assert_eq!(states(&out), 2001);
        let oracle = step_response_metrics(&pid_series(&plant, g).unwrap().closed_loop, 20.0, 0.01);
        let ts = number_from_wire(&r["metrics"]["settling_time"]).unwrap();
        let mp = number_from_wire(&r["metrics"]["overshoot"]).unwrap();
        assert!((ts - oracle.settling_time_s).abs() < 0.02, "{ts} vs {oracle:?}");
        assert!((mp - oracle.overshoot_pct).abs() < 0.05);
        match &out[1] {
            Emission::State { variables, .. } => {
                let names: Vec<&str> = variables.iter().map(|(k, _)| k.as_str()).collect();
                assert_eq!(names, ["y", "u", "x1", "x2"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lti_sim_general_plant() {
        let plant = TransferFunction::new(vec![1.0, 2.0], vec![1.0, 3.0, 2.0]).unwrap();
        let args = payload([("plant", super::super::tf_to_value(&plant)), ("t_final", json!(10.0))]);
        let r = run("lti_step_sim", args).1.unwrap();
        // L(0) = 1, so the loop settles at 1/2.
        let ess = number_from_wire(&r["metrics"]["steady_state_error"]).unwrap();
        assert!((ess - 0.5).abs() < 1e-9);
    }

    #[test]
    fn freq_margins_reports_ultimate_cycle() {
        let plant = TransferFunction::repeated_pole(1.0, 1.0, 3);
        let args = payload([("system", super::super::tf_to_value(&plant))]);
        let (out, r) = run("freq_margins", args);
        let r = r.unwrap();
        assert_eq!(states(&out), 8);
        let ku = number_from_wire(&r["ultimate"]["gain"]).unwrap();
        assert!((ku - 8.0).abs() < 1e-6);
        let gm = number_from_wire(&r["metrics"]["gain_margin"]).unwrap();
        assert!((gm - 20.0 * libm::log10(8.0)).abs() < 1e-6);
    }

    #[test]
    fn repeated_pole_detection() {
        assert_eq!(
            repeated_pole_factor(&TransferFunction::repeated_pole(2.0, 0.5, 3)),
            Some((2.0, 0.5, 3))
        );
        let other = TransferFunction::new(vec![1.0], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(repeated_pole_factor(&other), None);
    }
}
