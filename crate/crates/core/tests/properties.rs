mod common;

use common::*;
use embsync_core::backend::{Action, Observation};
use embsync_core::constraint::{Constraint, MetricTable, Relation, OVERSHOOT};
use embsync_core::control::{final_value, pid_series, simulate_step, stability_margins, PidGains, Sweep, TransferFunction};
use embsync_core::controller::{reflect, Decision, Feedback, Intent, PlanStep, Policy, Workspace};
use embsync_core::lifecycle::{LifecycleEvent, OperationTracker};
use embsync_core::message::{decode_message, encode_message, number_to_wire, EnhancedMessage, MessageType, OperationStatus, Payload};
use embsync_core::perception::{Alert, ConstraintMonitor};
use embsync_core::server::ServerConfig;
use proptest::prelude::*;
use serde_json::{json, Value};

fn template(kind: MessageType) -> Value {
    use MessageType::*;
    match kind {
        OperationRequest => json!({"operation_type": "execute_primitive", "parameters": {"primitive": "p", "args": {}}}),
        OperationComplete => json!({"result": {}}),
        OperationFailed => json!({"reason": "r"}),
        CodeOutput => json!({"stdout": "text"}),
        CodeStatus => json!({"status": "s"}),
        CodeDebug => json!({"detail": "d"}),
        CodeEvent => json!({"event": "e", "data": {}}),
        ModelStateUpdate => json!({"sim_time": 0.0, "variables": {}}),
        StateVerification => json!({"query": {}}),
        StateConfirmed => json!({"state": {}}),
        SessionInit => json!({"client": "c"}),
        Error => json!({"code": "c", "message": "m"}),
        OperationAck | OperationStart | OperationProgress | Heartbeat => json!({}),
    }
}

fn any_number() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("finite", |x| x.is_finite()),
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

prop_compose! {
    fn any_message()(
        k in 0usize..16,
        id in "[a-z0-9-]{1,12}",
        sid in "[a-z0-9]{0,8}",
        op in proptest::option::of("[a-z0-9]{1,8}"),
        corr in proptest::option::of("[a-z0-9]{1,8}"),
        ts in -1e9f64..1e9,
        extras in proptest::collection::btree_map("x_[a-z]{1,6}", any_number(), 0..5),
        text in ".{0,20}",
    ) -> EnhancedMessage {
        let kind = MessageType::ALL[k];
        let Value::Object(mut p) = template(kind) else { unreachable!() };
        for (key, v) in extras {
            p.insert(key, number_to_wire(v));
        }
        p.insert("note".into(), json!(text));
        if kind == MessageType::ModelStateUpdate {
            p.insert("sim_time".into(), number_to_wire(ts.abs()));
            p.insert("variables".into(), json!({"y": [number_to_wire(ts)]}));
        }
        let mut m = EnhancedMessage::raw(id, kind, p, ts, &sid);
        m.status = kind.implied_status();
        if kind.requires_operation_id() {
            m.operation_id = Some(op.unwrap_or_else(|| "op".into()));
        } else {
            m.operation_id = op;
        }
        m.correlation_id = corr;
        m
    }
}

/// Edges of the status machine, listed independently of the library.
fn legal(state: OperationStatus, event: LifecycleEvent) -> Option<OperationStatus> {
    use LifecycleEvent as E;
    use OperationStatus as S;
    const EDGES: [(S, E, S); 13] = [
        (S::Pending, E::Ack, S::Acknowledged),
        (S::Acknowledged, E::Start, S::Started),
        (S::Acknowledged, E::Timeout, S::Failed),
        (S::Started, E::Progress, S::InProgress),
        (S::Started, E::Done, S::Completed),
        (S::Started, E::Error, S::Failed),
        (S::Started, E::Timeout, S::Failed),
        (S::Started, E::InterruptAck, S::Failed),
        (S::InProgress, E::Progress, S::InProgress),
        (S::InProgress, E::Done, S::Completed),
        (S::InProgress, E::Error, S::Failed),
        (S::InProgress, E::Timeout, S::Failed),
        (S::InProgress, E::InterruptAck, S::Failed),
    ];
    EDGES.iter().find(|(s, e, _)| *s == state && *e == event).map(|(_, _, n)| *n)
}

/// Margins by brute force: 1e5 log-spaced points, linear interpolation at
/// the first crossings.
fn margin_oracle(l: &TransferFunction) -> (f64, f64) {
    let n = 100_000;
    let (l0, l1) = (-3.0f64, 3.0f64);
    let mut prev: Option<(f64, f64)> = None;
    let (mut gm, mut pm) = (f64::INFINITY, f64::INFINITY);
    for i in 0..n {
        let w = 10f64.powf(l0 + (l1 - l0) * i as f64 / (n - 1) as f64);
        let z = l.freq_response(w);
        let mag = z.norm().log10();
        let raw = z.im.atan2(z.re).to_degrees();
        let ph = match prev {
            Some((_, p)) => raw + 360.0 * ((p - raw) / 360.0).round(),
            None => raw,
        };
        if let Some((pm_prev, pp)) = prev {
            if pm.is_infinite() && pm_prev > 0.0 && mag <= 0.0 {
                let t = pm_prev / (pm_prev - mag);
                pm = 180.0 + pp + t * (ph - pp);
            }
            if gm.is_infinite() && pp > -180.0 && ph <= -180.0 {
                let t = (pp + 180.0) / (pp - ph);
                gm = -20.0 * (pm_prev + t * (mag - pm_prev));
            }
        }
        prev = Some((mag, ph));
    }
    (gm, pm)
}

struct Plain;

impl Policy for Plain {
    fn name(&self) -> &str {
        "plain"
    }
    fn propose_global(&mut self, _: &Intent) -> Vec<String> {
        vec![]
    }
    fn propose_local(&mut self, _: &str, _: &Intent, _: &Workspace) -> Vec<PlanStep> {
        vec![]
    }
    fn repair(&mut self, _: &Action, _: &Observation, _: &Alert) -> Option<Action> {
        None
    }
    fn decide(&mut self, _: &Feedback, _: &Workspace) -> Decision {
        Decision::default()
    }
}

const METRICS: [&str; 5] = ["settling_time", "overshoot", "steady_state_error", "gain_margin", "phase_margin"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn message_round_trip(m in any_message()) {
        let back = decode_message(&encode_message(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn tracker_follows_only_listed_edges(events in proptest::collection::vec(0usize..7, 0..20)) {
        let mut t = OperationTracker::new("op", 0.0, 600.0);
        for (i, e) in events.into_iter().enumerate() {
            let e = LifecycleEvent::ALL[e];
            let before = t.state();
            let expected = legal(before, e);
            let got = t.apply(e, i as f64).ok();
            prop_assert_eq!(got, expected);
            if expected.is_none() {
                prop_assert_eq!(t.state(), before);
            }
            if before.is_terminal() {
                prop_assert!(got.is_none());
            }
        }
    }

    #[test]
    fn delta_is_exactly_the_false_indicators(
        values in proptest::collection::vec(proptest::option::of(prop_oneof![4 => -50.0f64..50.0, 1 => Just(f64::NAN)]), 5),
        bounds in proptest::collection::vec(-20.0f64..20.0, 5),
        ops in proptest::collection::vec(0usize..3, 5),
    ) {
        let mut table = MetricTable::new();
        let mut constraints = Vec::new();
        for i in 0..5 {
            if let Some(v) = values[i] {
                table.insert(METRICS[i].into(), v);
            }
            let op = [Relation::Lt, Relation::Gt, Relation::Eq][ops[i]];
            constraints.push(Constraint::new(&format!("c{i}"), METRICS[i], op, bounds[i], ""));
        }
        let fb = reflect(&table, &constraints, &Plain, &Workspace::new());
        let expected: Vec<String> = constraints
            .iter()
            .filter(|c| {
                let ok = match table.get(&c.metric) {
                    None => false,
                    Some(v) if v.is_nan() => false,
                    Some(&v) => match c.op {
                        Relation::Lt => v < c.bound,
                        Relation::Gt => v > c.bound,
                        Relation::Eq => (v - c.bound).abs() <= 1e-3,
                    },
                };
                !ok
            })
            .map(|c| c.name.clone())
            .collect();
        prop_assert_eq!(fb.success(), expected.is_empty());
        prop_assert_eq!(fb.delta_names(), expected);
    }

    #[test]
    fn best_margin_never_decreases(ys in proptest::collection::vec(prop_oneof![9 => -1.0f64..3.0, 1 => Just(f64::NAN)], 1..60)) {
        let constraints = vec![
            Constraint::new("mp", OVERSHOOT, Relation::Lt, 20.0, "%").streaming(),
            Constraint::new("y_cap", "y", Relation::Lt, 2.0, "").streaming(),
        ];
        let mut m = ConstraintMonitor::new(&constraints, Payload::new()).unwrap();
        let mut running = [f64::NEG_INFINITY; 2];
        let mut prev = std::collections::BTreeMap::new();
        for (i, y) in ys.into_iter().enumerate() {
            m.observe(&Observation::sample(i as f64 * 0.1, &[("y", y)]));
            let margins = [constraints[0].margin((y - 1.0) * 100.0), constraints[1].margin(y)];
            for k in 0..2 {
                running[k] = running[k].max(margins[k]);
            }
            let r = m.record();
            for (k, c) in constraints.iter().enumerate() {
                let b = r.best_margin[&c.name];
                prop_assert_eq!(b, running[k]);
                if let Some(p) = prev.get(&c.name) {
                    prop_assert!(b >= *p);
                }
                prev.insert(c.name.clone(), b);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn margins_agree_with_dense_sweep(order in 3usize..=4, a in 0.5f64..2.0, f in 1.3f64..3.5, r in 0.0f64..0.3) {
        let plant = TransferFunction::repeated_pole(1.0, a, order);
        let kp = f * a.powi(order as i32);
        let lp = pid_series(&plant, PidGains::new(kp, kp * r * a, 0.0)).unwrap();
        let m = stability_margins(&lp.open_loop, Sweep::default()).unwrap();
        let (gm, pm) = margin_oracle(&lp.open_loop);
        prop_assert!((m.gain_margin_db - gm).abs() < 1e-2, "gm {} vs {}", m.gain_margin_db, gm);
        prop_assert!((m.phase_margin_deg - pm).abs() < 1e-2, "pm {} vs {}", m.phase_margin_deg, pm);
    }

    #[test]
    fn gain_margin_shifts_by_the_gain_in_db(a in 0.5f64..2.0, k in 0.2f64..5.0) {
        let plant = TransferFunction::repeated_pole(1.0, a, 3);
        let base = stability_margins(&plant, Sweep::default()).unwrap();
        let scaled = stability_margins(&plant.scaled(k), Sweep::default()).unwrap();
        prop_assert!((scaled.gain_margin_db - (base.gain_margin_db - 20.0 * k.log10())).abs() < 1e-6);
        prop_assert_eq!(scaled.phase_crossover_rad_s.is_some(), base.phase_crossover_rad_s.is_some());
    }

    #[test]
    fn simulated_step_settles_on_the_final_value(kp in 0.2f64..4.0) {
        let plant = TransferFunction::repeated_pole(1.0, 1.0, 3);
        let cl = pid_series(&plant, PidGains::new(kp, 0.0, 0.0)).unwrap().closed_loop;
        let fv = final_value(&cl).unwrap();
        prop_assert!((fv - kp / (1.0 + kp)).abs() < 1e-12);
        let (_, y) = simulate_step(&cl, 80.0, 0.01);
        prop_assert!((y.last().unwrap() - fv).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn per_operation_order_is_preserved(steps in proptest::collection::vec(1usize..25, 1..4), parallel in any::<bool>()) {
        let mut config = ServerConfig::default();
        config.parallel_operations = parallel;
        let (mut c, _) = loop_client_with(config);
        c.connect().unwrap();
        let mut ops = Vec::new();
        for n in &steps {
            let a = Action::call("rk4_integrate", obj(json!({"rhs": "exp_decay", "t1": *n as f64 * 0.1, "h": 0.1})));
            ops.push(c.dispatch(&a).unwrap());
        }
        let mut seen: std::collections::BTreeMap<String, Vec<EnhancedMessage>> = Default::default();
        let mut done = 0;
        while done < ops.len() {
            let m = c.next_message().unwrap();
            let Some(op) = m.operation_id.clone() else { continue };
            if is_terminal(&m) {
                done += 1;
            }
            seen.entry(op).or_default().push(m);
        }
        for (op, n) in ops.iter().zip(&steps) {
            let ms = &seen[op];
            prop_assert_eq!(ms.len(), n + 3);
            prop_assert_eq!(ms[0].kind, MessageType::OperationAck);
            prop_assert_eq!(ms[1].kind, MessageType::OperationStart);
            prop_assert_eq!(ms.last().unwrap().kind, MessageType::OperationComplete);
            let times: Vec<f64> = ms[2..ms.len() - 1].iter().map(|m| m.payload["sim_time"].as_f64().unwrap()).collect();
            prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(ms.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }
}
