use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use handfabric::action_space::PcaCoords;
use handfabric::adr::AdrSchedule;
use handfabric::fabric::FabricTargets;
use handfabric::runtime::scheduler::TICKS_PER_SECOND;
use handfabric::runtime::service::ClockMode;
use handfabric::runtime::wire::{parse_frame, read_trace, write_trace, Frame};
use handfabric::runtime::*;
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn counting(rates: &[Rate]) -> NodeSchedule<()> {
    let mut s = NodeSchedule::new();
    for (i, &r) in rates.iter().enumerate() {
        s.add(&format!("n{i}"), r, |_, t| Ok(vec![("fire".into(), serde_json::json!(t))]));
    }
    s
}

#[test]
fn shipped_rates_fire_exactly_per_second() {
    let cfg = RuntimeConfig::reference();
    let rates: Vec<Rate> = cfg.rates.named().iter().map(|&(_, hz)| Rate::hz(hz)).collect();
    let mut s = counting(&rates);
    run_scheduled(&mut s, &mut (), 1.0).unwrap();
    assert_eq!(s.counts(), &[1000, 333, 60, 60, 60]);
    assert_eq!(s.names(), ["n0", "n1", "n2", "n3", "n4"]);
}

#[test]
fn split_runs_match_one_run() {
    let rates = [Rate::hz(1000), Rate::hz(333), Rate::hz(60)];
    let mut whole = counting(&rates);
    let a = run_scheduled(&mut whole, &mut (), 2.5).unwrap();
    let mut parts = counting(&rates);
    let mut b = Vec::new();
    for d in [0.3, 0.0, 1.2, 1.0] {
        b.extend(parts.run_for(&mut (), d).unwrap());
    }
    assert_eq!(trace_hash(&a), trace_hash(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn firing_counts_are_floor_of_rate_times_duration(
        rates in prop::collection::vec((1u64..2000, 1u64..7), 1..6),
        micros in 0u64..3_000_000,
    ) {
        let rates: Vec<Rate> = rates.iter().map(|&(n, d)| Rate::new(n, d).unwrap()).collect();
        let mut s = counting(&rates);
        let trace = s.run_until(&mut (), micros).unwrap();
        for (i, r) in rates.iter().enumerate() {
            let expected = (r.num as u128 * micros as u128 / (r.den as u128 * TICKS_PER_SECOND as u128)) as u64;
            prop_assert_eq!(s.counts()[i], expected);
            let fired = trace.iter().filter(|t| t.node == format!("n{i}")).count() as u64;
            prop_assert_eq!(fired, expected);
        }
        prop_assert!(trace.windows(2).all(|w| w[0].tick <= w[1].tick));
    }
}

fn sm_config() -> StateMachineConfig {
    RuntimeConfig::reference().state_machine
}

#[test]
fn below_threshold_passes_policy_through() {
    let c = sm_config();
    let sm = BinPackState::new(c.z_threshold, 0.0);
    let policy = FabricTargets { palm_pose: Vector6::new(0.6, 0.1, 0.2, 0.0, 0.0, 0.1), pca: PcaCoords::from_element(0.3) };
    let open = PcaCoords::from_element(-0.5);
    let (next, out) =
        state_machine_step(&sm, &c, &Vector3::new(0.6, 0.1, c.z_threshold - 1e-9), &policy, &Vector3::zeros(), &open, 0.5);
    assert_eq!(next.mode, SmMode::PolicyActive);
    assert_eq!(out, policy);
    let (next, out) = state_machine_step(&sm, &c, &Vector3::new(0.6, 0.1, c.z_threshold), &policy, &Vector3::zeros(), &open, 0.5);
    assert_eq!(next.mode, SmMode::LiftToBin);
    assert_eq!(out.palm_pose.fixed_rows::<3>(0).into_owned(), c.bin_waypoint());
}

#[test]
fn return_home_arrival_uses_tolerance() {
    let c = sm_config();
    let mut sm = BinPackState::new(c.z_threshold, 0.0);
    sm.mode = SmMode::ReturnHome;
    let open = PcaCoords::zeros();
    let policy = FabricTargets { palm_pose: Vector6::zeros(), pca: PcaCoords::zeros() };
    let z = Vector3::zeros();
    let inside = c.ready_position() + Vector3::new(c.arrival_tolerance * 0.99, 0.0, 0.0);
    let outside = c.ready_position() + Vector3::new(0.0, 0.0, c.arrival_tolerance * 1.01);
    assert_eq!(state_machine_step(&sm, &c, &z, &policy, &outside, &open, 1.0).0.mode, SmMode::ReturnHome);
    assert_eq!(state_machine_step(&sm, &c, &z, &policy, &inside, &open, 1.0).0.mode, SmMode::PolicyActive);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn supervisor_never_forwards_policy_outside_policy_mode(
        steps in prop::collection::vec((0.0f64..0.4, 0u8..3, -1.0f64..1.0), 1..300),
    ) {
        let c = sm_config();
        let open = PcaCoords::from_element(-2.0);
        let mut sm = BinPackState::new(c.z_threshold, 0.0);
        for (k, &(z, at, p)) in steps.iter().enumerate() {
            let now = k as f64 / 60.0;
            // palm either at the bin, at home, or somewhere else
            let palm = match at { 0 => c.bin_waypoint(), 1 => c.ready_position(), _ => Vector3::new(0.7, 0.3, 0.1) };
            let policy = FabricTargets { palm_pose: Vector6::new(0.7, 0.3, 0.1, p, 0.0, 0.0), pca: PcaCoords::from_element(p) };
            let (next, out) = state_machine_step(&sm, &c, &Vector3::new(0.6, 0.0, z), &policy, &palm, &open, now);
            prop_assert!(next.mode == sm.mode || next.mode == sm.mode.next());
            if next.mode != SmMode::PolicyActive || sm.mode != SmMode::PolicyActive {
                prop_assert_ne!(out, policy);
            } else {
                prop_assert_eq!(out, policy);
            }
            sm = next;
        }
    }
}

fn fixture() -> Vec<TraceRecord> {
    read_trace(include_str!("fixtures/binpack_trace.jsonl")).unwrap()
}

#[test]
fn frozen_fixture_metrics() {
    let (m, s) = metrics_from_trace(&fixture()).unwrap();
    assert_eq!(m.cs_streaks, [3, 1, 3, 1]);
    assert_eq!(m.cycle_times, [9.0, 11.0, 9.0, 11.0, 9.0, 11.0, 9.0, 11.0]);
    assert_eq!((m.successes, m.attempts), (8, 11));
    assert_eq!((s.cs_mean, s.cs_std), (2.0, 1.0));
    assert_eq!((s.ct_mean, s.ct_std), (10.0, 1.0));
    assert_eq!(s.sr, 8.0 / 11.0);
}

#[test]
fn trace_file_round_trip() {
    let t = fixture();
    assert_eq!(read_trace(&write_trace(&t)).unwrap(), t);
    assert!(read_trace(r#"{"type":"mode","value":"manual"}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_order_within_a_tick(seed in 0u64..10_000, width in 1u64..5) {
        let mut t = fixture();
        // squeeze attempts onto few ticks, then shuffle each tick's records
        for r in &mut t {
            r.tick /= width * 20_000_000;
        }
        t.sort_by_key(|r| r.tick);
        let expected = metrics_from_trace(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = Vec::new();
        for tick in t.iter().map(|r| r.tick).collect::<std::collections::BTreeSet<_>>() {
            let mut group: Vec<_> = t.iter().filter(|r| r.tick == tick).cloned().collect();
            group.shuffle(&mut rng);
            shuffled.extend(group);
        }
        prop_assert_eq!(metrics_from_trace(&shuffled).unwrap(), expected);
    }
}

#[test]
fn short_binpack_is_deterministic() {
    let mut cfg = RuntimeConfig::reference();
    cfg.binpack.objects = 2;
    let adr = AdrSchedule::reference().state;
    let a = run_binpack(adr.clone(), cfg.clone()).unwrap();
    let b = run_binpack(adr.clone(), cfg.clone()).unwrap();
    assert_eq!(a.trace_hash, b.trace_hash);
    assert_eq!(a.log, b.log);
    assert_eq!(a.metrics.attempts, 2);
    // n = 0 carries no randomization at all
    cfg.binpack.seed = 1;
    assert_eq!(run_binpack(adr.clone(), cfg.clone()).unwrap().trace_hash, a.trace_hash);
    cfg.binpack.objects = 1;
    let t1 = run_binpack(adr.terminal(), cfg.clone()).unwrap();
    cfg.binpack.seed = 2;
    assert_ne!(run_binpack(adr.terminal(), cfg).unwrap().trace_hash, t1.trace_hash);
    let (m, _) = metrics_from_trace(&a.trace).unwrap();
    assert_eq!(m, a.metrics);
}

#[test]
fn bad_runtime_config_is_rejected() {
    let text = include_str!("../data/runtime.toml");
    assert!(RuntimeConfig::from_text(&text.replace("hand_pd = 333", "hand_pd = 0")).is_err());
    assert!(RuntimeConfig::from_text(&text.replace("state_rate = 20", "state_rate = 7")).is_err());
    assert!(RuntimeConfig::from_text(&text.replace("objects = 20", "objects = 20\nextra = 1")).is_err());
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Client {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Client { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn next(&mut self) -> Frame {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        parse_frame(&line).unwrap()
    }

    fn next_state(&mut self) -> wire::StateFrame {
        loop {
            if let Frame::State(s) = self.next() {
                return s;
            }
        }
    }

    fn next_error(&mut self) -> Option<String> {
        loop {
            if let Frame::Error { field, .. } = self.next() {
                return field;
            }
        }
    }
}

#[test]
fn console_round_trip_in_wall_clock() {
    let world = BinPackWorld::reference(AdrSchedule::reference().state);
    let handle = serve_console(world, "127.0.0.1:0", ClockMode::Wall).unwrap();
    let mut c = Client::connect(handle.local_addr());

    let first = c.next_state();
    let second = c.next_state();
    assert!(second.tick > first.tick);

    c.send(r#"{"type":"target","palm":[0.5,0.0,0.35,0,0,0],"pca":[0,0,0,0,0]}"#);
    assert_eq!(c.next_error(), Some("type".to_string()));
    c.send(r#"{"type":"target","palm":[0.5,0.0]"#);
    assert_eq!(c.next_error(), None);
    c.send(r#"{"type":"target","pca":[0,0,0,0,0]}"#);
    assert_eq!(c.next_error(), Some("palm".to_string()));
    c.send(r#"{"type":"gain","name":"damping","value":-4}"#);
    assert_eq!(c.next_error(), Some("value".to_string()));

    c.send(r#"{"type":"mode","value":"manual"}"#);
    let goal = [0.45, 0.15, 0.4];
    c.send(&format!(r#"{{"type":"target","palm":[{},{},{},0,0,0],"pca":[0,0,0,0,0]}}"#, goal[0], goal[1], goal[2]));
    let sent = Instant::now();
    let mut converged = false;
    while sent.elapsed() < Duration::from_secs(2) {
        let s = c.next_state();
        let err = (0..3).map(|k| (s.palm_pose[k] - goal[k]).powi(2)).sum::<f64>().sqrt();
        if err < 0.01 {
            converged = true;
            break;
        }
    }
    assert!(converged, "palm did not reach the manual target within 2 s");
    let manual = handle
        .trace()
        .into_iter()
        .filter(|r| r.kind == "command" && r.payload["source"] == "manual")
        .collect::<Vec<_>>();
    assert!(manual.iter().any(|r| r.payload["new_target"] == true));
    assert!(handle.failure().is_none());
    handle.shutdown();
}
