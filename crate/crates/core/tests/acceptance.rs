//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any of them fails.

use std::process::ExitCode;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use wormgrid::classad::{
    check_requirements, compute_rank, evaluate, parse_ad, parse_expr, BinaryOp, ClassAd, Expr, Scope, UnaryOp, Value,
};
use wormgrid::contract::{ContractParams, ContractState};
use wormgrid::control::{self, Pace};
use wormgrid::events::EventTag;
use wormgrid::migrator::{RunStatus, Site, Trigger};
use wormgrid::resources::{derive_clique_ad, Clique, Directory, MachineSpec};
use wormgrid::selector::{select, SelectionRequest, DEFAULT_REQUEST_AD};
use wormgrid::sim::{bundled, run_scenario, to_jsonl, Engine, Scenario, ScenarioOutcome};
use wormgrid::worm::{read_checkpoint, write_checkpoint, SolverState};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn scenario(text: &str) -> Scenario {
    Scenario::from_toml(text).expect("bundled scenario parses")
}

fn run(text: &str) -> Result<ScenarioOutcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_scenario(&scenario(text), dir.path()).map_err(|e| e.to_string())
}

fn fig5_reproduction() -> Check {
    let started = Instant::now();
    let o = run(bundled::FIG5)?;
    let elapsed = started.elapsed();
    let quanta: Vec<_> = o.quanta("worm").collect();
    let violated: Vec<u64> = quanta.iter().filter(|q| q.violation).map(|q| q.quantum).collect();
    ensure!(violated == vec![8, 9, 10], "violations at {violated:?}");
    ensure!(o.migrations.len() == 1, "{} migrations", o.migrations.len());
    let q10 = quanta.iter().find(|q| q.quantum == 10).ok_or("no quantum 10")?;
    let start = o.events_tagged(EventTag::MigrationStarted).next().ok_or("no migration")?;
    ensure!(start.time == q10.time, "migration started at {} but quantum 10 ended at {}", start.time, q10.time);
    ensure!(o.migrations[0].trigger == Trigger::ContractViolation, "trigger {}", o.migrations[0].trigger);
    let rate = |q: u64| quanta.iter().find(|m| m.quantum == q).and_then(|m| m.rate).ok_or(format!("no quantum {q}"));
    let (before, degraded, after) = (rate(7)?, rate(10)?, rate(11)?);
    ensure!(degraded < after && after < before, "rates before {before}, degraded {degraded}, after {after}");
    let again = run(bundled::FIG5)?;
    ensure!(to_jsonl(&o.metrics) == to_jsonl(&again.metrics), "metrics differ between runs");
    ensure!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(())
}

/// Reference detector: recomputes the non-violating average from scratch
/// at every quantum and finds triggers by scanning back.
fn reference_verdicts(rates: &[f64], p: &ContractParams) -> Vec<(f64, bool, bool)> {
    let n = p.consecutive_required as usize;
    let mut out: Vec<(f64, bool, bool)> = Vec::new();
    for (i, &r) in rates.iter().enumerate() {
        if i == 0 {
            out.push((r, false, false));
            continue;
        }
        let good: Vec<f64> = (0..i).filter(|&j| !out[j].1).map(|j| rates[j]).collect();
        let avg = good.iter().fold(0.0, |a, b| a + b) / good.len() as f64;
        let violation = ((avg - r) / avg).max(0.0) > p.degradation_threshold;
        out.push((avg, violation, false));
        let len = out.len();
        let streak = len >= n && out[len - n..].iter().all(|v| v.1);
        let fresh = len == n || (len > n && !out[len - n - 1].1);
        out[len - 1].2 = streak && fresh;
    }
    out
}

fn contract_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let p = ContractParams {
            quantum_seconds: rng.gen_range(1..=120) as f64,
            degradation_threshold: rng.gen_range(1..=99) as f64 / 100.0,
            consecutive_required: rng.gen_range(1..=6),
        };
        let len = rng.gen_range(1..=50);
        let base: f64 = rng.gen_range(1.0..100.0);
        let rates: Vec<f64> = (0..len)
            .map(|_| if rng.gen_bool(0.6) { base * rng.gen_range(0.95..1.05) } else { base * rng.gen_range(0.05..1.0) })
            .collect();
        let mut c = ContractState::init(rates[0], p).map_err(|e| e.to_string())?;
        for &r in &rates[1..] {
            c.observe_rate(r);
        }
        let got: Vec<(f64, bool, bool)> = c.history().iter().map(|v| (v.average, v.violation, v.trigger)).collect();
        ensure!(got == reference_verdicts(&rates, &p), "trial {trial} diverged: {rates:?} {p:?}");
    }
    Ok(())
}

fn random_clique(rng: &mut ChaCha8Rng, name: String) -> Clique {
    let domains = ["cs.uiuc.edu", "ucsd.edu", "anl.gov"];
    let n = rng.gen_range(1..=4);
    let members = (0..n)
        .map(|i| MachineSpec {
            name: format!("{name}-{i}"),
            domain: domains[rng.gen_range(0..3)].into(),
            op_sys: if rng.gen_bool(0.85) { "LINUX" } else { "IRIX" }.into(),
            cpu_count: rng.gen_range(1..=128),
            cpu_speed_mhz: [250.0, 500.0, 875.0, 1000.0][rng.gen_range(0..4)],
            mem_bytes: [1u64, 2, 4, 8, 64][rng.gen_range(0..5)] << 30,
            load: [0.0, 0.5, 1.0, 3.0][rng.gen_range(0..4)],
            iter_rate_factor: 1.0,
        })
        .collect();
    Clique { name, members, link_bandwidth_mbps: 100.0, wan_bandwidth_mbps: 1.0 }
}

fn matchmaking() -> Check {
    let request = parse_ad(DEFAULT_REQUEST_AD).map_err(|e| e.to_string())?;
    let resource = parse_ad(
        r#"[ opSys = "LINUX"; minMemSize = 2G; CPUCount = 64; domains = {"cs.uiuc.edu", "ucsd.edu", "anl.gov"};
             minCPUSpeed = 500; maxCPULoad = 1; ]"#,
    )
    .map_err(|e| e.to_string())?;
    ensure!(check_requirements(&request, &resource) == Ok(true), "synthetic clique does not match");
    let rank = compute_rank(&request, &resource);
    ensure!(rank == 16000.0, "rank {rank}");

    let req = SelectionRequest::new(request.clone(), "acceptance").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hits = 0;
    for trial in 0..1000 {
        let n = rng.gen_range(0..=20);
        let cliques: Vec<Clique> = (0..n).map(|i| random_clique(&mut rng, format!("c{i:02}"))).collect();
        let mut dir = Directory::new();
        for c in &cliques {
            dir.register(c.clone(), 100.0, 0.0).map_err(|e| e.to_string())?;
        }
        let mut best: Option<(&str, f64)> = None;
        for c in &cliques {
            let ad = derive_clique_ad(c, 0.0);
            if check_requirements(&request, &ad) != Ok(true) {
                continue;
            }
            let r = compute_rank(&request, &ad);
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((&c.name, r));
            }
        }
        let got = select(&req, &dir, 0.0).record();
        ensure!(
            got.clique.as_deref() == best.map(|b| b.0) && got.rank == best.map(|b| b.1),
            "trial {trial}: selector {:?}/{:?}, oracle {best:?}",
            got.clique,
            got.rank
        );
        hits += best.is_some() as u32;
    }
    ensure!(hits > 100, "only {hits} trials had any match");
    Ok(())
}

fn fuzz_expr(runner: &mut TestRunner) -> Expr {
    let leaf = proptest::prop_oneof![
        (-1000i64..1000).prop_map(|i| Expr::Literal(Value::Integer(i))),
        (-1000i64..1000).prop_map(|i| Expr::Literal(Value::Real(i as f64 / 8.0))),
        "[a-z ]{0,4}".prop_map(|s| Expr::Literal(Value::Text(s))),
        proptest::prelude::any::<bool>().prop_map(|b| Expr::Literal(Value::Boolean(b))),
        proptest::strategy::Just(Expr::Literal(Value::Undefined)),
        proptest::strategy::Just(Expr::Literal(Value::Error)),
        (0usize..3, proptest::sample::select(vec!["a", "b", "c", "x"])).prop_map(|(s, n)| {
            Expr::attr([Scope::Bare, Scope::SelfAd, Scope::Other][s], n)
        }),
    ];
    let ops = vec![
        BinaryOp::Or, BinaryOp::And, BinaryOp::Eq, BinaryOp::Ne, BinaryOp::Lt, BinaryOp::Le,
        BinaryOp::Gt, BinaryOp::Ge, BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div,
    ];
    let strategy = leaf.prop_recursive(6, 64, 4, move |inner| {
        proptest::prop_oneof![
            (proptest::sample::select(ops.clone()), inner.clone(), inner.clone())
                .prop_map(|(op, l, r)| Expr::binary(op, l, r)),
            (proptest::prelude::any::<bool>(), inner.clone())
                .prop_map(|(not, e)| Expr::unary(if not { UnaryOp::Not } else { UnaryOp::Neg }, e)),
            proptest::collection::vec(inner.clone(), 0..3).prop_map(|args| Expr::Call { name: "Include".into(), args }),
            proptest::collection::vec(inner, 0..3).prop_map(Expr::List),
        ]
    });
    strategy.new_tree(runner).expect("strategy generates").current()
}

fn classad_properties() -> Check {
    let mut corpus: Vec<String> = vec![
        DEFAULT_REQUEST_AD.to_string(),
        include_str!("../ads/request.ad").to_string(),
        r#"[ Type = "resource"; Name = 'mixed quotes'; n = -3; r = -(2.5); k = 4K; b = a | !c & d; l = {}; ]"#.into(),
        "[ x = (1 + 2) * 3 - (4 - 5) / 6; y = other.x >= self.x; z = Include({1, 2}, {2}); ]".into(),
    ];
    for text in bundled::ALL.iter().map(|(_, t)| t) {
        for c in &scenario(text).cliques {
            corpus.push(derive_clique_ad(c, 0.0).to_string());
        }
    }
    for text in &corpus {
        let ad = parse_ad(text).map_err(|e| format!("corpus ad failed to parse: {e}"))?;
        let back = parse_ad(&ad.to_string()).map_err(|e| format!("printed ad failed to parse: {e}"))?;
        ensure!(back == ad, "round trip changed {text}");
    }

    use Value::{Boolean as B, Error as E, Undefined as U};
    let vals = ["true", "false", "undefined", "error"];
    let and = [[B(true), B(false), U, E], [B(false), B(false), B(false), B(false)], [U, B(false), U, E], [E, E, E, E]];
    let or = [[B(true), B(true), B(true), B(true)], [B(true), B(false), U, E], [B(true), U, U, E], [E, E, E, E]];
    let empty = ClassAd::new();
    for (i, l) in vals.iter().enumerate() {
        for (j, r) in vals.iter().enumerate() {
            for (op, table) in [("&&", &and), ("||", &or)] {
                let e = parse_expr(&format!("{l} {op} {r}")).map_err(|e| e.to_string())?;
                let got = evaluate(&e, &empty, &empty);
                ensure!(got == table[i][j], "{l} {op} {r} gave {got}");
            }
        }
    }

    let mut runner = TestRunner::deterministic();
    let ad_a = parse_ad("[a = b + 1; b = a; c = other.a; x = 2G / 0;]").map_err(|e| e.to_string())?;
    let ad_b = parse_ad("[a = 3; b = self.a * other.b; c = {1, \"x\"};]").map_err(|e| e.to_string())?;
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(move || {
        for _ in 0..10_000 {
            let e = fuzz_expr(&mut runner);
            let _ = evaluate(&e, &ad_a, &ad_b);
            let _ = evaluate(&e, &ad_b, &ad_a);
        }
    }));
    ensure!(outcome.is_ok(), "evaluation aborted during fuzzing");
    Ok(())
}

fn checkpoint_restart() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..50 {
        let dims = [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let (k, m) = (rng.gen_range(0..30), rng.gen_range(0..30));
        let start = SolverState::seeded(dims, 0.1, rng.gen(), "acc").map_err(|e| e.to_string())?;
        let mut whole = start.clone();
        whole.advance(k + m);
        let mut split = start;
        split.advance(k);
        let a = dir.path().join(format!("{trial}-a.cwck"));
        let b = dir.path().join(format!("{trial}-b.cwck"));
        write_checkpoint(&split, &a, 0.0).map_err(|e| e.to_string())?;
        write_checkpoint(&split, &b, 5.0).map_err(|e| e.to_string())?;
        let (fa, fb) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
        ensure!(fa == fb, "trial {trial}: repeated writes differ");
        let mut resumed = read_checkpoint(&a).map_err(|e| e.to_string())?;
        resumed.advance(m);
        let bits = |s: &SolverState| s.field.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(
            resumed.iteration == whole.iteration && bits(&resumed) == bits(&whole),
            "trial {trial}: dims {dims:?} k {k} m {m} diverged"
        );
    }
    Ok(())
}

fn migration_cost() -> Check {
    let staged = run(bundled::FIG5)?;
    let s = staged.migrations.first().ok_or("no migration")?;
    ensure!(s.disk_touches == 6, "{} disk touches", s.disk_touches);
    ensure!(s.charged_bytes == 96 << 20, "charged {} bytes", s.charged_bytes);
    ensure!((s.duration_seconds - 200.0).abs() <= 100.0, "duration {}", s.duration_seconds);
    let direct_text = bundled::FIG5.replace("[transfer]", "[transfer]\ndirect = true");
    let direct = run(&direct_text)?;
    let d = direct.migrations.first().ok_or("no direct migration")?;
    ensure!(d.disk_touches == 2, "direct mode: {} disk touches", d.disk_touches);
    ensure!(d.duration_seconds < s.duration_seconds, "direct {} vs staged {}", d.duration_seconds, s.duration_seconds);
    Ok(())
}

fn hibernation_and_recovery() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut engine = Engine::new(scenario(bundled::HIBERNATE), dir.path()).map_err(|e| e.to_string())?;
    engine.run_until(400.0).map_err(|e| e.to_string())?;
    let rec = engine.migrator().record("worm").ok_or("no record")?;
    ensure!(rec.status == RunStatus::Hibernating, "status {} after the only clique died", rec.status);
    let safe = rec.checkpoints.iter().find(|c| c.site == Site::Store).ok_or("no checkpoint in safe storage")?;
    ensure!(engine.migrator().storage().exists(&safe.meta.location), "safe checkpoint missing on disk");
    ensure!(engine.events().iter().any(|e| e.tag == EventTag::Hibernating), "no HIBERNATING event");
    let o = engine.run_to_end().map_err(|e| e.to_string())?;
    let rec = o.record("worm").ok_or("no record")?;
    ensure!(
        rec.status == RunStatus::Running && rec.current_clique.as_deref() == Some("beta"),
        "after registration: {} on {:?}",
        rec.status,
        rec.current_clique
    );

    let crash = run(bundled::CRASH)?;
    let s = scenario(bundled::CRASH);
    let mut expected = SolverState::seeded(s.workload.dims, s.workload.alpha, s.seed, "worm").map_err(|e| e.to_string())?;
    expected.advance(s.workload.iterations.ok_or("crash scenario has no iteration budget")?);
    ensure!(crash.final_states.get("worm") == Some(&expected), "crash recovery diverged from the uninterrupted run");
    ensure!(crash.events_tagged(EventTag::Recovered).count() == 1, "no recovery logged");
    Ok(())
}

fn purge_evacuation() -> Check {
    let o = run(bundled::PURGE)?;
    let started = o.events_tagged(EventTag::EvacuationStarted).next().ok_or("no evacuation")?;
    ensure!(started.time <= 894.0, "evacuation started at {}", started.time);
    let done = o.events_tagged(EventTag::Evacuated).next().ok_or("evacuation never finished")?;
    ensure!(done.time < 1000.0, "evacuated at {}", done.time);
    let purged = o.events_tagged(EventTag::Purged).next().ok_or("no purge")?;
    ensure!(purged.time == 1000.0 && done.time < purged.time, "purge at {}", purged.time);
    let rec = o.record("worm").ok_or("no record")?;
    ensure!(rec.checkpoints.iter().any(|c| c.site == Site::Store), "nothing left in safe storage");
    Ok(())
}

async fn post(state: &control::ControlState, uri: &str, body: &str) -> Result<StatusCode, String> {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .map_err(|e| e.to_string())?;
    let resp = control::router(state.clone()).oneshot(req).await.map_err(|e| e.to_string())?;
    Ok(resp.status())
}

async fn control_plane() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let engine = Engine::new(scenario(bundled::FIG5), dir.path()).map_err(|e| e.to_string())?;
    let (state, _thread) = control::spawn_engine(engine, Pace::Manual);
    state.advance_to(75.0).await.ok_or("engine stopped")?;
    let code = post(&state, "/contract", r#"{"degradation_threshold": 0.25}"#).await?;
    ensure!(code == StatusCode::ACCEPTED, "POST /contract returned {code}");
    state.advance_to(120.0).await.ok_or("engine stopped")?;
    let (v8, v9) = state.snapshot(|p| {
        let q = |n: u64| p.metrics.iter().find(|m| m.quantum == n && m.is_quantum()).map(|m| (m.violation, m.threshold));
        (q(8), q(9))
    });
    ensure!(v8 == Some((true, Some(0.10))), "quantum 8: {v8:?}");
    ensure!(v9 == Some((false, Some(0.25))), "quantum 9: {v9:?}");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let engine = Engine::new(scenario(bundled::FIG5), dir.path()).map_err(|e| e.to_string())?;
    let (state, _thread) = control::spawn_engine(engine, Pace::Manual);
    state.advance_to(35.0).await.ok_or("engine stopped")?;
    let code = post(&state, "/migrate", r#"{"target": "uiuc"}"#).await?;
    ensure!(code == StatusCode::ACCEPTED, "POST /migrate returned {code}");
    state.advance_to(400.0).await.ok_or("engine stopped")?;
    let report = state.snapshot(|p| p.metrics.iter().find_map(|m| m.report.clone()));
    let report = report.ok_or("no migration report")?;
    ensure!(report.trigger == Trigger::Manual && report.target == "uiuc", "{} -> {}", report.trigger, report.target);
    Ok(())
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let results: Vec<(&str, Check)> = vec![
        ("fig5 scenario shape", fig5_reproduction()),
        ("contract detector oracle equivalence", contract_oracle()),
        ("matchmaking correctness", matchmaking()),
        ("classad language properties", classad_properties()),
        ("checkpoint-restart equivalence", checkpoint_restart()),
        ("migration cost accounting", migration_cost()),
        ("hibernation and recovery", hibernation_and_recovery()),
        ("purge evacuation", purge_evacuation()),
        ("control plane", rt.block_on(control_plane())),
    ];
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
