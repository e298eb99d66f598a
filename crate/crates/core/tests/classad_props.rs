use proptest::prelude::*;
use proptest::strategy::ValueTree;

use wormgrid::classad::{
    compute_rank, evaluate, parse_ad, parse_expr, BinaryOp, ClassAd, Expr, Scope, UnaryOp, Value,
};
use wormgrid::selector::DEFAULT_REQUEST_AD;

const RESERVED: &[&str] = &["true", "false", "undefined", "error", "other", "self"];

fn name() -> impl Strategy<Value = String> {
    "[a-zA-Z][a-zA-Z0-9_]{0,6}".prop_filter("reserved word", |s| !RESERVED.contains(&s.to_ascii_lowercase().as_str()))
}

fn literal() -> impl Strategy<Value = Value> {
    prop_oneof![
        (-1_000_000_000i64..1_000_000_000).prop_map(Value::Integer),
        (-1_000_000i64..1_000_000).prop_map(|v| Value::Real(v as f64 / 64.0)),
        "[ -~]{0,8}".prop_map(Value::Text),
        any::<bool>().prop_map(Value::Boolean),
        Just(Value::Undefined),
        Just(Value::Error),
    ]
}

fn binary_op() -> impl Strategy<Value = BinaryOp> {
    use BinaryOp::*;
    prop::sample::select(vec![Or, And, Eq, Ne, Lt, Le, Gt, Ge, Add, Sub, Mul, Div])
}

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        literal().prop_map(Expr::Literal),
        (prop::sample::select(vec![Scope::Bare, Scope::SelfAd, Scope::Other]), name())
            .prop_map(|(scope, n)| Expr::attr(scope, n)),
    ];
    leaf.prop_recursive(5, 48, 4, |inner| {
        prop_oneof![
            (prop::sample::select(vec![UnaryOp::Not, UnaryOp::Neg]), inner.clone())
                .prop_map(|(op, e)| Expr::unary(op, e)),
            (binary_op(), inner.clone(), inner.clone()).prop_map(|(op, l, r)| Expr::binary(op, l, r)),
            (prop::sample::select(vec!["Include", "include", "Nope"]), prop::collection::vec(inner.clone(), 0..3))
                .prop_map(|(n, args)| Expr::Call { name: n.to_string(), args }),
            prop::collection::vec(inner, 0..4).prop_map(Expr::List),
        ]
    })
}

/// Ads share a small name pool so references and cycles actually resolve.
fn pooled_ad() -> impl Strategy<Value = ClassAd> {
    let pool = prop::sample::select(vec!["a", "b", "c", "requirements", "rank", "CPUCount"]);
    prop::collection::vec((pool, expr()), 0..6).prop_map(|attrs| {
        let mut ad = ClassAd::new();
        for (n, e) in attrs {
            ad.set(n, e);
        }
        ad
    })
}

fn ad() -> impl Strategy<Value = ClassAd> {
    prop::collection::vec((name(), expr()), 0..6).prop_map(|attrs| {
        let mut ad = ClassAd::new();
        for (n, e) in attrs {
            let _ = ad.insert(n, e);
        }
        ad
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn expr_print_parse_round_trip(e in expr()) {
        let printed = e.to_string();
        let back = parse_expr(&printed).map_err(|err| TestCaseError::fail(format!("{printed}: {err}")))?;
        prop_assert_eq!(back, e);
    }

    #[test]
    fn ad_print_parse_round_trip(a in ad()) {
        let printed = a.to_string();
        let back = parse_ad(&printed).map_err(|err| TestCaseError::fail(format!("{printed}: {err}")))?;
        prop_assert_eq!(back, a);
    }

    #[test]
    fn parser_never_panics(text in "[ -~\\n]{0,64}") {
        let _ = parse_ad(&text);
        let _ = parse_expr(&text);
    }

    #[test]
    fn suffix_law(n in 0i64..1_000_000) {
        let k = evaluate(&parse_expr(&format!("{n}K")).unwrap(), &ClassAd::new(), &ClassAd::new());
        let m = evaluate(&parse_expr(&format!("{n}M")).unwrap(), &ClassAd::new(), &ClassAd::new());
        let g = evaluate(&parse_expr(&format!("{n}G")).unwrap(), &ClassAd::new(), &ClassAd::new());
        prop_assert_eq!(m.as_f64().unwrap(), 1024.0 * k.as_f64().unwrap());
        prop_assert_eq!(g.as_f64().unwrap(), 1024.0 * m.as_f64().unwrap());
        prop_assert_eq!(k, Value::Integer(n * 1024));
    }

    #[test]
    fn fig4_rank_is_monotone(
        speed in 1.0f64..5000.0,
        cpus in 1i64..10_000,
        load in 0.0f64..64.0,
        bump in 0.5f64..100.0,
        extra in 1i64..100,
    ) {
        let req = parse_ad(DEFAULT_REQUEST_AD).unwrap();
        let rank = |s: f64, c: i64, l: f64| {
            compute_rank(&req, &parse_ad(&format!("[minCPUSpeed = {s:?}; CPUCount = {c}; maxCPULoad = {l:?};]")).unwrap())
        };
        let base = rank(speed, cpus, load);
        prop_assert_eq!(base, speed * cpus as f64 / (load + 1.0));
        prop_assert!(rank(speed + bump, cpus, load) > base);
        prop_assert!(rank(speed, cpus + extra, load) > base);
        prop_assert!(rank(speed, cpus, load + bump) < base);
    }
}

#[test]
fn evaluation_is_total_on_fuzzed_input() {
    // 10k random expressions over random ads with shared names (so cycles
    // and cross references occur); every evaluation must return a value.
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = (expr(), pooled_ad(), pooled_ad());
    let mut seen_error = 0;
    for _ in 0..10_000 {
        let (e, me, other) = strategy.new_tree(&mut runner).unwrap().current();
        let v = evaluate(&e, &me, &other);
        if v == Value::Error {
            seen_error += 1;
        }
        for attr in me.iter() {
            let _ = evaluate(&attr.expr, &me, &other);
        }
        let _ = compute_rank(&me, &other);
        let _ = wormgrid::classad::check_requirements(&me, &other);
    }
    assert!(seen_error > 0, "the generator should reach error values");
}

#[test]
fn self_reference_is_an_error_not_a_hang() {
    let ad = parse_ad("[a = b + 1; b = a * 2; c = c;]").unwrap();
    assert_eq!(ad.eval_attr("a"), Value::Error);
    assert_eq!(ad.eval_attr("c"), Value::Error);
}

#[test]
fn three_valued_truth_tables() {
    use Value::{Boolean as B, Error as E, Undefined as U};
    let vals = [("true", B(true)), ("false", B(false)), ("undefined", U), ("error", E)];
    // Expected outcomes, written out by hand: rows are lhs, columns rhs,
    // in the order true, false, undefined, error.
    let and = [
        [B(true), B(false), U, E],
        [B(false), B(false), B(false), B(false)],
        [U, B(false), U, E],
        [E, E, E, E],
    ];
    let or = [
        [B(true), B(true), B(true), B(true)],
        [B(true), B(false), U, E],
        [B(true), U, U, E],
        [E, E, E, E],
    ];
    let empty = ClassAd::new();
    for (i, (l, _)) in vals.iter().enumerate() {
        for (j, (r, _)) in vals.iter().enumerate() {
            for (op, table) in [("&&", &and), ("||", &or), ("&", &and), ("|", &or)] {
                let e = parse_expr(&format!("{l} {op} {r}")).unwrap();
                assert_eq!(evaluate(&e, &empty, &empty), table[i][j], "{l} {op} {r}");
            }
        }
    }
    for (text, v) in &vals {
        let not = evaluate(&parse_expr(&format!("!{text}")).unwrap(), &empty, &empty);
        let want = match v {
            B(b) => B(!b),
            other => other.clone(),
        };
        assert_eq!(not, want, "!{text}");
    }
}

#[test]
fn comparisons_with_undefined_are_undefined() {
    let empty = ClassAd::new();
    for op in ["==", "!=", "<", "<=", ">", ">="] {
        let e = parse_expr(&format!("missing {op} 3")).unwrap();
        assert_eq!(evaluate(&e, &empty, &empty), Value::Undefined, "{op}");
        let e = parse_expr(&format!("error {op} undefined")).unwrap();
        assert_eq!(evaluate(&e, &empty, &empty), Value::Error, "{op}");
    }
}
