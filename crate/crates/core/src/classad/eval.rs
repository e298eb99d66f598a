use std::cmp::Ordering;

use super::{BinaryOp, ClassAd, Expr, Scope, UnaryOp, Value, KEYWORD_RANK, KEYWORD_REQUIREMENTS};

const MAX_DEPTH: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatchError {
    #[error("request ad has no `requirements` attribute")]
    MissingRequirements,
}

/// Outcome of a successful match between a request and a resource.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matched: bool,
    pub rank: f64,
    pub resource_name: String,
}

/// Evaluates `expr` with `self_ad` as the owning ad and `other_ad` as the
/// candidate. Never fails: type errors yield `Value::Error` and missing
/// attributes yield `Value::Undefined`.
pub fn evaluate(expr: &Expr, self_ad: &ClassAd, other_ad: &ClassAd) -> Value {
    Evaluator::default().eval(expr, self_ad, other_ad)
}

/// Both sides' `requirements` must evaluate to `true`. The resource side is
/// only checked when it carries a `requirements` attribute.
pub fn check_requirements(request: &ClassAd, resource: &ClassAd) -> Result<bool, MatchError> {
    let req = request.get(KEYWORD_REQUIREMENTS).ok_or(MatchError::MissingRequirements)?;
    if !evaluate(req, request, resource).is_true() {
        return Ok(false);
    }
    Ok(match resource.get(KEYWORD_REQUIREMENTS) {
        Some(theirs) => evaluate(theirs, resource, request).is_true(),
        None => true,
    })
}

/// The request's `rank` evaluated against `resource`; anything that is not a
/// finite number counts as 0.
pub fn compute_rank(request: &ClassAd, resource: &ClassAd) -> f64 {
    let Some(rank) = request.get(KEYWORD_RANK) else {
        return 0.0;
    };
    match evaluate(rank, request, resource).as_f64() {
        Some(r) if r.is_finite() => r,
        _ => 0.0,
    }
}

/// `Ok(None)` when requirements fail.
pub fn match_ads(request: &ClassAd, resource: &ClassAd) -> Result<Option<MatchResult>, MatchError> {
    if !check_requirements(request, resource)? {
        return Ok(None);
    }
    let resource_name = match resource.eval_attr("Name") {
        Value::Text(s) => s,
        _ => String::new(),
    };
    Ok(Some(MatchResult { matched: true, rank: compute_rank(request, resource), resource_name }))
}

#[derive(Default)]
struct Evaluator {
    /// Attributes currently being evaluated, keyed by owning ad and
    /// lowercased name; revisiting one means a reference cycle.
    active: Vec<(*const ClassAd, String)>,
    depth: usize,
}

impl Evaluator {
    fn eval(&mut self, expr: &Expr, me: &ClassAd, other: &ClassAd) -> Value {
        if self.depth >= MAX_DEPTH {
            return Value::Error;
        }
        self.depth += 1;
        let v = self.eval_inner(expr, me, other);
        self.depth -= 1;
        v
    }

    fn eval_inner(&mut self, expr: &Expr, me: &ClassAd, other: &ClassAd) -> Value {
        match expr {
            Expr::Literal(v) => v.clone(),
            Expr::Attr { scope, name } => {
                let (owner, candidate) = match scope {
                    Scope::Other => (other, me),
                    Scope::Bare | Scope::SelfAd => (me, other),
                };
                self.lookup(name, owner, candidate)
            }
            Expr::List(items) => Value::List(items.iter().map(|e| self.eval(e, me, other)).collect()),
            Expr::Unary { op, expr } => {
                let v = self.eval(expr, me, other);
                match (op, v) {
                    (_, Value::Undefined) => Value::Undefined,
                    (UnaryOp::Not, Value::Boolean(b)) => Value::Boolean(!b),
                    (UnaryOp::Neg, Value::Integer(i)) => i.checked_neg().map_or(Value::Error, Value::Integer),
                    (UnaryOp::Neg, Value::Real(r)) => Value::Real(-r),
                    _ => Value::Error,
                }
            }
            Expr::Binary { op: BinaryOp::And, lhs, rhs } => self.and(lhs, rhs, me, other),
            Expr::Binary { op: BinaryOp::Or, lhs, rhs } => self.or(lhs, rhs, me, other),
            Expr::Binary { op, lhs, rhs } => {
                let l = self.eval(lhs, me, other);
                let r = self.eval(rhs, me, other);
                match op {
                    BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => arithmetic(*op, l, r),
                    _ => compare(*op, l, r),
                }
            }
            Expr::Call { name, args } => self.call(name, args, me, other),
        }
    }

    fn lookup(&mut self, name: &str, owner: &ClassAd, candidate: &ClassAd) -> Value {
        let Some(expr) = owner.get(name) else {
            return Value::Undefined;
        };
        let key = (owner as *const ClassAd, name.to_ascii_lowercase());
        if self.active.contains(&key) {
            return Value::Error;
        }
        self.active.push(key);
        let v = self.eval(expr, owner, candidate);
        self.active.pop();
        v
    }

    fn and(&mut self, lhs: &Expr, rhs: &Expr, me: &ClassAd, other: &ClassAd) -> Value {
        let l = self.eval(lhs, me, other);
        match l {
            Value::Boolean(false) => Value::Boolean(false),
            Value::Boolean(true) | Value::Undefined => match self.eval(rhs, me, other) {
                Value::Boolean(false) => Value::Boolean(false),
                Value::Boolean(true) => l,
                Value::Undefined => Value::Undefined,
                _ => Value::Error,
            },
            _ => Value::Error,
        }
    }

    fn or(&mut self, lhs: &Expr, rhs: &Expr, me: &ClassAd, other: &ClassAd) -> Value {
        let l = self.eval(lhs, me, other);
        match l {
            Value::Boolean(true) => Value::Boolean(true),
            Value::Boolean(false) | Value::Undefined => match self.eval(rhs, me, other) {
                Value::Boolean(true) => Value::Boolean(true),
                Value::Boolean(false) => l,
                Value::Undefined => Value::Undefined,
                _ => Value::Error,
            },
            _ => Value::Error,
        }
    }

    fn call(&mut self, name: &str, args: &[Expr], me: &ClassAd, other: &ClassAd) -> Value {
        let args: Vec<Value> = args.iter().map(|a| self.eval(a, me, other)).collect();
        if name.eq_ignore_ascii_case("include") {
            return include(&args);
        }
        Value::Error
    }
}

/// `Include(list, sublist)`: true iff every element of `sublist` is in `list`.
fn include(args: &[Value]) -> Value {
    let [list, sub] = args else {
        return Value::Error;
    };
    match (list, sub) {
        (Value::Error, _) | (_, Value::Error) => Value::Error,
        (Value::Undefined, _) | (_, Value::Undefined) => Value::Undefined,
        (Value::List(list), Value::List(sub)) => {
            Value::Boolean(sub.iter().all(|want| list.iter().any(|have| same_element(have, want))))
        }
        _ => Value::Error,
    }
}

fn same_element(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => x.eq_ignore_ascii_case(y),
        (Value::Boolean(x), Value::Boolean(y)) => x == y,
        (Value::Integer(x), Value::Integer(y)) => x == y,
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

fn finite(r: f64) -> Value {
    if r.is_finite() {
        Value::Real(r)
    } else {
        Value::Error
    }
}

fn arithmetic(op: BinaryOp, l: Value, r: Value) -> Value {
    match (&l, &r) {
        (Value::Error, _) | (_, Value::Error) => return Value::Error,
        (Value::Undefined, _) | (_, Value::Undefined) => return Value::Undefined,
        _ => {}
    }
    if op == BinaryOp::Div {
        return match (l.as_f64(), r.as_f64()) {
            (Some(_), Some(d)) if d == 0.0 => Value::Error,
            (Some(n), Some(d)) => finite(n / d),
            _ => Value::Error,
        };
    }
    if let (Value::Integer(a), Value::Integer(b)) = (&l, &r) {
        let v = match op {
            BinaryOp::Add => a.checked_add(*b),
            BinaryOp::Sub => a.checked_sub(*b),
            _ => a.checked_mul(*b),
        };
        return v.map_or(Value::Error, Value::Integer);
    }
    match (l.as_f64(), r.as_f64()) {
        (Some(a), Some(b)) => finite(match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            _ => a * b,
        }),
        _ => Value::Error,
    }
}

fn compare(op: BinaryOp, l: Value, r: Value) -> Value {
    let ord = match (&l, &r) {
        (Value::Error, _) | (_, Value::Error) => return Value::Error,
        (Value::Undefined, _) | (_, Value::Undefined) => return Value::Undefined,
        (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
        (Value::Text(a), Value::Text(b)) => a.to_ascii_lowercase().cmp(&b.to_ascii_lowercase()),
        (Value::Boolean(a), Value::Boolean(b)) => {
            return match op {
                BinaryOp::Eq => Value::Boolean(a == b),
                BinaryOp::Ne => Value::Boolean(a != b),
                _ => Value::Error,
            }
        }
        _ => match (l.as_f64(), r.as_f64()) {
            (Some(a), Some(b)) => match a.partial_cmp(&b) {
                Some(o) => o,
                None => return Value::Error,
            },
            _ => return Value::Error,
        },
    };
    Value::Boolean(match op {
        BinaryOp::Eq => ord == Ordering::Equal,
        BinaryOp::Ne => ord != Ordering::Equal,
        BinaryOp::Lt => ord == Ordering::Less,
        BinaryOp::Le => ord != Ordering::Greater,
        BinaryOp::Gt => ord == Ordering::Greater,
        BinaryOp::Ge => ord != Ordering::Less,
        _ => unreachable!("not a comparison: {op:?}"),
    })
}
