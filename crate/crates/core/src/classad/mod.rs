//! A small ClassAd dialect used for resource matchmaking.
//!
//! An ad is an ordered list of `name = expression;` pairs wrapped in
//! brackets. Evaluation is three-valued: besides ordinary values there is
//! `Undefined` (a reference to an attribute that does not exist) and `Error`
//! (an ill-typed operation). Evaluation never fails; problems surface as
//! values.
//!
//! ```
//! use wormgrid::classad::{parse_ad, check_requirements};
//!
//! let request = parse_ad(r#"[ requirements = other.size > 3; ]"#).unwrap();
//! let resource = parse_ad("[ size = 5; ]").unwrap();
//! assert!(check_requirements(&request, &resource).unwrap());
//! ```

mod eval;
mod lexer;
mod parser;

use std::fmt;

pub use eval::{check_requirements, compute_rank, evaluate, match_ads, MatchError};
pub use parser::{parse_ad, parse_expr, ParseError};

/// Attribute names the parser treats specially.
pub const KEYWORD_TYPE: &str = "Type";
pub const KEYWORD_OWNER: &str = "Owner";
pub const KEYWORD_REQUIREMENTS: &str = "requirements";
pub const KEYWORD_RANK: &str = "rank";

/// Result of evaluating an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Integer(i64),
    Real(f64),
    Text(String),
    Boolean(bool),
    List(Vec<Value>),
    Undefined,
    Error,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Value::Boolean(true))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Integer(_) => "integer",
            Value::Real(_) => "real",
            Value::Text(_) => "string",
            Value::Boolean(_) => "boolean",
            Value::List(_) => "list",
            Value::Undefined => "undefined",
            Value::Error => "error",
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:?}"),
            Value::Text(s) => write_quoted(f, s),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::List(items) => {
                f.write_str("{ ")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(" }")
            }
            Value::Undefined => f.write_str("undefined"),
            Value::Error => f.write_str("error"),
        }
    }
}

/// Which ad an attribute reference resolves against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    /// A plain `name`, resolved in the ad that owns the expression.
    Bare,
    /// `self.name`
    SelfAd,
    /// `other.name`, resolved in the candidate ad.
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Or => "||",
            BinaryOp::And => "&&",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq | BinaryOp::Ne => 3,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div => 6,
        }
    }
}

const UNARY_PRECEDENCE: u8 = 7;
const PRIMARY_PRECEDENCE: u8 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Attr { scope: Scope, name: String },
    Unary { op: UnaryOp, expr: Box<Expr> },
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Call { name: String, args: Vec<Expr> },
    List(Vec<Expr>),
}

impl Expr {
    pub fn attr(scope: Scope, name: impl Into<String>) -> Self {
        Expr::Attr { scope, name: name.into() }
    }

    pub fn unary(op: UnaryOp, expr: Expr) -> Self {
        Expr::Unary { op, expr: Box::new(expr) }
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    pub fn text(s: impl Into<String>) -> Self {
        Expr::Literal(Value::Text(s.into()))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary { op, .. } => op.precedence(),
            Expr::Unary { .. } => UNARY_PRECEDENCE,
            // A negative numeric literal prints with a leading minus.
            Expr::Literal(Value::Integer(i)) if *i < 0 => UNARY_PRECEDENCE,
            Expr::Literal(Value::Real(r)) if r.is_sign_negative() => UNARY_PRECEDENCE,
            _ => PRIMARY_PRECEDENCE,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => write!(f, "{v}"),
            Expr::Attr { scope, name } => match scope {
                Scope::Bare => f.write_str(name),
                Scope::SelfAd => write!(f, "self.{name}"),
                Scope::Other => write!(f, "other.{name}"),
            },
            Expr::Unary { op, expr } => {
                let sym = match op {
                    UnaryOp::Not => "!",
                    UnaryOp::Neg => "-",
                };
                f.write_str(sym)?;
                // `-5` would re-parse as a negative literal, so numeric
                // operands of an explicit negation keep their parentheses.
                let numeric = matches!(**expr, Expr::Literal(Value::Integer(_) | Value::Real(_)));
                write_child(f, expr, numeric || expr.precedence() < UNARY_PRECEDENCE)
            }
            Expr::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                write_child(f, lhs, lhs.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, rhs, rhs.precedence() <= p)
            }
            Expr::Call { name, args } => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::List(items) => {
                if items.is_empty() {
                    return f.write_str("{}");
                }
                f.write_str("{ ")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(" }")
            }
        }
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub expr: Expr,
}

/// Ordered attribute map. Lookups ignore ASCII case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassAd {
    attrs: Vec<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("duplicate attribute `{0}`")]
pub struct DuplicateAttribute(pub String);

impl ClassAd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an attribute, rejecting names already present.
    pub fn insert(&mut self, name: impl Into<String>, expr: Expr) -> Result<(), DuplicateAttribute> {
        let name = name.into();
        if self.contains(&name) {
            return Err(DuplicateAttribute(name));
        }
        self.attrs.push(Attribute { name, expr });
        Ok(())
    }

    /// Inserts or replaces an attribute, keeping its original position.
    pub fn set(&mut self, name: impl Into<String>, expr: Expr) {
        let name = name.into();
        match self.attrs.iter_mut().find(|a| a.name.eq_ignore_ascii_case(&name)) {
            Some(a) => a.expr = expr,
            None => self.attrs.push(Attribute { name, expr }),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Expr> {
        self.attrs
            .iter()
            .find(|a| a.name.eq_ignore_ascii_case(name))
            .map(|a| &a.expr)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn remove(&mut self, name: &str) -> Option<Expr> {
        let idx = self.attrs.iter().position(|a| a.name.eq_ignore_ascii_case(name))?;
        Some(self.attrs.remove(idx).expr)
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.attrs.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|a| a.name.as_str())
    }

    /// Evaluates an attribute of this ad with no candidate ad.
    pub fn eval_attr(&self, name: &str) -> Value {
        match self.get(name) {
            Some(e) => evaluate(e, self, &ClassAd::new()),
            None => Value::Undefined,
        }
    }
}

/// Canonical form: one attribute per line, double-quoted strings, `&&`/`||`.
impl fmt::Display for ClassAd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[")?;
        for a in &self.attrs {
            writeln!(f, "  {} = {};", a.name, a.expr)?;
        }
        write!(f, "]")
    }
}
