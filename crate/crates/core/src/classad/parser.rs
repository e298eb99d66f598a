use super::lexer::{tokenize, Tok, Token};
use super::{BinaryOp, ClassAd, Expr, Scope, UnaryOp, Value, KEYWORD_RANK, KEYWORD_REQUIREMENTS};

const MAX_NESTING: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("duplicate attribute `{name}` at line {line}, column {column}")]
    Duplicate { name: String, line: usize, column: usize },
}

/// Parses `[ name = expr; ... ]`.
///
/// A `requirements` or `rank` attribute whose value is a single quoted
/// string is parsed a second time as an expression, so both
/// `requirements = other.x > 1;` and `requirements = "other.x > 1";` work.
pub fn parse_ad(text: &str) -> Result<ClassAd, ParseError> {
    let mut p = Parser::new(tokenize(text)?);
    let ad = p.ad()?;
    p.expect_eof()?;
    Ok(ad)
}

/// Parses a standalone expression.
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(tokenize(text)?);
    let e = p.expr()?;
    p.expect_eof()?;
    Ok(e)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn new(toks: Vec<Token>) -> Self {
        Self { toks, pos: 0, depth: 0 }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, message: impl Into<String>) -> ParseError {
        let t = &self.toks[self.pos];
        ParseError::Syntax { line: t.line, column: t.column, message: message.into() }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ParseError> {
        if *self.peek() == want {
            Ok(self.advance())
        } else {
            Err(self.error_here(format!("expected {what}, found {}", describe(self.peek()))))
        }
    }

    fn expect_eof(&self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Eof => Ok(()),
            t => Err(self.error_here(format!("unexpected {} after end of input", describe(t)))),
        }
    }

    fn ad(&mut self) -> Result<ClassAd, ParseError> {
        self.expect(Tok::LBracket, "`[`")?;
        let mut ad = ClassAd::new();
        while *self.peek() != Tok::RBracket {
            let at = self.advance();
            let name = match at.tok {
                Tok::Ident(name) => name,
                other => {
                    return Err(ParseError::Syntax {
                        line: at.line,
                        column: at.column,
                        message: format!("expected attribute name, found {}", describe(&other)),
                    })
                }
            };
            self.expect(Tok::Assign, "`=`")?;
            let value_at = self.toks[self.pos].clone();
            let mut expr = self.expr()?;
            if name.eq_ignore_ascii_case(KEYWORD_REQUIREMENTS) || name.eq_ignore_ascii_case(KEYWORD_RANK) {
                if let Expr::Literal(Value::Text(src)) = &expr {
                    expr = parse_expr(src).map_err(|e| match e {
                        ParseError::Syntax { line, column, message } => ParseError::Syntax {
                            line: value_at.line,
                            column: value_at.column,
                            message: format!("in quoted `{name}` expression at {line}:{column}: {message}"),
                        },
                        dup => dup,
                    })?;
                }
            }
            if ad.insert(name.clone(), expr).is_err() {
                return Err(ParseError::Duplicate { name, line: at.line, column: at.column });
            }
            // The final `;` before `]` is optional.
            if *self.peek() == Tok::Semi {
                self.advance();
            } else if *self.peek() != Tok::RBracket {
                return Err(self.error_here(format!("expected `;`, found {}", describe(self.peek()))));
            }
        }
        self.advance();
        Ok(ad)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            return Err(self.error_here("expression nested too deeply"));
        }
        let e = self.binary(1);
        self.depth -= 1;
        e
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = binary_op(self.peek()) {
            if op.precedence() < min_prec {
                break;
            }
            self.advance();
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Tok::Bang => {
                self.advance();
                let e = self.nested(Self::unary)?;
                Ok(Expr::unary(UnaryOp::Not, e))
            }
            Tok::Minus => {
                self.advance();
                // A minus directly before a number is part of the literal.
                match *self.peek() {
                    Tok::Int(v) => {
                        self.advance();
                        Ok(Expr::Literal(Value::Integer((-v) as i64)))
                    }
                    Tok::Real(v) => {
                        self.advance();
                        Ok(Expr::Literal(Value::Real(-v)))
                    }
                    _ => {
                        let e = self.nested(Self::unary)?;
                        Ok(Expr::unary(UnaryOp::Neg, e))
                    }
                }
            }
            Tok::Plus => {
                self.advance();
                self.nested(Self::unary)
            }
            _ => self.primary(),
        }
    }

    fn nested(&mut self, f: fn(&mut Self) -> Result<Expr, ParseError>) -> Result<Expr, ParseError> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            return Err(self.error_here("expression nested too deeply"));
        }
        let e = f(self);
        self.depth -= 1;
        e
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.advance();
        let err = |message: String| ParseError::Syntax { line: t.line, column: t.column, message };
        match t.tok {
            Tok::Int(v) => {
                let v = i64::try_from(v).map_err(|_| err("integer literal out of range".into()))?;
                Ok(Expr::Literal(Value::Integer(v)))
            }
            Tok::Real(v) => Ok(Expr::Literal(Value::Real(v))),
            Tok::Str(s) => Ok(Expr::Literal(Value::Text(s))),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::LBrace => {
                let items = self.comma_list(Tok::RBrace, "`}`")?;
                Ok(Expr::List(items))
            }
            Tok::Ident(name) => {
                let lower = name.to_ascii_lowercase();
                if *self.peek() == Tok::Dot && (lower == "other" || lower == "self") {
                    self.advance();
                    let scope = if lower == "other" { Scope::Other } else { Scope::SelfAd };
                    let at = self.advance();
                    return match at.tok {
                        Tok::Ident(attr) => Ok(Expr::Attr { scope, name: attr }),
                        other => Err(ParseError::Syntax {
                            line: at.line,
                            column: at.column,
                            message: format!("expected attribute name after `{name}.`, found {}", describe(&other)),
                        }),
                    };
                }
                if *self.peek() == Tok::LParen {
                    self.advance();
                    let args = self.comma_list(Tok::RParen, "`)`")?;
                    return Ok(Expr::Call { name, args });
                }
                Ok(match lower.as_str() {
                    "true" => Expr::Literal(Value::Boolean(true)),
                    "false" => Expr::Literal(Value::Boolean(false)),
                    "undefined" => Expr::Literal(Value::Undefined),
                    "error" => Expr::Literal(Value::Error),
                    _ => Expr::Attr { scope: Scope::Bare, name },
                })
            }
            other => Err(err(format!("expected expression, found {}", describe(&other)))),
        }
    }

    fn comma_list(&mut self, close: Tok, what: &str) -> Result<Vec<Expr>, ParseError> {
        let mut items = Vec::new();
        if *self.peek() == close {
            self.advance();
            return Ok(items);
        }
        loop {
            items.push(self.expr()?);
            if *self.peek() == Tok::Comma {
                self.advance();
                continue;
            }
            self.expect(close, what)?;
            return Ok(items);
        }
    }
}

fn binary_op(t: &Tok) -> Option<BinaryOp> {
    Some(match t {
        Tok::OrOr => BinaryOp::Or,
        Tok::AndAnd => BinaryOp::And,
        Tok::EqEq => BinaryOp::Eq,
        Tok::NotEq => BinaryOp::Ne,
        Tok::Lt => BinaryOp::Lt,
        Tok::Le => BinaryOp::Le,
        Tok::Gt => BinaryOp::Gt,
        Tok::Ge => BinaryOp::Ge,
        Tok::Plus => BinaryOp::Add,
        Tok::Minus => BinaryOp::Sub,
        Tok::Star => BinaryOp::Mul,
        Tok::Slash => BinaryOp::Div,
        _ => return None,
    })
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Int(v) => format!("number `{v}`"),
        Tok::Real(v) => format!("number `{v}`"),
        Tok::Str(_) => "string literal".into(),
        Tok::Eof => "end of input".into(),
        other => format!("`{}`", symbol(other)),
    }
}

fn symbol(t: &Tok) -> &'static str {
    match t {
        Tok::LBracket => "[",
        Tok::RBracket => "]",
        Tok::LBrace => "{",
        Tok::RBrace => "}",
        Tok::LParen => "(",
        Tok::RParen => ")",
        Tok::Semi => ";",
        Tok::Comma => ",",
        Tok::Dot => ".",
        Tok::Assign => "=",
        Tok::EqEq => "==",
        Tok::NotEq => "!=",
        Tok::Lt => "<",
        Tok::Le => "<=",
        Tok::Gt => ">",
        Tok::Ge => ">=",
        Tok::AndAnd => "&&",
        Tok::OrOr => "||",
        Tok::Bang => "!",
        Tok::Plus => "+",
        Tok::Minus => "-",
        Tok::Star => "*",
        Tok::Slash => "/",
        _ => "?",
    }
}
