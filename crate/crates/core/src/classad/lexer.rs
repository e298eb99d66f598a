use super::parser::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Semi,
    Comma,
    Dot,
    Assign,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Plus,
    Minus,
    Star,
    Slash,
    Ident(String),
    /// Integer magnitude; kept wide so `-9223372036854775808` can be folded.
    Int(i128),
    Real(f64),
    Str(String),
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl Cursor<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }
}

fn suffix_multiplier(c: char) -> Option<i128> {
    match c {
        'K' | 'k' => Some(1 << 10),
        'M' | 'm' => Some(1 << 20),
        'G' | 'g' => Some(1 << 30),
        _ => None,
    }
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut cur = Cursor { chars: src.chars().peekable(), line: 1, column: 1 };
    let mut out = Vec::new();
    loop {
        while matches!(cur.peek(), Some(c) if c.is_whitespace()) {
            cur.bump();
        }
        let (line, column) = (cur.line, cur.column);
        let err = |message: String| ParseError::Syntax { line, column, message };
        let Some(c) = cur.bump() else {
            out.push(Token { tok: Tok::Eof, line, column });
            return Ok(out);
        };
        let tok = match c {
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ';' => Tok::Semi,
            ',' => Tok::Comma,
            '.' => Tok::Dot,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => {
                if cur.peek() == Some('/') {
                    while !matches!(cur.peek(), None | Some('\n')) {
                        cur.bump();
                    }
                    continue;
                }
                Tok::Slash
            }
            '=' => {
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::EqEq
                } else {
                    Tok::Assign
                }
            }
            '!' => {
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::NotEq
                } else {
                    Tok::Bang
                }
            }
            '<' => {
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::Le
                } else {
                    Tok::Lt
                }
            }
            '>' => {
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::Ge
                } else {
                    Tok::Gt
                }
            }
            // `&` and `&&` are synonyms, likewise `|` and `||`.
            '&' => {
                if cur.peek() == Some('&') {
                    cur.bump();
                }
                Tok::AndAnd
            }
            '|' => {
                if cur.peek() == Some('|') {
                    cur.bump();
                }
                Tok::OrOr
            }
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                loop {
                    match cur.bump() {
                        None => return Err(err("unterminated string literal".into())),
                        Some(ch) if ch == quote => break,
                        Some('\\') => match cur.bump() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some(e @ ('\\' | '"' | '\'')) => s.push(e),
                            Some(e) => return Err(err(format!("unknown escape `\\{e}`"))),
                            None => return Err(err("unterminated string literal".into())),
                        },
                        Some(ch) => s.push(ch),
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_digit() => lex_number(c, &mut cur).map_err(err)?,
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::from(c);
                while let Some(n) = cur.peek() {
                    if n.is_ascii_alphanumeric() || n == '_' {
                        s.push(n);
                        cur.bump();
                    } else {
                        break;
                    }
                }
                Tok::Ident(s)
            }
            other => return Err(err(format!("unexpected character `{other}`"))),
        };
        out.push(Token { tok, line, column });
    }
}

fn lex_number(first: char, cur: &mut Cursor<'_>) -> Result<Tok, String> {
    let mut text = String::from(first);
    let mut is_real = false;
    while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
        text.push(cur.bump().unwrap());
    }
    if cur.peek() == Some('.') {
        // Only a fraction when a digit follows; `1.` is rejected below.
        text.push(cur.bump().unwrap());
        is_real = true;
        if !matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            return Err(format!("malformed number `{text}`"));
        }
        while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            text.push(cur.bump().unwrap());
        }
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        text.push(cur.bump().unwrap());
        is_real = true;
        if matches!(cur.peek(), Some('+' | '-')) {
            text.push(cur.bump().unwrap());
        }
        if !matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            return Err(format!("malformed exponent in `{text}`"));
        }
        while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            text.push(cur.bump().unwrap());
        }
    }
    let multiplier = match cur.peek().and_then(suffix_multiplier) {
        Some(m) => {
            cur.bump();
            m
        }
        None => 1,
    };
    if matches!(cur.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
        return Err(format!("invalid suffix after number `{text}`"));
    }
    if is_real {
        let v: f64 = text.parse().map_err(|_| format!("malformed number `{text}`"))?;
        let v = v * multiplier as f64;
        if !v.is_finite() {
            return Err(format!("number `{text}` out of range"));
        }
        Ok(Tok::Real(v))
    } else {
        let v: i128 = text.parse().map_err(|_| format!("integer `{text}` out of range"))?;
        let v = v
            .checked_mul(multiplier)
            .filter(|v| *v <= i64::MAX as i128 + 1)
            .ok_or_else(|| format!("integer `{text}` out of range"))?;
        Ok(Tok::Int(v))
    }
}
