//! Arithmetic expressions over `x`, `y`: `+ - * / ^`, unary minus, parentheses, the
//! functions `sin cos exp log abs min max` and the constants `pi`, `e`.
//!
//! `^` is right associative and binds tighter than unary minus, so `-x^2 = -(x^2)`.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    X,
    Y,
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Min,
    Max,
}

impl Func {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// Byte offset into the source.
    pub pos: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at column {}: {}", self.pos + 1, self.msg)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                    j += 1;
                }
                if j < b.len() && (b[j] as char).is_ascii_digit() {
                    i = j;
                    while i < b.len() && (b[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v = text.parse::<f64>().map_err(|_| ParseError { pos: start, msg: format!("malformed number '{text}'") })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            return Err(ParseError { pos: i, msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    k: usize,
    end: usize,
}

impl Parser {
    fn pos(&self) -> usize {
        self.toks.get(self.k).map_or(self.end, |t| t.0)
    }

    fn peek_sym(&self, c: char) -> bool {
        matches!(self.toks.get(self.k), Some((_, Tok::Sym(s))) if *s == c)
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek_sym(c) {
            self.k += 1;
            Ok(())
        } else {
            Err(ParseError { pos: self.pos(), msg: format!("expected '{c}'") })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                Op::Add
            } else if self.peek_sym('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            self.k += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                Op::Mul
            } else if self.peek_sym('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            self.k += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek_sym('-') {
            self.k += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.peek_sym('+') {
            self.k += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek_sym('^') {
            self.k += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let Some((_, tok)) = self.toks.get(self.k).cloned() else {
            return Err(ParseError { pos, msg: "unexpected end of expression".into() });
        };
        self.k += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Sym(c) => Err(ParseError { pos, msg: format!("unexpected '{c}'") }),
            Tok::Ident(name) => match name.as_str() {
                "x" => Ok(Expr::X),
                "y" => Ok(Expr::Y),
                "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                "e" => Ok(Expr::Num(std::f64::consts::E)),
                _ => {
                    let f = Func::from_name(&name).ok_or_else(|| ParseError { pos, msg: format!("unknown name '{name}'") })?;
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.peek_sym(',') {
                        self.k += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != f.arity() {
                        return Err(ParseError { pos, msg: format!("'{name}' takes {} argument(s), got {}", f.arity(), args.len()) });
                    }
                    Ok(Expr::Call(f, args))
                }
            },
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, k: 0, end: src.len() };
        let e = p.expr()?;
        if p.k != p.toks.len() {
            return Err(ParseError { pos: p.pos(), msg: "trailing input".into() });
        }
        Ok(e)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::X => x,
            Expr::Y => y,
            Expr::Neg(a) => -a.eval(x, y),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x, y), b.eval(x, y));
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a / b,
                    Op::Pow => a.powf(b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, y);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(x, y)),
                    Func::Max => a.max(args[1].eval(x, y)),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64, y: f64) -> f64 {
        Expr::parse(s).unwrap().eval(x, y)
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("-x^2", 3.0, 0.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0, 0.0), 9.0);
        assert_eq!(ev("x / 2 / 2", 8.0, 0.0), 2.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
    }

    #[test]
    fn functions_and_constants() {
        assert!((ev("sin(pi * x)", 0.5, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(ev("max(x, y) - min(x, y)", 1.0, 4.0), 3.0);
        assert!((ev("log(e)", 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(ev("abs(-2.5e-1)", 0.0, 0.0), 0.25);
        assert!((ev("exp(0) + cos(0)", 0.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_position() {
        let e = Expr::parse("1 + foo(x)").unwrap_err();
        assert_eq!(e.pos, 4);
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("(1 + 2").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("x $ 2").is_err());
    }
}
