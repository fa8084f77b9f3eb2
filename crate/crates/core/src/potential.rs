//! Potential expressions `V(x)` / `V(x, y)`.
//!
//! Grammar (precedence climbing, loosest first):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right-associative
//! primary := number | 'x' | 'y' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | sqrt | abs
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`, while the
//! exponent may carry its own sign (`2^-1`).

use std::fmt;

use thiserror::Error;

use crate::grid::{Grid, GridError, RealField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("unbalanced parentheses at byte {offset}")]
    Unbalanced { offset: usize },
    #[error("empty expression")]
    Empty,
}

impl ParseError {
    /// Byte offset into the source where the problem was detected.
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::Unbalanced { offset } => *offset,
            ParseError::Empty => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("square root of a negative number in `{0}`")]
    NegativeSqrt(String),
    #[error("negative base with non-integer exponent in `{0}`")]
    NegativeBase(String),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
    #[error("expression uses `y` but the point has only {0} coordinate(s)")]
    MissingCoordinate(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    X,
    Y,
    Pi,
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

/// Canonical, fully parenthesized text. Re-parsing it yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::X => f.write_str("x"),
            Expr::Y => f.write_str("y"),
            Expr::Pi => f.write_str("pi"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

impl Expr {
    fn eval(&self, x: f64, y: Option<f64>, dim: usize) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::X => x,
            Expr::Y => y.ok_or(EvalError::MissingCoordinate(dim))?,
            Expr::Pi => std::f64::consts::PI,
            Expr::Neg(e) => -e.eval(x, y, dim)?,
            Expr::Call(func, e) => {
                let a = e.eval(x, y, dim)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::NegativeSqrt(self.to_string()));
                        }
                        a.sqrt()
                    }
                }
            }
            Expr::Bin(op, l, r) => {
                let a = l.eval(x, y, dim)?;
                let b = r.eval(x, y, dim)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero(self.to_string()));
                        }
                        a / b
                    }
                    BinOp::Pow => {
                        if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
                            if a == 0.0 && b < 0.0 {
                                return Err(EvalError::DivisionByZero(self.to_string()));
                            }
                            a.powi(b as i32)
                        } else if a < 0.0 {
                            return Err(EvalError::NegativeBase(self.to_string()));
                        } else {
                            a.powf(b)
                        }
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(self.to_string()))
        }
    }

    fn uses_y(&self) -> bool {
        match self {
            Expr::Y => true,
            Expr::Num(_) | Expr::X | Expr::Pi => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.uses_y(),
            Expr::Bin(_, l, r) => l.uses_y() || r.uses_y(),
        }
    }
}

/// A parsed, immutable potential expression.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialExpr {
    root: Expr,
}

impl PotentialExpr {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        parse_potential(source)
    }

    /// The free-particle potential `V = 0`.
    pub fn zero() -> Self {
        Self { root: Expr::Num(0.0) }
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }

    pub fn uses_y(&self) -> bool {
        self.root.uses_y()
    }

    /// Evaluates at `point = [x]` or `[x, y]`.
    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        match point {
            [x] => self.root.eval(*x, None, 1),
            [x, y, ..] => self.root.eval(*x, Some(*y), point.len()),
            [] => Err(EvalError::MissingCoordinate(0)),
        }
    }

    /// Samples the potential at every point of `grid`.
    pub fn sample(&self, grid: &Grid) -> Result<RealField, EvalError> {
        let values = (0..grid.len())
            .map(|k| {
                let [x, y] = grid.point(k);
                if grid.dim() == 1 {
                    self.eval(&[x])
                } else {
                    self.eval(&[x, y])
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RealField::new(grid.clone(), values)?)
    }
}

impl fmt::Display for PotentialExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

pub fn parse_potential(source: &str) -> Result<PotentialExpr, ParseError> {
    let tokens = lex(source)?;
    if tokens.len() == 1 {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { tokens, pos: 0, depth: 0 };
    let root = p.expr()?;
    match p.peek() {
        Tok::End => Ok(PotentialExpr { root }),
        Tok::RParen => Err(ParseError::Unbalanced { offset: p.offset() }),
        t => Err(ParseError::Syntax {
            offset: p.offset(),
            message: format!("unexpected {}", t.describe()),
        }),
    }
}

pub fn eval_potential(expr: &PotentialExpr, point: &[f64]) -> Result<f64, EvalError> {
    expr.eval(point)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("operator `{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push((Tok::Op(c as char), i));
                i += 1;
            }
            b'(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            b')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                out.push((Tok::Num(v), start));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: i,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

/// Nesting bound that keeps recursion depth finite on adversarial input.
const MAX_DEPTH: usize = 256;

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseError::Syntax {
                offset: self.offset(),
                message: "expression nested too deeply".into(),
            });
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let e = if *self.peek() == Tok::Op('-') {
            self.bump();
            Expr::Neg(Box::new(self.unary()?))
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(e)
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                self.enter()?;
                let inner = self.expr()?;
                self.depth -= 1;
                self.close_paren(offset)?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "x" => Ok(Expr::X),
                "y" => Ok(Expr::Y),
                "pi" => Ok(Expr::Pi),
                _ => match Func::from_name(&name) {
                    Some(func) => {
                        if *self.peek() != Tok::LParen {
                            return Err(ParseError::Syntax {
                                offset: self.offset(),
                                message: format!("expected `(` after `{name}`"),
                            });
                        }
                        let open = self.offset();
                        self.bump();
                        self.enter()?;
                        let arg = self.expr()?;
                        self.depth -= 1;
                        self.close_paren(open)?;
                        Ok(Expr::Call(func, Box::new(arg)))
                    }
                    None => Err(ParseError::UnknownIdentifier { offset, name }),
                },
            },
            Tok::RParen => Err(ParseError::Unbalanced { offset }),
            t => Err(ParseError::Syntax {
                offset,
                message: format!("expected an operand, found {}", t.describe()),
            }),
        }
    }

    fn close_paren(&mut self, open: usize) -> Result<(), ParseError> {
        match self.peek() {
            Tok::RParen => {
                self.bump();
                Ok(())
            }
            Tok::End => Err(ParseError::Unbalanced { offset: open }),
            t => Err(ParseError::Syntax {
                offset: self.offset(),
                message: format!("expected `)`, found {}", t.describe()),
            }),
        }
    }
}
