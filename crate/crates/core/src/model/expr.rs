//! Coefficient expressions: a small arithmetic language over `t, x1..xk`.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := atom ('^' atom)?
//! atom   := number | ident | func '(' expr (',' expr)* ')' | '(' expr ')' | '-' atom
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown identifier `{name}` at {line}:{column}")]
    UnknownIdentifier {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("`{func}` takes {expected} argument(s), got {found} (at {line}:{column})")]
    Arity {
        func: String,
        expected: String,
        found: usize,
        line: usize,
        column: usize,
    },
    #[error("domain error in `{subexpr}`: {message}")]
    Domain { subexpr: String, message: String },
    #[error("state variable x{index} out of range for dimension {dim}")]
    Dimension { index: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Time,
    /// Zero-based state component; `x1` is `State(0)`.
    State(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Abs,
    Sqrt,
    Max,
    Min,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "max" => Func::Max,
            "min" => Func::Min,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Max => "max",
            Func::Min => "min",
        }
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            Func::Max | Func::Min => n >= 2,
            _ => n == 1,
        }
    }

    fn arity_desc(self) -> &'static str {
        match self {
            Func::Max | Func::Min => "at least 2",
            _ => "exactly 1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// A parsed coefficient expression over `t` and the state components.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffExpr {
    ast: Expr,
}

impl CoeffExpr {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        parse_expr(source)
    }

    pub fn constant(value: f64) -> Self {
        CoeffExpr {
            ast: Expr::Const(value),
        }
    }

    pub fn from_ast(ast: Expr) -> Self {
        CoeffExpr { ast }
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// Number of state components the expression needs (0 if it only uses `t`).
    pub fn required_dim(&self) -> usize {
        fn walk(e: &Expr) -> usize {
            match e {
                Expr::Const(_) | Expr::Var(Var::Time) => 0,
                Expr::Var(Var::State(i)) => i + 1,
                Expr::Neg(a) => walk(a),
                Expr::Binary(_, a, b) => walk(a).max(walk(b)),
                Expr::Call(_, args) => args.iter().map(walk).max().unwrap_or(0),
            }
        }
        walk(&self.ast)
    }

    pub fn uses_time(&self) -> bool {
        fn walk(e: &Expr) -> bool {
            match e {
                Expr::Var(Var::Time) => true,
                Expr::Const(_) | Expr::Var(_) => false,
                Expr::Neg(a) => walk(a),
                Expr::Binary(_, a, b) => walk(a) || walk(b),
                Expr::Call(_, args) => args.iter().any(walk),
            }
        }
        walk(&self.ast)
    }

    /// `Some(c)` when the expression is a literal constant.
    pub fn as_const(&self) -> Option<f64> {
        match self.ast {
            Expr::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        eval_node(&self.ast, t, x)
    }
}

impl fmt::Display for CoeffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, &self.ast, 0)
    }
}

pub fn eval_expr(e: &CoeffExpr, t: f64, x: &[f64]) -> Result<f64, ExprError> {
    e.eval(t, x)
}

fn domain(node: &Expr, message: &str) -> ExprError {
    ExprError::Domain {
        subexpr: CoeffExpr::from_ast(node.clone()).to_string(),
        message: message.to_string(),
    }
}

fn eval_node(node: &Expr, t: f64, x: &[f64]) -> Result<f64, ExprError> {
    let v = match node {
        Expr::Const(c) => *c,
        Expr::Var(Var::Time) => t,
        Expr::Var(Var::State(i)) => *x.get(*i).ok_or(ExprError::Dimension {
            index: i + 1,
            dim: x.len(),
        })?,
        Expr::Neg(a) => -eval_node(a, t, x)?,
        Expr::Binary(op, a, b) => {
            let l = eval_node(a, t, x)?;
            let r = eval_node(b, t, x)?;
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r == 0.0 {
                        return Err(domain(node, "division by zero"));
                    }
                    l / r
                }
                BinOp::Pow => {
                    if l < 0.0 && r.fract() != 0.0 {
                        return Err(domain(node, "negative base with non-integer exponent"));
                    }
                    if l == 0.0 && r < 0.0 {
                        return Err(domain(node, "zero raised to a negative power"));
                    }
                    // integer exponents go through powi so that x^2 is exactly x*x
                    if r.fract() == 0.0 && r.abs() <= i32::MAX as f64 {
                        l.powi(r as i32)
                    } else {
                        l.powf(r)
                    }
                }
            }
        }
        Expr::Call(func, args) => match func {
            Func::Exp => eval_node(&args[0], t, x)?.exp(),
            Func::Log => {
                let a = eval_node(&args[0], t, x)?;
                if a <= 0.0 {
                    return Err(domain(node, "logarithm of a non-positive number"));
                }
                a.ln()
            }
            Func::Abs => eval_node(&args[0], t, x)?.abs(),
            Func::Sqrt => {
                let a = eval_node(&args[0], t, x)?;
                if a < 0.0 {
                    return Err(domain(node, "square root of a negative number"));
                }
                a.sqrt()
            }
            Func::Max | Func::Min => {
                let mut acc = eval_node(&args[0], t, x)?;
                for a in &args[1..] {
                    let v = eval_node(a, t, x)?;
                    acc = if *func == Func::Max {
                        acc.max(v)
                    } else {
                        acc.min(v)
                    };
                }
                acc
            }
        },
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain(node, "result is not finite"))
    }
}

// ---- printing ----

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_ATOM: u8 = 4;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => PREC_SUM,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => PREC_PRODUCT,
        Expr::Binary(BinOp::Pow, ..) => 3,
        Expr::Const(c) if *c < 0.0 => PREC_SUM,
        _ => PREC_ATOM,
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    let paren = precedence(e) < min_prec;
    if paren {
        f.write_str("(")?;
    }
    match e {
        Expr::Const(c) => write!(f, "{c}")?,
        Expr::Var(Var::Time) => f.write_str("t")?,
        Expr::Var(Var::State(i)) => write!(f, "x{}", i + 1)?,
        Expr::Neg(a) => {
            f.write_str("-")?;
            write_expr(f, a, PREC_ATOM)?;
        }
        Expr::Binary(op, a, b) => {
            let (sym, p) = match op {
                BinOp::Add => (" + ", PREC_SUM),
                BinOp::Sub => (" - ", PREC_SUM),
                BinOp::Mul => (" * ", PREC_PRODUCT),
                BinOp::Div => (" / ", PREC_PRODUCT),
                BinOp::Pow => ("^", 3),
            };
            if *op == BinOp::Pow {
                write_expr(f, a, PREC_ATOM)?;
                f.write_str(sym)?;
                write_expr(f, b, PREC_ATOM)?;
            } else {
                write_expr(f, a, p)?;
                f.write_str(sym)?;
                write_expr(f, b, p + 1)?;
            }
        }
        Expr::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (n, a) in args.iter().enumerate() {
                if n > 0 {
                    f.write_str(", ")?;
                }
                write_expr(f, a, 0)?;
            }
            f.write_str(")")?;
        }
    }
    if paren {
        f.write_str(")")?;
    }
    Ok(())
}

// ---- lexing and parsing ----

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(source: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut column) = (1, 1);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            column = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            column += 1;
            continue;
        }
        let start = i;
        let (tl, tc) = (line, column);
        if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                line: tl,
                column: tc,
                message: format!("malformed number `{text}`"),
            })?;
            out.push(Token {
                tok: Tok::Num(value),
                line: tl,
                column: tc,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            out.push(Token {
                tok: Tok::Sym(c),
                line: tl,
                column: tc,
            });
        } else {
            return Err(ExprError::Syntax {
                line: tl,
                column: tc,
                message: format!("unexpected character `{c}`"),
            });
        }
        column += i - start;
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.tok != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, message: impl Into<String>) -> ExprError {
        let t = self.peek();
        let message = if t.tok == Tok::End {
            format!("{} at end of input", message.into())
        } else {
            message.into()
        };
        ExprError::Syntax {
            line: t.line,
            column: t.column,
            message,
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.peek().tok == Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.error_here(format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek().tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek().tok == Tok::Sym('^') {
            self.bump();
            let exponent = self.atom()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let tok = self.peek().clone();
        match tok.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Tok::Sym('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.atom()?)))
            }
            Tok::Sym('(') => {
                self.bump();
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.peek().tok == Tok::Sym(',') {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if !func.arity_ok(args.len()) {
                        return Err(ExprError::Arity {
                            func: name,
                            expected: func.arity_desc().to_string(),
                            found: args.len(),
                            line: tok.line,
                            column: tok.column,
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "t" {
                    return Ok(Expr::Var(Var::Time));
                }
                if let Some(digits) = name.strip_prefix('x') {
                    if let Ok(idx) = digits.parse::<usize>() {
                        if idx >= 1 && !digits.starts_with('0') {
                            return Ok(Expr::Var(Var::State(idx - 1)));
                        }
                    }
                }
                Err(ExprError::UnknownIdentifier {
                    name,
                    line: tok.line,
                    column: tok.column,
                })
            }
            _ => Err(self.error_here("expected a number, identifier, `(` or `-`")),
        }
    }
}

pub fn parse_expr(source: &str) -> Result<CoeffExpr, ExprError> {
    let mut parser = Parser {
        tokens: lex(source)?,
        pos: 0,
    };
    let ast = parser.expr()?;
    if parser.peek().tok != Tok::End {
        return Err(parser.error_here("unexpected trailing input"));
    }
    Ok(CoeffExpr { ast })
}
