//! Scalar expressions over decision variables `x1..xn` and uncertainty
//! components `xi1..xiu`.
//!
//! Grammar, loosest to tightest:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?          (right-associative)
//! atom  := number | x<k> | xi<k> | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! so `-x1^2` is `-(x1^2)` and `2^3^2` is `2^(3^2)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{column}: expected {}, found {found}", expected.join(" | "))]
    SyntaxError {
        line: usize,
        column: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unknown identifier `{name}` at {line}:{column}")]
    UnknownIdentifier {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("`{name}` at {line}:{column} is out of range (limit {limit})")]
    IndexOutOfRange {
        name: String,
        limit: usize,
        line: usize,
        column: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{0}`")]
    DomainError(String),
    #[error("division by zero in `{0}`")]
    DivideByZero(String),
    #[error("not differentiable at this point: `{0}`")]
    NonDifferentiable(String),
    #[error("dimension mismatch: {what} expects {expected}, got {got}")]
    DimensionError {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// Decision variable, 0-based.
    X(usize),
    /// Uncertainty component, 0-based.
    Xi(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Abs,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
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
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl fmt::Display for Node {
    /// Fully parenthesized; reparses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v}"),
            Node::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            Node::Var(Var::Xi(i)) => write!(f, "xi{}", i + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl Node {
    fn visit(&self, f: &mut impl FnMut(&Node)) {
        f(self);
        match self {
            Node::Num(_) | Node::Var(_) => {}
            Node::Neg(a) | Node::Call(_, a) => a.visit(f),
            Node::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    fn any(&self, pred: impl Fn(&Node) -> bool) -> bool {
        let mut hit = false;
        self.visit(&mut |n| hit |= pred(n));
        hit
    }

    fn has_x(&self) -> bool {
        self.any(|n| matches!(n, Node::Var(Var::X(_))))
    }

    fn map_abs(&self, eps: f64) -> Node {
        match self {
            Node::Num(_) | Node::Var(_) => self.clone(),
            Node::Neg(a) => Node::Neg(Box::new(a.map_abs(eps))),
            Node::Bin(op, a, b) => Node::Bin(*op, Box::new(a.map_abs(eps)), Box::new(b.map_abs(eps))),
            Node::Call(Func::Abs, a) => {
                let a = a.map_abs(eps);
                let sq = Node::Bin(BinOp::Pow, Box::new(a), Box::new(Node::Num(2.0)));
                let sum = Node::Bin(BinOp::Add, Box::new(sq), Box::new(Node::Num(eps * eps)));
                Node::Call(Func::Sqrt, Box::new(sum))
            }
            Node::Call(func, a) => Node::Call(*func, Box::new(a.map_abs(eps))),
        }
    }
}

/// A parsed expression together with the dimensions it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    n: usize,
    u: usize,
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl Expression {
    pub fn parse(source: &str, n: usize, u: usize) -> Result<Expression, ParseError> {
        let tokens = lex(source)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            n,
            u,
        };
        let root = p.expr()?;
        p.expect_end()?;
        Ok(Expression { root, n, u })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn uses_xi(&self) -> bool {
        self.root.any(|n| matches!(n, Node::Var(Var::Xi(_))))
    }

    pub fn contains_abs(&self) -> bool {
        self.root.any(|n| matches!(n, Node::Call(Func::Abs, _)))
    }

    /// The same expression checked against `u = 0`; `None` if it mentions xi.
    pub fn without_xi(&self) -> Option<Expression> {
        if self.uses_xi() {
            return None;
        }
        Some(Expression {
            root: self.root.clone(),
            n: self.n,
            u: 0,
        })
    }

    /// Replaces every `abs(t)` by `sqrt(t^2 + eps^2)`.
    pub fn smooth_abs(&self, eps: f64) -> Expression {
        Expression {
            root: self.root.map_abs(eps),
            n: self.n,
            u: self.u,
        }
    }

    fn check_dims(&self, x: &[f64], xi: &[f64]) -> Result<(), EvalError> {
        if x.len() != self.n {
            return Err(EvalError::DimensionError {
                what: "x",
                expected: self.n,
                got: x.len(),
            });
        }
        if xi.len() != self.u {
            return Err(EvalError::DimensionError {
                what: "xi",
                expected: self.u,
                got: xi.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Result<f64, EvalError> {
        self.check_dims(x, xi)?;
        eval_node(&self.root, x, xi)
    }

    /// Exact forward-mode gradient with respect to the decision variables.
    pub fn gradient(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.value_and_gradient(x, xi).map(|(_, g)| g)
    }

    pub fn value_and_gradient(&self, x: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self.check_dims(x, xi)?;
        let d = diff_node(&self.root, x, xi)?;
        let grad = d.grad.unwrap_or_else(|| vec![0.0; self.n]);
        Ok((d.value, grad))
    }
}

pub fn parse(source: &str, n: usize, u: usize) -> Result<Expression, ParseError> {
    Expression::parse(source, n, u)
}

// ---------------------------------------------------------------------------
// lexer

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
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (tline, tcol) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            match text.parse::<f64>() {
                Ok(v) => Tok::Num(v),
                Err(_) => {
                    return Err(ParseError::SyntaxError {
                        line: tline,
                        column: tcol,
                        expected: vec!["number".into()],
                        found: format!("`{text}`"),
                    })
                }
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else {
            i += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(ParseError::SyntaxError {
                        line: tline,
                        column: tcol,
                        expected: vec!["operator, operand or parenthesis".into()],
                        found: format!("`{c}`"),
                    })
                }
            }
        };
        col += i - start;
        out.push(Token {
            tok,
            line: tline,
            column: tcol,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column: col,
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    n: usize,
    u: usize,
}

const OPERAND: &[&str] = &["number", "variable", "function", "`(`", "`-`"];

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        let t = self.peek();
        ParseError::SyntaxError {
            line: t.line,
            column: t.column,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.tok.describe(),
        }
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.peek().tok == Tok::End {
            Ok(())
        } else {
            Err(self.error(&["operator", "end of input"]))
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek().tok == Tok::Op('-') {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.peek().tok == Tok::Op('^') {
            self.bump();
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if self.peek().tok != Tok::RParen {
                    return Err(self.error(&["`)`"]));
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(ref name) => {
                self.bump();
                if let Some(func) = Func::from_name(name) {
                    if self.peek().tok != Tok::LParen {
                        return Err(self.error(&["`(`"]));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if self.peek().tok != Tok::RParen {
                        return Err(self.error(&["`)`"]));
                    }
                    self.bump();
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                self.variable(name, t.line, t.column)
            }
            _ => Err(self.error(OPERAND)),
        }
    }

    fn variable(&self, name: &str, line: usize, column: usize) -> Result<Node, ParseError> {
        let (prefix, limit, make): (&str, usize, fn(usize) -> Var) =
            if let Some(rest) = name.strip_prefix("xi") {
                if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(unknown(name, line, column));
                }
                ("xi", self.u, Var::Xi)
            } else if let Some(rest) = name.strip_prefix('x') {
                if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(unknown(name, line, column));
                }
                ("x", self.n, Var::X)
            } else {
                return Err(unknown(name, line, column));
            };
        let index: usize = name[prefix.len()..]
            .parse()
            .map_err(|_| unknown(name, line, column))?;
        if index == 0 || index > limit {
            return Err(ParseError::IndexOutOfRange {
                name: name.to_owned(),
                limit,
                line,
                column,
            });
        }
        Ok(Node::Var(make(index - 1)))
    }
}

fn unknown(name: &str, line: usize, column: usize) -> ParseError {
    ParseError::UnknownIdentifier {
        name: name.to_owned(),
        line,
        column,
    }
}

// ---------------------------------------------------------------------------
// evaluation

fn integral(e: f64) -> Option<i64> {
    (e.fract() == 0.0 && e.abs() <= (1u64 << 53) as f64).then_some(e as i64)
}

/// `base^k` by binary exponentiation for integer `k`.
fn powi_exact(base: f64, k: i64) -> Option<f64> {
    let mut e = k.unsigned_abs();
    let (mut acc, mut b) = (1.0, base);
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    if k < 0 {
        if acc == 0.0 {
            return None;
        }
        acc = 1.0 / acc;
    }
    Some(acc)
}

fn pow(base: f64, exp: f64, node: &Node) -> Result<f64, EvalError> {
    if let Some(k) = integral(exp) {
        return powi_exact(base, k).ok_or_else(|| EvalError::DivideByZero(node.to_string()));
    }
    if base < 0.0 {
        return Err(EvalError::DomainError(node.to_string()));
    }
    if base == 0.0 && exp < 0.0 {
        return Err(EvalError::DivideByZero(node.to_string()));
    }
    Ok(base.powf(exp))
}

fn apply(func: Func, a: f64, node: &Node) -> Result<f64, EvalError> {
    Ok(match func {
        Func::Exp => a.exp(),
        Func::Log if a > 0.0 => a.ln(),
        Func::Sqrt if a >= 0.0 => a.sqrt(),
        Func::Log | Func::Sqrt => return Err(EvalError::DomainError(node.to_string())),
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Abs => a.abs(),
    })
}

fn eval_node(node: &Node, x: &[f64], xi: &[f64]) -> Result<f64, EvalError> {
    Ok(match node {
        Node::Num(v) => *v,
        Node::Var(Var::X(i)) => x[*i],
        Node::Var(Var::Xi(i)) => xi[*i],
        Node::Neg(a) => -eval_node(a, x, xi)?,
        Node::Call(func, a) => apply(*func, eval_node(a, x, xi)?, node)?,
        Node::Bin(op, a, b) => {
            let (a, b) = (eval_node(a, x, xi)?, eval_node(b, x, xi)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(EvalError::DivideByZero(node.to_string()));
                    }
                    a / b
                }
                BinOp::Pow => pow(a, b, node)?,
            }
        }
    })
}

/// Value with an optional gradient; `None` means identically zero.
struct Dual {
    value: f64,
    grad: Option<Vec<f64>>,
}

impl Dual {
    fn constant(value: f64) -> Dual {
        Dual { value, grad: None }
    }
}

fn scale(g: &Option<Vec<f64>>, s: f64) -> Option<Vec<f64>> {
    g.as_ref().map(|g| g.iter().map(|v| v * s).collect())
}

fn axpy(a: Option<Vec<f64>>, s: f64, b: &Option<Vec<f64>>) -> Option<Vec<f64>> {
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(a),
        (None, Some(_)) => scale(b, s),
        (Some(mut a), Some(b)) => {
            a.iter_mut().zip(b).for_each(|(ai, bi)| *ai += s * bi);
            Some(a)
        }
    }
}

fn diff_node(node: &Node, x: &[f64], xi: &[f64]) -> Result<Dual, EvalError> {
    Ok(match node {
        Node::Num(v) => Dual::constant(*v),
        Node::Var(Var::Xi(i)) => Dual::constant(xi[*i]),
        Node::Var(Var::X(i)) => {
            let mut g = vec![0.0; x.len()];
            g[*i] = 1.0;
            Dual {
                value: x[*i],
                grad: Some(g),
            }
        }
        Node::Neg(a) => {
            let a = diff_node(a, x, xi)?;
            Dual {
                value: -a.value,
                grad: scale(&a.grad, -1.0),
            }
        }
        Node::Call(func, inner) => {
            let a = diff_node(inner, x, xi)?;
            let value = apply(*func, a.value, node)?;
            if a.grad.is_none() {
                return Ok(Dual::constant(value));
            }
            let nondiff = || EvalError::NonDifferentiable(node.to_string());
            let slope = match func {
                Func::Exp => value,
                Func::Log => 1.0 / a.value,
                Func::Sqrt if value == 0.0 => return Err(nondiff()),
                Func::Sqrt => 0.5 / value,
                Func::Sin => a.value.cos(),
                Func::Cos => -a.value.sin(),
                Func::Abs if a.value == 0.0 => return Err(nondiff()),
                Func::Abs => a.value.signum(),
            };
            Dual {
                value,
                grad: scale(&a.grad, slope),
            }
        }
        Node::Bin(op, l, r) => {
            let (a, b) = (diff_node(l, x, xi)?, diff_node(r, x, xi)?);
            match op {
                BinOp::Add => Dual {
                    value: a.value + b.value,
                    grad: axpy(a.grad, 1.0, &b.grad),
                },
                BinOp::Sub => Dual {
                    value: a.value - b.value,
                    grad: axpy(a.grad, -1.0, &b.grad),
                },
                BinOp::Mul => Dual {
                    value: a.value * b.value,
                    grad: axpy(scale(&a.grad, b.value), a.value, &b.grad),
                },
                BinOp::Div => {
                    if b.value == 0.0 {
                        return Err(EvalError::DivideByZero(node.to_string()));
                    }
                    let q = a.value / b.value;
                    Dual {
                        value: q,
                        grad: axpy(scale(&a.grad, 1.0 / b.value), -q / b.value, &b.grad),
                    }
                }
                BinOp::Pow => diff_pow(a, b, node, !r.has_x())?,
            }
        }
    })
}

fn diff_pow(a: Dual, b: Dual, node: &Node, const_exp: bool) -> Result<Dual, EvalError> {
    let value = pow(a.value, b.value, node)?;
    if const_exp {
        // power rule; b does not depend on x
        let grad = match a.grad {
            None => None,
            Some(_) if b.value == 0.0 => None,
            Some(_) => {
                if a.value == 0.0 && b.value < 1.0 {
                    return Err(EvalError::NonDifferentiable(node.to_string()));
                }
                let slope = b.value * pow(a.value, b.value - 1.0, node)?;
                scale(&a.grad, slope)
            }
        };
        return Ok(Dual { value, grad });
    }
    // a^b = exp(b ln a)
    if a.value <= 0.0 {
        return Err(EvalError::DomainError(node.to_string()));
    }
    let ln = a.value.ln();
    let grad = axpy(scale(&a.grad, value * b.value / a.value), value * ln, &b.grad);
    Ok(Dual { value, grad })
}
