//! Closed-form scalar expressions over a point `x` in R^n.
//!
//! Grammar (lowest to highest precedence): comparison (`<`, `>`, `<=`, `>=`,
//! yielding 1 or 0), `+ -`, `* /`, unary sign, right-associative `^`, atoms.
//! Atoms are numbers, `pi`, `e`, coordinates `x1..x4`, the radius `r` (also
//! written `|x|`), `|expr|` for absolute values, parentheses and calls to
//! `sin cos tan atan exp log ln sqrt abs sign min max`.
//!
//! ```
//! use gradpot::expr::Expr;
//! let f = Expr::parse("1/(|x|*log(e/|x|))").unwrap();
//! let v = f.eval(&[0.5, 0.0]);
//! assert!((v - 1.0 / (0.5 * (1.0 + 2f64.ln()))).abs() < 1e-12);
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    source: String,
    root: Node,
}

#[derive(Clone, Debug)]
enum Node {
    Num(f64),
    Coord(usize),
    Radius,
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Lt,
    Gt,
    Le,
    Ge,
}

#[derive(Clone, Copy, Debug)]
enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sign,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "atan" => (Func::Atan, 1),
            "exp" => (Func::Exp, 1),
            "log" | "ln" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "sign" => (Func::Sign, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.comparison()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Parse(format!(
                "unexpected trailing input in expression `{source}`"
            )));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
        })
    }

    /// Expression that evaluates to `v` everywhere.
    pub fn constant(v: f64) -> Self {
        Expr {
            source: format!("{v:?}"),
            root: Node::Num(v),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Number of coordinates referenced (`x3` needs at least 3).
    pub fn required_dim(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Coord(i) => i + 1,
                Node::Num(_) | Node::Radius => 0,
                Node::Neg(a) => walk(a),
                Node::Bin(_, a, b) => walk(a).max(walk(b)),
                Node::Call(_, args) => args.iter().map(walk).max().unwrap_or(0),
            }
        }
        walk(&self.root)
    }

    /// True when the expression does not reference the point at all.
    pub fn is_constant(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Num(_) => true,
                Node::Coord(_) | Node::Radius => false,
                Node::Neg(a) => walk(a),
                Node::Bin(_, a, b) => walk(a) && walk(b),
                Node::Call(_, args) => args.iter().all(walk),
            }
        }
        walk(&self.root)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval(&self.root, x)
    }
}

fn eval(n: &Node, x: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Coord(i) => x.get(*i).copied().unwrap_or(f64::NAN),
        Node::Radius => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Node::Neg(a) => -eval(a, x),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, x), eval(b, x));
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => pow(a, b),
                BinOp::Lt => (a < b) as u8 as f64,
                BinOp::Gt => (a > b) as u8 as f64,
                BinOp::Le => (a <= b) as u8 as f64,
                BinOp::Ge => (a >= b) as u8 as f64,
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], x);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Atan => a.atan(),
                Func::Exp => a.exp(),
                Func::Ln => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Sign => {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Func::Min => a.min(eval(&args[1], x)),
                Func::Max => a.max(eval(&args[1], x)),
            }
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl TryFrom<String> for Expr {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Expr::parse(&s)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> Self {
        e.source
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3; `e` alone stays Euler's number
            if i < chars.len()
                && (chars[i] == 'e' || chars[i] == 'E')
                && i + 1 < chars.len()
                && (chars[i + 1].is_ascii_digit()
                    || ((chars[i + 1] == '-' || chars[i + 1] == '+')
                        && i + 2 < chars.len()
                        && chars[i + 2].is_ascii_digit()))
            {
                i += 2;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let op = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "**" => Some("^"),
                _ => None,
            };
            if let Some(op) = op {
                out.push(Tok::Op(op));
                i += 2;
                continue;
            }
            let op = match c {
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '/' => "/",
                '^' => "^",
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '|' => "|",
                '<' => "<",
                '>' => ">",
                _ => return Err(Error::Parse(format!("unexpected character `{c}`"))),
            };
            out.push(Tok::Op(op));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek_op(&self) -> Option<&'static str> {
        match self.tokens.get(self.pos) {
            Some(Tok::Op(o)) => Some(o),
            _ => None,
        }
    }

    fn expect(&mut self, op: &str) -> Result<()> {
        if self.peek_op() == Some(op) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse(format!("expected `{op}`")))
        }
    }

    fn comparison(&mut self) -> Result<Node> {
        let lhs = self.sum()?;
        let op = match self.peek_op() {
            Some("<") => BinOp::Lt,
            Some(">") => BinOp::Gt,
            Some("<=") => BinOp::Le,
            Some(">=") => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.sum()?;
        Ok(Node::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Node> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek_op() {
                Some("+") => BinOp::Add,
                Some("-") => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek_op() {
                Some("*") => BinOp::Mul,
                Some("/") => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek_op() {
            Some("-") => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some("+") => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek_op() == Some("^") {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::Parse("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Op("(") => {
                let inner = self.comparison()?;
                self.expect(")")?;
                Ok(inner)
            }
            Tok::Op("|") => {
                if let Some(Tok::Ident(name)) = self.tokens.get(self.pos) {
                    if name == "x" && self.tokens.get(self.pos + 1) == Some(&Tok::Op("|")) {
                        self.pos += 2;
                        return Ok(Node::Radius);
                    }
                }
                let inner = self.sum()?;
                self.expect("|")?;
                Ok(Node::Call(Func::Abs, vec![inner]))
            }
            Tok::Ident(name) => self.ident(&name),
            Tok::Op(o) => Err(Error::Parse(format!("unexpected `{o}`"))),
        }
    }

    fn ident(&mut self, name: &str) -> Result<Node> {
        if let Some((func, arity)) = Func::lookup(name) {
            self.expect("(")?;
            let mut args = vec![self.comparison()?];
            while self.peek_op() == Some(",") {
                self.pos += 1;
                args.push(self.comparison()?);
            }
            self.expect(")")?;
            if args.len() != arity {
                return Err(Error::Parse(format!(
                    "`{name}` takes {arity} argument(s), got {}",
                    args.len()
                )));
            }
            return Ok(Node::Call(func, args));
        }
        match name {
            "pi" => Ok(Node::Num(std::f64::consts::PI)),
            "e" => Ok(Node::Num(std::f64::consts::E)),
            "r" => Ok(Node::Radius),
            _ => {
                let idx = name
                    .strip_prefix('x')
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&k| (1..=4).contains(&k))
                    .ok_or_else(|| Error::Parse(format!("unknown identifier `{name}`")))?;
                Ok(Node::Coord(idx - 1))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: &[f64]) -> f64 {
        Expr::parse(s).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1+2*3", &[]), 7.0);
        assert_eq!(ev("-2^2", &[]), -4.0);
        assert_eq!(ev("2^3^2", &[]), 512.0);
        assert_eq!(ev("2^-1", &[]), 0.5);
        assert_eq!(ev("(1+2)*3", &[]), 9.0);
        assert_eq!(ev("8/2/2", &[]), 2.0);
    }

    #[test]
    fn coordinates_radius_and_bars() {
        let x = [3.0, -4.0];
        assert_eq!(ev("x1 + x2", &x), -1.0);
        assert_eq!(ev("|x|", &x), 5.0);
        assert_eq!(ev("r^2", &x), 25.0);
        assert_eq!(ev("|x2|", &x), 4.0);
        assert_eq!(ev("|x1 - 10|", &x), 7.0);
    }

    #[test]
    fn functions_and_comparisons() {
        assert!((ev("sin(pi/2) + log(e)", &[]) - 2.0).abs() < 1e-15);
        assert_eq!(ev("max(1, min(3, 2))", &[]), 2.0);
        assert_eq!(ev("(r < 1) * 5", &[0.5, 0.0]), 5.0);
        assert_eq!(ev("(r < 1) * 5", &[2.0, 0.0]), 0.0);
        assert_eq!(ev("sign(x1)", &[-0.1]), -1.0);
        assert_eq!(ev("1e-3*1000", &[]), 1.0);
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["1+", "x5", "foo(1)", "sin(1,2)", "(1", "1 2", "#"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn dimension_and_constness() {
        let e = Expr::parse("x3 + sin(x1)").unwrap();
        assert_eq!(e.required_dim(), 3);
        assert!(!e.is_constant());
        assert!(Expr::parse("2*pi").unwrap().is_constant());
    }
}
