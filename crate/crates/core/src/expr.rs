//! A small expression language for drift, diffusion, rate and Lyapunov formulas.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := NUMBER | 'i' | 'x' ('[' INDEX ']')? | 'SEG0' ('[' INDEX ']')?
//!         | 'SEGR' ('[' INDEX ']')? | 'SUPNORM' | 'INTABS'
//!         | func '(' expr (',' expr)? ')' | '(' expr ')' | '-' factor
//! func   := abs | exp | log | pow | min | max
//! ```
//!
//! Indices are 1-based; a bare `x`, `SEG0` or `SEGR` means component 1.
//! Point expressions (`x`, `i`) are used for coefficients; segment expressions
//! (`SEG0`, `SEGR`, `SUPNORM`, `INTABS`, `i`) for switching rates.

use std::fmt;

use thiserror::Error;

use crate::segment::{euclid, SegmentPath};

/// Which free symbols an expression may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExprKind {
    Point,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Exp,
    Log,
    Pow,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Pow => "pow",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Abs | Func::Exp | Func::Log => 1,
            Func::Pow | Func::Min | Func::Max => 2,
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "pow" => Func::Pow,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Regime,
    /// Point coordinate, 0-based internally.
    X(usize),
    Seg0(usize),
    SegR(usize),
    SupNorm,
    IntAbs,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>, Option<Box<Expr>>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("symbol `{symbol}` at position {pos} is not allowed in a {kind:?} expression")]
    KindMismatch { pos: usize, symbol: String, kind: ExprKind },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive argument {0}")]
    LogDomain(f64),
    #[error("non-finite result")]
    NonFinite,
    #[error("component index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },
}

/// Values of the free symbols at one evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct Scope<'a> {
    pub regime: usize,
    pub x: &'a [f64],
    pub seg0: &'a [f64],
    pub segr: &'a [f64],
    pub sup_norm: f64,
    pub int_abs: f64,
}

impl<'a> Scope<'a> {
    pub fn point(x: &'a [f64], regime: usize) -> Self {
        Scope { regime, x, seg0: x, segr: x, sup_norm: euclid(x), int_abs: 0.0 }
    }

    pub fn segment(seg: &'a SegmentPath, regime: usize) -> Self {
        Scope {
            regime,
            x: seg.current(),
            seg0: seg.current(),
            segr: seg.oldest(),
            sup_norm: seg.sup_norm(),
            int_abs: seg.int_abs(),
        }
    }

    /// The constant segment `φ ≡ x` on `[-delay, 0]`.
    pub fn constant_segment(x: &'a [f64], delay: f64, regime: usize) -> Self {
        let n = euclid(x);
        Scope { regime, x, seg0: x, segr: x, sup_norm: n, int_abs: delay * n }
    }
}

impl Expr {
    pub fn parse(text: &str, kind: ExprKind) -> Result<Expr, ParseError> {
        let mut p = Parser { src: text.as_bytes(), pos: 0, kind };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn evaluate(&self, s: &Scope<'_>) -> Result<f64, EvalError> {
        let v = self.eval_raw(s)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn eval_raw(&self, s: &Scope<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Regime => s.regime as f64,
            Expr::X(k) => component(s.x, *k)?,
            Expr::Seg0(k) => component(s.seg0, *k)?,
            Expr::SegR(k) => component(s.segr, *k)?,
            Expr::SupNorm => s.sup_norm,
            Expr::IntAbs => s.int_abs,
            Expr::Neg(a) => -a.eval_raw(s)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval_raw(s)?, b.eval_raw(s)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                }
            }
            Expr::Call(f, a, b) => {
                let a = a.eval_raw(s)?;
                let b = match b {
                    Some(b) => b.eval_raw(s)?,
                    None => 0.0,
                };
                match f {
                    Func::Abs => a.abs(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(EvalError::LogDomain(a));
                        }
                        a.ln()
                    }
                    Func::Pow => {
                        let v = a.powf(b);
                        if v.is_nan() {
                            return Err(EvalError::NonFinite);
                        }
                        v
                    }
                    Func::Min => a.min(b),
                    Func::Max => a.max(b),
                }
            }
        })
    }

    fn any(&self, pred: &impl Fn(&Expr) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Neg(a) => a.any(pred),
            Expr::Bin(_, a, b) => a.any(pred) || b.any(pred),
            Expr::Call(_, a, b) => a.any(pred) || b.as_ref().is_some_and(|b| b.any(pred)),
            _ => false,
        }
    }

    pub fn uses_regime(&self) -> bool {
        self.any(&|e| matches!(e, Expr::Regime))
    }

    /// True when the expression reads the segment only through `φ(0)`.
    pub fn is_past_independent(&self) -> bool {
        !self.any(&|e| matches!(e, Expr::SegR(_) | Expr::SupNorm | Expr::IntAbs))
    }

    /// Largest 0-based component index referenced, if any.
    pub fn max_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        self.visit(&mut |e| {
            if let Expr::X(k) | Expr::Seg0(k) | Expr::SegR(k) = e {
                best = Some(best.map_or(*k, |b| b.max(*k)));
            }
        });
        best
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(a) => a.visit(f),
            Expr::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Call(_, a, b) => {
                a.visit(f);
                if let Some(b) = b {
                    b.visit(f);
                }
            }
            _ => {}
        }
    }

    /// Rewrites segment symbols into point symbols (`SEG0`, `SEGR` → `x`).
    /// Only meaningful for past-independent expressions.
    pub fn to_point(&self) -> Expr {
        match self {
            Expr::Seg0(k) | Expr::SegR(k) => Expr::X(*k),
            Expr::Neg(a) => Expr::Neg(Box::new(a.to_point())),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.to_point()), Box::new(b.to_point())),
            Expr::Call(f, a, b) => Expr::Call(*f, Box::new(a.to_point()), b.as_ref().map(|b| Box::new(b.to_point()))),
            other => other.clone(),
        }
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Add, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Mul, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

#[inline]
fn component(v: &[f64], k: usize) -> Result<f64, EvalError> {
    v.get(k).copied().ok_or(EvalError::Index { index: k + 1, dim: v.len() })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(-{:?})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Regime => f.write_str("i"),
            Expr::X(k) => write!(f, "x[{}]", k + 1),
            Expr::Seg0(k) => write!(f, "SEG0[{}]", k + 1),
            Expr::SegR(k) => write!(f, "SEGR[{}]", k + 1),
            Expr::SupNorm => f.write_str("SUPNORM"),
            Expr::IntAbs => f.write_str("INTABS"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => '+',
                    BinOp::Sub => '-',
                    BinOp::Mul => '*',
                    BinOp::Div => '/',
                };
                write!(f, "({a} {sym} {b})")
            }
            Expr::Call(func, a, b) => match b {
                Some(b) => write!(f, "{}({a}, {b})", func.name()),
                None => write!(f, "{}({a})", func.name()),
            },
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    kind: ExprKind,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ParseError {
        ParseError::Syntax { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.symbol(),
            Some(c) => Err(self.err(&format!("unexpected character `{}`", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            let b = *p;
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
            *p - b
        };
        let mut p = self.pos;
        let mut n = digits(&mut p);
        if p < s.len() && s[p] == b'.' {
            p += 1;
            n += digits(&mut p);
        }
        if n == 0 {
            return Err(self.err("malformed number"));
        }
        if p < s.len() && (s[p] == b'e' || s[p] == b'E') {
            let mut q = p + 1;
            if q < s.len() && (s[q] == b'+' || s[q] == b'-') {
                q += 1;
            }
            if digits(&mut q) == 0 {
                self.pos = q;
                return Err(self.err("malformed exponent"));
            }
            p = q;
        }
        self.pos = p;
        let text = std::str::from_utf8(&s[start..p]).expect("ascii");
        text.parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| ParseError::Syntax { pos: start, msg: format!("bad number `{text}`") })
    }

    fn ident(&mut self) -> (usize, &str) {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        (start, std::str::from_utf8(&self.src[start..self.pos]).expect("ascii"))
    }

    fn index(&mut self) -> Result<usize, ParseError> {
        if !self.eat(b'[') {
            return Ok(0);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let idx: usize =
            text.parse().map_err(|_| ParseError::Syntax { pos: start, msg: "expected a component index".into() })?;
        if idx == 0 {
            return Err(ParseError::Syntax { pos: start, msg: "component indices start at 1".into() });
        }
        self.expect(b']')?;
        Ok(idx - 1)
    }

    fn require(&self, pos: usize, symbol: &str, want: ExprKind) -> Result<(), ParseError> {
        if self.kind == want {
            Ok(())
        } else {
            Err(ParseError::KindMismatch { pos, symbol: symbol.to_string(), kind: self.kind })
        }
    }

    fn symbol(&mut self) -> Result<Expr, ParseError> {
        let (pos, name) = self.ident();
        let name = name.to_string();
        match name.as_str() {
            "i" => Ok(Expr::Regime),
            "x" => {
                self.require(pos, "x", ExprKind::Point)?;
                Ok(Expr::X(self.index()?))
            }
            "SEG0" => {
                self.require(pos, "SEG0", ExprKind::Segment)?;
                Ok(Expr::Seg0(self.index()?))
            }
            "SEGR" => {
                self.require(pos, "SEGR", ExprKind::Segment)?;
                Ok(Expr::SegR(self.index()?))
            }
            "SUPNORM" => {
                self.require(pos, "SUPNORM", ExprKind::Segment)?;
                Ok(Expr::SupNorm)
            }
            "INTABS" => {
                self.require(pos, "INTABS", ExprKind::Segment)?;
                Ok(Expr::IntAbs)
            }
            other => {
                let func = Func::from_name(other)
                    .ok_or_else(|| ParseError::Syntax { pos, msg: format!("unknown identifier `{other}`") })?;
                self.expect(b'(')?;
                let a = self.expr()?;
                let b = if self.eat(b',') { Some(Box::new(self.expr()?)) } else { None };
                let got = 1 + usize::from(b.is_some());
                if got != func.arity() {
                    return Err(ParseError::Syntax {
                        pos,
                        msg: format!("`{}` takes {} argument(s), got {got}", func.name(), func.arity()),
                    });
                }
                self.expect(b')')?;
                Ok(Expr::Call(func, Box::new(a), b))
            }
        }
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(text: &str, x: f64, i: usize) -> f64 {
        Expr::parse(text, ExprKind::Point).unwrap().evaluate(&Scope::point(&[x], i)).unwrap()
    }

    #[test]
    fn documented_examples() {
        let e = Expr::parse("1/(1+SUPNORM)", ExprKind::Segment).unwrap();
        let zero = SegmentPath::constant(1.0, 10, &[0.0]).unwrap();
        assert_eq!(e.evaluate(&Scope::segment(&zero, 1)).unwrap(), 1.0);

        let e = Expr::parse("2*INTABS", ExprKind::Segment).unwrap();
        let one = SegmentPath::constant(1.0, 10, &[1.0]).unwrap();
        assert!((e.evaluate(&Scope::segment(&one, 1)).unwrap() - 2.0).abs() < 1e-14);

        assert_eq!(pt("x*(1-x)", 0.5, 1), 0.25);
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(pt("1+2*3", 0.0, 1), 7.0);
        assert_eq!(pt("(1+2)*3", 0.0, 1), 9.0);
        assert_eq!(pt("8/4/2", 0.0, 1), 1.0);
        assert_eq!(pt("1-2-3", 0.0, 1), -4.0);
        assert_eq!(pt("--2", 0.0, 1), 2.0);
        assert_eq!(pt("-x*x", 3.0, 1), -9.0);
        assert_eq!(pt("pow(2, 10) + min(i, 3) + max(-1, abs(x))", -5.0, 7), 1024.0 + 3.0 + 5.0);
        assert!((pt("log(exp(1.5))", 0.0, 1) - 1.5).abs() < 1e-15);
        assert_eq!(pt("2.5e-1 + 1E1", 0.0, 1), 10.25);
        assert_eq!(pt("i*i", 0.0, 4), 16.0);
        let e = Expr::parse("x[2] - x", ExprKind::Point).unwrap();
        assert_eq!(e.evaluate(&Scope::point(&[1.0, 5.0], 1)).unwrap(), 4.0);
    }

    #[test]
    fn evaluation_errors_are_reported() {
        let e = Expr::parse("1/(x-1)", ExprKind::Point).unwrap();
        assert_eq!(e.evaluate(&Scope::point(&[1.0], 1)), Err(EvalError::DivisionByZero));
        let e = Expr::parse("log(x)", ExprKind::Point).unwrap();
        assert_eq!(e.evaluate(&Scope::point(&[0.0], 1)), Err(EvalError::LogDomain(0.0)));
        let e = Expr::parse("x[3]", ExprKind::Point).unwrap();
        assert!(matches!(e.evaluate(&Scope::point(&[1.0], 1)), Err(EvalError::Index { .. })));
        let e = Expr::parse("exp(1000)", ExprKind::Point).unwrap();
        assert_eq!(e.evaluate(&Scope::point(&[1.0], 1)), Err(EvalError::NonFinite));
    }

    #[test]
    fn parse_errors_carry_position() {
        match Expr::parse("1 + * 2", ExprKind::Point) {
            Err(ParseError::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Expr::parse("1 + SUPNORM", ExprKind::Point), Err(ParseError::KindMismatch { pos: 4, .. })));
        assert!(matches!(Expr::parse("x", ExprKind::Segment), Err(ParseError::KindMismatch { .. })));
        assert!(Expr::parse("pow(1)", ExprKind::Point).is_err());
        assert!(Expr::parse("abs(1, 2)", ExprKind::Point).is_err());
        assert!(Expr::parse("foo(1)", ExprKind::Point).is_err());
        assert!(Expr::parse("(1 + 2", ExprKind::Point).is_err());
        assert!(Expr::parse("1 2", ExprKind::Point).is_err());
        assert!(Expr::parse("x[0]", ExprKind::Point).is_err());
        assert!(Expr::parse("1e", ExprKind::Point).is_err());
        assert!(Expr::parse("", ExprKind::Point).is_err());
    }

    #[test]
    fn structural_queries() {
        let e = Expr::parse("C", ExprKind::Segment);
        assert!(e.is_err());
        let e = Expr::parse("1 + 2*abs(SEG0)", ExprKind::Segment).unwrap();
        assert!(e.is_past_independent());
        assert!(!e.uses_regime());
        let e = Expr::parse("i*INTABS", ExprKind::Segment).unwrap();
        assert!(!e.is_past_independent());
        assert!(e.uses_regime());
        let p = Expr::parse("SEG0[2] + 1", ExprKind::Segment).unwrap().to_point();
        assert_eq!(p.evaluate(&Scope::point(&[0.0, 2.0], 1)).unwrap(), 3.0);
        assert_eq!(p.max_index(), Some(1));
    }

    fn arb_expr(kind: ExprKind) -> impl Strategy<Value = String> {
        let leaf = match kind {
            ExprKind::Point => {
                prop_oneof![(0.0f64..10.0).prop_map(|v| format!("{v}")), Just("x".to_string()), Just("i".to_string()),]
                    .boxed()
            }
            ExprKind::Segment => prop_oneof![
                (0.0f64..10.0).prop_map(|v| format!("{v}")),
                Just("SEG0".to_string()),
                Just("SEGR".to_string()),
                Just("SUPNORM".to_string()),
                Just("INTABS".to_string()),
                Just("i".to_string()),
            ]
            .boxed(),
        };
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, op)| {
                    let sym = ["+", "-", "*", "/"][op];
                    format!("({a}){sym}({b})")
                }),
                inner.clone().prop_map(|a| format!("-{a}")),
                inner.clone().prop_map(|a| format!("abs({a})")),
                (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(text in arb_expr(ExprKind::Point), xs in prop::collection::vec((-5.0f64..5.0, 1usize..6), 100)) {
            let e = Expr::parse(&text, ExprKind::Point).unwrap();
            let again = Expr::parse(&e.to_string(), ExprKind::Point).unwrap();
            for (x, i) in xs {
                let pt = [x];
                let s = Scope::point(&pt, i);
                prop_assert_eq!(e.evaluate(&s), again.evaluate(&s));
            }
        }

        #[test]
        fn segment_round_trip(text in arb_expr(ExprKind::Segment), vals in prop::collection::vec(-3.0f64..3.0, 5)) {
            let e = Expr::parse(&text, ExprKind::Segment).unwrap();
            let again = Expr::parse(&e.to_string(), ExprKind::Segment).unwrap();
            let seg = SegmentPath::new(1.0, 0.25, vals.iter().map(|v| vec![*v]).collect()).unwrap();
            for i in 1..4 {
                let s = Scope::segment(&seg, i);
                prop_assert_eq!(e.evaluate(&s), again.evaluate(&s));
            }
        }
    }
}
